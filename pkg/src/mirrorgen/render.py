"""Analytic ray tracer for mirror scenes.

Produces RGB, first-hit depth, normals, instance ids and the mirror mask.
Shading is Lambertian with a fixed set of jittered area-light samples plus a
constant ambient term; the mirror is a perfect specular reflector traced to
depth two. Instance ids seen through the mirror are relabelled into a
"reflection of" namespace.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import scene as sc

BACKGROUND, FLOOR, MIRROR, OBJECT, REFLECTED_OBJECT, REFLECTED_FLOOR = range(6)
# only used by the mirrored-scene oracle
VIRTUAL_OBJECT = 6

EPS = 1e-6
OFFSET = 1e-4


@dataclass
class RenderSample:
    rgb: np.ndarray            # (H, W, 3) float in [0, 1]
    depth: np.ndarray          # (H, W) float32, +inf where nothing is hit
    normals: np.ndarray        # (H, W, 3) float32, zero where nothing is hit
    instances: np.ndarray      # (H, W) uint16
    mirror_mask: np.ndarray    # (H, W) bool
    meta: dict = field(default_factory=dict)


@dataclass
class Hit:
    t: float
    point: np.ndarray
    normal: np.ndarray


# ---------------------------------------------------------------------------
# vectorized primitive intersection; each returns (t, normal) with t = inf on miss


def _sphere(o, d, c, r):
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > EPS, t0, np.where(t1 > EPS, t1, np.inf))
    t = np.where(ok, t, np.inf)
    p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
    n = (p - c) / r
    return t, n


def _box(o, d, c, axes, half):
    lo_ = (o - c) @ axes
    ld = d @ axes
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / ld
        ta = (-half - lo_) * inv
        tb = (half - lo_) * inv
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = ld == 0
    inside = np.abs(lo_) <= half
    ta = np.where(par, np.where(inside, -np.inf, np.inf), ta)
    tb = np.where(par, np.where(inside, np.inf, -np.inf), tb)
    tmin_ax = np.minimum(ta, tb)
    tmax_ax = np.maximum(ta, tb)
    tmin = tmin_ax.max(axis=1)
    tmax = tmax_ax.min(axis=1)
    hit = (tmax >= tmin) & (tmax > EPS)
    use_min = tmin > EPS
    t = np.where(hit, np.where(use_min, tmin, tmax), np.inf)
    ax_in = tmin_ax.argmax(axis=1)
    ax_out = tmax_ax.argmin(axis=1)
    ax = np.where(use_min, ax_in, ax_out)
    rows = np.arange(len(o))
    # entry face opposes the ray; exit face faces along it; both outward
    sign = np.where(use_min, -np.sign(ld[rows, ax]), np.sign(ld[rows, ax]))
    n_local = np.zeros_like(o)
    n_local[rows, ax] = sign
    return t, n_local @ axes.T


def _cylinder(o, d, c, a, r, hh):
    oc = o - c
    oa = oc @ a
    da = d @ a
    op = oc - oa[:, None] * a
    dp = d - da[:, None] * a
    A = np.einsum("ij,ij->i", dp, dp)
    B = np.einsum("ij,ij->i", op, dp)
    C = np.einsum("ij,ij->i", op, op) - r * r
    disc = B * B - A * C
    ok = (disc >= 0) & (A > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    Asafe = np.where(A > 1e-15, A, 1.0)
    best_t = np.full(len(o), np.inf)
    best_n = np.zeros_like(o)
    for root in ((-B - sq) / Asafe, (-B + sq) / Asafe):
        y = oa + root * da
        valid = ok & (root > EPS) & (np.abs(y) <= hh) & (root < best_t)
        p = oc + root[:, None] * d
        nrm = p - (p @ a)[:, None] * a
        nrm = nrm / r
        best_t = np.where(valid, root, best_t)
        best_n = np.where(valid[:, None], nrm, best_n)
    with np.errstate(divide="ignore", invalid="ignore"):
        for s in (-1.0, 1.0):
            tc = (s * hh - oa) / da
            p = op + tc[:, None] * dp
            valid = (da != 0) & (tc > EPS) & (np.einsum("ij,ij->i", p, p) <= r * r) & (tc < best_t)
            best_t = np.where(valid, tc, best_t)
            best_n = np.where(valid[:, None], s * a, best_n)
    return best_t, best_n


def _floor(o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[:, 1] / d[:, 1]
    ok = (d[:, 1] < 0) & (o[:, 1] > 0) & (t > EPS)
    t = np.where(ok, t, np.inf)
    n = np.zeros_like(o)
    n[:, 1] = 1.0
    return t, n


def mirror_frame(mirror):
    n = np.asarray(mirror["normal"], float)
    up = np.array([0.0, 1.0, 0.0])
    u = np.cross(up, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return np.asarray(mirror["center"], float), n, u, v


def _mirror(o, d, mirror, two_sided=False):
    c, n, u, v = mirror_frame(mirror)
    dn = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((c - o) @ n) / dn
    p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None] - c
    inside = (np.abs(p @ u) <= mirror["width"] / 2) & (np.abs(p @ v) <= mirror["height"] / 2)
    facing = np.ones(len(o), bool) if two_sided else dn < 0
    ok = facing & (dn != 0) & (t > EPS) & inside
    t = np.where(ok, t, np.inf)
    return t, np.broadcast_to(n, o.shape).copy()


def _prim(o, d, p):
    kind = p["kind"]
    if kind == "sphere":
        return _sphere(o, d, p["center"], p["radius"])
    if kind == "box":
        return _box(o, d, p["center"], p["axes"], p["half"])
    if kind == "cylinder":
        return _cylinder(o, d, p["center"], p["axis"], p["radius"], p["half_height"])
    raise ValueError(f"unknown primitive {kind!r}")


def intersect(origin, direction, primitive):
    """Nearest positive hit of one ray with one world-space primitive.

    ``primitive`` is a world-part dict (sphere/box/cylinder), ``{"kind":
    "plane", "point", "normal"}`` or ``{"kind": "mirror", ...mirror fields}``.
    Returns a :class:`Hit` or ``None``.
    """
    d = np.asarray(direction, float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    o = np.asarray(origin, float)[None]
    d = d[None]
    kind = primitive["kind"]
    if kind == "plane":
        n = np.asarray(primitive["normal"], float)
        dn = float(d[0] @ n)
        if abs(dn) < 1e-15:
            return None
        t = float((np.asarray(primitive["point"], float) - o[0]) @ n) / dn
        if t <= EPS:
            return None
        return Hit(t, o[0] + t * d[0], n if dn < 0 else -n)
    if kind == "mirror":
        t, n = _mirror(o, d, primitive, two_sided=True)
    else:
        t, n = _prim(o, d, primitive)
    if not np.isfinite(t[0]):
        return None
    return Hit(float(t[0]), o[0] + t[0] * d[0], n[0])


def reflect_point(p, plane):
    """Reflect ``p`` through the plane ``{"o": point, "n": unit normal}``."""
    n = np.asarray(plane["n"], float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("plane normal must be unit length")
    p = np.asarray(p, float)
    o = np.asarray(plane["o"], float)
    return p - 2.0 * np.dot(p - o, n) * n


def reflect_part(part, plane):
    """Mirror image of a world-space primitive through ``plane``."""
    n = np.asarray(plane["n"], float)
    H = np.eye(3) - 2.0 * np.outer(n, n)
    q = dict(part)
    q["center"] = reflect_point(part["center"], plane)
    if part["kind"] == "box":
        q["axes"] = H @ part["axes"]
    elif part["kind"] == "cylinder":
        q["axis"] = H @ part["axis"]
    return q


# ---------------------------------------------------------------------------
# scene container


@dataclass
class TraceScene:
    parts: list                 # (world part, instance id)
    mirror: dict | None
    floor: dict
    background: dict
    light: dict


def scene_from_spec(spec, include_object=True, include_mirror=True):
    parts = [(p, OBJECT) for p in sc.world_parts(spec.object)] if include_object else []
    return TraceScene(parts, spec.mirror if include_mirror else None, spec.floor,
                      spec.background, spec.light)


def mirrored_oracle_scene(spec):
    """Scene with the mirror removed and the object's mirror image added.

    The mirror image carries :data:`VIRTUAL_OBJECT`; seen through the mirror's
    outline, it must coincide with the reflection of the real object.
    """
    c, n, _, _ = mirror_frame(spec.mirror)
    plane = {"o": c, "n": n}
    real = sc.world_parts(spec.object)
    parts = [(p, OBJECT) for p in real] + [(reflect_part(p, plane), VIRTUAL_OBJECT) for p in real]
    return TraceScene(parts, None, spec.floor, spec.background, spec.light)


def _closest(scene, o, d, with_mirror=True):
    n_rays = len(o)
    t = np.full(n_rays, np.inf)
    nrm = np.zeros((n_rays, 3))
    ids = np.zeros(n_rays, np.int64)
    albedo = np.zeros((n_rays, 3))
    tf, nf = _floor(o, d)
    better = tf < t
    t, nrm, ids = np.where(better, tf, t), np.where(better[:, None], nf, nrm), np.where(better, FLOOR, ids)
    for part, pid in scene.parts:
        tp, npp = _prim(o, d, part)
        better = tp < t
        t = np.where(better, tp, t)
        nrm = np.where(better[:, None], npp, nrm)
        ids = np.where(better, pid, ids)
        albedo = np.where(better[:, None], part["color"], albedo)
    if with_mirror and scene.mirror is not None:
        tm, nm = _mirror(o, d, scene.mirror)
        better = tm < t
        t = np.where(better, tm, t)
        nrm = np.where(better[:, None], nm, nrm)
        ids = np.where(better, MIRROR, ids)
    ids = np.where(np.isfinite(t), ids, BACKGROUND)
    return t, nrm, ids, albedo


def _occluded(scene, o, d, dist):
    blocked = np.zeros(len(o), bool)
    for part, _ in scene.parts:
        tp, _ = _prim(o, d, part)
        blocked |= tp < dist
    if scene.mirror is not None:
        tm, _ = _mirror(o, d, scene.mirror, two_sided=True)
        blocked |= tm < dist
    return blocked


def _value_noise(x, z, seed):
    xi, zi = np.floor(x), np.floor(z)
    fx, fz = x - xi, z - zi

    def h(a, b):
        v = np.sin(a * 127.1 + b * 311.7 + seed * 74.7) * 43758.5453
        return v - np.floor(v)

    sx, sz = fx * fx * (3 - 2 * fx), fz * fz * (3 - 2 * fz)
    top = h(xi, zi) * (1 - sx) + h(xi + 1, zi) * sx
    bot = h(xi, zi + 1) * (1 - sx) + h(xi + 1, zi + 1) * sx
    return top * (1 - sz) + bot * sz


def floor_albedo(floor, p):
    s = floor.get("scale", 0.5)
    x, z = p[:, 0] / s, p[:, 2] / s
    pattern = floor.get("pattern", "checker")
    if pattern == "checker":
        w = ((np.floor(x) + np.floor(z)) % 2)
    elif pattern == "stripes":
        w = np.floor(x) % 2
    elif pattern == "noise":
        w = _value_noise(x, z, len(floor.get("id", "")))
    else:
        raise ValueError(f"unknown floor pattern {pattern!r}")
    c0, c1 = (np.asarray(c, float) for c in floor["colors"])
    return c0 * (1 - w[:, None]) + c1 * w[:, None]


def background_color(bg, d):
    s = np.clip((d[:, 1] + 0.1) / 0.7, 0.0, 1.0)[:, None]
    return np.asarray(bg["bottom"], float) * (1 - s) + np.asarray(bg["top"], float) * s


def light_samples(light, rng, n=4):
    """Stratified jittered points on the square area light."""
    pos = np.asarray(light["position"], float)
    ln = np.asarray(light["direction"], float)
    ln = ln / np.linalg.norm(ln)
    u = np.array([0.0, 0.0, 1.0])
    if abs(ln @ u) > 0.99:
        u = np.array([1.0, 0.0, 0.0])
    u = u - (u @ ln) * ln
    u /= np.linalg.norm(u)
    v = np.cross(ln, u)
    k = int(math.isqrt(n))
    pts = []
    for i in range(k):
        for j in range(k):
            a, b = (i + rng.random()) / k - 0.5, (j + rng.random()) / k - 0.5
            pts.append(pos + light["extent"] * (a * u + b * v))
    return np.array(pts), ln


def _shade(scene, p, n, albedo, lights, ln):
    area = scene.light["extent"] ** 2
    radiance = np.zeros(len(p))
    for q in lights:
        to_l = q - p
        dist = np.linalg.norm(to_l, axis=1)
        l = to_l / dist[:, None]
        cos_s = np.clip(np.einsum("ij,ij->i", n, l), 0, None)
        cos_l = np.clip(-(l @ ln), 0, None)
        vis = ~_occluded(scene, p + n * OFFSET, l, dist - 2 * OFFSET)
        radiance += vis * cos_s * cos_l * scene.light["intensity"] * area / (math.pi * dist * dist)
    radiance /= len(lights)
    return np.clip(albedo * (scene.light.get("ambient", 0.3) + radiance)[:, None], 0.0, 1.0)


def _surface_color(scene, o, d, t, nrm, ids, albedo, lights, ln):
    """Colour of first hits that are not the mirror (floor, parts, sky)."""
    col = background_color(scene.background, d)
    hit = np.isfinite(t) & (ids != MIRROR)
    if hit.any():
        p = o[hit] + d[hit] * t[hit, None]
        alb = albedo[hit]
        fl = ids[hit] == FLOOR
        if fl.any():
            alb[fl] = floor_albedo(scene.floor, p[fl])
        col[hit] = _shade(scene, p, nrm[hit], alb, lights, ln)
    return col


def trace(scene, o, d, lights, ln):
    """Trace rays; returns colour, first-hit t, normal, instance id."""
    t, nrm, ids, albedo = _closest(scene, o, d)
    col = _surface_color(scene, o, d, t, nrm, ids, albedo, lights, ln)
    on_mirror = ids == MIRROR
    if on_mirror.any():
        p = o[on_mirror] + d[on_mirror] * t[on_mirror, None]
        nm = nrm[on_mirror]
        dr = d[on_mirror] - 2 * np.einsum("ij,ij->i", d[on_mirror], nm)[:, None] * nm
        po = p + nm * OFFSET
        t2, n2, id2, a2 = _closest(scene, po, dr, with_mirror=False)
        c2 = _surface_color(scene, po, dr, t2, n2, id2, a2, lights, ln)
        tint = np.asarray(sc.FRAME_TINTS[scene.mirror.get("frame_style", 0) % len(sc.FRAME_TINTS)])
        col[on_mirror] = c2 * tint * 0.95
        relabel = np.full(id2.shape, MIRROR)
        relabel[id2 == FLOOR] = REFLECTED_FLOOR
        relabel[id2 == OBJECT] = REFLECTED_OBJECT
        ids[on_mirror] = relabel
    return col, t, nrm, ids


def camera_rays(pose, width, height, offsets):
    """World rays through pixel positions ``(row + oy, col + ox)``."""
    R = sc.look_rotation(pose["position"], pose["look_at"], pose.get("up", (0, 1, 0)))
    tan_half = math.tan(math.radians(pose["fov_deg"]) / 2)
    aspect = width / height
    rows, cols = np.mgrid[0:height, 0:width].astype(float)
    px = ((cols + offsets[..., 0]) / width * 2 - 1) * tan_half * aspect
    py = (1 - (rows + offsets[..., 1]) / height * 2) * tan_half
    local = np.stack([px, py, -np.ones_like(px)], axis=-1).reshape(-1, 3)
    d = local @ R.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(np.asarray(pose["position"], float), d.shape).copy()
    return o, d


def render_scene(scene, pose, width=64, height=64, spp=4, seed=0, n_light=4):
    """Render a :class:`TraceScene` from ``pose``.

    Geometry passes (depth, normals, ids, mask) come from pixel-centre rays;
    RGB averages ``spp`` jittered sub-pixel rays.
    """
    rng = np.random.default_rng(seed)
    lights, ln = light_samples(scene.light, rng, n_light)
    centre = np.full((height, width, 2), 0.5)
    o, d = camera_rays(pose, width, height, centre)
    col, t, nrm, ids = trace(scene, o, d, lights, ln)
    if spp > 1:
        acc = np.zeros_like(col)
        jitter = rng.random((spp, height, width, 2))
        for s in range(spp):
            oj, dj = camera_rays(pose, width, height, jitter[s])
            acc += trace(scene, oj, dj, lights, ln)[0]
        col = acc / spp
    shape = (height, width)
    ids = ids.reshape(shape)
    hit = np.isfinite(t)
    normals = np.where(hit[:, None], nrm, 0.0).reshape(height, width, 3)
    mirror_mask = np.isin(ids, (MIRROR, REFLECTED_OBJECT, REFLECTED_FLOOR))
    return RenderSample(
        rgb=np.clip(col.reshape(height, width, 3), 0.0, 1.0),
        depth=t.reshape(shape).astype(np.float32),
        normals=normals.astype(np.float32),
        instances=ids.astype(np.uint16),
        mirror_mask=mirror_mask,
    )


def render(spec, camera_index=0, width=64, height=64, spp=4, seed=0, include_object=True):
    """Render camera ``camera_index`` of a :class:`~mirrorgen.scene.SceneSpec`."""
    if not 0 <= camera_index < len(spec.cameras):
        raise IndexError(f"camera index {camera_index} out of range for {len(spec.cameras)} cameras")
    pose = spec.cameras[camera_index]
    sample = render_scene(scene_from_spec(spec, include_object=include_object), pose,
                          width, height, spp, seed)
    sample.meta = {
        "scene_id": spec.scene_id,
        "camera_index": camera_index,
        "camera": pose,
        "prompt": spec.prompt,
        "object_id": spec.object.get("object_id"),
        "category": spec.object["category"],
        "floor_category": spec.floor["category"],
        "background_category": spec.background["category"],
        "width": width,
        "height": height,
        "spp": spp,
        "seed": seed,
    }
    return sample
