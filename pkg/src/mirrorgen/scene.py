"""Procedural mirror-scene composition, camera pools and catalog filtering.

World frame: y is up, the floor is the plane y = 0 and the mirror is a
vertical rectangle in the plane x = 0 facing +x, standing on the floor. The
object sits in a unit-cube region centred 1.5 units in front of the mirror.
"""

from dataclasses import asdict, dataclass, field
import json
import logging
import math

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

logger = logging.getLogger(__name__)

MIRROR_DISTANCE = 1.5
MIRROR_WIDTH = 2.0
MIRROR_HEIGHT = 2.5
REGION_CENTER = np.array([MIRROR_DISTANCE, 0.5, 0.0])
POOL_SIZE = 19
CAMERAS_PER_SCENE = 3
FOV_DEG = 55.0
# extreme camera poses (position, look-at); the pool interpolates between them
EXTREME_POSES = (
    ((4.4, 1.8, 2.1), (0.1, 0.45, -0.25)),
    ((4.4, 1.8, -2.1), (0.1, 0.45, 0.25)),
)

PALETTE = {
    "red": (0.80, 0.15, 0.12),
    "green": (0.20, 0.65, 0.25),
    "blue": (0.15, 0.30, 0.80),
    "yellow": (0.90, 0.80, 0.15),
    "white": (0.90, 0.90, 0.88),
    "black": (0.08, 0.08, 0.09),
    "orange": (0.95, 0.50, 0.10),
    "purple": (0.55, 0.20, 0.65),
    "brown": (0.50, 0.32, 0.18),
    "grey": (0.50, 0.50, 0.52),
}

FLOORS = {
    "indoor": [
        {"id": "wood_stripes", "pattern": "stripes", "colors": [(0.55, 0.38, 0.22), (0.45, 0.30, 0.17)], "scale": 0.35},
        {"id": "tile_checker", "pattern": "checker", "colors": [(0.85, 0.85, 0.82), (0.35, 0.35, 0.38)], "scale": 0.5},
        {"id": "carpet_noise", "pattern": "noise", "colors": [(0.55, 0.20, 0.20), (0.40, 0.12, 0.14)], "scale": 0.25},
    ],
    "outdoor": [
        {"id": "grass_noise", "pattern": "noise", "colors": [(0.25, 0.55, 0.20), (0.15, 0.40, 0.12)], "scale": 0.3},
        {"id": "paving_checker", "pattern": "checker", "colors": [(0.62, 0.60, 0.55), (0.48, 0.46, 0.42)], "scale": 0.7},
        {"id": "deck_stripes", "pattern": "stripes", "colors": [(0.70, 0.55, 0.35), (0.55, 0.42, 0.25)], "scale": 0.45},
    ],
}

BACKGROUNDS = {
    "indoor": [
        {"id": "warm_room", "bottom": (0.75, 0.65, 0.55), "top": (0.95, 0.90, 0.80)},
        {"id": "studio_grey", "bottom": (0.45, 0.45, 0.48), "top": (0.80, 0.80, 0.82)},
    ],
    "outdoor": [
        {"id": "clear_sky", "bottom": (0.80, 0.88, 0.95), "top": (0.25, 0.50, 0.90)},
        {"id": "dusk_sky", "bottom": (0.95, 0.65, 0.45), "top": (0.30, 0.25, 0.55)},
    ],
}

FRAME_TINTS = [(0.92, 0.92, 0.92), (0.95, 0.90, 0.82), (0.85, 0.90, 0.95)]


@dataclass
class SceneSpec:
    scene_id: str
    object: dict
    mirror: dict
    floor: dict
    background: dict
    light: dict
    cameras: list
    prompt: str

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def default_mirror(frame_style=0):
    return {
        "center": [0.0, MIRROR_HEIGHT / 2, 0.0],
        "normal": [1.0, 0.0, 0.0],
        "width": MIRROR_WIDTH,
        "height": MIRROR_HEIGHT,
        "frame_style": int(frame_style),
    }


# ---------------------------------------------------------------------------
# object families

CATEGORY_WEIGHTS = {
    "ball": 8, "box": 7, "mug": 6, "chair": 5, "table": 4,
    "lamp": 3, "snowman": 2, "dumbbell": 2, "vase": 1, "bench": 1,
}


def _part(kind, center, color, **dims):
    out = {"kind": kind, "center": [float(c) for c in center], "color": [float(c) for c in color]}
    for k, v in dims.items():
        if isinstance(v, str):
            out[k] = v
        elif isinstance(v, (list, tuple)):
            out[k] = [float(x) for x in v]
        else:
            out[k] = float(v)
    return out


def make_object(category, rng, object_id=None):
    """Primitive-composite description for one object of ``category``.

    Parts live in an unnormalized local frame; :func:`compose_scene` scales,
    rotates and places them.
    """
    cname = rng.choice(sorted(PALETTE))
    col = PALETTE[cname]
    alt = PALETTE[rng.choice(sorted(PALETTE))]
    u = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    parts = []
    if category == "ball":
        parts.append(_part("sphere", (0, 0, 0), col, radius=u(0.3, 1.0)))
    elif category == "box":
        parts.append(_part("box", (0, 0, 0), col, half=(u(0.3, 0.6), u(0.2, 0.6), u(0.3, 0.6))))
    elif category == "mug":
        r, h = u(0.3, 0.45), u(0.4, 0.6)
        parts.append(_part("cylinder", (0, 0, 0), col, radius=r, half_height=h / 2, axis="y"))
        parts.append(_part("box", (r + 0.08, 0.12, 0), col, half=(0.08, 0.04, 0.05)))
        parts.append(_part("box", (r + 0.08, -0.12, 0), col, half=(0.08, 0.04, 0.05)))
        parts.append(_part("box", (r + 0.14, 0, 0), col, half=(0.03, 0.15, 0.05)))
    elif category == "chair":
        s, leg = u(0.35, 0.5), u(0.35, 0.5)
        parts.append(_part("box", (0, 0, 0), col, half=(s, 0.05, s)))
        parts.append(_part("box", (-s + 0.04, 0.45, 0), alt, half=(0.04, 0.45, s)))
        for dx in (-1, 1):
            for dz in (-1, 1):
                parts.append(_part("box", (dx * (s - 0.05), -leg / 2, dz * (s - 0.05)), col,
                                   half=(0.04, leg / 2, 0.04)))
    elif category == "table":
        w, d, leg = u(0.6, 0.9), u(0.4, 0.6), u(0.5, 0.8)
        parts.append(_part("box", (0, 0, 0), col, half=(w, 0.05, d)))
        for dx in (-1, 1):
            for dz in (-1, 1):
                parts.append(_part("cylinder", (dx * (w - 0.08), -leg / 2, dz * (d - 0.08)), alt,
                                   radius=0.05, half_height=leg / 2, axis="y"))
    elif category == "lamp":
        h = u(0.8, 1.2)
        parts.append(_part("cylinder", (0, 0, 0), alt, radius=0.3, half_height=0.04, axis="y"))
        parts.append(_part("cylinder", (0, h / 2, 0), alt, radius=0.04, half_height=h / 2, axis="y"))
        parts.append(_part("sphere", (0, h + 0.2, 0), col, radius=u(0.2, 0.3)))
    elif category == "snowman":
        r1, r2, r3 = u(0.4, 0.5), u(0.28, 0.35), u(0.18, 0.24)
        parts.append(_part("sphere", (0, 0, 0), (0.92, 0.92, 0.95), radius=r1))
        parts.append(_part("sphere", (0, r1 + r2 * 0.8, 0), (0.92, 0.92, 0.95), radius=r2))
        parts.append(_part("sphere", (0, r1 + 1.6 * r2 + r3 * 0.8, 0), col, radius=r3))
    elif category == "dumbbell":
        ln = u(0.5, 0.8)
        parts.append(_part("cylinder", (0, 0, 0), PALETTE["grey"], radius=0.06, half_height=ln, axis="x"))
        for sx in (-1, 1):
            parts.append(_part("cylinder", (sx * ln, 0, 0), col, radius=u(0.2, 0.3), half_height=0.1, axis="x"))
    elif category == "vase":
        parts.append(_part("cylinder", (0, 0, 0), col, radius=u(0.25, 0.35), half_height=0.3, axis="y"))
        parts.append(_part("cylinder", (0, 0.45, 0), col, radius=u(0.1, 0.15), half_height=0.2, axis="y"))
        parts.append(_part("sphere", (0, 0.3, 0), col, radius=0.27))
    elif category == "bench":
        w = u(0.9, 1.3)
        parts.append(_part("box", (0, 0, 0), col, half=(0.3, 0.05, w)))
        for dz in (-1, 1):
            parts.append(_part("box", (0, -0.2, dz * (w - 0.1)), alt, half=(0.25, 0.2, 0.05)))
    else:
        raise ValueError(f"unknown category {category!r}")
    return {"object_id": object_id or f"{category}", "category": category, "color_name": cname,
            "parts": parts}


def random_object(rng, object_id):
    cats = sorted(CATEGORY_WEIGHTS)
    w = np.array([CATEGORY_WEIGHTS[c] for c in cats], dtype=float)
    category = cats[rng.choice(len(cats), p=w / w.sum())]
    return make_object(category, rng, object_id)


# ---------------------------------------------------------------------------
# geometry of object descriptions

_AXES = {"x": np.array([1.0, 0, 0]), "y": np.array([0, 1.0, 0]), "z": np.array([0, 0, 1.0])}


def rotation_y(deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _part_aabb(p, rot):
    c = rot @ np.asarray(p["center"])
    kind = p["kind"]
    if kind == "sphere":
        half = np.full(3, p["radius"])
    elif kind == "box":
        half = np.abs(rot) @ np.asarray(p["half"])
    elif kind == "cylinder":
        a = rot @ _AXES[p["axis"]]
        half = np.abs(a) * p["half_height"] + p["radius"] * np.sqrt(np.clip(1 - a * a, 0, None))
    else:
        raise ValueError(f"unknown part kind {kind!r}")
    return c - half, c + half


def object_aabb(obj, rot=None, scale=1.0, translation=(0, 0, 0)):
    rot = np.eye(3) if rot is None else rot
    if not obj["parts"]:
        raise ValueError("object has no parts")
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for p in obj["parts"]:
        a, b = _part_aabb(p, rot)
        lo, hi = np.minimum(lo, a), np.maximum(hi, b)
    t = np.asarray(translation, dtype=float)
    return lo * scale + t, hi * scale + t


def world_parts(obj):
    """World-space primitives of a placed object.

    Returns dicts: sphere {center, radius}; box {center, axes (3x3, columns),
    half}; cylinder {center, axis, radius, half_height}; each with ``color``.
    """
    rot = rotation_y(obj.get("rotation_deg", 0.0))
    s = obj.get("scale", 1.0)
    t = np.asarray(obj.get("translation", (0, 0, 0)), dtype=float)
    out = []
    for p in obj["parts"]:
        c = rot @ np.asarray(p["center"]) * s + t
        q = {"kind": p["kind"], "center": c, "color": np.asarray(p["color"])}
        if p["kind"] == "sphere":
            q["radius"] = p["radius"] * s
        elif p["kind"] == "box":
            q["axes"] = rot.copy()
            q["half"] = np.asarray(p["half"]) * s
        else:
            q["axis"] = rot @ _AXES[p["axis"]]
            q["radius"] = p["radius"] * s
            q["half_height"] = p["half_height"] * s
        out.append(q)
    return out


def bounding_sphere(obj):
    lo, hi = np.asarray(obj["aabb"][0]), np.asarray(obj["aabb"][1])
    return (lo + hi) / 2, float(np.linalg.norm(hi - lo) / 2)


# ---------------------------------------------------------------------------
# composition


def compose_scene(object_desc, rng_seed, scene_id=None, category_tag=None):
    """Place ``object_desc`` in front of the mirror and build a SceneSpec.

    The object is rotated about y by an angle drawn uniformly from [0, 360),
    uniformly scaled so its bounding box's largest side is exactly 1, centred
    over the region in x and z and set on the floor.
    """
    rng = np.random.default_rng(rng_seed)
    obj = {k: v for k, v in object_desc.items() if k not in ("aabb", "scale", "translation")}
    angle = float(rng.uniform(0.0, 360.0))
    rot = rotation_y(angle)
    lo, hi = object_aabb(obj, rot)
    extent = float(np.max(hi - lo))
    if not np.isfinite(extent) or extent <= 1e-12:
        raise ValueError(f"object {obj.get('object_id')!r} has zero extent")
    scale = 1.0 / extent
    centre = (lo + hi) / 2 * scale
    translation = np.array([
        REGION_CENTER[0] - centre[0],
        -lo[1] * scale,
        REGION_CENTER[2] - centre[2],
    ])
    obj.update(rotation_deg=angle, scale=scale, translation=translation.tolist())
    alo, ahi = object_aabb(obj, rot, scale, translation)
    obj["aabb"] = [alo.tolist(), ahi.tolist()]

    tag = category_tag or ("indoor" if rng.random() < 0.5 else "outdoor")
    floor = dict(FLOORS[tag][rng.integers(len(FLOORS[tag]))])
    floor["category"] = tag
    bg = dict(BACKGROUNDS[tag][rng.integers(len(BACKGROUNDS[tag]))])
    bg["category"] = tag
    mirror = default_mirror(frame_style=rng.integers(len(FRAME_TINTS)))

    obj_centre = (alo + ahi) / 2
    light_pos = obj_centre + np.array([0.9, 1.1, 0.0])
    light_dir = np.array([-1.0, -1.0, 0.0]) / math.sqrt(2.0)
    light = {"position": light_pos.tolist(), "direction": light_dir.tolist(),
             "extent": 0.6, "intensity": 9.0, "ambient": 0.5}

    spec = SceneSpec(
        scene_id=scene_id or f"scene_{rng_seed}",
        object=obj,
        mirror=mirror,
        floor=floor,
        background=bg,
        light=light,
        cameras=[],
        prompt=caption(obj, floor),
    )
    pool = camera_pool(spec)
    spec.cameras = pick_cameras(pool, CAMERAS_PER_SCENE, seed=int(rng.integers(2**31)))
    return spec


def caption(obj, floor):
    floor_word = floor["id"].split("_")[0]
    return f"mirror reflection of a {obj.get('color_name', '')} {obj['category']} on a {floor_word} floor".replace("  ", " ")


# ---------------------------------------------------------------------------
# cameras


def look_rotation(position, look_at, up=(0.0, 1.0, 0.0)):
    """Rotation whose columns are camera (right, up, back) in world space."""
    f = np.asarray(look_at, float) - np.asarray(position, float)
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    u = np.cross(r, f)
    return np.stack([r, u, -f], axis=1)


def make_pose(position, look_at, fov_deg=FOV_DEG):
    return {"position": [float(v) for v in position], "look_at": [float(v) for v in look_at],
            "up": [0.0, 1.0, 0.0], "fov_deg": float(fov_deg)}


def sphere_in_view(pose, centre, radius):
    """True iff a sphere lies entirely inside a square-aspect view frustum."""
    R = look_rotation(pose["position"], pose["look_at"], pose.get("up", (0, 1, 0)))
    p = R.T @ (np.asarray(centre, float) - np.asarray(pose["position"], float))
    depth = -p[2]
    tan_half = math.tan(math.radians(pose["fov_deg"]) / 2)
    norm = math.sqrt(1 + tan_half * tan_half)
    if depth <= radius:
        return False
    for coord in (p[0], p[1]):
        # distance from the centre to the side plane |coord| = tan_half * depth
        if (tan_half * depth - abs(coord)) / norm < radius:
            return False
    return True


def reflect_through_mirror(point, mirror):
    o = np.asarray(mirror["center"], float)
    n = np.asarray(mirror["normal"], float)
    p = np.asarray(point, float)
    return p - 2.0 * np.dot(p - o, n) * n


def pose_visible(pose, spec):
    centre, radius = bounding_sphere(spec.object)
    virtual = reflect_through_mirror(centre, spec.mirror)
    return sphere_in_view(pose, centre, radius) and sphere_in_view(pose, virtual, radius)


class VisibilityError(ValueError):
    pass


def camera_pool(spec, n=POOL_SIZE, extremes=EXTREME_POSES, fov_deg=FOV_DEG, check=True):
    """Interpolate ``n`` poses between two extreme poses.

    Positions are interpolated linearly and orientations by quaternion slerp;
    the look-at point is placed along the interpolated viewing direction at
    the linearly interpolated look-at distance.
    """
    if n < 2:
        raise ValueError("camera pool needs n >= 2")
    (p0, l0), (p1, l1) = [(np.asarray(p, float), np.asarray(l, float)) for p, l in extremes]
    ends = [make_pose(p0, l0, fov_deg), make_pose(p1, l1, fov_deg)]
    if check:
        for i, e in enumerate(ends):
            if not pose_visible(e, spec):
                raise VisibilityError(f"extreme pose {i} does not see the object and its reflection")
    rots = Rotation.from_matrix(np.stack([look_rotation(p0, l0), look_rotation(p1, l1)]))
    slerp = Slerp([0.0, 1.0], rots)
    d0, d1 = np.linalg.norm(l0 - p0), np.linalg.norm(l1 - p1)
    poses = []
    for i in range(n):
        s = i / (n - 1)
        if i == 0 or i == n - 1:
            poses.append(ends[0 if i == 0 else 1])
            continue
        pos = (1 - s) * p0 + s * p1
        fwd = -slerp([s]).as_matrix()[0][:, 2]
        look = pos + fwd * ((1 - s) * d0 + s * d1)
        pose = make_pose(pos, look, fov_deg)
        if check and not pose_visible(pose, spec):
            raise VisibilityError(f"interpolated pose {i} fails the visibility check")
        poses.append(pose)
    return poses


def pick_cameras(pool, k=CAMERAS_PER_SCENE, seed=0):
    if k > len(pool):
        raise ValueError(f"cannot pick {k} cameras from a pool of {len(pool)}")
    idx = np.random.default_rng(seed).permutation(len(pool))[:k]
    return [dict(pool[i], pool_index=int(i)) for i in idx]


# ---------------------------------------------------------------------------
# spurious-material filter


def is_spurious(graph):
    """True iff some material node named "Mix-Shader" has a "Fac" input linked
    to a node named "Light Path"."""
    for child in graph.get("children", []):
        for material in child.get("materials", []):
            for node in material.get("nodes", []):
                if node.get("name") != "Mix-Shader":
                    continue
                for inp in node.get("inputs", []):
                    if inp.get("name") == "Fac" and inp.get("linked_node_name") == "Light Path":
                        return True
    return False


@dataclass
class Catalog:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e["object_id"] for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("catalog object ids must be unique")

    def __len__(self):
        return len(self.entries)

    def to_jsonl(self):
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    @classmethod
    def from_jsonl(cls, text):
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


def filter_catalog(catalog, graphs):
    """Keep catalog entries whose material graph is not spurious.

    Entries without a graph are skipped with a warning and counted in the
    returned stats.
    """
    kept, stats = [], {"total": len(catalog), "spurious": 0, "missing_graph": 0, "kept": 0}
    for entry in catalog.entries:
        oid = entry["object_id"]
        if oid not in graphs:
            logger.warning("no material graph for %s; skipping", oid)
            stats["missing_graph"] += 1
            continue
        if is_spurious(graphs[oid]):
            stats["spurious"] += 1
            continue
        kept.append(dict(entry, spurious=False))
    stats["kept"] = len(kept)
    logger.info("filter_catalog: %s", stats)
    out = Catalog(kept)
    out.stats = stats
    return out
