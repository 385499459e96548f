"""Independent reference implementations used by the tests.

Nothing here imports the code under test beyond data types, so agreement
with the package is a genuine second route to the same answer.
"""

import itertools

import numpy as np
import torch
from torch.func import functional_call, vmap


def spurious_brute_force(graph):
    """Enumerate every (mesh, material, node, input) tuple and test the three
    conditions separately."""
    hits = []
    meshes = graph.get("children", [])
    for mi, mesh in enumerate(meshes):
        mats = mesh.get("materials", [])
        for ai, mat in enumerate(mats):
            nodes = mat.get("nodes", [])
            for ni, inp in itertools.product(range(len(nodes)), range(64)):
                ins = nodes[ni].get("inputs", [])
                if inp >= len(ins):
                    continue
                conds = (nodes[ni].get("name") == "Mix-Shader",
                         ins[inp].get("name") == "Fac",
                         ins[inp].get("linked_node_name") == "Light Path")
                if all(conds):
                    hits.append((mi, ai, ni, inp))
    return len(hits) > 0


def random_graph(rng, p_hit=0.15):
    names = ["Mix-Shader", "Principled BSDF", "Light Path", "Diffuse BSDF", "Mix Shader", "Emission"]
    inputs = ["Fac", "Color", "Shader", "Strength", "fac"]
    links = [None, "Light Path", "Diffuse BSDF", "Texture", "Light  Path"]
    graph = {"children": []}
    for _ in range(rng.integers(0, 4)):
        mesh = {"materials": []}
        for _ in range(rng.integers(0, 3)):
            nodes = []
            for _ in range(rng.integers(0, 5)):
                node = {"name": names[rng.integers(len(names))], "inputs": []}
                for _ in range(rng.integers(0, 4)):
                    node["inputs"].append({"name": inputs[rng.integers(len(inputs))],
                                           "linked_node_name": links[rng.integers(len(links))]})
                nodes.append(node)
            if rng.random() < p_hit:
                nodes.append({"name": "Mix-Shader",
                              "inputs": [{"name": "Fac", "linked_node_name": "Light Path"}]})
            mesh["materials"].append({"nodes": nodes})
        graph["children"].append(mesh)
    return graph


def finite_difference_grads(model, names, loss_of_output, inputs, h=1e-5, chunk=512):
    """Central differences for every scalar in the named parameters.

    Perturbed copies are evaluated in chunks with ``vmap`` over a flat
    parameter vector; returns one flat tensor aligned with ``names``.
    """
    params = {n: p.detach() for n, p in model.named_parameters()}
    buffers = {n: b for n, b in model.named_buffers()}
    shapes = [params[n].shape for n in names]
    sizes = [params[n].numel() for n in names]
    flat0 = torch.cat([params[n].reshape(-1) for n in names])

    def loss(flat):
        parts = torch.split(flat, sizes)
        p = dict(params)
        p.update({n: t.reshape(s) for n, t, s in zip(names, parts, shapes)})
        return loss_of_output(functional_call(model, (p, buffers), inputs))

    batched = vmap(loss)
    out = torch.empty_like(flat0)
    n = flat0.numel()
    with torch.no_grad():
        for s in range(0, n, chunk):
            idx = torch.arange(s, min(s + chunk, n))
            plus = flat0.repeat(len(idx), 1)
            plus[torch.arange(len(idx)), idx] += h
            minus = flat0.repeat(len(idx), 1)
            minus[torch.arange(len(idx)), idx] -= h
            out[idx] = (batched(plus) - batched(minus)) / (2 * h)
    return out


def iou(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    u = np.logical_or(a, b).sum()
    return 1.0 if u == 0 else np.logical_and(a, b).sum() / u


def psnr_loop(a, b, region):
    se, n = 0.0, 0
    for i, j in zip(*np.nonzero(region)):
        for c in range(a.shape[2]):
            se += (a[i, j, c] - b[i, j, c]) ** 2
            n += 1
    mse = se / n
    return 100.0 if mse == 0 else min(100.0, 10 * np.log10(1.0 / mse))
