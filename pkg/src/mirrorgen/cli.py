"""Command-line entry point: ``mirrorgen <command> [options]``.

Option precedence is flags > ``--run-config`` section (or ``--config`` for
``train``) > built-in defaults. Output paths default to locations under
``$MIRRORGEN_OUTPUT_ROOT`` (current directory when unset).
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, dataset as ds, diffusion, model as mdl, pipeline, render, scene, training

logger = logging.getLogger("mirrorgen")


class CliError(Exception):
    pass


# defaults per command; argparse leaves unset flags as None so file values can fill them
DEFAULTS = {
    "forge": {"n_scenes": 16, "out": "scenes", "seed": 0},
    "render": {"scenes": "scenes", "out": "dataset", "res": 64, "spp": 4, "seed": 0},
    "filter-materials": {"graphs": "scenes/materials.json", "catalog": "scenes/catalog.jsonl",
                         "out": "scenes/catalog.filtered.jsonl"},
    "split": {"catalog": "scenes/catalog.jsonl", "n_unknown": 0, "seed": 0, "out": "split.json"},
    "train": {"dataset": "dataset", "out": "run"},
    "inpaint": {"checkpoint": "run/best.ckpt", "dataset": "dataset", "sample": None, "prompt": None,
                "n_seeds": pipeline.DEFAULT_SEEDS, "seed": 0, "steps": diffusion.DEFAULT_STEPS,
                "cfg_scale": diffusion.DEFAULT_CFG, "sampler": "deterministic", "out": "generated"},
    "eval": {"dataset": "dataset", "generated": "generated", "split": None, "out": "report.json",
             "threshold": 0.1},
}
PATH_KEYS = {"out", "scenes", "graphs", "catalog", "dataset", "checkpoint", "generated"}
TRAIN_FLAGS = ("learning_rate", "warmup_steps", "batch_size", "max_steps", "prompt_drop_prob",
               "weight_decay", "seed", "checkpoint_every", "grad_accum", "val_fraction")


def _resolve(args, command):
    section = {}
    if getattr(args, "run_config", None):
        section = _read_json(args.run_config).get(command, {})
    root = ds.default_output_root()
    out = {}
    for key, default in DEFAULTS[command].items():
        val = getattr(args, key, None)
        if val is None:
            val = section.get(key, default)
            if key in PATH_KEYS and val is not None and not Path(val).is_absolute():
                val = str(root / val)
        out[key] = val
    return argparse.Namespace(**out)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CliError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_forge(n_scenes, out_dir, seed=0):
    """Compose ``n_scenes`` scenes; write scene_<id>.json, catalog.jsonl, materials.json."""
    if n_scenes < 0:
        raise CliError("n_scenes must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_scenes)
    entries, graphs, paths = [], {}, []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        scene_id = f"{i:05d}"
        obj = scene.random_object(rng, object_id=f"obj_{seed}_{i:05d}")
        spec = scene.compose_scene(obj, int(rng.integers(2**31)), scene_id=scene_id)
        p = out / f"scene_{scene_id}.json"
        p.write_text(spec.to_json() + "\n", encoding="utf-8")
        paths.append(p)
        entries.append({"object_id": obj["object_id"], "category": obj["category"],
                        "source": "procedural", "spurious": False})
        graphs[obj["object_id"]] = {"children": [{"materials": [{"nodes": [
            {"name": "Principled BSDF", "inputs": [{"name": "Base Color", "linked_node_name": None}]},
        ]}]}]}
    (out / "catalog.jsonl").write_text(scene.Catalog(entries).to_jsonl(), encoding="utf-8")
    (out / "materials.json").write_text(json.dumps(graphs, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return paths


def load_scene(path):
    try:
        return scene.SceneSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CliError(f"{path}: invalid scene file ({exc})") from exc


def cmd_render(scenes_dir, out_dir, res=64, spp=4, seed=0):
    """Render every camera of every scene into ``<out>/<scene_id>/cam_<k>``."""
    files = sorted(Path(scenes_dir).glob("scene_*.json"))
    if not files:
        raise CliError(f"{scenes_dir}: no scene_*.json files")
    dirs = []
    for f in files:
        spec = load_scene(f)
        for k in range(len(spec.cameras)):
            sample = render.render(spec, k, res, res, spp, seed)
            empty = render.render(spec, k, res, res, spp, seed, include_object=False)
            d = Path(out_dir) / spec.scene_id / f"cam_{k}"
            ds.write_sample(d, sample, empty_mirror=empty.rgb)
            dirs.append(d)
        logger.info("rendered %s", f.name)
    return dirs


def cmd_filter(graphs_file, catalog_file, out_file):
    graphs = _read_json(graphs_file)
    try:
        cat = scene.Catalog.from_jsonl(Path(catalog_file).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CliError(f"{catalog_file}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{catalog_file}: invalid JSON lines ({exc})") from exc
    kept = scene.filter_catalog(cat, graphs)
    Path(out_file).write_text(kept.to_jsonl(), encoding="utf-8")
    return kept


def cmd_split(catalog_file, n_unknown, out_file, seed=0):
    try:
        cat = scene.Catalog.from_jsonl(Path(catalog_file).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CliError(f"{catalog_file}: file not found") from exc
    split = bench.build_split(cat, n_unknown, seed)
    Path(out_file).write_text(json.dumps(split.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
    return split


def cmd_train(config, dataset_dir, out_dir):
    return training.run_training(dataset_dir, config, out_dir)


def cmd_inpaint(checkpoint, sample_dirs, out_root, prompt=None, n_seeds=pipeline.DEFAULT_SEEDS, seed=0,
                steps=diffusion.DEFAULT_STEPS, cfg_scale=diffusion.DEFAULT_CFG, sampler="deterministic"):
    """Write ``gen_<seed>.png`` candidates for each sample under ``out_root``."""
    model, extra = mdl.load_checkpoint(checkpoint)
    tc = extra.get("train_config")
    sched = (diffusion.make_schedule(tc["timesteps"], tc["schedule"]) if tc else diffusion.make_schedule())
    written = []
    for d in sample_dirs:
        out = Path(out_root) / ds.sample_key(d)
        written += pipeline.inpaint_sample_dir(model, d, out, prompt=prompt, n_seeds=n_seeds, seed=seed,
                                               steps=steps, cfg_scale=cfg_scale, sampler=sampler,
                                               sched=sched)
    return written


def cmd_eval(dataset_dir, generated_dir, out_file, split_file=None, threshold=0.1):
    split = bench.BenchSplit.from_dict(_read_json(split_file)) if split_file else None
    report = bench.evaluate(dataset_dir, generated_dir, split, threshold)
    Path(out_file).write_text(report.to_json(), encoding="utf-8")
    return report


def format_summary(report):
    lines = []
    for group, agg in sorted(report.aggregates.items()):
        vals = " ".join(f"{k}={agg[k]:.4f}" if agg[k] is not None else f"{k}=n/a"
                        for k in bench.METRIC_FIELDS)
        lines.append(f"{group} (n={agg['count']}): {vals}")
    clips = [r["clip_similarity"] for r in report.per_sample if r["clip_similarity"] is not None]
    lines.append(f"clip_similarity={np.mean(clips):.4f}" if clips else "clip_similarity=n/a")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="mirrorgen", description="Synthetic mirror-reflection pipeline")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, deterministic torch kernels")
    p.add_argument("--run-config", help="JSON file with one section of options per command")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forge", help="compose scene specs")
    f.add_argument("--n-scenes", type=int)
    f.add_argument("--out")
    f.add_argument("--seed", type=int)

    r = sub.add_parser("render", help="render scene specs into a dataset tree")
    r.add_argument("--scenes")
    r.add_argument("--out")
    r.add_argument("--res", type=int)
    r.add_argument("--spp", type=int)
    r.add_argument("--seed", type=int)

    fm = sub.add_parser("filter-materials", help="drop objects with spurious materials")
    fm.add_argument("--graphs")
    fm.add_argument("--catalog")
    fm.add_argument("--out")

    s = sub.add_parser("split", help="known/unknown benchmark split")
    s.add_argument("--catalog")
    s.add_argument("--n-unknown", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    t = sub.add_parser("train", help="train the conditioning branch")
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--warmup-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--prompt-drop-prob", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--grad-accum", type=int)
    t.add_argument("--val-fraction", type=float)

    i = sub.add_parser("inpaint", help="generate mirror reflections")
    i.add_argument("--checkpoint")
    i.add_argument("--dataset", help="dataset root; every sample is inpainted")
    i.add_argument("--sample", help="single sample directory (overrides --dataset)")
    i.add_argument("--prompt")
    i.add_argument("--n-seeds", type=int)
    i.add_argument("--seed", type=int)
    i.add_argument("--steps", type=int)
    i.add_argument("--cfg-scale", type=float)
    i.add_argument("--sampler", choices=("deterministic", "ancestral"))
    i.add_argument("--out")

    e = sub.add_parser("eval", help="score generated images")
    e.add_argument("--dataset")
    e.add_argument("--generated")
    e.add_argument("--split")
    e.add_argument("--out")
    e.add_argument("--threshold", type=float)
    return p


def _train_config(args):
    section = _read_json(args.run_config).get("train", {}) if args.run_config else {}
    base = {k: v for k, v in section.items() if k not in ("dataset", "out")}
    if args.config:
        base.update(_read_json(args.config))
    for k in TRAIN_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            base[k] = v
    try:
        return training.TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from exc


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        training.set_deterministic(True)
    cmd = args.command
    opts = _resolve(args, cmd)

    if cmd == "forge":
        paths = cmd_forge(opts.n_scenes, opts.out, opts.seed)
        print(f"wrote {len(paths)} scene files to {opts.out}")
    elif cmd == "render":
        dirs = cmd_render(opts.scenes, opts.out, opts.res, opts.spp, opts.seed)
        print(f"rendered {len(dirs)} samples to {opts.out}")
    elif cmd == "filter-materials":
        kept = cmd_filter(opts.graphs, opts.catalog, opts.out)
        print(json.dumps(kept.stats, sort_keys=True))
    elif cmd == "split":
        split = cmd_split(opts.catalog, opts.n_unknown, opts.out, opts.seed)
        print(f"known={len(split.known_ids)} unknown={len(split.unknown_ids)} "
              f"unknown_categories={','.join(split.unknown_categories) or '-'}")
    elif cmd == "train":
        cfg = _train_config(args)
        res = cmd_train(cfg, opts.dataset, opts.out)
        print(f"trained {cfg.max_steps} steps; best checkpoint at step {res['best_step']} "
              f"(val loss {res['best_val_loss']:.6f})")
    elif cmd == "inpaint":
        samples = [Path(opts.sample)] if opts.sample else ds.list_samples(opts.dataset)
        if not samples:
            raise CliError(f"{opts.dataset}: no samples to inpaint")
        written = cmd_inpaint(opts.checkpoint, samples, opts.out, opts.prompt, opts.n_seeds,
                              opts.seed, opts.steps, opts.cfg_scale, opts.sampler)
        print(f"wrote {len(written)} images to {opts.out}")
    elif cmd == "eval":
        report = cmd_eval(opts.dataset, opts.generated, opts.out, opts.split, opts.threshold)
        print(format_summary(report))
    return 0


def main(argv=None):
    try:
        return run(argv)
    except (CliError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"mirrorgen: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
