import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mirrorgen import bench, dataset as ds, metrics, render, scene


def _catalog(counts):
    entries, k = [], 0
    for cat, n in counts.items():
        for _ in range(n):
            entries.append({"object_id": f"o{k}", "category": cat})
            k += 1
    return scene.Catalog(entries)


def test_hand_enumerated_split():
    cat = _catalog({"A": 1, "B": 2, "C": 10})
    s = bench.build_split(cat, 3, seed=0)
    assert sorted(s.unknown_ids) == ["o0", "o1", "o2"]
    assert s.unknown_categories == ["A", "B"]
    assert bench.build_split(cat, 0).unknown_ids == []


def test_tie_broken_by_name():
    cat = _catalog({"zeta": 2, "alpha": 2, "big": 9})
    s = bench.build_split(cat, 2, seed=1)
    assert s.unknown_categories == ["alpha"]
    assert s.to_dict() == bench.build_split(cat, 2, seed=1).to_dict()


def test_split_errors():
    with pytest.raises(bench.SplitError):
        bench.build_split(scene.Catalog([]), 0)
    with pytest.raises(bench.SplitError):
        bench.build_split(_catalog({"A": 2}), 2)
    with pytest.raises(bench.SplitError):
        bench.build_split(_catalog({"A": 2, "B": 2}), 3)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.sampled_from("abcdefgh"), st.integers(1, 6), min_size=2), st.data())
def test_split_properties(counts, data):
    cat = _catalog(counts)
    n = data.draw(st.integers(0, len(cat) - 1))
    try:
        s = bench.build_split(cat, n, seed=0)
    except bench.SplitError:
        # only infeasible when every category would have to be held out
        order = sorted(counts, key=lambda c: (counts[c], c))
        assert sum(counts[c] for c in order[:-1]) < n
        return
    cats = {e["object_id"]: e["category"] for e in cat.entries}
    assert set(s.known_ids).isdisjoint(s.unknown_ids)
    assert set(s.known_ids) | set(s.unknown_ids) == set(cats)
    assert {cats[i] for i in s.known_ids}.isdisjoint({cats[i] for i in s.unknown_ids})
    assert len(s.unknown_ids) >= n


@pytest.fixture(scope="module")
def tiny_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    data, gen = root / "data", root / "gen"
    rng = np.random.default_rng(0)
    for i in range(2):
        spec = scene.compose_scene(scene.random_object(rng, f"o{i}"), i, scene_id=f"s{i}")
        s = render.render(spec, 0, 32, 32, 1)
        e = render.render(spec, 0, 32, 32, 1, include_object=False)
        ds.write_sample(data / spec.scene_id / "cam_0", s, empty_mirror=e.rgb)
    return data, gen


def _write_gen(data, gen, fn):
    for d in ds.list_samples(data):
        s = ds.read_sample(d)
        out = gen / ds.sample_key(d)
        out.mkdir(parents=True, exist_ok=True)
        for k in range(2):
            ds.write_png(out / f"gen_{k}.png", fn(s, k))


def test_perfect_model(tiny_bench, tmp_path):
    data, _ = tiny_bench
    gen = tmp_path / "gen"
    _write_gen(data, gen, lambda s, k: s.rgb)
    rep = bench.evaluate(data, gen)
    for row in rep.per_sample:
        assert row["psnr_masked"] == 100.0 and row["psnr_unmasked"] == 100.0
        assert row["ssim_masked"] == pytest.approx(1.0) and row["iou_reflection"] == 1.0
        assert row["lpips_masked"] == 0.0 and row["clip_similarity"] is None
    json.loads(rep.to_json())


def test_gray_mirror_and_means(tiny_bench, tmp_path):
    data, _ = tiny_bench
    gen = tmp_path / "gen"

    def gray(s, k):
        out = s.rgb.copy()
        out[s.mirror_mask] = 0.5 if k == 0 else 0.45
        return out

    _write_gen(data, gen, gray)
    split = bench.BenchSplit(["o0"], ["o1"], ["x"])
    rep = bench.evaluate(data, gen, split)
    for row in rep.per_sample:
        assert row["psnr_unmasked"] == 100.0 and row["ssim_unmasked"] == pytest.approx(1.0)
        assert row["psnr_masked"] < 100.0 and row["ssim_masked"] < 1.0
        assert row["selected"] == f"gen_{int(np.argmax(row['candidate_ssim_masked']))}.png"
    for key in bench.METRIC_FIELDS:
        assert rep.aggregates["all"][key] == pytest.approx(np.mean([r[key] for r in rep.per_sample]))
    assert rep.aggregates["known"]["count"] == 1 and rep.aggregates["unknown"]["count"] == 1
    assert {r["group"] for r in rep.per_sample} == {"known", "unknown"}


def test_unpaired(tiny_bench, tmp_path):
    data, _ = tiny_bench
    gen = tmp_path / "gen"
    (gen / "ghost" / "cam_0").mkdir(parents=True)
    ds.write_png(gen / "ghost" / "cam_0" / "gen_0.png", np.zeros((32, 32, 3)))
    with pytest.raises(bench.UnpairedSampleError, match="ghost/cam_0"):
        bench.evaluate(data, gen)
    with pytest.raises(bench.UnpairedSampleError):
        bench.evaluate(data, tmp_path / "empty")
