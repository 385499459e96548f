import numpy as np
import pytest

from mirrorgen import dataset as ds, render


def test_pfm_roundtrip_and_orientation(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    a[0, 0] = np.inf
    ds.write_pfm(tmp_path / "a.pfm", a)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n4 3\n-1.0\n")
    # bottom row is stored first
    first = np.frombuffer(raw[len(b"Pf\n4 3\n-1.0\n"):], "<f4", count=4)
    assert np.array_equal(first, a[-1])
    assert np.array_equal(ds.read_pfm(tmp_path / "a.pfm"), a)
    c = np.random.default_rng(0).random((5, 2, 3)).astype(np.float32)
    ds.write_pfm(tmp_path / "c.pfm", c)
    assert np.array_equal(ds.read_pfm(tmp_path / "c.pfm"), c)
    with pytest.raises(ValueError):
        ds.write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


def test_sample_roundtrip(tmp_path, ball_spec):
    s = render.render(ball_spec, 0, 32, 32, 1)
    ds.write_sample(tmp_path / "x" / "cam_0", s, empty_mirror=s.rgb)
    r = ds.read_sample(tmp_path / "x" / "cam_0")
    assert np.max(np.abs(r.rgb - s.rgb)) <= 0.5 / 255 + 1e-12
    assert np.array_equal(r.depth, s.depth)
    assert np.array_equal(r.normals, s.normals)
    assert np.array_equal(r.instances, s.instances) and r.instances.dtype == np.uint16
    assert np.array_equal(r.mirror_mask, s.mirror_mask)
    assert r.meta == s.meta
    assert ds.read_empty_mirror(tmp_path / "x" / "cam_0").shape == (32, 32, 3)
    assert ds.list_samples(tmp_path) == [tmp_path / "x" / "cam_0"]
    assert ds.sample_key(tmp_path / "x" / "cam_0") == "x/cam_0"


def test_missing_file_error(tmp_path, ball_spec):
    d = ds.write_sample(tmp_path / "s" / "c", render.render(ball_spec, 0, 16, 16, 1))
    (d / "depth.pfm").unlink()
    with pytest.raises(ds.DatasetError, match="depth.pfm"):
        ds.read_sample(d)
    with pytest.raises(ds.DatasetError):
        ds.read_empty_mirror(d)
    with pytest.raises(ds.DatasetError):
        ds.list_samples(tmp_path / "nope")


def test_sixteen_bit_ids(tmp_path):
    ids = np.array([[0, 1], [300, 65535]], dtype=np.uint16)
    ds.write_ids(tmp_path / "i.png", ids)
    assert np.array_equal(ds.read_ids(tmp_path / "i.png"), ids)


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("MIRRORGEN_OUTPUT_ROOT", str(tmp_path))
    assert ds.default_output_root() == tmp_path
