import numpy as np
import pytest
import torch

from mirrorgen import model as mdl, scene


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_config():
    return mdl.UNetConfig(base_channels=8, channel_multipliers=(1, 2), attention_levels=(1,),
                          time_embed_dim=16, text_embed_dim=8, text_max_len=4, text_vocab=64,
                          norm_groups=4)


@pytest.fixture(scope="session")
def ball_spec():
    obj = scene.make_object("ball", np.random.default_rng(3), object_id="ball_0")
    return scene.compose_scene(obj, 7, scene_id="ball")


def condition_for(z):
    n, _, h, w = z.shape
    g = torch.Generator().manual_seed(1)
    return {
        "z_m": torch.randn(z.shape, generator=g, dtype=z.dtype),
        "x_m": (torch.rand((n, 1, h, w), generator=g) > 0.5).to(z.dtype),
        "x_d": torch.rand((n, 1, h, w), generator=g, dtype=z.dtype) * 2 - 1,
    }


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion carried by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in rep.user_properties)
    prev = _CRITERIA.get(n)
    if prev is None or prev[1] == "PASS":
        _CRITERIA[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
