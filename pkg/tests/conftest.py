import numpy as np
import pytest

from vidstyle import datagen, net
from vidstyle.rng import make_rng


TINY = dict(dim=32, blocks=1, heads=2, ffn_mult=2, lora_rank=4)


def tiny_model(mode="token_specific", seed=0, **kw):
    cfg = net.ModelConfig(**{**TINY, **kw, "lora_mode": mode})
    return net.init_model(cfg, seed)


def tiny_sample(seed=0, op="sepia", tier="SFT", K=2, frames=2, size=8):
    rng = make_rng(seed, "test-scene")
    spec = datagen.random_scene(rng, frames, size, size)
    return datagen.make_sample(spec, op, K if tier == "SFT" else 1, tier, seed, frames, size, size)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def sft_samples():
    return [tiny_sample(seed=i, op=op) for i, op in enumerate(["sepia", "invert", "posterize", "hue_rotate"])]


# acceptance lines, printed once at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record(n, name, ok, detail, seconds):
    ACCEPTANCE[n] = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail} [{seconds:.1f}s]"
    print(ACCEPTANCE[n])
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
