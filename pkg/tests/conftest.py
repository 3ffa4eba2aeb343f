import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bench_pairs():
    from mcga.data import make_pairs

    return make_pairs(8, 0)


@pytest.fixture(scope="session")
def stage1_run(bench_pairs):
    """The 300-step stage-1 baseline run, with its wall time."""
    import time

    from mcga.msvqvae import StageOneConfig, train_stage1

    start = time.perf_counter()
    result = train_stage1([p.hsi for p in bench_pairs], StageOneConfig(scales=2, epochs=300, seed=0))
    return result, time.perf_counter() - start


@pytest.fixture(scope="session")
def stage2_run(stage1_run, bench_pairs):
    """500 stage-2 steps on the baseline pairs, quantising against the frozen stage-1 codebooks."""
    from mcga.ganet import GanetConfig, build_pipeline, train_stage2

    cfg = GanetConfig(scales=2, epochs=500, seed=0)
    model = build_pipeline(stage1_run[0].model, cfg)
    digest = model.codebook_digest()
    history = train_stage2(bench_pairs, model, cfg)
    return model, history, digest


CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        CRITERIA[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
