from __future__ import annotations

import functools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedsir.benchmark import benchmark_config
from fedsir.orchestrator import run_experiment, run_identification, train_centralized

# Property tests run at least 100 cases each and are derandomized so the
# suite gives the same verdict on every run.
settings.register_profile(
    "fedsir",
    max_examples=100,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("fedsir")

SEEDS = tuple(range(10))


class BenchmarkRuns:
    """Memoized benchmark runs shared by the acceptance tests of one session."""

    @functools.lru_cache(maxsize=None)
    def identification(self, seed: int, rho: float):
        return run_identification(benchmark_config(seed, rho))

    @functools.lru_cache(maxsize=None)
    def run(self, seed: int, rho: float, method: str = "fedsir", relabel: bool = True):
        cfg = benchmark_config(seed, rho, method=method)
        if not relabel:
            cfg = replace(cfg, ablation=replace(cfg.ablation, relabel=False))
        return run_experiment(cfg, report_variants=method == "fedsir")

    @functools.lru_cache(maxsize=None)
    def centralized(self, seed: int) -> float:
        return train_centralized(benchmark_config(seed, 0.0))


@pytest.fixture(scope="session")
def bench() -> BenchmarkRuns:
    return BenchmarkRuns()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    verdict = "PASS" if report.outcome == "passed" else "FAIL"
    _ACCEPTANCE[props["criterion"]] = (verdict, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        verdict, title, detail = _ACCEPTANCE[number]
        line = f"criterion {number}: {verdict}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
