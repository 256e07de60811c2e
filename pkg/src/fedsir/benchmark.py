"""The desk-scale synthetic benchmark used by the acceptance suite.

Ten clients (three clean) share 3000 samples from ten Gaussian clusters in 32
dimensions, split with Dirichlet(1.0). Identification uses 5 epochs per client
and each later round 1 local epoch, with residual rank 12. The horizon is 50
rounds with relabeling every 12, so four relabel rounds fire and the last one
still leaves two rounds of training on the corrected labels. Learning rates are set for an MLP trained from
scratch: the Stage-I rate stays small so noisy clients do not memorize their
labels before identification.
"""
from __future__ import annotations

from dataclasses import replace

from fedsir.datagen import DataGenConfig
from fedsir.model import LocalTrainConfig
from fedsir.orchestrator import ExperimentConfig

BENCHMARK_DATA = DataGenConfig(
    num_clients=10,
    num_classes=10,
    samples_total=3000,
    input_dim=32,
    dirichlet_concentration=1.0,
    noise_rate=0.6,
    clean_client_count=3,
    class_separation=5.0,
)

BENCHMARK = ExperimentConfig(
    rounds=50,
    relabel_period=12,
    residual_rank=12,
    data=BENCHMARK_DATA,
    stage1=LocalTrainConfig(epochs=5, learning_rate=1e-4, weight_decay=2e-2),
    stage2=LocalTrainConfig(epochs=1, learning_rate=3e-3, weight_decay=5e-4),
)


def benchmark_config(seed: int, noise_rate: float, method: str = "fedsir", **data_overrides) -> ExperimentConfig:
    """The benchmark at one noise rate and seed; ``data_overrides`` patch the data section."""
    data = replace(BENCHMARK.data, noise_rate=noise_rate, **data_overrides)
    return replace(BENCHMARK, method=method, seed=seed, data=data)
