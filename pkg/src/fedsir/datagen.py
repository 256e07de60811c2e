"""Synthetic data, Dirichlet client partitioning and symmetric label noise.

Everything here is a pure function of its inputs; randomness comes from
streams derived from ``DataGenConfig.rng_seed`` (see :mod:`fedsir.seeding`),
so e.g. the clean-client designation does not depend on the noise rate.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from fedsir.seeding import derive_rng


@dataclass(frozen=True)
class Sample:
    input: np.ndarray
    observed_label: int
    true_label: int


@dataclass(frozen=True)
class SampleSet:
    """Column-oriented bag of samples: inputs ``(N, d_in)`` plus two label arrays.

    ``true`` is kept for evaluation only; training and relabeling read ``observed``.
    """

    inputs: np.ndarray
    observed: np.ndarray
    true: np.ndarray

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D array")
        n = self.inputs.shape[0]
        if self.observed.shape != (n,) or self.true.shape != (n,):
            raise ValueError("label arrays must have one entry per input row")
        if n and (self.observed.min() < 0 or self.true.min() < 0):
            raise ValueError("labels must be non-negative class indices")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs must be finite")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.inputs[i], int(self.observed[i]), int(self.true[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx: np.ndarray) -> SampleSet:
        return SampleSet(self.inputs[idx], self.observed[idx], self.true[idx])


@dataclass(frozen=True)
class ClientDataset(SampleSet):
    client_id: int = 0
    is_noisy_ground_truth: bool = False

    def __post_init__(self) -> None:
        super().__post_init__()
        if len(self) < 1:
            raise ValueError(f"client {self.client_id} holds no samples")

    def class_counts(self, num_classes: int) -> np.ndarray:
        """n_{k,c} over the observed labels."""
        counts = np.bincount(self.observed, minlength=num_classes)
        if counts.size > num_classes:
            raise ValueError(f"client {self.client_id} has labels outside [0, {num_classes})")
        return counts

    def observed_classes(self) -> np.ndarray:
        return np.unique(self.observed)

    @property
    def noise_rate(self) -> float:
        """Fraction of samples whose observed label differs from the true one."""
        return float(np.mean(self.observed != self.true))

    def with_labels(self, observed: np.ndarray) -> ClientDataset:
        return replace(self, observed=np.asarray(observed, dtype=np.int64).copy())


@dataclass(frozen=True)
class DataGenConfig:
    num_clients: int = 10
    num_classes: int = 10
    samples_total: int = 3000
    input_dim: int = 32
    dirichlet_concentration: float = 0.5
    noise_rate: float = 0.6
    clean_client_count: int = 3
    class_separation: float = 6.0
    rng_seed: int = 0
    # optional per-client rate override: client_id -> rho
    client_noise_rates: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0 <= self.clean_client_count <= self.num_clients:
            raise ValueError("clean_client_count must lie in [0, num_clients]")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.dirichlet_concentration <= 0:
            raise ValueError("dirichlet_concentration must be > 0")
        if self.class_separation < 0:
            raise ValueError("class_separation must be >= 0")
        for k, rate in self.client_noise_rates.items():
            if not 0 <= k < self.num_clients:
                raise ValueError(f"client_noise_rates: unknown client {k}")
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"client_noise_rates[{k}] must lie in [0, 1]")


def cluster_means(cfg: DataGenConfig) -> np.ndarray:
    """Class centres, rescaled so the closest pair sits exactly ``class_separation`` apart."""
    rng = derive_rng(cfg.rng_seed, "cluster-means")
    means = rng.standard_normal((cfg.num_classes, cfg.input_dim))
    if cfg.num_classes < 2:
        return means
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    closest = dist[~np.eye(cfg.num_classes, dtype=bool)].min()
    return means * (cfg.class_separation / closest)


def generate_synthetic(
    cfg: DataGenConfig, num_samples: int | None = None, stream: str = "train"
) -> SampleSet:
    """Draw samples from ``C`` unit-variance isotropic Gaussian clusters.

    Class sizes are balanced (the first ``N mod C`` classes get one extra
    sample) and the row order is shuffled. ``stream`` selects an independent
    draw from the same clusters, which is how held-out test data is produced.
    """
    n = cfg.samples_total if num_samples is None else num_samples
    if cfg.num_classes > n:
        raise ValueError(f"cannot draw {cfg.num_classes} classes from {n} samples")
    if cfg.input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    means = cluster_means(cfg)
    rng = derive_rng(cfg.rng_seed, "samples", stream)
    labels = np.arange(n) % cfg.num_classes
    rng.shuffle(labels)
    inputs = means[labels] + rng.standard_normal((n, cfg.input_dim))
    labels = labels.astype(np.int64)
    return SampleSet(inputs, labels.copy(), labels.copy())


def partition_dirichlet(samples: SampleSet, cfg: DataGenConfig) -> list[ClientDataset]:
    """Split samples across ``K`` clients with per-class Dirichlet(alpha) shares.

    Clients that end up empty receive one sample taken from the currently
    largest client, so every client has ``N_k >= 1`` (requires ``N >= K``).
    """
    k = cfg.num_clients
    if len(samples) < k:
        raise ValueError(f"{len(samples)} samples cannot cover {k} clients")
    rng = derive_rng(cfg.rng_seed, "partition")
    owners: list[list[int]] = [[] for _ in range(k)]
    for c in range(cfg.num_classes):
        idx = np.flatnonzero(samples.true == c)
        rng.shuffle(idx)
        shares = rng.dirichlet(np.full(k, cfg.dirichlet_concentration))
        cuts = (np.cumsum(shares)[:-1] * len(idx)).astype(int)
        for client, part in enumerate(np.split(idx, cuts)):
            owners[client].extend(part.tolist())

    for client in range(k):
        if not owners[client]:
            donor = max(range(k), key=lambda j: (len(owners[j]), -j))
            owners[donor].sort()
            owners[client].append(owners[donor].pop())

    out = []
    for client, members in enumerate(owners):
        sel = np.sort(np.asarray(members, dtype=np.int64))
        part = samples.subset(sel)
        out.append(ClientDataset(part.inputs, part.observed.copy(), part.true.copy(), client_id=client))
    return out


def designate_clean_clients(cfg: DataGenConfig) -> np.ndarray:
    rng = derive_rng(cfg.rng_seed, "designate-clean")
    return np.sort(rng.choice(cfg.num_clients, size=cfg.clean_client_count, replace=False))


def flip_labels(
    labels: np.ndarray, rate: float, num_classes: int, rng: np.random.Generator
) -> np.ndarray:
    """Replace each label with probability ``rate`` by a uniform draw over the other classes."""
    n = labels.shape[0]
    corrupt = rng.random(n) < rate
    offset = rng.integers(1, max(num_classes, 2), size=n)
    if num_classes < 2:
        return labels.copy()
    return np.where(corrupt, (labels + offset) % num_classes, labels)


def inject_symmetric_noise(clients: list[ClientDataset], cfg: DataGenConfig) -> list[ClientDataset]:
    """Corrupt the observed labels of every client not designated clean.

    Each client draws from its own stream, so a client's corruption does not
    depend on how many samples other clients hold.
    """
    clean = set(designate_clean_clients(cfg).tolist())
    out = []
    for ds in clients:
        if ds.client_id in clean:
            out.append(replace(ds, observed=ds.true.copy(), is_noisy_ground_truth=False))
            continue
        rate = cfg.client_noise_rates.get(ds.client_id, cfg.noise_rate)
        rng = derive_rng(cfg.rng_seed, "noise", ds.client_id)
        flipped = flip_labels(ds.true, rate, cfg.num_classes, rng)
        out.append(replace(ds, observed=flipped, is_noisy_ground_truth=True))
    return out


def make_federated_data(cfg: DataGenConfig, test_fraction: float = 0.1) -> tuple[list[ClientDataset], SampleSet]:
    """Generate, partition and corrupt training data; also return a clean test split."""
    train = generate_synthetic(cfg)
    test = generate_synthetic(cfg, num_samples=max(cfg.num_classes, int(round(test_fraction * cfg.samples_total))), stream="test")
    clients = inject_symmetric_noise(partition_dirichlet(train, cfg), cfg)
    return clients, test


# -- feature-file ingestion ---------------------------------------------------


def load_features(path: str | Path) -> tuple[SampleSet, int]:
    """Read a feature table: a header line ``num_samples d_in C`` followed by
    one row per sample, ``f_1 ... f_{d_in} true_label``.

    Returns the samples (observed == true) and the declared class count.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: header must be 'num_samples d_in C'")
        n, d_in, c = (int(v) for v in header)
        body = np.loadtxt(fh, ndmin=2)
    if body.shape != (n, d_in + 1):
        raise ValueError(f"{path}: expected {n} rows of {d_in + 1} columns, got {body.shape}")
    labels = body[:, -1]
    if not np.all(labels == np.round(labels)) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"{path}: labels must be integers in [0, {c})")
    labels = labels.astype(np.int64)
    return SampleSet(body[:, :-1].copy(), labels.copy(), labels.copy()), c


def save_features(samples: SampleSet, num_classes: int, path: str | Path) -> None:
    path = Path(path)
    n, d_in = samples.inputs.shape
    table = np.column_stack([samples.inputs, samples.true])
    fmt = ["%.17g"] * d_in + ["%d"]
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{n} {d_in} {num_classes}\n")
        np.savetxt(fh, table, fmt=fmt)


def split_holdout(samples: SampleSet, fraction: float, seed: int) -> tuple[SampleSet, SampleSet]:
    rng = derive_rng(seed, "holdout")
    order = rng.permutation(len(samples))
    n_test = max(1, int(round(fraction * len(samples))))
    return samples.subset(np.sort(order[n_test:])), samples.subset(np.sort(order[:n_test]))
