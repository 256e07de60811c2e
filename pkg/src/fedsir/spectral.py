"""Class-wise spectral signatures and the off-diagonal similarity statistics.

For every class a client observes, the rows of the class feature matrix ``Z``
(one row per sample currently labeled with that class, uncentered) are
decomposed with a thin SVD. The leading right singular vector is the class's
dominant direction; the following ones form its residual basis.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedsir.datagen import ClientDataset
from fedsir.model import MLP


@dataclass
class SpectralSignature:
    client_id: int
    dominant: dict[int, np.ndarray] = field(default_factory=dict)
    residual: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.dominant)


@dataclass(frozen=True)
class ClassSimilarityMatrix:
    """``C x C`` matrix of ``|v_c . v_c'|``; NaN where either class is unobserved."""

    values: np.ndarray
    observed: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ClientSpectralStats:
    client_id: int
    mu: float = float("nan")
    energy: float = float("nan")
    valid: bool = False

    @property
    def point(self) -> tuple[float, float]:
        return (self.mu, self.energy)


def thin_svd(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``Z = U diag(s) Vt`` with singular values in descending order.

    Right singular vectors are sign-normalised so their largest-magnitude
    entry is positive; every consumer uses absolute projections, so this only
    makes outputs reproducible.
    """
    u, s, vt = np.linalg.svd(np.asarray(z, dtype=float), full_matrices=False)
    pivot = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(vt.shape[0]), pivot])
    signs[signs == 0] = 1.0
    return u * signs, s, vt * signs[:, None]


def numerical_rank(s: np.ndarray, shape: tuple[int, int]) -> int:
    if s.size == 0 or s[0] == 0:
        return 0
    tol = max(shape) * np.finfo(float).eps * s[0]
    return int(np.sum(s > tol))


def class_feature_matrix(mlp: MLP, params: np.ndarray, dataset: ClientDataset, c: int, normalize: bool = False) -> np.ndarray:
    """Rows are the features of samples whose observed label is ``c``, in dataset order."""
    idx = np.flatnonzero(dataset.observed == c)
    if idx.size == 0:
        raise ValueError(f"client {dataset.client_id} has no samples labeled {c}")
    z = mlp.features(params, dataset.inputs[idx])
    if normalize:
        z = row_normalize(z)
    return z


def row_normalize(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)


def spectral_from_matrix(z: np.ndarray, residual_rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Dominant direction and up to ``residual_rank`` residual directions of ``z``.

    The residual basis is truncated to ``rank(z) - 1`` rows. An all-zero
    matrix has no meaningful direction; the first basis vector is returned.
    """
    if residual_rank < 0:
        raise ValueError("residual_rank must be >= 0")
    _, s, vt = thin_svd(z)
    rank = numerical_rank(s, z.shape)
    if rank == 0:
        e = np.zeros(z.shape[1])
        e[0] = 1.0
        return e, np.zeros((0, z.shape[1]))
    keep = min(residual_rank, rank - 1)
    return vt[0].copy(), vt[1 : 1 + keep].copy()


def extract_spectral(
    dataset: ClientDataset,
    mlp: MLP,
    params: np.ndarray,
    residual_rank: int,
    normalize: bool = False,
) -> SpectralSignature:
    """Per observed class: dominant right singular vector and residual basis.

    With ``residual_rank == 0`` only dominant directions are produced.
    """
    if residual_rank < 0:
        raise ValueError("residual_rank must be >= 0")
    feats = mlp.features(params, dataset.inputs)
    if normalize:
        feats = row_normalize(feats)
    sig = SpectralSignature(dataset.client_id)
    for c in np.unique(dataset.observed).tolist():
        dom, res = spectral_from_matrix(feats[dataset.observed == c], residual_rank)
        sig.dominant[c] = dom
        if residual_rank > 0:
            sig.residual[c] = res
    return sig


def class_similarity(sig: SpectralSignature, num_classes: int) -> ClassSimilarityMatrix:
    if not sig.dominant:
        raise ValueError("signature has no observed classes")
    observed = np.zeros(num_classes, dtype=bool)
    observed[sig.classes] = True
    values = np.full((num_classes, num_classes), np.nan)
    cls = sig.classes
    v = np.stack([sig.dominant[c] for c in cls])
    sims = np.clip(np.abs(v @ v.T), 0.0, 1.0)
    np.fill_diagonal(sims, 1.0)
    values[np.ix_(cls, cls)] = sims
    return ClassSimilarityMatrix(values, observed)


def offdiag_stats(sim: ClassSimilarityMatrix, client_id: int = -1) -> ClientSpectralStats:
    """Mean and mean-square of the off-diagonal entries over observed class pairs."""
    cls = np.flatnonzero(sim.observed)
    if cls.size < 2:
        return ClientSpectralStats(client_id)
    block = sim.values[np.ix_(cls, cls)]
    off = block[~np.eye(cls.size, dtype=bool)]
    return ClientSpectralStats(client_id, float(off.mean()), float((off**2).mean()), True)


def write_similarity_csv(sim: ClassSimilarityMatrix, path: str | Path) -> None:
    """Heatmap table of the similarity matrix; masked cells are written as ``—``."""
    path = Path(path)
    c = sim.num_classes
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + [str(j) for j in range(c)])
        for i in range(c):
            row = ["—" if np.isnan(x) else f"{x:.6f}" for x in sim.values[i]]
            w.writerow([str(i)] + row)
