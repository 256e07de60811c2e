"""Class references from clean clients and spectral relabeling of noisy clients.

References average projectors, not vectors: ``M_r = sum_k w_k v_k v_k^T / W``
and ``M_n = sum_k w_k V_k^T V_k / W``, so the sign of each client's singular
vectors is irrelevant. The consensus dominant direction is the top eigenvector
of ``M_r`` and the consensus residual basis the top ``L`` eigenvectors of ``M_n``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from fedsir.datagen import ClientDataset
from fedsir.model import MLP
from fedsir.spectral import SpectralSignature, row_normalize

log = logging.getLogger(__name__)


class Strategy(str, Enum):
    R_ONLY = "r_only"
    N_ONLY = "n_only"
    AGREEMENT = "agreement"


@dataclass
class ClassReference:
    residual_rank: int
    dominant: dict[int, np.ndarray] = field(default_factory=dict)
    residual: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def coverage(self) -> list[int]:
        return sorted(self.dominant)


@dataclass(frozen=True)
class RelabelReport:
    client_id: int
    strategy: str
    examined: int
    changed: int
    changed_correctly: int
    noise_before: float
    noise_after: float

    @property
    def precision(self) -> float:
        return self.changed_correctly / self.changed if self.changed else float("nan")

    @property
    def noise_reduction(self) -> float:
        return self.noise_before - self.noise_after


def _top_eigvecs(m: np.ndarray, count: int) -> np.ndarray:
    """Leading eigenvectors of a PSD matrix as rows, dropping numerically null ones."""
    vals, vecs = np.linalg.eigh(m)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    tol = m.shape[0] * np.finfo(float).eps * max(vals[0], 0.0)
    keep = min(count, int(np.sum(vals > tol)))
    return vecs[:, :keep].T.copy()


def aggregate_references(
    signatures: Sequence[SpectralSignature],
    class_counts: Mapping[int, np.ndarray],
    residual_rank: int,
    weighting: str = "linear",
) -> ClassReference:
    """Pool clean-client signatures into per-class references.

    ``class_counts[client_id][c]`` is ``n_{k,c}``; the per-client weight is
    ``n`` (``weighting="linear"``) or ``sqrt(n)`` (``"sqrt"``). Classes with
    zero total weight are left out of the reference.
    """
    if not signatures:
        raise ValueError("need at least one clean-client signature")
    if weighting not in ("linear", "sqrt"):
        raise ValueError(f"unknown weighting {weighting!r}")
    dim = next(iter(signatures[0].dominant.values())).shape[0]
    ref = ClassReference(residual_rank)
    classes = sorted({c for s in signatures for c in s.dominant})
    for c in classes:
        m_r = np.zeros((dim, dim))
        m_n = np.zeros((dim, dim))
        total = 0.0
        for sig in signatures:
            if c not in sig.dominant:
                continue
            w = float(class_counts[sig.client_id][c])
            if weighting == "sqrt":
                w = np.sqrt(w)
            if w <= 0:
                continue
            v = sig.dominant[c]
            m_r += w * np.outer(v, v)
            res = sig.residual.get(c)
            if res is not None and res.size:
                m_n += w * res.T @ res
            total += w
        if total <= 0:
            continue
        m_r /= total
        m_n /= total
        ref.dominant[c] = _top_eigvecs(m_r, 1)[0]
        ref.residual[c] = _top_eigvecs(m_n, residual_rank) if residual_rank > 0 else np.zeros((0, dim))
    return ref


def score_samples(z: np.ndarray, ref: ClassReference) -> tuple[np.ndarray, np.ndarray]:
    """Alignment and residual-energy scores, columns ordered as ``ref.coverage``.

    ``S_r = |z . v_c|`` and ``S_n = ||V_c z|| / sqrt(L)`` with ``L`` the
    configured residual rank, even when fewer residual directions exist.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    cov = ref.coverage
    if not cov:
        raise ValueError("reference covers no classes")
    dom = np.stack([ref.dominant[c] for c in cov])
    s_r = np.abs(z @ dom.T)
    scale = 1.0 / np.sqrt(ref.residual_rank) if ref.residual_rank > 0 else 1.0
    s_n = np.column_stack([np.linalg.norm(z @ ref.residual[c].T, axis=1) * scale for c in cov])
    return s_r, s_n


def score_sample(z: np.ndarray, ref: ClassReference) -> dict[int, tuple[float, float]]:
    s_r, s_n = score_samples(z, ref)
    return {c: (float(s_r[0, j]), float(s_n[0, j])) for j, c in enumerate(ref.coverage)}


def proposed_labels(z: np.ndarray, ref: ClassReference) -> tuple[np.ndarray, np.ndarray]:
    """``(argmax S_r, argmin S_n)`` per row, as class ids; ties go to the lowest class."""
    s_r, s_n = score_samples(z, ref)
    cov = np.asarray(ref.coverage)
    return cov[np.argmax(s_r, axis=1)], cov[np.argmin(s_n, axis=1)]


def apply_strategy(current: np.ndarray, y_r: np.ndarray, y_n: np.ndarray, strategy: Strategy | str) -> np.ndarray:
    strategy = Strategy(strategy)
    if strategy is Strategy.R_ONLY:
        return y_r.copy()
    if strategy is Strategy.N_ONLY:
        return y_n.copy()
    return np.where(y_r == y_n, y_r, current)


def make_report(ds: ClientDataset, new: np.ndarray, strategy: Strategy) -> RelabelReport:
    changed = new != ds.observed
    return RelabelReport(
        client_id=ds.client_id,
        strategy=strategy.value,
        examined=len(ds),
        changed=int(changed.sum()),
        changed_correctly=int((changed & (new == ds.true)).sum()),
        noise_before=ds.noise_rate,
        noise_after=float(np.mean(new != ds.true)),
    )


def relabel_variant(
    dataset: ClientDataset,
    mlp: MLP,
    clean_params: np.ndarray,
    ref: ClassReference,
    strategy: Strategy | str = Strategy.AGREEMENT,
    normalize: bool = False,
) -> tuple[ClientDataset, RelabelReport]:
    """Relabel one client from features of the clean reference model."""
    strategy = Strategy(strategy)
    if not ref.coverage:
        log.warning("empty class reference; client %d left unchanged", dataset.client_id)
        return dataset, make_report(dataset, dataset.observed, strategy)
    z = mlp.features(clean_params, dataset.inputs)
    if normalize:
        z = row_normalize(z)
    y_r, y_n = proposed_labels(z, ref)
    new = apply_strategy(dataset.observed, y_r, y_n, strategy)
    return dataset.with_labels(new), make_report(dataset, new, strategy)


def relabel_client(
    dataset: ClientDataset,
    mlp: MLP,
    clean_params: np.ndarray,
    ref: ClassReference,
    normalize: bool = False,
) -> tuple[ClientDataset, RelabelReport]:
    """Agreement rule: accept a new label only when both criteria pick the same class."""
    return relabel_variant(dataset, mlp, clean_params, ref, Strategy.AGREEMENT, normalize)
