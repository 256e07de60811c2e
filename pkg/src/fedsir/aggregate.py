"""Server-side aggregation: FedAvg and distance-aware aggregation (DaAgg)."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Collection, Sequence

import numpy as np

log = logging.getLogger(__name__)

DISTANCE_WARN = 30.0


@dataclass(frozen=True)
class AggregationWeights:
    sample_weights: np.ndarray  # a_k
    distances: np.ndarray  # d_k
    weights: np.ndarray  # alpha_k


def _stack(params_list: Sequence[np.ndarray]) -> np.ndarray:
    if len(params_list) == 0:
        raise ValueError("no client parameters to aggregate")
    sizes = {p.shape for p in params_list}
    if len(sizes) != 1:
        raise ValueError(f"parameter vectors differ in shape: {sorted(sizes)}")
    return np.stack(params_list)


def sample_weights(sample_counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(sample_counts, dtype=float)
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ValueError("sample counts must be non-negative with a positive total")
    return counts / counts.sum()


def fedavg(params_list: Sequence[np.ndarray], sample_counts: Sequence[int]) -> np.ndarray:
    """Sample-size weighted mean of parameter vectors."""
    stacked = _stack(params_list)
    if len(sample_counts) != stacked.shape[0]:
        raise ValueError("one sample count per client required")
    return sample_weights(sample_counts) @ stacked


def daagg_distances(
    params_list: Sequence[np.ndarray],
    clean: Collection[int],
    rescale: bool = False,
) -> np.ndarray:
    """``d_k = min_j ||phi_k - phi_j||`` over clean ``j`` (indices into ``params_list``); 0 for clean clients.

    ``rescale`` divides by the median pairwise distance between clean clients
    (no-op with fewer than two clean clients or a zero median).
    """
    stacked = _stack(params_list)
    clean = sorted(set(clean))
    if not clean:
        raise ValueError("DaAgg needs at least one clean client")
    clean_params = stacked[clean]
    dist = np.linalg.norm(stacked[:, None, :] - clean_params[None, :, :], axis=2).min(axis=1)
    dist[clean] = 0.0
    if rescale and len(clean) > 1:
        pair = np.linalg.norm(clean_params[:, None, :] - clean_params[None, :, :], axis=2)
        med = np.median(pair[np.triu_indices(len(clean), 1)])
        if med > 0:
            dist = dist / med
    return dist


def daagg(
    params_list: Sequence[np.ndarray],
    sample_counts: Sequence[int],
    clean: Collection[int],
    rescale: bool = False,
) -> tuple[np.ndarray, AggregationWeights]:
    """Aggregate with ``alpha_k proportional to a_k * exp(-d_k)``."""
    stacked = _stack(params_list)
    a = sample_weights(sample_counts)
    d = daagg_distances(params_list, clean, rescale)
    if d.max() > DISTANCE_WARN:
        log.warning("max DaAgg distance %.1f; distant clients get ~zero weight", d.max())
    with np.errstate(divide="ignore"):
        logits = np.log(a) - d
    logits -= logits.max()
    alpha = np.exp(logits)
    alpha /= alpha.sum()
    return alpha @ stacked, AggregationWeights(a, d, alpha)
