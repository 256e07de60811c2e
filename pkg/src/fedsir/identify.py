"""Server-side clean/noisy client identification with a 2-component GMM.

The mixture is fit by EM over the per-client ``(mu, energy)`` descriptors.
Component semantics are fixed afterwards: the component whose mean ``mu`` is
smaller is the clean one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from fedsir.seeding import derive_rng
from fedsir.spectral import ClientSpectralStats

log = logging.getLogger(__name__)


class NoCleanClientsError(RuntimeError):
    pass


@dataclass(frozen=True)
class GmmModel:
    means: np.ndarray  # (2, 2)
    covariances: np.ndarray  # (2, 2, 2)
    weights: np.ndarray  # (2,)
    iterations: int
    log_likelihood: float
    history: tuple[float, ...] = ()

    def responsibilities(self, points: np.ndarray) -> np.ndarray:
        log_r = _weighted_log_density(np.atleast_2d(points), self)
        return np.exp(log_r - _logsumexp(log_r)[:, None])


@dataclass(frozen=True)
class ClientPartition:
    clean: frozenset[int]
    noisy: frozenset[int]
    excluded: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.clean & self.noisy or self.clean & self.excluded or self.noisy & self.excluded:
            raise ValueError("partition sets must be disjoint")

    @property
    def noisy_treatment(self) -> frozenset[int]:
        """Clients trained, relabeled and aggregated as noisy (noisy plus excluded)."""
        return self.noisy | self.excluded


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _log_gauss(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, (x - mean).T)
    maha = (sol**2).sum(axis=0)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (x.shape[1] * np.log(2 * np.pi) + log_det + maha)


def _weighted_log_density(x: np.ndarray, gmm: GmmModel) -> np.ndarray:
    return np.column_stack(
        [np.log(gmm.weights[j]) + _log_gauss(x, gmm.means[j], gmm.covariances[j]) for j in range(2)]
    )


def _m_step(x: np.ndarray, resp: np.ndarray, reg: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((2, x.shape[1], x.shape[1]))
    for j in range(2):
        diff = x - means[j]
        covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + reg * np.eye(x.shape[1])
    return nk / nk.sum(), means, covs


def _kmeanspp_centres(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    first = x[rng.integers(x.shape[0])]
    d2 = ((x - first) ** 2).sum(axis=1)
    second = x[rng.choice(x.shape[0], p=d2 / d2.sum())]
    return np.stack([first, second])


def fit_gmm_2(
    points,
    rng_seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 200,
    reg_covar: float = 1e-6,
) -> GmmModel:
    """Fit a two-component full-covariance GMM by EM.

    Points are sorted before fitting so the result does not depend on their
    order. Initialisation is k-means++ seeding followed by one hard assignment.
    EM stops once the log-likelihood gains less than ``tol`` or after
    ``max_iter`` iterations.

    If all points coincide, both components sit on that point with equal
    weight and every point gets equal responsibility.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("fit_gmm_2 needs at least 2 points")
    x = x[np.lexsort(x.T[::-1])]
    dim = x.shape[1]

    if np.all(x == x[0]):
        cov = np.stack([reg_covar * np.eye(dim)] * 2)
        gmm = GmmModel(np.stack([x[0], x[0]]), cov, np.array([0.5, 0.5]), 0, 0.0)
        ll = float(_logsumexp(_weighted_log_density(x, gmm)).sum())
        return GmmModel(gmm.means, cov, gmm.weights, 0, ll, (ll,))

    rng = derive_rng(rng_seed, "gmm-init")
    centres = _kmeanspp_centres(x, rng)
    hard = np.argmin(((x[:, None, :] - centres[None]) ** 2).sum(-1), axis=1)
    resp = np.eye(2)[hard]
    weights, means, covs = _m_step(x, resp, reg_covar)

    history: list[float] = []
    best = None
    for it in range(1, max_iter + 1):
        gmm = GmmModel(means, covs, weights, it, 0.0)
        log_r = _weighted_log_density(x, gmm)
        norm = _logsumexp(log_r)
        ll = float(norm.sum())
        if history and ll < history[-1]:
            # The covariance floor makes each M-step slightly inexact, so a
            # step can lose likelihood; treat that as convergence and keep
            # the previous iterate.
            break
        history.append(ll)
        best = gmm
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        resp = np.exp(log_r - norm[:, None])
        weights, means, covs = _m_step(x, resp, reg_covar)
    return GmmModel(best.means, best.covariances, best.weights, best.iterations, history[-1], tuple(history))


def clean_component(gmm: GmmModel) -> int:
    """Index of the component with the smaller mean ``mu`` (ties: component 0)."""
    return int(gmm.means[1, 0] < gmm.means[0, 0])


def partition_clients(
    stats: list[ClientSpectralStats],
    gmm: GmmModel,
    excluded_as_clean: bool = False,
) -> ClientPartition:
    """Hard-assign each valid client to its most responsible component.

    Clients without valid statistics go to ``excluded``; unless
    ``excluded_as_clean`` they are handled like noisy clients downstream.
    """
    clean_j = clean_component(gmm)
    valid = [s for s in stats if s.valid]
    clean, noisy = set(), set()
    if valid:
        resp = gmm.responsibilities(np.array([s.point for s in valid]))
        for s, r in zip(valid, resp):
            # equal responsibility goes to the clean component
            (clean if r[clean_j] >= r[1 - clean_j] else noisy).add(s.client_id)
    excluded = {s.client_id for s in stats if not s.valid}
    if excluded_as_clean:
        clean |= excluded
        excluded = set()
    if not clean:
        raise NoCleanClientsError("no clean clients identified")
    return ClientPartition(frozenset(clean), frozenset(noisy), frozenset(excluded))


def identify_clients(
    stats: list[ClientSpectralStats], rng_seed: int = 0, excluded_as_clean: bool = False
) -> tuple[ClientPartition, GmmModel | None]:
    """Fit the GMM on the valid descriptors and partition all clients."""
    valid = [s for s in stats if s.valid]
    if len(valid) < 2:
        log.warning("only %d client(s) with valid spectral statistics; treating them as clean", len(valid))
        clean = {s.client_id for s in valid}
        excluded = {s.client_id for s in stats if not s.valid}
        if excluded_as_clean:
            clean |= excluded
            excluded = set()
        if not clean:
            raise NoCleanClientsError("no clean clients identified")
        return ClientPartition(frozenset(clean), frozenset(), frozenset(excluded)), None
    gmm = fit_gmm_2([s.point for s in valid], rng_seed)
    return partition_clients(stats, gmm, excluded_as_clean), gmm
