"""Joint PMFs over (AS class x EF category) derived from a bivariate Gaussian."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from viewacq.errors import ShapeError
from viewacq.numerics.gaussian import bvn_grid_probs
from viewacq.synthstudy import EF_EDGES

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class CategoryGrid:
    """Bin edges on [0, 1]; outer bins extend to +-inf when integrating."""

    as_edges: tuple = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)
    ef_edges: tuple = (0.0, EF_EDGES[0], EF_EDGES[1], 1.0)

    def __post_init__(self):
        for edges in (self.as_edges, self.ef_edges):
            if len(edges) < 2 or np.any(np.diff(edges) <= 0):
                raise ValueError(f"edges must be strictly increasing: {edges}")

    @classmethod
    def uniform_as(cls, n_as_classes: int = 3, ef_edges=None) -> "CategoryGrid":
        kw = {"as_edges": tuple(np.linspace(0.0, 1.0, n_as_classes + 1))}
        if ef_edges is not None:
            kw["ef_edges"] = tuple(ef_edges)
        return cls(**kw)

    @property
    def n_as(self) -> int:
        return len(self.as_edges) - 1

    @property
    def n_ef(self) -> int:
        return len(self.ef_edges) - 1

    @staticmethod
    def _open(edges) -> np.ndarray:
        e = np.array(edges, dtype=np.float64)
        e[0], e[-1] = -np.inf, np.inf
        return e

    @property
    def as_integration_edges(self) -> np.ndarray:
        return self._open(self.as_edges)

    @property
    def ef_integration_edges(self) -> np.ndarray:
        return self._open(self.ef_edges)


@dataclass(frozen=True)
class GaussianJoint:
    """Bivariate normal over (AS severity, EF fraction)."""

    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64).reshape(2))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64).reshape(2, 2))

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma))

    def same_as(self, other: "GaussianJoint") -> bool:
        return np.array_equal(self.mu, other.mu) and np.array_equal(self.sigma, other.sigma)


@dataclass(frozen=True)
class JointPMF:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ShapeError("JointPMF needs a K x M table")
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    def is_valid(self, tol: float = 1e-6) -> bool:
        return bool((self.probs >= 0).all() and abs(self.probs.sum() - 1.0) <= tol)


def discretize_batch(mu, sigma, grid: CategoryGrid = CategoryGrid()) -> tuple[np.ndarray, np.ndarray]:
    """Cell masses for a batch of Gaussians.

    Returns ``(probs, residual)``: probs (B, K, M) renormalised to sum to 1,
    and the absolute normalisation residual before renormalisation.
    """
    raw = bvn_grid_probs(mu, sigma, grid.as_integration_edges, grid.ef_integration_edges)
    total = raw.sum(axis=(1, 2))
    residual = np.abs(total - 1.0)
    return raw / total[:, None, None], residual


def discretize(joint: GaussianJoint, grid: CategoryGrid = CategoryGrid()) -> JointPMF:
    probs, _ = discretize_batch(joint.mu[None], joint.sigma[None], grid)
    return JointPMF(probs[0])


def _xlogy_ratio(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = np.log(np.where(p > 0, p, 1.0))
        lm = np.log(np.where(m > 0, m, 1.0))
    return np.where(p > 0, p * (lp - lm), 0.0)


def js_divergence_arrays(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """JS divergence (natural log) along the trailing two axes; any leading batch shape."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"PMF shapes differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    axes = tuple(range(p.ndim - 2, p.ndim)) if p.ndim >= 2 else (0,)
    kl_pm = _xlogy_ratio(p, m).sum(axis=axes)
    kl_qm = _xlogy_ratio(q, m).sum(axis=axes)
    return np.maximum(0.5 * (kl_pm + kl_qm), 0.0)


def js_divergence(p: JointPMF, q: JointPMF) -> float:
    """Jensen-Shannon divergence in nats, in [0, ln 2]; 0 log 0 = 0."""
    if p.shape != q.shape:
        raise ShapeError(f"PMF shapes differ: {p.shape} vs {q.shape}")
    return float(js_divergence_arrays(p.probs, q.probs))


def marginals(p: JointPMF) -> tuple[np.ndarray, np.ndarray]:
    return p.probs.sum(axis=1), p.probs.sum(axis=0)


def predicted_classes(p: JointPMF) -> tuple[int, int]:
    """Argmax of each marginal; ties go to the lower index (numpy argmax semantics)."""
    as_m, ef_m = marginals(p)
    return int(np.argmax(as_m)), int(np.argmax(ef_m))


def predicted_classes_batch(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return probs.sum(axis=-1).argmax(axis=-1), probs.sum(axis=-2).argmax(axis=-1)
