"""Reference computations that do not depend on any learned component.

* ``bayes_posterior``: conjugate linear-Gaussian update of the generator's
  latent prior moments given any subset of a study's views (uses the
  study's true per-view qualities, which only the generator knows).
* ``hindsight_best_subset``: exhaustive search over all 2^N view subsets
  through a frozen diagnostic model.
* ``mc_pmf``: Monte Carlo estimate of the joint PMF, the sampling-based
  counterpart of ``probmodel.discretize``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from viewacq.errors import ConfigError
from viewacq.probmodel import CategoryGrid, GaussianJoint, JointPMF, discretize_batch, predicted_classes_batch
from viewacq.synthstudy import (
    EF_CENTER,
    EF_UNIT,
    GeneratorConfig,
    StudyRecord,
    StudySet,
    latent_prior_moments,
    view_directions,
)


@dataclass(frozen=True)
class BayesPosterior:
    mean: np.ndarray
    cov: np.ndarray

    def as_joint(self) -> GaussianJoint:
        return GaussianJoint(self.mean, self.cov)


def _observation_model(cfg: GeneratorConfig):
    """Per-view design (N, D, 2) and offset (N, D) for unit quality."""
    a, b, c = view_directions(cfg)
    w = cfg.view_weights
    k = cfg.n_as_classes
    design = np.stack([w[:, 0, None] * k * a, w[:, 1, None] / EF_UNIT * b], axis=-1)
    offset = -w[:, 0, None] * 0.5 * k * a - w[:, 1, None] * (EF_CENTER / EF_UNIT) * b + cfg.quality_marker * c
    return design, offset


def bayes_posterior_batch(studies: StudySet, masks: np.ndarray, cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means (S, 2) and covariances (S, 2, 2) for per-study view masks (S, N)."""
    s, nv, d = studies.embeddings.shape
    if nv != cfg.n_views or d != cfg.embed_dim:
        raise ConfigError(f"studies are {nv}x{d}, config expects {cfg.n_views}x{cfg.embed_dim}")
    masks = np.broadcast_to(np.asarray(masks, dtype=bool), (s, nv))
    design, offset = _observation_model(cfg)
    prior_mean, prior_cov = latent_prior_moments(cfg)
    prior_prec = np.linalg.inv(prior_cov)
    q = studies.qualities * masks  # unacquired views contribute nothing
    var = cfg.noise_std ** 2
    gram = np.einsum("vdi,vdj->vij", design, design)  # (N, 2, 2)
    prec = prior_prec[None] + np.einsum("sv,vij->sij", q * q, gram) / var
    resid = studies.embeddings - q[:, :, None] * offset[None]
    eta = (prior_prec @ prior_mean)[None] + np.einsum("sv,vdi,svd->si", q, design, resid) / var
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    mean = np.einsum("sij,sj->si", cov, eta)
    return mean, cov


def bayes_posterior(study: StudyRecord, view_subset, cfg: GeneratorConfig) -> BayesPosterior:
    mask = np.zeros(cfg.n_views, dtype=bool)
    mask[list(view_subset)] = True
    one = StudySet([study.study_id], study.embeddings[None], [study.y_as_value], [study.y_as_class],
                   [study.y_ef], study.qualities[None], cfg)
    mean, cov = bayes_posterior_batch(one, mask[None], cfg)
    return BayesPosterior(mean[0], cov[0])


def bayes_predictions(studies: StudySet, masks: np.ndarray, cfg: GeneratorConfig,
                      grid: CategoryGrid | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(AS class, EF category, posterior mean EF) predicted by the Bayes oracle."""
    grid = grid or CategoryGrid.uniform_as(cfg.n_as_classes)
    mean, cov = bayes_posterior_batch(studies, masks, cfg)
    probs, _ = discretize_batch(mean, cov, grid)
    pa, pe = predicted_classes_batch(probs)
    return pa, pe, mean[:, 1]


def mc_pmf(joint: GaussianJoint, grid: CategoryGrid = CategoryGrid(), n_samples: int = 10_000,
           rng: np.random.Generator | int | None = None, chunk: int = 1_000_000) -> JointPMF:
    """Empirical cell frequencies of ``n_samples`` draws from ``joint``."""
    if n_samples < 10_000:
        raise ValueError("mc_pmf needs at least 1e4 samples")
    rng = np.random.default_rng(rng)
    counts = np.zeros((grid.n_as, grid.n_ef), dtype=np.int64)
    # eigen-factor so that zero-variance limits still sample
    vals, vecs = np.linalg.eigh(joint.sigma)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    inner_as = np.asarray(grid.as_edges[1:-1])
    inner_ef = np.asarray(grid.ef_edges[1:-1])
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        x = joint.mu + rng.standard_normal((m, 2)) @ root.T
        i = np.searchsorted(inner_as, x[:, 0], side="right")
        j = np.searchsorted(inner_ef, x[:, 1], side="right")
        counts += np.bincount(i * grid.n_ef + j, minlength=grid.n_as * grid.n_ef).reshape(grid.n_as, grid.n_ef)
        done += m
    return JointPMF(counts / n_samples)


def all_subsets(n_views: int) -> list[tuple[int, ...]]:
    """All 2^N subsets, ordered by size then lexicographically."""
    out: list[tuple[int, ...]] = []
    for k in range(n_views + 1):
        out.extend(combinations(range(n_views), k))
    return out


def subset_order_codes(n_views: int) -> np.ndarray:
    """Mask codes (bit v = view v) in ``all_subsets`` order."""
    return np.array([sum(1 << v for v in s) for s in all_subsets(n_views)], dtype=np.int64)


def hindsight_best_batch(table, cost_lambda: float, costs=None) -> tuple[np.ndarray, np.ndarray]:
    """Best mask code and its sparse reward for every study of a ``SubsetOutcomes`` table.

    Ties go to the smaller subset, then to the lexicographically first one.
    """
    n = table.n_views
    costs = np.ones(n) if costs is None else np.asarray(costs, dtype=np.float64)
    order = subset_order_codes(n)
    rows = np.arange(len(table))[:, None]
    codes = np.broadcast_to(order, (len(table), len(order)))
    rewards = table.correct(rows, codes) - cost_lambda * table.subset_cost(order, costs)[None]
    best = rewards.argmax(axis=1)  # first maximum in subset order
    return order[best], rewards[np.arange(len(table)), best]


def hindsight_best_subset(study: StudyRecord, model, cost_lambda: float, costs=None,
                          grid: CategoryGrid | None = None) -> tuple[tuple[int, ...], float]:
    """Exhaustive search of the terminal reward over all 2^N subsets for one study."""
    n = model.cfg.n_views
    if n > 12:
        raise ConfigError("hindsight enumeration is limited to N <= 12 views")
    grid = grid or CategoryGrid.uniform_as(model.cfg.n_as_classes)
    costs = np.ones(n) if costs is None else np.asarray(costs, dtype=np.float64)
    subsets = all_subsets(n)
    masks = np.zeros((len(subsets), n), dtype=bool)
    for i, s in enumerate(subsets):
        masks[i, list(s)] = True
    mu, cov = model.predict_arrays(np.broadcast_to(study.embeddings, (len(subsets),) + study.embeddings.shape), masks)
    probs, _ = discretize_batch(mu, cov, grid)
    pa, pe = predicted_classes_batch(probs)
    correct = (pa == study.y_as_class).astype(np.float64) + (pe == study.ef_category)
    rewards = correct - cost_lambda * (masks @ costs)
    best = int(np.argmax(rewards))
    return subsets[best], float(rewards[best])


def bayes_subset_outcomes(studies: StudySet, cfg: GeneratorConfig, grid: CategoryGrid | None = None):
    """``SubsetOutcomes`` table whose predictions are the Bayes posteriors for every mask."""
    from viewacq.env import SubsetOutcomes, all_masks

    grid = grid or CategoryGrid.uniform_as(cfg.n_as_classes)
    masks = all_masks(studies.n_views)
    s, c = len(studies), len(masks)
    rows = np.repeat(np.arange(s), c)
    mean, cov = bayes_posterior_batch(studies.take(rows), np.tile(masks, (s, 1)), cfg)
    return SubsetOutcomes.from_gaussians(studies, mean.reshape(s, c, 2), cov.reshape(s, c, 2, 2), grid)
