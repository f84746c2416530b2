"""The view-acquisition MDP.

A state holds the acquisition mask, the embeddings with unacquired rows
zeroed, the step counter and the PMF predicted for that state. Actions are
integers ``0..N-1`` (acquire that view) and ``N`` (stop).

Two implementations share the same reward rules:

* ``AcquisitionEnv`` steps one study at a time through the frozen model.
* ``SubsetOutcomes`` + ``BatchEnv`` precompute the model's prediction for
  every one of the 2^N masks of every study, so that thousands of episodes
  can be rolled out with array lookups only. Used for training and
  evaluation; tests check it against ``AcquisitionEnv`` transition by
  transition.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from viewacq.errors import InvalidActionError, ShapeError
from viewacq.probmodel import CategoryGrid, JointPMF, discretize, discretize_batch, js_divergence, \
    js_divergence_arrays, predicted_classes, predicted_classes_batch
from viewacq.synthstudy import StudyRecord, StudySet, ef_category_of


def stop_action(n_views: int) -> int:
    return n_views


def action_name(action: int, n_views: int, view_names=None) -> str:
    if action == n_views:
        return "stop"
    return view_names[action] if view_names else f"view{action}"


def mask_code(mask) -> int:
    return int(sum(1 << i for i, m in enumerate(mask) if m))


def code_to_mask(code: int, n_views: int) -> np.ndarray:
    return ((int(code) >> np.arange(n_views)) & 1).astype(bool)


def all_masks(n_views: int) -> np.ndarray:
    """(2^N, N) boolean masks; row c is the mask with bit pattern c."""
    codes = np.arange(2 ** n_views)
    return ((codes[:, None] >> np.arange(n_views)[None, :]) & 1).astype(bool)


def unit_costs(n_views: int) -> np.ndarray:
    return np.ones(n_views)


@dataclass
class EnvState:
    study: StudyRecord
    mask: np.ndarray
    masked_embeddings: np.ndarray
    t: int
    last_pmf: JointPMF
    mu_ef: float = 0.5
    acquired: tuple = ()

    @property
    def n_views(self) -> int:
        return len(self.mask)


@dataclass
class Transition:
    next_state: EnvState
    dense_reward: float
    sparse_reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass
class EpisodeTrace:
    study_id: int
    actions: list
    dense_rewards: list
    sparse_reward: float
    final_pmf: list
    pred_as: int
    pred_ef: int
    mu_ef: float
    y_as_class: int
    y_ef: float
    forced: bool = False
    n_views: int = 5

    @property
    def acquired(self) -> list:
        return [a for a in self.actions if a != self.n_views]

    @property
    def n_acquired(self) -> int:
        return len(self.acquired)

    @property
    def total_dense(self) -> float:
        return float(sum(self.dense_rewards))

    @property
    def total_reward(self) -> float:
        return self.total_dense + self.sparse_reward

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpisodeTrace":
        return cls(**json.loads(line))


def write_traces(traces, path) -> None:
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(tr.to_json() + "\n")


def read_traces(path) -> list[EpisodeTrace]:
    with open(path) as fh:
        return [EpisodeTrace.from_json(line) for line in fh if line.strip()]


def sparse_reward(pred_as: int, pred_ef: int, y_as_class: int, ef_cat: int, cost_lambda: float,
                  costs, acquired) -> float:
    """Terminal correctness indicators minus the lambda-weighted acquisition cost."""
    correct = float(pred_as == y_as_class) + float(pred_ef == ef_cat)
    return correct - cost_lambda * float(sum(costs[v] for v in acquired))


class AcquisitionEnv:
    """Single-study environment backed by the frozen diagnostic model."""

    def __init__(self, model, cost_lambda: float = 0.0, costs=None, grid: CategoryGrid | None = None,
                 max_acquisitions: int | None = None):
        self.model = model
        self.n_views = model.cfg.n_views
        self.cost_lambda = float(cost_lambda)
        self.costs = unit_costs(self.n_views) if costs is None else np.asarray(costs, dtype=np.float64)
        if self.costs.shape != (self.n_views,):
            raise ShapeError(f"need {self.n_views} view costs, got {self.costs.shape}")
        self.grid = grid or CategoryGrid.uniform_as(model.cfg.n_as_classes)
        self.max_acquisitions = self.n_views if max_acquisitions is None else int(max_acquisitions)

    def _predict(self, mask, masked):
        mu, cov = self.model.predict_arrays(masked, mask)
        probs, _ = discretize_batch(mu, cov, self.grid)
        return JointPMF(probs[0]), float(mu[0, 1])

    def reset(self, study: StudyRecord) -> EnvState:
        mask = np.zeros(self.n_views, dtype=bool)
        masked = np.zeros_like(study.embeddings)
        pmf, mu_ef = self._predict(mask, masked)
        return EnvState(study, mask, masked, 0, pmf, mu_ef)

    def legal_actions(self, state: EnvState) -> np.ndarray:
        legal = np.ones(self.n_views + 1, dtype=bool)
        legal[:self.n_views] = ~state.mask
        if state.t >= self.max_acquisitions:
            legal[:self.n_views] = False
        return legal

    def step(self, state: EnvState, action: int) -> Transition:
        n = self.n_views
        action = int(action)
        if action == n:
            pa, pe = predicted_classes(state.last_pmf)
            s = state.study
            r = sparse_reward(pa, pe, s.y_as_class, s.ef_category, self.cost_lambda, self.costs, state.acquired)
            return Transition(state, 0.0, r, True, {"pred_as": pa, "pred_ef": pe, "mu_ef": state.mu_ef})
        if not 0 <= action < n:
            raise InvalidActionError(f"action {action} outside 0..{n}")
        if state.mask[action]:
            raise InvalidActionError(f"view {action} already acquired")
        if state.t >= self.max_acquisitions:
            raise InvalidActionError(f"acquisition budget of {self.max_acquisitions} exhausted")
        mask = state.mask.copy()
        mask[action] = True
        masked = state.masked_embeddings.copy()
        masked[action] = state.study.embeddings[action]
        pmf, mu_ef = self._predict(mask, masked)
        dense = js_divergence(state.last_pmf, pmf)
        nxt = EnvState(state.study, mask, masked, state.t + 1, pmf, mu_ef, state.acquired + (action,))
        pa, pe = predicted_classes(pmf)
        return Transition(nxt, dense, 0.0, False, {"pred_as": pa, "pred_ef": pe, "mu_ef": mu_ef})


# module-level conveniences mirroring the environment methods

def reset(study: StudyRecord, model, grid: CategoryGrid | None = None) -> EnvState:
    return AcquisitionEnv(model, grid=grid).reset(study)


def step(state: EnvState, action: int, model, cost_lambda: float = 0.0, costs=None,
         grid: CategoryGrid | None = None) -> Transition:
    return AcquisitionEnv(model, cost_lambda, costs, grid).step(state, action)


Policy = Callable[[EnvState, np.ndarray], int]


def run_episode(study: StudyRecord, env: AcquisitionEnv, policy: Policy, log_path=None) -> EpisodeTrace:
    """Roll one episode. ``policy(state, legal) -> action``.

    If no view can be acquired any more and the policy still does not stop,
    the episode is terminated with zero sparse reward.
    """
    state = env.reset(study)
    actions, dense = [], []
    sparse, forced = 0.0, False
    while True:
        legal = env.legal_actions(state)
        action = int(policy(state, legal))
        if action != env.n_views and not legal[:env.n_views].any():
            forced = True
            break
        tr = env.step(state, action)
        actions.append(action)
        dense.append(tr.dense_reward)
        if tr.done:
            sparse = tr.sparse_reward
            break
        state = tr.next_state
    pa, pe = predicted_classes(state.last_pmf)
    trace = EpisodeTrace(int(study.study_id), actions, dense, float(sparse), state.last_pmf.probs.tolist(),
                         pa, pe, state.mu_ef, int(study.y_as_class), float(study.y_ef), forced, env.n_views)
    if log_path is not None:
        with open(log_path, "a") as fh:
            fh.write(trace.to_json() + "\n")
    return trace


def stop_policy(state, legal) -> int:
    return len(legal) - 1


def fixed_order_policy(order, stop_after: int | None = None) -> Policy:
    """Acquire views in ``order``; stop after ``stop_after`` of them (never, if None)."""
    order = list(order)

    def policy(state, legal):
        if stop_after is not None and state.t >= stop_after:
            return len(legal) - 1
        return order[min(state.t, len(order) - 1)]
    return policy


# ---------------------------------------------------------------- batched path


@dataclass
class SubsetOutcomes:
    """Frozen-model predictions for every (study, mask) pair.

    ``probs[s, c]`` is the joint PMF for study ``s`` under the mask with bit
    pattern ``c``; ``dense[s, c, v]`` is the JS reward for acquiring ``v``
    from mask ``c`` (0 where ``v`` is already in ``c``).
    """

    studies: StudySet
    probs: np.ndarray  # (S, 2^N, K, M)
    mu_ef: np.ndarray  # (S, 2^N)
    pred_as: np.ndarray
    pred_ef: np.ndarray
    dense: np.ndarray  # (S, 2^N, N)

    @classmethod
    def build(cls, model, studies: StudySet, grid: CategoryGrid | None = None,
              batch_size: int = 4096) -> "SubsetOutcomes":
        grid = grid or CategoryGrid.uniform_as(model.cfg.n_as_classes)
        s, n, _ = studies.embeddings.shape
        masks = all_masks(n)
        n_codes = len(masks)
        mu = np.empty((s, n_codes, 2))
        cov = np.empty((s, n_codes, 2, 2))
        # the empty mask gives one patient-independent prediction
        mu0, cov0 = model.predict_arrays(np.zeros((1, n, studies.embed_dim)), masks[:1])
        mu[:, 0], cov[:, 0] = mu0[0], cov0[0]
        flat_s = np.repeat(np.arange(s), n_codes - 1)
        flat_c = np.tile(np.arange(1, n_codes), s)
        for i in range(0, len(flat_s), batch_size):
            rs, cs = flat_s[i:i + batch_size], flat_c[i:i + batch_size]
            mu[rs, cs], cov[rs, cs] = model.predict_arrays(studies.embeddings[rs], masks[cs], batch_size=batch_size)
        return cls.from_gaussians(studies, mu, cov, grid)

    @classmethod
    def from_gaussians(cls, studies: StudySet, mu: np.ndarray, cov: np.ndarray,
                       grid: CategoryGrid = CategoryGrid()) -> "SubsetOutcomes":
        """Table from per-(study, mask) Gaussian predictions ``mu`` (S, 2^N, 2) and ``cov`` (S, 2^N, 2, 2)."""
        s, n_codes = mu.shape[:2]
        n = studies.n_views
        if n_codes != 2 ** n:
            raise ShapeError(f"expected {2 ** n} masks per study, got {n_codes}")
        probs, _ = discretize_batch(mu.reshape(-1, 2), cov.reshape(-1, 2, 2), grid)
        probs = probs.reshape(s, n_codes, grid.n_as, grid.n_ef)
        pred_as, pred_ef = predicted_classes_batch(probs)
        dense = np.zeros((s, n_codes, n))
        codes = np.arange(n_codes)
        for v in range(n):
            src = codes[(codes >> v) & 1 == 0]
            dense[:, src, v] = js_divergence_arrays(probs[:, src], probs[:, src | (1 << v)])
        return cls(studies, probs, mu[:, :, 1].copy(), pred_as, pred_ef, dense)

    def take(self, index) -> "SubsetOutcomes":
        index = np.asarray(index)
        return SubsetOutcomes(self.studies.take(index), self.probs[index], self.mu_ef[index],
                              self.pred_as[index], self.pred_ef[index], self.dense[index])

    def __len__(self) -> int:
        return len(self.studies)

    @property
    def n_views(self) -> int:
        return self.dense.shape[2]

    def correct(self, rows, codes) -> np.ndarray:
        st = self.studies
        return ((self.pred_as[rows, codes] == st.y_as_class[rows]).astype(np.float64)
                + (self.pred_ef[rows, codes] == st.ef_category[rows]))

    def subset_cost(self, codes, costs) -> np.ndarray:
        bits = (np.asarray(codes)[..., None] >> np.arange(self.n_views)) & 1
        return bits @ np.asarray(costs, dtype=np.float64)


class BatchEnv:
    """Vectorised episodes over a ``SubsetOutcomes`` table."""

    def __init__(self, table: SubsetOutcomes, cost_lambda: float = 0.0, costs=None,
                 max_acquisitions: int | None = None, dense_scale: float = 1.0):
        self.table = table
        self.n_views = table.n_views
        self.cost_lambda = float(cost_lambda)
        self.costs = unit_costs(self.n_views) if costs is None else np.asarray(costs, dtype=np.float64)
        self.max_acquisitions = self.n_views if max_acquisitions is None else int(max_acquisitions)
        self.dense_scale = float(dense_scale)
        self._bits = 1 << np.arange(self.n_views)

    def observe(self, rows, codes) -> np.ndarray:
        """Policy input: flattened masked embeddings followed by the mask bits."""
        masks = (codes[:, None] & self._bits) > 0
        emb = np.where(masks[:, :, None], self.table.studies.embeddings[rows], 0.0)
        return np.concatenate([emb.reshape(len(rows), -1), masks.astype(np.float64)], axis=1)

    def legal(self, codes, t) -> np.ndarray:
        masks = (codes[:, None] & self._bits) > 0
        legal = np.ones((len(codes), self.n_views + 1), dtype=bool)
        legal[:, :self.n_views] = ~masks & (t[:, None] < self.max_acquisitions)
        return legal

    def step(self, rows, codes, t, actions):
        """Returns (new codes, new t, reward, done); reward = scaled dense + sparse."""
        stop = actions == self.n_views
        sel = ~stop
        views = np.where(sel, actions, 0)
        if (sel & ((codes >> views) & 1 == 1)).any():
            raise InvalidActionError("batched step selected an acquired view")
        reward = np.zeros(len(rows))
        reward[sel] = self.dense_scale * self.table.dense[rows[sel], codes[sel], views[sel]]
        reward[stop] = (self.table.correct(rows[stop], codes[stop])
                        - self.cost_lambda * self.table.subset_cost(codes[stop], self.costs))
        new_codes = np.where(sel, codes | (1 << views), codes)
        return new_codes, t + sel, reward, stop

    def sparse(self, rows, codes) -> np.ndarray:
        return self.table.correct(rows, codes) - self.cost_lambda * self.table.subset_cost(codes, self.costs)
