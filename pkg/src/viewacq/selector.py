"""PPO actor-critic for the acquisition policy."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from viewacq.binfmt import read_checkpoint, write_checkpoint
from viewacq.env import BatchEnv, EnvState, SubsetOutcomes
from viewacq.errors import ConfigError, DataFormatError, NumericalError
from viewacq.numerics import autodiff as ops
from viewacq.numerics.autodiff import Tape, no_tape
from viewacq.numerics.nn import MLP, Adam, ParamStore

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PSEL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    epochs_per_update: int = 4
    minibatch_size: int = 256
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    gae_lambda: float = 0.95
    gamma: float = 1.0
    epochs: int = 50
    episodes_per_epoch: int | None = None  # None: one episode per training study
    hidden: int = 64
    dense_scale: float = 1.0
    max_grad_norm: float = 0.5
    dual_clip: bool = True
    max_acquisitions: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must lie in (0, 1)")
        for name in ("epochs_per_update", "minibatch_size", "epochs", "hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.entropy_coef < 0 or self.value_coef < 0:
            raise ConfigError("lr must be positive and loss coefficients non-negative")
        if not 0 <= self.gae_lambda <= 1 or not 0 <= self.gamma <= 1:
            raise ConfigError("gamma and gae_lambda must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class PolicyNets:
    """Separate 3-layer tanh MLPs for the actor (N+1 logits) and the critic."""

    def __init__(self, n_views: int, embed_dim: int, hidden: int = 64, seed: int = 0):
        self.n_views = n_views
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.seed = seed
        self.obs_dim = n_views * embed_dim + n_views
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAC]))
        self.params = ParamStore()
        self.actor = MLP(self.params, "pi", (self.obs_dim, hidden, hidden, n_views + 1), rng, out_gain=0.01)
        self.critic = MLP(self.params, "v", (self.obs_dim, hidden, hidden, 1), rng)

    @property
    def n_actions(self) -> int:
        return self.n_views + 1

    def log_probs(self, obs, legal):
        """Masked log-softmax over actions; illegal entries hold 0 and carry no gradient."""
        return ops.masked_log_softmax(self.actor(obs), legal)

    def value(self, obs):
        return ops.reshape(self.critic(obs), (-1,))

    def logits(self, obs, legal) -> np.ndarray:
        """Actor logits with illegal actions set to -inf."""
        with no_tape():
            z = self.actor(np.atleast_2d(obs)).values
        return np.where(legal, z, -np.inf)

    def act_batch(self, obs, legal, rng: np.random.Generator | None = None, greedy: bool = False):
        """(actions, log-probs, values) for a batch; ``greedy`` takes the argmax."""
        obs = np.atleast_2d(obs)
        legal = np.atleast_2d(legal)
        with no_tape():
            logp = self.log_probs(obs, legal).values
            v = self.value(obs).values
        if greedy:
            actions = np.where(legal, logp, -np.inf).argmax(axis=1)
        else:
            p = np.where(legal, np.exp(logp), 0.0)
            cdf = np.cumsum(p, axis=1)
            u = rng.random(len(obs))[:, None] * cdf[:, -1:]
            actions = (cdf <= u).sum(axis=1)
            # guard against round-off landing on an illegal trailing entry
            actions = np.where(legal[np.arange(len(obs)), np.minimum(actions, self.n_views)],
                               np.minimum(actions, self.n_views), p.argmax(axis=1))
        return actions, logp[np.arange(len(obs)), actions], v

    def act(self, state: EnvState, legal=None, rng: np.random.Generator | None = None, greedy: bool = False):
        """Single-state version: returns (action, log_prob, value)."""
        if legal is None:
            legal = np.append(~state.mask, True)
        obs = observation(state)
        a, lp, v = self.act_batch(obs[None], np.asarray(legal)[None], rng, greedy)
        return int(a[0]), float(lp[0]), float(v[0])

    def as_policy(self, greedy: bool = True, rng: np.random.Generator | None = None):
        """Adapter to the ``run_episode`` policy protocol."""
        def policy(state, legal):
            return self.act(state, legal, rng, greedy)[0]
        return policy

    def config(self) -> dict:
        return {"n_views": self.n_views, "embed_dim": self.embed_dim, "hidden": self.hidden, "seed": self.seed}

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"nets": self.config(), "params": self.params.names()}
        if extra:
            meta["extra"] = extra
        write_checkpoint(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, self.params.flat())

    @classmethod
    def load(cls, path) -> "PolicyNets":
        meta, blob = read_checkpoint(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        try:
            nets = cls(**meta["nets"])
        except (KeyError, TypeError) as exc:
            raise DataFormatError("policy checkpoint has a malformed config echo") from exc
        if meta.get("params") != nets.params.names():
            raise DataFormatError("checkpoint parameter layout does not match this network")
        nets.params.load_flat(blob)
        return nets


def observation(state: EnvState) -> np.ndarray:
    """Actor input; rows of unacquired views are zeroed whatever the state holds."""
    mask = np.asarray(state.mask, dtype=bool)
    emb = np.where(mask[:, None], state.masked_embeddings, 0.0)
    return np.concatenate([emb.ravel(), mask.astype(np.float64)])


@dataclass
class RolloutBuffer:
    """Flat per-step storage; the steps of an episode are contiguous and in order."""

    obs: list = field(default_factory=list)
    legal: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def add(self, obs, legal, action, log_prob, value, reward, done) -> None:
        self.obs.append(np.asarray(obs, dtype=np.float64))
        self.legal.append(np.asarray(legal, dtype=bool))
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))

    def extend(self, obs, legal, actions, log_probs, values, rewards, dones) -> None:
        """Bulk append of arrays already in episode-contiguous order."""
        self.obs.extend(obs)
        self.legal.extend(legal)
        self.actions.extend(int(a) for a in actions)
        self.log_probs.extend(float(x) for x in log_probs)
        self.values.extend(float(x) for x in values)
        self.rewards.extend(float(x) for x in rewards)
        self.dones.extend(bool(x) for x in dones)

    def __len__(self) -> int:
        return len(self.actions)

    def arrays(self) -> dict:
        return {
            "obs": np.asarray(self.obs),
            "legal": np.asarray(self.legal),
            "actions": np.asarray(self.actions, dtype=np.int64),
            "log_probs": np.asarray(self.log_probs),
            "values": np.asarray(self.values),
            "rewards": np.asarray(self.rewards),
            "dones": np.asarray(self.dones),
        }


def gae(rewards, values, dones, gamma: float = 1.0, lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns over episode-contiguous steps.

    The step after a ``done`` step starts a new episode, so its value is not
    bootstrapped across the boundary. The buffer must end on a done step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if len(dones) and not dones[-1]:
        raise ValueError("buffer must contain complete episodes")
    adv = np.zeros_like(rewards)
    running = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        if dones[i]:
            next_v, running = 0.0, 0.0
        else:
            next_v = values[i + 1]
        delta = rewards[i] + gamma * next_v - values[i]
        running = delta + gamma * lam * running
        adv[i] = running
    return adv, adv + values


def compute_advantages(buffer: RolloutBuffer, gamma: float = 1.0, lam: float = 0.95,
                       normalize: bool = True) -> RolloutBuffer:
    adv, ret = gae(buffer.rewards, buffer.values, buffer.dones, gamma, lam)
    buffer.returns = ret
    std = adv.std()
    if normalize and len(adv) > 1 and std > 1e-8:
        adv = (adv - adv.mean()) / std
    buffer.advantages = adv
    return buffer


def clipped_surrogate(ratio, adv, eps: float, dual_clip: bool = True):
    """Per-sample PPO objective (to be maximised).

    ``min(r A, clip(r) A)``; with ``dual_clip`` the negative-advantage branch
    is additionally floored at ``(1 + eps) A`` so that every sample's
    contribution is bounded by ``(1 + eps) |A|``.
    """
    adv = np.asarray(adv, dtype=np.float64)
    s = ops.minimum(ops.mul(ratio, adv), ops.mul(ops.clip(ratio, 1.0 - eps, 1.0 + eps), adv))
    if dual_clip:
        s = ops.maximum(s, -(1.0 + eps) * np.abs(adv))
    return s


def ppo_loss(nets: PolicyNets, obs, legal, actions, old_log_probs, adv, returns, cfg: PPOConfig):
    """Scalar loss and a dict of diagnostics for one minibatch."""
    b = len(actions)
    logp_all = nets.log_probs(obs, legal)
    onehot = np.zeros((b, nets.n_actions))
    onehot[np.arange(b), actions] = 1.0
    logp = ops.sum(ops.mul(logp_all, onehot), axis=1)
    ratio = ops.exp(ops.sub(logp, old_log_probs))
    surr = clipped_surrogate(ratio, adv, cfg.clip_eps, cfg.dual_clip)
    policy_loss = ops.neg(ops.mean(surr))
    v = nets.value(obs)
    value_loss = ops.mean(ops.square(ops.sub(v, returns)))
    # illegal placeholders hold log p = 0, so p log p vanishes there already
    probs = ops.exp(logp_all)
    entropy = ops.neg(ops.mean(ops.sum(ops.mul(probs, logp_all), axis=1)))
    loss = ops.add(ops.add(policy_loss, ops.mul(value_loss, cfg.value_coef)), ops.mul(entropy, -cfg.entropy_coef))
    r = ratio.values
    stats = {
        "policy_loss": float(policy_loss.values),
        "value_loss": float(value_loss.values),
        "entropy": float(entropy.values),
        "approx_kl": float(np.mean((r - 1.0) - np.log(r))),
        "clip_frac": float(np.mean(np.abs(r - 1.0) > cfg.clip_eps)),
    }
    return loss, stats


def ppo_update(buffer: RolloutBuffer, nets: PolicyNets, opt: Adam, cfg: PPOConfig,
               rng: np.random.Generator) -> dict:
    """``epochs_per_update`` shuffled passes of minibatch Adam on the PPO loss."""
    if len(buffer) == 0:
        raise ValueError("empty rollout buffer")
    if buffer.advantages is None:
        compute_advantages(buffer, cfg.gamma, cfg.gae_lambda)
    data = buffer.arrays()
    adv, ret = buffer.advantages, buffer.returns
    n = len(adv)
    tape = Tape()
    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            i = order[start:start + cfg.minibatch_size]
            with tape:
                loss, stats = ppo_loss(nets, data["obs"][i], data["legal"][i], data["actions"][i],
                                       data["log_probs"][i], adv[i], ret[i], cfg)
            if not np.isfinite(loss.values).all():
                raise NumericalError(f"PPO loss is not finite: {stats}")
            nets.params.zero_grad()
            tape.backward(loss)
            tape.clear()
            opt.step()
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in totals.items()}


@dataclass
class Rollout:
    """Episodes from a ``BatchEnv``; arrays are time-major (T, B) with an ``alive`` mask."""

    rows: np.ndarray
    obs: np.ndarray
    legal: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    alive: np.ndarray
    final_codes: np.ndarray

    def to_buffer(self) -> RolloutBuffer:
        # reorder from time-major to episode-contiguous
        t_idx, b_idx = np.nonzero(self.alive)
        order = np.lexsort((t_idx, b_idx))
        t_idx, b_idx = t_idx[order], b_idx[order]
        lengths = self.alive.sum(axis=0)
        dones = t_idx == lengths[b_idx] - 1
        buf = RolloutBuffer()
        buf.extend(list(self.obs[t_idx, b_idx]), list(self.legal[t_idx, b_idx]), self.actions[t_idx, b_idx],
                   self.log_probs[t_idx, b_idx], self.values[t_idx, b_idx], self.rewards[t_idx, b_idx], dones)
        return buf

    @property
    def episode_returns(self) -> np.ndarray:
        return (self.rewards * self.alive).sum(axis=0)

    @property
    def n_acquired(self) -> np.ndarray:
        return self.alive.sum(axis=0) - 1


def collect_rollout(nets: PolicyNets, env: BatchEnv, rows, rng: np.random.Generator | None = None,
                    greedy: bool = False) -> Rollout:
    rows = np.asarray(rows)
    b, n = len(rows), env.n_views
    codes = np.zeros(b, dtype=np.int64)
    t = np.zeros(b, dtype=np.int64)
    active = np.ones(b, dtype=bool)
    steps = n + 1
    obs_dim = nets.obs_dim
    out = {
        "obs": np.zeros((steps, b, obs_dim)), "legal": np.zeros((steps, b, n + 1), dtype=bool),
        "actions": np.zeros((steps, b), dtype=np.int64), "log_probs": np.zeros((steps, b)),
        "values": np.zeros((steps, b)), "rewards": np.zeros((steps, b)), "alive": np.zeros((steps, b), dtype=bool),
    }
    for step in range(steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        obs = env.observe(rows[idx], codes[idx])
        legal = env.legal(codes[idx], t[idx])
        a, lp, v = nets.act_batch(obs, legal, rng, greedy)
        new_codes, new_t, r, done = env.step(rows[idx], codes[idx], t[idx], a)
        out["obs"][step, idx] = obs
        out["legal"][step, idx] = legal
        out["actions"][step, idx] = a
        out["log_probs"][step, idx] = lp
        out["values"][step, idx] = v
        out["rewards"][step, idx] = r
        out["alive"][step, idx] = True
        codes[idx], t[idx] = new_codes, new_t
        active[idx[done]] = False
    return Rollout(rows, final_codes=codes, **out)


def greedy_scores(nets: PolicyNets, env: BatchEnv) -> dict:
    """Argmax-policy episodes on every study in ``env``: bACCs, mean return, mean count."""
    from viewacq.diagnostics import balanced_accuracy_np

    table = env.table
    rows = np.arange(len(table))
    ro = collect_rollout(nets, env, rows, greedy=True)
    pa, pe = table.pred_as[rows, ro.final_codes], table.pred_ef[rows, ro.final_codes]
    st = table.studies
    b_as = balanced_accuracy_np(pa, st.y_as_class, table.probs.shape[2])
    b_ef = balanced_accuracy_np(pe, st.ef_category, table.probs.shape[3])
    return {"bacc_as": b_as, "bacc_ef": b_ef, "mean_bacc": 0.5 * (b_as + b_ef),
            "mean_return": float(ro.episode_returns.mean()), "mean_count": float(ro.n_acquired.mean())}


def train_selector(train: SubsetOutcomes, val: SubsetOutcomes, cost_lambda: float,
                   cfg: PPOConfig = PPOConfig(), costs=None, history: list | None = None) -> PolicyNets:
    """PPO against the cached frozen-model environment.

    After each epoch the argmax policy is scored on validation (mean bACC);
    the best-scoring epoch's weights are returned (earliest on ties).
    """
    nets = PolicyNets(train.n_views, train.studies.embed_dim, cfg.hidden, cfg.seed)
    opt = Adam(nets.params.tensors(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x99]))
    kw = dict(cost_lambda=cost_lambda, costs=costs, max_acquisitions=cfg.max_acquisitions, dense_scale=cfg.dense_scale)
    env_tr, env_val = BatchEnv(train, **kw), BatchEnv(val, **kw)
    n_eps = cfg.episodes_per_epoch or len(train)
    best_score, best_snap = -np.inf, nets.params.snapshot()
    for epoch in range(cfg.epochs):
        rows = rng.integers(0, len(train), size=n_eps) if cfg.episodes_per_epoch else rng.permutation(len(train))
        ro = collect_rollout(nets, env_tr, rows, rng)
        buf = compute_advantages(ro.to_buffer(), cfg.gamma, cfg.gae_lambda)
        stats = ppo_update(buf, nets, opt, cfg, rng)
        val_stats = greedy_scores(nets, env_val)
        rec = {"epoch": epoch + 1, "train_return": float(ro.episode_returns.mean()),
               "train_count": float(ro.n_acquired.mean()), **stats,
               **{f"val_{k}": v for k, v in val_stats.items()}}
        if history is not None:
            history.append(rec)
        log.info("ppo epoch %d return %.4f val bACC %.4f count %.2f", epoch + 1, rec["train_return"],
                 val_stats["mean_bacc"], val_stats["mean_count"])
        if val_stats["mean_bacc"] > best_score:
            best_score, best_snap = val_stats["mean_bacc"], nets.params.snapshot()
    nets.params.restore(best_snap)
    return nets
