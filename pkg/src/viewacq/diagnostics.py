"""Frozen reward model: masked multi-view transformer with a joint Gaussian head.

Tokens are the N projected view embeddings plus two learned task tokens
(AS, EF).  Unacquired views are zeroed before projection and excluded from
attention in both directions, so nothing about their content reaches the
task tokens.  The head maps the concatenated task tokens to the mean and
Cholesky factor of a bivariate Gaussian over (AS severity, EF fraction).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from viewacq.binfmt import read_checkpoint, write_checkpoint
from viewacq.errors import ConfigError, DataFormatError, LabelError, NumericalError, ShapeError
from viewacq.numerics import autodiff as ops
from viewacq.numerics.autodiff import Tape, Tensor, no_tape
from viewacq.numerics.nn import MLP, Adam, Linear, ParamStore, glorot
from viewacq.probmodel import CategoryGrid, GaussianJoint, discretize_batch, predicted_classes_batch
from viewacq.synthstudy import StudySet

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PDXM"
CHECKPOINT_VERSION = 1
EF_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 3
    heads: int = 4
    token_dim: int = 32
    ff_dim: int = 128
    head_hidden: int = 64
    n_views: int = 5
    embed_dim: int = 32
    n_as_classes: int = 3
    min_std: float = 1e-3
    max_corr: float = 0.95
    per_view_projection: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.token_dim % self.heads:
            raise ConfigError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if min(self.layers, self.heads, self.ff_dim, self.head_hidden, self.n_views, self.embed_dim) < 1:
            raise ConfigError("encoder sizes must be positive")
        if not 0 < self.min_std < 1 or not 0 < self.max_corr < 1:
            raise ConfigError("min_std and max_corr must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class DiagTrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    lambda_as: float = 1.0
    lambda_ef: float = 1.0
    mask_augmentation: bool = True
    max_grad_norm: float = 5.0
    weight_decay: float = 0.0
    patience: int | None = None  # stop after this many epochs without a validation gain
    seed: int = 0

    def __post_init__(self):
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be positive")
        if self.lambda_as < 0 or self.lambda_ef < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs, batch_size and lr must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class DiagnosticModel:
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        self.cfg = cfg
        self.frozen = False
        self.clamp_count = 0
        self.params = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE1]))
        t = cfg.token_dim
        p = self.params
        if cfg.per_view_projection:
            self.proj_w = p.add("proj.w", np.stack([glorot(rng, cfg.embed_dim, t) for _ in range(cfg.n_views)]))
            self.proj_b = p.add("proj.b", np.zeros((cfg.n_views, t)))
        else:
            self.proj = Linear(p, "proj", cfg.embed_dim, t, rng)
        self.view_emb = p.add("view_emb", 0.1 * rng.normal(size=(cfg.n_views, t)))
        self.task_tokens = p.add("task_tokens", 0.1 * rng.normal(size=(2, t)))
        self.blocks = []
        for i in range(cfg.layers):
            blk = {
                "ln1": (p.add(f"l{i}.ln1.g", np.ones(t)), p.add(f"l{i}.ln1.b", np.zeros(t))),
                "q": Linear(p, f"l{i}.q", t, t, rng),
                "k": Linear(p, f"l{i}.k", t, t, rng, bias=False),  # softmax ignores a key bias
                "v": Linear(p, f"l{i}.v", t, t, rng),
                "o": Linear(p, f"l{i}.o", t, t, rng, gain=0.5),
                "ln2": (p.add(f"l{i}.ln2.g", np.ones(t)), p.add(f"l{i}.ln2.b", np.zeros(t))),
                "ff1": Linear(p, f"l{i}.ff1", t, cfg.ff_dim, rng),
                "ff2": Linear(p, f"l{i}.ff2", cfg.ff_dim, t, rng, gain=0.5),
            }
            self.blocks.append(blk)
        self.ln_final = (p.add("lnf.g", np.ones(t)), p.add("lnf.b", np.zeros(t)))
        self.mean_head = MLP(p, "h", (2 * t, cfg.head_hidden, 2), rng, activation="relu")
        self.cov_head = MLP(p, "g", (2 * t, cfg.head_hidden, 3), rng, activation="relu")

    # ------------------------------------------------------------------ forward

    def _check_inputs(self, x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if x.ndim == 2:
            x, mask = x[None], mask[None]
        n, d = self.cfg.n_views, self.cfg.embed_dim
        if x.shape[1:] != (n, d):
            raise ConfigError(f"state is {x.shape[1:]}, model expects ({n}, {d})")
        if mask.shape != x.shape[:2]:
            raise ShapeError(f"mask shape {mask.shape} does not match state {x.shape[:2]}")
        return x, mask

    def encode_arrays(self, x: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Task-token outputs for a batch: x (B, N, D), mask (B, N)."""
        x, mask = self._check_inputs(x, mask)
        b, n, _ = x.shape
        t, h = self.cfg.token_dim, self.cfg.heads
        dh = t // h
        xin = np.where(mask[:, :, None], x, 0.0)
        if self.cfg.per_view_projection:
            # (N, B, D) @ (N, D, t): each view slot has its own read-out
            proj = ops.swapaxes(ops.matmul(np.swapaxes(xin, 0, 1), self.proj_w), 0, 1)
            tok = ops.add(ops.add(proj, self.proj_b), self.view_emb)
        else:
            tok = ops.add(self.proj(xin), self.view_emb)
        task = ops.add(np.zeros((b, 2, t)), self.task_tokens)
        z = ops.concat([task, tok], axis=1)
        length = n + 2
        valid = np.concatenate([np.ones((b, 2), dtype=bool), mask], axis=1)
        key_mask = valid[:, None, None, :]
        query_keep = valid[:, :, None].astype(np.float64)
        scale = 1.0 / math.sqrt(dh)

        def heads(u):
            return ops.swapaxes(ops.reshape(u, (b, length, h, dh)), 1, 2)

        for blk in self.blocks:
            a = ops.layer_norm(z, *blk["ln1"])
            q, k, v = heads(blk["q"](a)), heads(blk["k"](a)), heads(blk["v"](a))
            scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), scale)
            attn = ops.masked_softmax(scores, key_mask)
            ctx = ops.reshape(ops.swapaxes(ops.matmul(attn, v), 1, 2), (b, length, t))
            # masked views do not attend either: their attention output is dropped
            ctx = ops.mul(ctx, query_keep)
            z = ops.add(z, blk["o"](ctx))
            a = ops.layer_norm(z, *blk["ln2"])
            z = ops.add(z, blk["ff2"](ops.relu(blk["ff1"](a))))
        z = ops.layer_norm(z, *self.ln_final)
        return ops.take(z, (slice(None), 0)), ops.take(z, (slice(None), 1))

    def head(self, tok_as: Tensor, tok_ef: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(mu (B,2), std (B,2), corr (B,)) from the task tokens."""
        zc = ops.concat([tok_as, tok_ef], axis=-1)
        mu = ops.sigmoid(self.mean_head(zc))
        u = self.cov_head(zc)
        lo = self.cfg.min_std
        std = ops.add(ops.mul(ops.sigmoid(ops.take(u, (slice(None), slice(0, 2)))), 1.0 - lo), lo)
        corr = ops.mul(ops.tanh(ops.take(u, (slice(None), 2))), self.cfg.max_corr)
        return mu, std, corr

    def forward(self, x: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        return self.head(*self.encode_arrays(x, mask))

    def predict_arrays(self, x: np.ndarray, mask: np.ndarray, batch_size: int = 2048) -> tuple[np.ndarray, np.ndarray]:
        """Means (B, 2) and covariances (B, 2, 2) without recording gradients."""
        x, mask = self._check_inputs(x, mask)
        mus, covs = [], []
        with no_tape():
            for i in range(0, len(x), batch_size):
                mu, std, corr = self.forward(x[i:i + batch_size], mask[i:i + batch_size])
                mus.append(mu.values)
                covs.append(covariance_from(std.values, corr.values))
        if not mus:
            return np.zeros((0, 2)), np.zeros((0, 2, 2))
        return np.concatenate(mus), np.concatenate(covs)

    def encode(self, state) -> tuple[np.ndarray, np.ndarray]:
        """Task-token vectors for one acquisition state (anything with mask/masked_embeddings)."""
        with no_tape():
            a, e = self.encode_arrays(state.masked_embeddings, state.mask)
        return a.values[0], e.values[0]

    def predict_joint(self, state) -> GaussianJoint:
        mu, cov = self.predict_arrays(state.masked_embeddings, state.mask)
        return GaussianJoint(mu[0], cov[0], np.linalg.cholesky(cov[0]))

    # ------------------------------------------------------------------ state

    def freeze(self) -> "DiagnosticModel":
        self.frozen = True
        for t in self.params.tensors():
            t.requires_grad = False
            t.grad = None
        return self

    def save(self, path) -> None:
        write_checkpoint(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                         {"encoder": self.cfg.to_dict(), "frozen": self.frozen, "params": self.params.names()},
                         self.params.flat())

    @classmethod
    def load(cls, path) -> "DiagnosticModel":
        meta, blob = read_checkpoint(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        try:
            model = cls(EncoderConfig(**meta["encoder"]))
        except (KeyError, TypeError) as exc:
            raise DataFormatError("diagnostic checkpoint has a malformed config echo") from exc
        if meta.get("params") != model.params.names():
            raise DataFormatError("checkpoint parameter layout does not match this model")
        model.params.load_flat(blob)
        if meta.get("frozen", True):
            model.freeze()
        return model


def covariance_from(std: np.ndarray, corr: np.ndarray) -> np.ndarray:
    """Sigma = L L^T with L = [[s1, 0], [rho s2, sqrt(1-rho^2) s2]]; exactly symmetric."""
    s1, s2 = std[..., 0], std[..., 1]
    off = corr * s1 * s2
    cov = np.empty(std.shape[:-1] + (2, 2))
    cov[..., 0, 0] = s1 * s1
    cov[..., 1, 1] = s2 * s2
    cov[..., 0, 1] = off
    cov[..., 1, 0] = off
    return cov


# ---------------------------------------------------------------------- losses


def as_integration_edges(n_classes: int) -> np.ndarray:
    e = np.linspace(0.0, 1.0, n_classes + 1)
    e[0], e[-1] = -np.inf, np.inf
    return e


def as_class_log_probs(mu_as, std_as, n_classes: int = 3) -> Tensor:
    """log p_hat over K uniform AS bins on [0, 1] (edge bins open), shape (B, K)."""
    return ops.gaussian_bin_log_probs(mu_as, std_as, as_integration_edges(n_classes))


def loss_as_terms(mu_as, std_as, classes, n_classes: int = 3) -> Tensor:
    classes = np.asarray(classes, dtype=np.int64)
    if (classes < 0).any() or (classes >= n_classes).any():
        raise LabelError(f"AS class outside 0..{n_classes - 1}")
    logp = as_class_log_probs(mu_as, std_as, n_classes)
    return ops.neg(ops.take(logp, (np.arange(len(classes)), classes)))


def loss_ef_terms(mu_ef, var_ef, y_ef, counter=None) -> Tensor:
    """Gaussian NLL of EF under its marginal; variances below 1e-12 are clamped."""
    var_ef = ops.as_tensor(var_ef)
    low = var_ef.values < EF_VAR_FLOOR
    if low.any():
        n = int(low.sum())
        if counter is not None:
            counter.clamp_count += n
        log.warning("clamped %d EF variances below %.0e", n, EF_VAR_FLOOR)
        var_ef = ops.clip(var_ef, EF_VAR_FLOOR, np.inf)
    resid = ops.sub(np.asarray(y_ef, dtype=np.float64), mu_ef)
    return ops.mul(ops.add(ops.log(ops.mul(var_ef, 2.0 * math.pi)), ops.div(ops.square(resid), var_ef)), 0.5)


def loss_total_terms(mu: Tensor, std: Tensor, y_as_class, y_ef, lambda_as: float = 1.0,
                     lambda_ef: float = 1.0, n_classes: int = 3, counter=None) -> Tensor:
    mu_as = ops.take(mu, (slice(None), 0))
    mu_ef = ops.take(mu, (slice(None), 1))
    std_as = ops.take(std, (slice(None), 0))
    std_ef = ops.take(std, (slice(None), 1))
    terms = []
    if lambda_as:
        terms.append(ops.mul(loss_as_terms(mu_as, std_as, y_as_class, n_classes), lambda_as))
    if lambda_ef:
        terms.append(ops.mul(loss_ef_terms(mu_ef, ops.square(std_ef), y_ef, counter), lambda_ef))
    if not terms:
        return ops.mul(mu_as, 0.0)
    return terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])


def _marginal(joint: GaussianJoint, i: int) -> tuple[np.ndarray, np.ndarray]:
    return np.array([joint.mu[i]]), np.array([math.sqrt(joint.sigma[i, i])])


def loss_as(joint: GaussianJoint, y_as_class: int, n_classes: int = 3) -> float:
    """-log of the AS marginal's mass in the true class bin."""
    mu, sd = _marginal(joint, 0)
    return float(loss_as_terms(mu, sd, [y_as_class], n_classes).values[0])


def loss_ef(joint: GaussianJoint, y_ef: float) -> float:
    mu, _ = _marginal(joint, 1)
    return float(loss_ef_terms(mu, np.array([joint.sigma[1, 1]]), [y_ef]).values[0])


def loss_total(joint: GaussianJoint, y_as_class: int, y_ef: float, lambda_as: float = 1.0,
               lambda_ef: float = 1.0, n_classes: int = 3) -> float:
    if lambda_as < 0 or lambda_ef < 0:
        raise ConfigError("loss weights must be non-negative")
    total = 0.0
    if lambda_as:
        total += lambda_as * loss_as(joint, y_as_class, n_classes)
    if lambda_ef:
        total += lambda_ef * loss_ef(joint, y_ef)
    return total


# ---------------------------------------------------------------------- training


def balanced_accuracy_np(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    recalls = [np.mean(pred[labels == c] == c) for c in range(n_classes) if (labels == c).any()]
    return float(np.mean(recalls))


def evaluate_full(model: DiagnosticModel, studies: StudySet, masks: np.ndarray | None = None,
                  grid: CategoryGrid | None = None) -> dict:
    """Mean bACC of the model's argmax predictions on given (default: full) masks."""
    grid = grid or CategoryGrid.uniform_as(model.cfg.n_as_classes)
    if masks is None:
        masks = np.ones(studies.embeddings.shape[:2], dtype=bool)
    mu, cov = model.predict_arrays(studies.embeddings, masks)
    probs, _ = discretize_batch(mu, cov, grid)
    pa, pe = predicted_classes_batch(probs)
    b_as = balanced_accuracy_np(pa, studies.y_as_class, grid.n_as)
    b_ef = balanced_accuracy_np(pe, studies.ef_category, grid.n_ef)
    return {"bacc_as": b_as, "bacc_ef": b_ef, "mean_bacc": 0.5 * (b_as + b_ef)}


def random_nonempty_masks(rng: np.random.Generator, n: int, n_views: int) -> np.ndarray:
    """Uniform draws over the 2^N - 1 non-empty view subsets."""
    codes = rng.integers(1, 2 ** n_views, size=n)
    return ((codes[:, None] >> np.arange(n_views)[None, :]) & 1).astype(bool)


def train_diagnostic(train: StudySet, val: StudySet, enc_cfg: EncoderConfig | None = None,
                     cfg: DiagTrainConfig = DiagTrainConfig(), history: list | None = None) -> DiagnosticModel:
    """Minibatch Adam on the weighted NLL; returns the best-validation model, frozen.

    With ``mask_augmentation`` each epoch presents every study twice: fully
    observed and under a uniformly drawn non-empty view subset.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if enc_cfg is None:
        enc_cfg = EncoderConfig(n_views=train.n_views, embed_dim=train.embed_dim, seed=cfg.seed)
    model = DiagnosticModel(enc_cfg)
    opt = Adam(model.params.tensors(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD7]))
    n, nv = len(train), train.n_views
    best_score, best_snap, best_epoch = -np.inf, model.params.snapshot(), 0
    tape = Tape()
    for epoch in range(cfg.epochs):
        idx = np.arange(n)
        masks = np.ones((n, nv), dtype=bool)
        if cfg.mask_augmentation:
            idx = np.concatenate([idx, idx])
            masks = np.concatenate([masks, random_nonempty_masks(rng, n, nv)])
        order = rng.permutation(len(idx))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            rows = idx[sel]
            with tape:
                mu, std, _ = model.forward(train.embeddings[rows], masks[sel])
                terms = loss_total_terms(mu, std, train.y_as_class[rows], train.y_ef[rows],
                                         cfg.lambda_as, cfg.lambda_ef, enc_cfg.n_as_classes, model)
                loss = ops.mean(terms)
            if not np.isfinite(loss.values).all():
                raise NumericalError(f"diagnostic loss diverged at epoch {epoch + 1}")
            model.params.zero_grad()
            tape.backward(loss)
            tape.clear()
            opt.step()
            total += float(loss.values) * len(sel)
            count += len(sel)
        score = evaluate_full(model, val)["mean_bacc"]
        if history is not None:
            history.append({"epoch": epoch + 1, "train_loss": total / count, "val_mean_bacc": score})
        log.info("diag epoch %d loss %.4f val mean bACC %.4f", epoch + 1, total / count, score)
        if score > best_score:
            best_score, best_snap, best_epoch = score, model.params.snapshot(), epoch
        elif cfg.patience is not None and epoch - best_epoch >= cfg.patience:
            break
    model.params.restore(best_snap)
    return model.freeze()
