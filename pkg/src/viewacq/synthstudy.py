"""Synthetic multi-view studies standing in for frozen per-view video embeddings.

Each study has one latent AS severity in [0, 1] and one LVEF fraction.  View
``v`` of a study is a noisy linear read-out of both latents along fixed
per-view directions, scaled by a per-patient quality multiplier:

    e_v = q_v * (w_as[v] * A_v * g_as(y_as) + w_ef[v] * B_v * g_ef(y_ef)
                 + marker * C_v) + noise

``g_as`` / ``g_ef`` are affine maps that express a latent in units of its
class-bin width, so a unit of signal is equally informative for both tasks.
``C_v`` is a label-free direction whose amplitude reveals the view's quality.
All directions are mutually orthonormal when 3N <= D.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from viewacq.binfmt import canonical_json, check_magic
from viewacq.errors import (
    ChecksumError,
    ConfigError,
    DataFormatError,
    ShapeError,
    TruncatedFileError,
    VersionMismatchError,
)

VIEW_NAMES = ("AP2", "AP3", "AP4", "PLAX", "PSAX-Ao")
EF_CATEGORY_NAMES = ("HFrEF", "HFmEF", "HFpEF")
EF_EDGES = (0.40, 0.50)
# latent EF is drawn uniformly inside one of these ranges, one range per category
EF_RANGES = ((0.15, 0.40), (0.40, 0.50), (0.50, 0.75))
EF_CENTER = 0.45
EF_UNIT = 0.10

# (w_AS, w_EF): parasternal views lean AS, apical views lean EF, AP3 mixed
DEFAULT_VIEW_SIGNAL = ((0.15, 0.80), (0.50, 0.50), (0.10, 1.00), (0.75, 0.20), (1.00, 0.00))

DATASET_MAGIC = b"PACQ"
DATASET_VERSION = 1


def as_class_of(y_as_value, n_classes: int = 3) -> np.ndarray:
    """Uniform-bin class index of a latent severity in [0, 1]."""
    y = np.asarray(y_as_value, dtype=np.float64)
    return np.minimum((y * n_classes).astype(np.int64), n_classes - 1)


def ef_category_of(y_ef) -> np.ndarray:
    """0 = HFrEF [0, .40), 1 = HFmEF [.40, .50), 2 = HFpEF [.50, 1]."""
    return np.searchsorted(np.asarray(EF_EDGES), np.asarray(y_ef, dtype=np.float64), side="right").astype(np.int64)


@dataclass(frozen=True)
class GeneratorConfig:
    n_views: int = 5
    embed_dim: int = 32
    n_patients: int = 5000
    view_signal: tuple = DEFAULT_VIEW_SIGNAL
    quality_spread: float = 0.3
    noise_std: float = 1.0
    quality_marker: float = 1.0
    n_as_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "view_signal", tuple(tuple(float(x) for x in p) for p in self.view_signal))
        self.validate()

    def validate(self) -> None:
        if self.n_views < 2 or self.embed_dim < 2:
            raise ConfigError("need n_views >= 2 and embed_dim >= 2")
        if not self.noise_std > 0:
            raise ConfigError("noise_std must be positive")
        if self.quality_spread < 0:
            raise ConfigError("quality_spread must be >= 0")
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        if self.n_as_classes < 2:
            raise ConfigError("need at least two AS classes")
        if len(self.view_signal) != self.n_views or any(len(p) != 2 for p in self.view_signal):
            raise ConfigError("view_signal needs one (w_AS, w_EF) pair per view")
        w = np.asarray(self.view_signal)
        if (w < 0).any() or (w > 1).any():
            raise ConfigError("view signal strengths must lie in [0, 1]")
        if not (w[:, 0] > 0).any() or not (w[:, 1] > 0).any():
            raise ConfigError("at least one view must carry AS signal and one EF signal")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["view_signal"] = [list(p) for p in self.view_signal]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown generator config keys: {sorted(extra)}")
        return cls(**d)

    def replace(self, **kw) -> "GeneratorConfig":
        return dataclasses.replace(self, **kw)

    @property
    def view_weights(self) -> np.ndarray:
        return np.asarray(self.view_signal, dtype=np.float64)


def as_scale(y_as_value, n_classes: int = 3):
    """Affine map of latent AS severity into bin-width units, centred at 0.5."""
    return (np.asarray(y_as_value, dtype=np.float64) - 0.5) * n_classes


def ef_scale(y_ef):
    return (np.asarray(y_ef, dtype=np.float64) - EF_CENTER) / EF_UNIT


def view_directions(cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-view unit directions (A, B, C), each of shape (N, D)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD1]))
    n, d = cfg.n_views, cfg.embed_dim
    raw = rng.normal(size=(d, 3 * n))
    if 3 * n <= d:
        q, _ = np.linalg.qr(raw)
        dirs = q.T
    else:
        dirs = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    return dirs[:n].copy(), dirs[n:2 * n].copy(), dirs[2 * n:].copy()


def latent_prior_moments(cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of (y_as_value, y_ef) under the generator."""
    mean_as, var_as = 0.5, 1.0 / 12.0
    lo = np.array([r[0] for r in EF_RANGES])
    hi = np.array([r[1] for r in EF_RANGES])
    mids = (lo + hi) / 2
    mean_ef = mids.mean()
    second = (mids ** 2 + (hi - lo) ** 2 / 12.0).mean()
    cov = np.diag([var_as, second - mean_ef ** 2])
    return np.array([mean_as, mean_ef]), cov


@dataclass(frozen=True)
class StudyRecord:
    study_id: int
    embeddings: np.ndarray
    y_as_value: float
    y_as_class: int
    y_ef: float
    qualities: np.ndarray

    @property
    def ef_category(self) -> int:
        return int(ef_category_of(self.y_ef))


@dataclass
class StudySet:
    """Column-oriented collection of studies; iterating yields ``StudyRecord``."""

    ids: np.ndarray
    embeddings: np.ndarray  # (S, N, D)
    y_as_value: np.ndarray
    y_as_class: np.ndarray
    y_ef: np.ndarray
    qualities: np.ndarray  # (S, N)
    config: GeneratorConfig | None = None
    ef_category: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.y_as_value = np.asarray(self.y_as_value, dtype=np.float64)
        self.y_as_class = np.asarray(self.y_as_class, dtype=np.int64)
        self.y_ef = np.asarray(self.y_ef, dtype=np.float64)
        self.qualities = np.asarray(self.qualities, dtype=np.float64)
        self.ef_category = ef_category_of(self.y_ef)
        if self.embeddings.ndim != 3:
            raise ShapeError("embeddings must be (studies, views, dim)")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[StudyRecord]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> StudyRecord:
        return StudyRecord(
            study_id=int(self.ids[i]),
            embeddings=self.embeddings[i],
            y_as_value=float(self.y_as_value[i]),
            y_as_class=int(self.y_as_class[i]),
            y_ef=float(self.y_ef[i]),
            qualities=self.qualities[i],
        )

    @property
    def n_views(self) -> int:
        return self.embeddings.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[2]

    def take(self, index) -> "StudySet":
        index = np.asarray(index)
        return StudySet(self.ids[index], self.embeddings[index], self.y_as_value[index],
                        self.y_as_class[index], self.y_ef[index], self.qualities[index], self.config)

    def select_ids(self, ids: Sequence[int]) -> "StudySet":
        pos = {int(s): i for i, s in enumerate(self.ids)}
        try:
            index = [pos[int(s)] for s in ids]
        except KeyError as exc:
            raise DataFormatError(f"study id {exc.args[0]} not in dataset") from exc
        return self.take(np.asarray(index, dtype=np.int64))

    @classmethod
    def from_records(cls, records: Sequence[StudyRecord], config: GeneratorConfig | None = None) -> "StudySet":
        if not records:
            raise ValueError("no records")
        return cls(
            ids=[r.study_id for r in records],
            embeddings=np.stack([r.embeddings for r in records]),
            y_as_value=[r.y_as_value for r in records],
            y_as_class=[r.y_as_class for r in records],
            y_ef=[r.y_ef for r in records],
            qualities=np.stack([r.qualities for r in records]),
            config=config,
        )

    def equals(self, other: "StudySet") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("ids", "embeddings", "y_as_value", "y_as_class", "y_ef", "qualities")
        )


def sample_latents(rng: np.random.Generator, n: int, n_as_classes: int = 3):
    """Draw (y_as_value, y_ef); each AS class and EF category is equally likely."""
    y_as = rng.uniform(0.0, 1.0, size=n)
    cat = rng.integers(0, len(EF_RANGES), size=n)
    lo = np.array([r[0] for r in EF_RANGES])[cat]
    hi = np.array([r[1] for r in EF_RANGES])[cat]
    y_ef = lo + (hi - lo) * rng.uniform(0.0, 1.0, size=n)
    return y_as, y_ef


def render_embeddings(cfg: GeneratorConfig, y_as, y_ef, qualities, noise) -> np.ndarray:
    """Noise-added embeddings for given latents; ``noise`` is (S, N, D) standard normal."""
    a, b, c = view_directions(cfg)
    w = cfg.view_weights
    sa = as_scale(y_as, cfg.n_as_classes)[:, None, None]
    se = ef_scale(y_ef)[:, None, None]
    signal = (w[None, :, 0, None] * a[None] * sa
              + w[None, :, 1, None] * b[None] * se
              + cfg.quality_marker * c[None])
    return qualities[:, :, None] * signal + cfg.noise_std * noise


def generate_dataset(cfg: GeneratorConfig) -> StudySet:
    """Deterministic synthetic dataset for ``cfg`` (same config -> identical arrays)."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A]))
    n, nv, d = cfg.n_patients, cfg.n_views, cfg.embed_dim
    y_as, y_ef = sample_latents(rng, n, cfg.n_as_classes)
    qualities = np.clip(1.0 + cfg.quality_spread * rng.normal(size=(n, nv)), 0.0, 2.0)
    noise = rng.normal(size=(n, nv, d))
    emb = render_embeddings(cfg, y_as, y_ef, qualities, noise)
    return StudySet(
        ids=np.arange(n, dtype=np.int64),
        embeddings=emb,
        y_as_value=y_as,
        y_as_class=as_class_of(y_as, cfg.n_as_classes),
        y_ef=y_ef,
        qualities=qualities,
        config=cfg,
    )


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    val: list
    test: list

    def to_dict(self) -> dict:
        return {"train": list(map(int, self.train)), "val": list(map(int, self.val)),
                "test": list(map(int, self.test))}


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    return n - n_val - n_test, n_val, n_test


def split_dataset(study_ids, ratios: Sequence[float] = (0.70, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle followed by a contiguous train/val/test cut.

    ``study_ids`` may be a ``StudySet`` or any sequence of ids.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = np.asarray(study_ids.ids if isinstance(study_ids, StudySet) else list(study_ids), dtype=np.int64)
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B]))
    order = ids[rng.permutation(len(ids))]
    return DatasetSplit(
        train=order[:n_train].tolist(),
        val=order[n_train:n_train + n_val].tolist(),
        test=order[n_train + n_val:].tolist(),
    )


def save_split(split: DatasetSplit, path, seed: int | None = None, ratios=None) -> None:
    doc = split.to_dict()
    doc["meta"] = {"seed": seed, "ratios": list(ratios) if ratios is not None else None}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_split(path) -> DatasetSplit:
    try:
        doc = json.loads(Path(path).read_text())
        return DatasetSplit(train=doc["train"], val=doc["val"], test=doc["test"])
    except (ValueError, KeyError) as exc:
        raise DataFormatError(f"malformed split file {path}") from exc


# --------------------------------------------------------------------------
# persistence


@dataclass(frozen=True)
class DatasetHeader:
    version: int
    n_views: int
    embed_dim: int
    n_as_classes: int
    n_studies: int
    config: dict


def _record_dtype(n_views: int, embed_dim: int) -> np.dtype:
    return np.dtype([
        ("id", "<i8"),
        ("y_as_value", "<f8"),
        ("y_as_class", "<i8"),
        ("y_ef", "<f8"),
        ("qualities", "<f8", (n_views,)),
        ("embeddings", "<f8", (n_views, embed_dim)),
    ])


_FIXED = "<HIIIQI"  # version, N, D, K, n_studies, config_len


def save_dataset(studies: StudySet, path) -> None:
    cfg = studies.config.to_dict() if studies.config is not None else {}
    k = studies.config.n_as_classes if studies.config is not None else int(studies.y_as_class.max(initial=2)) + 1
    cfg_bytes = canonical_json(cfg)
    s, nv, d = studies.embeddings.shape
    rec = np.zeros(s, dtype=_record_dtype(nv, d))
    rec["id"] = studies.ids
    rec["y_as_value"] = studies.y_as_value
    rec["y_as_class"] = studies.y_as_class
    rec["y_ef"] = studies.y_ef
    rec["qualities"] = studies.qualities
    rec["embeddings"] = studies.embeddings
    head = DATASET_MAGIC + struct.pack(_FIXED, DATASET_VERSION, nv, d, k, s, len(cfg_bytes)) + cfg_bytes
    body = rec.tobytes()
    crc = zlib.crc32(body, zlib.crc32(head))
    Path(path).write_bytes(head + struct.pack("<I", crc) + body)


def _parse_header(data: bytes) -> tuple[DatasetHeader, int, int]:
    check_magic(data, DATASET_MAGIC)
    pos = len(DATASET_MAGIC)
    size = struct.calcsize(_FIXED)
    if len(data) < pos + 2:
        raise TruncatedFileError("dataset header truncated")
    (version,) = struct.unpack_from("<H", data, pos)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset version {version}, reader supports {DATASET_VERSION}")
    if len(data) < pos + size:
        raise TruncatedFileError("dataset header truncated")
    version, nv, d, k, s, cfg_len = struct.unpack_from(_FIXED, data, pos)
    pos += size
    if len(data) < pos + cfg_len + 4:
        raise TruncatedFileError("dataset header truncated")
    try:
        cfg = json.loads(data[pos:pos + cfg_len].decode("utf-8"))
    except ValueError as exc:
        raise DataFormatError("dataset config echo is not valid JSON") from exc
    pos += cfg_len
    (crc,) = struct.unpack_from("<I", data, pos)
    return DatasetHeader(version, nv, d, k, s, cfg), pos, crc


def read_dataset_header(path) -> DatasetHeader:
    with open(path, "rb") as fh:
        data = fh.read(1 << 16)
    header, _, _ = _parse_header(data)
    return header


def load_dataset(path, expect_embed_dim: int | None = None) -> StudySet:
    """Inverse of ``save_dataset``; bit-exact round trip.

    Raises ``DataFormatError`` (bad magic), ``VersionMismatchError``,
    ``TruncatedFileError`` or ``ChecksumError``; nothing is returned on failure.
    """
    data = Path(path).read_bytes()
    header, pos, crc = _parse_header(data)
    if expect_embed_dim is not None and header.embed_dim != expect_embed_dim:
        raise ShapeError(f"dataset embed_dim {header.embed_dim} != expected {expect_embed_dim}")
    dtype = _record_dtype(header.n_views, header.embed_dim)
    body = data[pos + 4:]
    need = dtype.itemsize * header.n_studies
    if len(body) < need:
        raise TruncatedFileError(f"dataset body has {len(body)} bytes, expected {need}")
    if len(body) > need:
        raise DataFormatError("trailing bytes after dataset records")
    if zlib.crc32(body, zlib.crc32(data[:pos])) != crc:
        raise ChecksumError("dataset CRC32 mismatch")
    rec = np.frombuffer(body, dtype=dtype)
    config = GeneratorConfig.from_dict(header.config) if header.config else None
    return StudySet(
        ids=rec["id"].astype(np.int64),
        embeddings=rec["embeddings"].astype(np.float64),
        y_as_value=rec["y_as_value"].astype(np.float64),
        y_as_class=rec["y_as_class"].astype(np.int64),
        y_ef=rec["y_ef"].astype(np.float64),
        qualities=rec["qualities"].astype(np.float64),
        config=config,
    )
