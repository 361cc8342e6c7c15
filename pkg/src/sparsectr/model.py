"""End-to-end CTR model: embeddings, stacked sparse blocks, candidate prediction head."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import BRANCHES, EvoAttentionConfig, SparseLayout
from .block import BlockWeights, sparse_block
from .chunking import ChunkPartition, time_chunk
from .data import ListwiseSample
from .temporal import TemporalBiasParams
from .tensor import Tensor, flop_tag

CHECKPOINT_FORMAT = "sparsectr-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Model configuration is inconsistent or does not match the data."""


@dataclass
class ModelConfig:
    d: int = 32
    num_heads: int = 8
    num_layers: int = 2
    num_behaviors: int = 64
    num_candidates: int = 4
    num_chunks: int = 8
    transition_m: int = 2
    local_w: int = 8
    behavior_fields: tuple[str, ...] = ("item", "category")
    candidate_fields: tuple[str, ...] = ("item", "category", "hour", "weekend")
    user_fields: tuple[str, ...] = ("user_bucket", "user_segment")
    vocab: dict[str, int] = field(default_factory=dict)
    num_candidate_numeric: int = 1
    mlp_hidden: int | None = None
    candidate_gap_seconds: int = 3600
    attention: str = "evo"
    branches: tuple[bool, bool, bool] = (True, True, True)
    bias_terms: tuple[bool, bool, bool] = (True, True, True)
    per_block_slopes: bool = False

    def __post_init__(self):
        for name in ("behavior_fields", "candidate_fields", "user_fields", "branches", "bias_terms"):
            setattr(self, name, tuple(getattr(self, name)))
        self.vocab = dict(self.vocab)

    def validate(self):
        try:
            self.attention_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.num_layers < 1 or self.num_behaviors < 1 or self.num_candidates < 1:
            raise ConfigError("num_layers, num_behaviors and num_candidates must be >= 1")
        if self.attention not in ("evo", "full"):
            raise ConfigError(f"attention must be 'evo' or 'full', got {self.attention!r}")
        if not self.user_fields:
            raise ConfigError("at least one user field is required")
        needed = set(self.behavior_fields) | set(self.candidate_fields) | set(self.user_fields)
        missing = sorted(needed - set(self.vocab))
        if missing:
            raise ConfigError(f"vocab sizes missing for fields {missing}")
        if any(v < 1 for v in self.vocab.values()):
            raise ConfigError("vocab sizes must be >= 1")

    def attention_config(self) -> EvoAttentionConfig:
        return EvoAttentionConfig(self.d, self.num_heads, self.num_chunks, self.transition_m, self.local_w,
                                  self.branches)

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.d

    @property
    def n(self) -> int:
        return self.num_behaviors + self.num_candidates

    def to_dict(self) -> dict:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @classmethod
    def from_dict(cls, obj: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass
class ModelParams:
    embeddings: dict[str, Tensor]
    behavior_proj: Tensor  # [|fields_b| d, d]
    candidate_proj: Tensor  # [|fields_c| d + numeric, d]
    blocks: list[BlockWeights]
    slopes: list[TemporalBiasParams]  # one shared set, or one per block
    w4: Tensor  # [d, d]
    w5: Tensor  # [|U| d, d]
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> ModelParams:
        cfg.validate()
        rng = np.random.default_rng(seed)
        d = cfg.d
        tables = {}
        for name in sorted(set(cfg.behavior_fields) | set(cfg.candidate_fields) | set(cfg.user_fields)):
            tables[name] = T.parameter(rng.normal(0.0, 0.1, size=(cfg.vocab[name], d)))
        user_dim = len(cfg.user_fields) * d
        b_in = len(cfg.behavior_fields) * d
        c_in = len(cfg.candidate_fields) * d + cfg.num_candidate_numeric
        acfg = cfg.attention_config()
        blocks = [BlockWeights.init(rng, acfg, user_dim) for _ in range(cfg.num_layers)]
        n_slopes = cfg.num_layers if cfg.per_block_slopes else 1
        slopes = [TemporalBiasParams.init(cfg.num_heads, cfg.bias_terms) for _ in range(n_slopes)]
        h = cfg.hidden
        return cls(
            embeddings=tables,
            behavior_proj=T.glorot(rng, b_in, d),
            candidate_proj=T.glorot(rng, c_in, d),
            blocks=blocks,
            slopes=slopes,
            w4=T.glorot(rng, d, d),
            w5=T.glorot(rng, user_dim, d),
            mlp_w1=T.glorot(rng, d, h),
            mlp_b1=T.parameter(np.zeros(h)),
            mlp_w2=T.glorot(rng, h, 1),
            mlp_b2=T.parameter(np.zeros(1)),
        )

    def named(self) -> dict[str, Tensor]:
        out = {f"embedding.{k}": v for k, v in sorted(self.embeddings.items())}
        out["behavior_proj"] = self.behavior_proj
        out["candidate_proj"] = self.candidate_proj
        for i, b in enumerate(self.blocks):
            out.update(b.named(f"block{i}"))
        for i, s in enumerate(self.slopes):
            out.update(s.named(f"slopes{i}"))
        for k in ("w4", "w5", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
            out[k] = getattr(self, k)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def slopes_for(self, layer: int) -> TemporalBiasParams:
        return self.slopes[layer if len(self.slopes) > 1 else 0]


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


@dataclass
class Batch:
    user: np.ndarray  # [N, |U|]
    behaviors: dict[str, np.ndarray]  # field -> [N, L]
    times: np.ndarray  # [N, L]
    candidates: dict[str, np.ndarray]  # field -> [N, C]
    numeric: np.ndarray  # [N, C, S]
    candidate_times: np.ndarray  # [N, C]
    labels: np.ndarray  # [N, C]
    partitions: list[ChunkPartition]

    @property
    def size(self) -> int:
        return self.times.shape[0]


def candidate_time(sample: ListwiseSample, gap_seconds: int) -> int:
    if sample.exposure_time:
        return int(sample.exposure_time)
    valid = [t for t in sample.times if t > 0]
    return (max(valid) if valid else 0) + gap_seconds


def collate(samples: list[ListwiseSample], cfg: ModelConfig) -> Batch:
    if not samples:
        raise ConfigError("cannot collate an empty batch")
    n_cand = samples[0].num_candidates
    for s in samples:
        if s.num_behaviors != cfg.num_behaviors:
            raise ConfigError(f"sample has {s.num_behaviors} behaviors, config expects {cfg.num_behaviors}")
        if s.num_candidates != n_cand:
            raise ConfigError("all samples in a batch need the same number of candidates")
        if len(s.user) != len(cfg.user_fields):
            raise ConfigError(f"sample has {len(s.user)} user features, config expects {len(cfg.user_fields)}")
        for f in cfg.behavior_fields:
            if f not in s.behaviors:
                raise ConfigError(f"sample lacks behavior field {f!r}")
        for f in cfg.candidate_fields:
            if f not in s.candidates:
                raise ConfigError(f"sample lacks candidate field {f!r}")
        if any(len(row) != cfg.num_candidate_numeric for row in s.candidate_numeric):
            raise ConfigError(f"candidate numeric features must have width {cfg.num_candidate_numeric}")
    times = np.array([s.times for s in samples], dtype=np.int64)
    return Batch(
        user=np.array([s.user for s in samples], dtype=np.int64),
        behaviors={f: np.array([s.behaviors[f] for s in samples], dtype=np.int64) for f in cfg.behavior_fields},
        times=times,
        candidates={f: np.array([s.candidates[f] for s in samples], dtype=np.int64) for f in cfg.candidate_fields},
        numeric=np.array([s.candidate_numeric for s in samples], dtype=np.float64).reshape(len(samples), n_cand, -1),
        candidate_times=np.array([[candidate_time(s, cfg.candidate_gap_seconds)] * n_cand for s in samples],
                                 dtype=np.int64),
        labels=np.array([s.labels for s in samples], dtype=np.float64),
        partitions=[time_chunk(t, cfg.num_chunks) for t in times],
    )


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


def embed(batch: Batch, params: ModelParams, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Mixed-sequence embeddings E_S [N, n, d] and user vector e_U [N, |U| d]."""
    tab = params.embeddings
    with flop_tag("embed"):
        e_b = T.matmul(T.concat([T.embedding_lookup(tab[f], batch.behaviors[f]) for f in cfg.behavior_fields], -1),
                       params.behavior_proj)
        parts = [T.embedding_lookup(tab[f], batch.candidates[f]) for f in cfg.candidate_fields]
        if cfg.num_candidate_numeric:
            parts.append(T.Tensor(batch.numeric))
        e_c = T.matmul(T.concat(parts, -1), params.candidate_proj)
        e_s = T.concat([e_b, e_c], axis=1)
        users = [T.embedding_lookup(tab[f], batch.user[:, i]) for i, f in enumerate(cfg.user_fields)]
        e_u = T.concat(users, -1)
    return e_s, e_u


def layout_for(batch: Batch, cfg: ModelConfig) -> SparseLayout:
    return SparseLayout.build(batch.times, batch.candidate_times, batch.partitions, cfg.attention_config())


def encode(batch: Batch, params: ModelParams, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Run embeddings and every block; returns (final sequence states, e_U)."""
    x, e_u = embed(batch, params, cfg)
    layout = layout_for(batch, cfg)
    if cfg.attention == "full":
        wanted = ("full",)
    else:
        wanted = tuple(b for b, on in zip(BRANCHES, cfg.branches) if on)
    biases = [layout.biases(s, wanted) for s in params.slopes]
    for i, block in enumerate(params.blocks):
        with flop_tag(f"block{i}"):
            x = sparse_block(x, e_u, layout, block, biases[i if len(biases) > 1 else 0], cfg.attention)
    return x, e_u


def forward(batch: Batch, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Click probabilities [N, C]."""
    x, e_u = encode(batch, params, cfg)
    n_batch = batch.size
    e_c = T.getitem(x, (slice(None), slice(cfg.num_behaviors, None)))
    with flop_tag("head"):
        cand = T.relu(T.matmul(e_c, params.w4))
        user = T.reshape(T.sigmoid(T.matmul(e_u, params.w5)), (n_batch, 1, cfg.d))
        z = T.mul(cand, user)
        hidden = T.relu(T.add(T.matmul(z, params.mlp_w1), params.mlp_b1))
        logit = T.add(T.matmul(hidden, params.mlp_w2), params.mlp_b2)
        return T.sigmoid(T.reshape(logit, (n_batch, -1)))


def loss(pred: Tensor, labels) -> Tensor:
    return T.bce_loss(pred, labels)


def embed_sample(sample: ListwiseSample, params: ModelParams, cfg: ModelConfig):
    """Single-sample view: (E_S [n, d], e_U [|U| d], times [n])."""
    batch = collate([sample], cfg)
    e_s, e_u = embed(batch, params, cfg)
    times = np.concatenate([batch.times[0], batch.candidate_times[0]])
    return T.reshape(e_s, e_s.shape[1:]), T.reshape(e_u, e_u.shape[1:]), times


def predict(samples: list[ListwiseSample], params: ModelParams, cfg: ModelConfig, batch_size: int = 64) -> list[np.ndarray]:
    """Scores per sample (one array of |C| probabilities each)."""
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        groups: dict[int, list[int]] = {}
        for j, s in enumerate(chunk):
            groups.setdefault(s.num_candidates, []).append(j)
        scores: list = [None] * len(chunk)
        for idx in groups.values():
            pred = forward(collate([chunk[j] for j in idx], cfg), params, cfg).data
            for row, j in enumerate(idx):
                scores[j] = pred[row].copy()
        out.extend(scores)
    return out


# --------------------------------------------------------------------------
# config inference and checkpoints
# --------------------------------------------------------------------------


def fill_from_data(cfg: ModelConfig, samples: list[ListwiseSample]) -> ModelConfig:
    """Fill vocab sizes and sequence dimensions the config leaves unset, from the data."""
    if not samples:
        raise ConfigError("cannot infer dimensions from an empty dataset")
    vocab = dict(cfg.vocab)
    for f in set(cfg.behavior_fields) | set(cfg.candidate_fields) | set(cfg.user_fields):
        if f in vocab:
            continue
        top = 0
        for s in samples:
            if f in s.behaviors:
                top = max(top, max(s.behaviors[f], default=0))
            if f in s.candidates:
                top = max(top, max(s.candidates[f], default=0))
            if f in cfg.user_fields:
                top = max(top, s.user[cfg.user_fields.index(f)])
        vocab[f] = top + 1
    out = ModelConfig.from_dict({**cfg.to_dict(), "vocab": vocab})
    first = samples[0]
    out.num_behaviors = first.num_behaviors
    out.num_candidates = first.num_candidates
    out.num_candidate_numeric = len(first.candidate_numeric[0])
    out.validate()
    return out


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams):
    """Write a zip container: ``meta.json`` plus one ``.npy`` per parameter.

    Entries carry a fixed timestamp so identical parameters give identical bytes.
    """
    named = params.named()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "parameters": {k: list(v.shape) for k, v in named.items()},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name, t in named.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(t.data), allow_pickle=False)
            _write_entry(zf, f"params/{name}.npy", buf.getvalue())


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
                raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
            cfg = ModelConfig.from_dict(meta["config"])
            params = ModelParams.init(cfg, seed=0)
            for name, t in params.named().items():
                arr = np.lib.format.read_array(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
                if arr.shape != t.shape:
                    raise ConfigError(f"{path}: parameter {name} has shape {arr.shape}, expected {t.shape}")
                t.data[...] = arr
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ConfigError(f"{path}: not a valid checkpoint ({exc})") from exc
    return cfg, params
