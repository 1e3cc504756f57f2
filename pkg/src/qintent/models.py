"""Model architectures, parameter manifests, bundles and prediction.

Every architecture is a set of named tensors plus a forward function built
from :mod:`qintent.autograd`. Batched forward passes take a :class:`Batch`
of padded token ids, locale ids and traditional features.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .text import (
    CLS,
    PAD,
    FeatureSpec,
    IntentLabelSet,
    LabeledExample,
    LocaleRegistry,
    Query,
    UnknownLocaleError,
    UserContext,
    Vocabulary,
    encode_text,
    triletter_tokens,
)

ARCHITECTURES = ("TRILETTER_LR", "BOW_LR", "CNN", "BILSTM", "TRANSFORMER")
MULTILINGUAL = ("none", "embed", "concat")
OBJECTIVES = ("classify", "mlm")
BUNDLE_FORMAT_VERSION = 1

# RNG stream ids; every consumer draws from default_rng([seed, stream, ...])
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_MASK = 3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``emb_dim`` is the token embedding width for CNN/BiLSTM and LR-free
    models; the transformer uses ``hidden`` for its embeddings. A
    ``feature_width`` of 0 disables the traditional (wide) features.
    """

    architecture: str = "BILSTM"
    granularity: str = "char"
    vocab_size: int = 500
    emb_dim: int = 128
    max_len: int = 32
    filters: int = 128
    filter_height: int = 3
    hidden: int = 128
    layers: int = 3
    heads: int = 8
    ffn_mult: int = 4
    max_positions: int = 512
    multilingual: str = "none"
    locale_dim: int = 16
    n_locales: int = 0
    fusion_width: int = 64
    feature_width: int = 16
    n_labels: int = 5
    hash_buckets: int = 2**18
    objective: str = "classify"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.granularity not in ("char", "word"):
            raise ValueError(f"granularity must be char or word, got {self.granularity!r}")
        if self.multilingual not in MULTILINGUAL:
            raise ValueError(f"multilingual must be one of {MULTILINGUAL}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.multilingual != "none":
            if self.architecture not in ("CNN", "BILSTM"):
                raise ValueError("locale injection is only defined for CNN and BILSTM encoders")
            if self.n_locales < 1:
                raise ValueError("multilingual models need a locale registry (n_locales >= 1)")
        if self.architecture == "TRANSFORMER" and self.hidden % self.heads:
            raise ValueError(f"transformer hidden {self.hidden} not divisible by {self.heads} heads")
        if self.objective == "mlm" and self.architecture != "TRANSFORMER":
            raise ValueError("masked-LM objective requires the TRANSFORMER architecture")
        for name in ("vocab_size", "max_len", "n_labels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_labels < 2 and self.objective == "classify":
            raise ValueError("need at least two labels")

    @classmethod
    def char(cls, architecture: str = "BILSTM", **kw) -> ModelConfig:
        """Incomplete-query defaults: 500 chars, emb 128, 128 filters of height 3, hidden 128."""
        base = dict(architecture=architecture, granularity="char", vocab_size=500, emb_dim=128, max_len=32,
                    filters=128, filter_height=3, hidden=128, fusion_width=64)
        base.update(kw)
        return cls(**base)

    @classmethod
    def word(cls, architecture: str = "BILSTM", **kw) -> ModelConfig:
        """Complete-query defaults: 100K words of dim 64, fusion dense 200."""
        base = dict(architecture=architecture, granularity="word", vocab_size=100_000, emb_dim=64, max_len=16,
                    filters=128, filter_height=3, hidden=128, fusion_width=200)
        base.update(kw)
        return cls(**base)

    @classmethod
    def transformer(cls, **kw) -> ModelConfig:
        """Three layers, hidden 256, eight heads, over a 25K word vocabulary."""
        base = dict(architecture="TRANSFORMER", granularity="word", vocab_size=25_000, hidden=256, layers=3,
                    heads=8, ffn_mult=4, max_positions=512, max_len=16, fusion_width=200)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def encoder_width(self) -> int:
        if self.architecture == "CNN":
            return self.filters
        if self.architecture == "BILSTM":
            return 2 * self.hidden
        if self.architecture == "TRANSFORMER":
            return self.hidden
        return 0

    @property
    def input_width(self) -> int:
        """Per-position width seen by the sequence encoder."""
        return self.emb_dim + (self.locale_dim if self.multilingual == "embed" else 0)


# ---------------------------------------------------------------------------
# manifest and init
# ---------------------------------------------------------------------------


def _transformer_block_shapes(prefix: str, H: int, F: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.wq": (H, H), f"{prefix}.bq": (H,),
        f"{prefix}.wk": (H, H), f"{prefix}.bk": (H,),
        f"{prefix}.wv": (H, H), f"{prefix}.bv": (H,),
        f"{prefix}.wo": (H, H), f"{prefix}.bo": (H,),
        f"{prefix}.ln1_g": (H,), f"{prefix}.ln1_b": (H,),
        f"{prefix}.w1": (H, F), f"{prefix}.b1": (F,),
        f"{prefix}.w2": (F, H), f"{prefix}.b2": (H,),
        f"{prefix}.ln2_g": (H,), f"{prefix}.ln2_b": (H,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered manifest of parameter names and shapes for ``cfg``."""
    s: dict[str, tuple[int, ...]] = {}
    c, t = cfg.n_labels, cfg.feature_width
    arch = cfg.architecture
    if arch in ("TRILETTER_LR", "BOW_LR"):
        rows = cfg.hash_buckets if arch == "TRILETTER_LR" else cfg.vocab_size
        s["lr.text.w"] = (rows, c)
        if t:
            s["lr.trad.w"] = (t, c)
        s["lr.b"] = (c,)
        return s
    if arch == "TRANSFORMER":
        H = cfg.hidden
        s["tf.tokens"] = (cfg.vocab_size, H)
        s["tf.positions"] = (cfg.max_positions, H)
        s["tf.emb_ln.g"] = (H,)
        s["tf.emb_ln.b"] = (H,)
        for i in range(cfg.layers):
            s.update(_transformer_block_shapes(f"tf.{i}", H, cfg.ffn_mult * H))
        if cfg.objective == "mlm":
            s["mlm.w"] = (H, cfg.vocab_size)
            s["mlm.b"] = (cfg.vocab_size,)
            return s
        s["head.pool.w"] = (H, H)
        s["head.pool.b"] = (H,)
    else:
        s["embed.tokens"] = (cfg.vocab_size, cfg.emb_dim)
        if cfg.multilingual != "none":
            s["locale.table"] = (cfg.n_locales, cfg.locale_dim)
        d = cfg.input_width
        if arch == "CNN":
            s["cnn.filters"] = (cfg.filters, cfg.filter_height, d)
            s["cnn.bias"] = (cfg.filters,)
        else:
            k = cfg.hidden
            for direction in ("fwd", "bwd"):
                s[f"lstm.{direction}.w_x"] = (d, 4 * k)
                s[f"lstm.{direction}.w_h"] = (k, 4 * k)
                s[f"lstm.{direction}.b"] = (4 * k,)
    fused_in = cfg.encoder_width + (cfg.locale_dim if cfg.multilingual == "concat" else 0) + t
    s["head.dense.w"] = (fused_in, cfg.fusion_width)
    s["head.dense.b"] = (cfg.fusion_width,)
    s["head.out.w"] = (cfg.fusion_width, c)
    s["head.out.b"] = (c,)
    return s


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(-0.05, 0.05) embeddings, Glorot weights (N(0, 0.02) inside the transformer), zero biases, forget-gate bias 1."""
    rng = np.random.default_rng([seed, STREAM_INIT])
    out: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("embed.tokens", "tf.tokens", "tf.positions", "locale.table"):
            w = rng.uniform(-0.05, 0.05, size=shape)
            if name in ("embed.tokens", "tf.tokens"):
                w[PAD] = 0.0
        elif name.startswith("lr."):
            w = np.zeros(shape)
        elif leaf.endswith("_g") or leaf == "g":
            w = np.ones(shape)
        elif len(shape) == 1:
            w = np.zeros(shape)
            if name.startswith("lstm.") and leaf == "b":
                k = shape[0] // 4
                w[k : 2 * k] = 1.0
        elif name == "cnn.filters":
            f, h, d = shape
            w = _glorot(rng, shape, h * d, f)
        elif name.startswith("lstm."):
            k = shape[1] // 4
            w = _glorot(rng, shape, shape[0], k)
        elif name.startswith(("tf.", "head.pool.", "mlm.")):
            # BERT-style init: post-norm activations have unit variance, so keep projections small
            w = rng.normal(0.0, 0.02, size=shape)
        else:
            w = _glorot(rng, shape, shape[0], shape[1])
        out[name] = np.ascontiguousarray(w, dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def embed_sequence(ids, table: Tensor) -> tuple[Tensor, np.ndarray]:
    """Embedding lookup with PAD rows forced to zero; returns ``(seq, mask)``."""
    ids = np.asarray(ids, dtype=np.int64)
    return ag.embedding(ids, table, pad_id=PAD), ids != PAD


def _locale_rows(locale_ids, table: Tensor) -> Tensor:
    loc = np.asarray(locale_ids, dtype=np.int64)
    n = table.shape[0]
    if loc.size and (loc.min() < 0 or loc.max() >= n):
        raise UnknownLocaleError(f"locale id outside registry of size {n}")
    return ag.embedding(loc, table, pad_id=None)


def inject_locale_embed(seq: Tensor, mask: np.ndarray, locale_ids, table: Tensor) -> Tensor:
    """Append the locale vector to every non-PAD position of ``seq``."""
    if table.shape[-1] == 0:
        return seq
    rows = _locale_rows(locale_ids, table)  # [B, e] or [e]
    mask = np.asarray(mask, dtype=np.float64)
    if seq.ndim == 2:
        tiled = ag.mul(ag.reshape(rows, (1, -1)), mask[:, None])
    else:
        tiled = ag.mul(ag.reshape(rows, (rows.shape[0], 1, rows.shape[1])), mask[:, :, None])
    return ag.concat([seq, tiled], axis=-1)


def inject_locale_concat(query_emb: Tensor, locale_ids, table: Tensor) -> Tensor:
    """Append the locale vector once, after the sequence encoder."""
    if table.shape[-1] == 0:
        return query_emb
    return ag.concat([query_emb, _locale_rows(locale_ids, table)], axis=-1)


def encode_cnn(seq: Tensor, mask: np.ndarray, filters: Tensor, bias: Tensor) -> Tensor:
    """Masked conv + max-over-time; short inputs use one zero-padded window."""
    lengths = np.atleast_1d(np.asarray(mask).sum(axis=-1))
    return ag.conv1d_maxpool(seq, filters, bias, lengths=lengths)


def encode_bilstm(seq: Tensor, mask: np.ndarray, params: Mapping[str, Tensor], allow_empty: bool = False) -> Tensor:
    """Concatenated final states of a left-to-right and a right-to-left LSTM."""
    single = seq.ndim == 2
    x = ag.reshape(seq, (1,) + seq.shape) if single else seq
    m = np.asarray(mask, dtype=bool)
    lengths = m.reshape(x.shape[0], -1).sum(axis=1)
    if not allow_empty and (lengths == 0).any():
        raise ValueError("encode_bilstm needs at least one non-PAD token per sequence")
    fwd = ag.lstm_sequence(x, lengths, params["lstm.fwd.w_x"], params["lstm.fwd.w_h"], params["lstm.fwd.b"])
    bwd = ag.lstm_sequence(x, lengths, params["lstm.bwd.w_x"], params["lstm.bwd.w_h"], params["lstm.bwd.b"], reverse=True)
    out = ag.concat([fwd, bwd], axis=-1)
    return ag.reshape(out, (out.shape[-1],)) if single else out


def encode_transformer(ids, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Prepend CLS, add positions, run the blocks with PAD masking; return the CLS vector."""
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    ids2 = ids[None] if single else ids
    lengths = (ids2 != PAD).sum(axis=1)
    L = int(lengths.max()) if ids2.size else 0
    if L + 1 > cfg.max_positions:
        raise ValueError(f"sequence of {L} tokens plus CLS exceeds {cfg.max_positions} positions")
    B = ids2.shape[0]
    full = np.full((B, L + 1), PAD, dtype=np.int64)
    full[:, 0] = CLS
    full[:, 1:] = ids2[:, :L]
    mask = full != PAD
    x = ag.embedding(full, params["tf.tokens"], pad_id=PAD)
    pos = ag.index(params["tf.positions"], slice(0, L + 1))
    x = ag.layer_norm(ag.add(x, pos), params["tf.emb_ln.g"], params["tf.emb_ln.b"])
    for i in range(cfg.layers):
        block = {k.split(".", 2)[2]: v for k, v in params.items() if k.startswith(f"tf.{i}.")}
        x = ag.attention_block(x, block, cfg.heads, mask)
    if cfg.objective == "mlm":
        return x
    cls_vec = ag.index(x, (slice(None), 0))
    return ag.reshape(cls_vec, (cls_vec.shape[-1],)) if single else cls_vec


def fuse_wide_deep(query_emb: Tensor, trad, params: Mapping[str, Tensor]) -> Tensor:
    """concat(query_emb, trad) -> dense + ReLU -> dense logits."""
    parts = [query_emb]
    if trad is not None and np.shape(trad)[-1] > 0:
        parts.append(trad if isinstance(trad, Tensor) else Tensor(np.asarray(trad, dtype=np.float64)))
    x = ag.concat(parts, axis=-1) if len(parts) > 1 else query_emb
    w = params["head.dense.w"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"fusion input width {x.shape[-1]} does not match dense layer {w.shape}")
    hidden = ag.relu(ag.add(ag.matmul(x, w), params["head.dense.b"]))
    return ag.add(ag.matmul(hidden, params["head.out.w"]), params["head.out.b"])


@dataclass(frozen=True)
class SparseCounts:
    """Sorted hashed feature indices with their counts."""

    indices: tuple[int, ...]
    counts: tuple[float, ...]
    dim: int

    def dense(self) -> np.ndarray:
        v = np.zeros(self.dim)
        v[list(self.indices)] = self.counts
        return v


def _bucket(gram: str, buckets: int) -> int:
    return zlib.crc32(gram.encode("utf-8")) % buckets


def featurize_triletter(text: str, buckets: int = 2**18) -> SparseCounts:
    """Hashed counts of the boundary-marked character 3-grams of ``text``."""
    counts: dict[int, float] = {}
    for g in triletter_tokens(text):
        b = _bucket(g, buckets)
        counts[b] = counts.get(b, 0.0) + 1.0
    idx = tuple(sorted(counts))
    return SparseCounts(idx, tuple(counts[i] for i in idx), buckets)


def featurize_bow(token_ids: Sequence[int], vocab_size: int) -> SparseCounts:
    """Bag-of-words counts over non-PAD token ids."""
    counts: dict[int, float] = {}
    for t in token_ids:
        if t != PAD:
            counts[int(t)] = counts.get(int(t), 0.0) + 1.0
    idx = tuple(sorted(counts))
    return SparseCounts(idx, tuple(counts[i] for i in idx), vocab_size)


def linear_baseline(bag_ids, bag_weights, trad, params: Mapping[str, Tensor]) -> Tensor:
    """Multinomial logistic regression logits over sparse text features plus dense traditional features."""
    w = params["lr.text.w"]
    logits = ag.add(ag.embedding_bag(bag_ids, bag_weights, w), params["lr.b"])
    if "lr.trad.w" in params:
        t = Tensor(np.asarray(trad, dtype=np.float64))
        if t.shape[-1] != params["lr.trad.w"].shape[0]:
            raise ShapeError(f"traditional features of width {t.shape[-1]} vs weights {params['lr.trad.w'].shape}")
        logits = ag.add(logits, ag.matmul(t, params["lr.trad.w"]))
    return logits


# ---------------------------------------------------------------------------
# batched model
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # [B, L] int64, PAD-filled
    locales: np.ndarray  # [B]
    features: np.ndarray  # [B, t]
    labels: np.ndarray | None = None
    bag_ids: np.ndarray | None = None  # [B, M] for linear baselines
    bag_weights: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.locales)


def _pack_bags(bags: Sequence[SparseCounts]) -> tuple[np.ndarray, np.ndarray]:
    M = max([len(b.indices) for b in bags] + [1])
    ids = np.zeros((len(bags), M), dtype=np.int64)
    w = np.zeros((len(bags), M))
    for r, b in enumerate(bags):
        ids[r, : len(b.indices)] = b.indices
        w[r, : len(b.indices)] = b.counts
    return ids, w


@dataclass
class DatasetArrays:
    """A dataset materialized as arrays so batches are cheap slices."""

    ids: np.ndarray
    lengths: np.ndarray
    locales: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    bag_ids: np.ndarray | None = None
    bag_weights: np.ndarray | None = None

    @classmethod
    def build(cls, cfg: ModelConfig, examples: Sequence[LabeledExample], vocab: Vocabulary | None = None) -> DatasetArrays:
        n = len(examples)
        if vocab is not None and cfg.architecture != "TRILETTER_LR":
            rows = [encode_text(e.text, vocab, cfg.max_len) for e in examples]
        else:
            rows = [list(e.token_ids)[: cfg.max_len] + [PAD] * max(0, cfg.max_len - len(e.token_ids)) for e in examples]
        ids = np.array(rows, dtype=np.int64).reshape(n, cfg.max_len) if n else np.zeros((0, cfg.max_len), np.int64)
        feats = np.array([e.features for e in examples], dtype=np.float64).reshape(n, -1) if n else np.zeros((0, 0))
        if cfg.feature_width == 0:
            feats = np.zeros((n, 0))
        elif feats.shape[1] != cfg.feature_width:
            raise ShapeError(f"examples carry {feats.shape[1]} traditional features, model expects {cfg.feature_width}")
        arr = cls(
            ids=ids,
            lengths=(ids != PAD).sum(axis=1),
            locales=np.array([e.locale for e in examples], dtype=np.int64),
            features=feats,
            labels=np.array([e.label for e in examples], dtype=np.int64),
        )
        if cfg.architecture == "TRILETTER_LR":
            arr.bag_ids, arr.bag_weights = _pack_bags([featurize_triletter(e.text, cfg.hash_buckets) for e in examples])
        elif cfg.architecture == "BOW_LR":
            arr.bag_ids, arr.bag_weights = _pack_bags([featurize_bow(r, cfg.vocab_size) for r in ids])
        return arr

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        L = max(int(self.lengths[idx].max()) if len(idx) else 0, 1)
        b = Batch(self.ids[idx, :L], self.locales[idx], self.features[idx], self.labels[idx])
        if self.bag_ids is not None:
            bw = self.bag_weights[idx]
            M = max(int((bw != 0).sum(axis=1).max()) if len(idx) else 0, 1)
            b.bag_ids, b.bag_weights = self.bag_ids[idx, :M], bw[:, :M]
        return b


def encode_batch(cfg: ModelConfig, params: Mapping[str, Tensor], batch: Batch, allow_empty: bool = False) -> Tensor:
    """Query embedding ``[B, k]`` (before fusion) for sequence models."""
    arch = cfg.architecture
    if arch == "TRANSFORMER":
        cls_vec = encode_transformer(batch.ids, params, cfg)
        return ag.tanh(ag.add(ag.matmul(cls_vec, params["head.pool.w"]), params["head.pool.b"]))
    seq, mask = embed_sequence(batch.ids, params["embed.tokens"])
    if cfg.multilingual == "embed":
        seq = inject_locale_embed(seq, mask, batch.locales, params["locale.table"])
    if arch == "CNN":
        q = encode_cnn(seq, mask, params["cnn.filters"], params["cnn.bias"])
    else:
        q = encode_bilstm(seq, mask, params, allow_empty=allow_empty)
    if cfg.multilingual == "concat":
        q = inject_locale_concat(q, batch.locales, params["locale.table"])
    return q


def forward_logits(cfg: ModelConfig, params: Mapping[str, Tensor], batch: Batch, allow_empty: bool = False) -> Tensor:
    if cfg.objective != "classify":
        raise ValueError("forward_logits needs a classification config")
    if cfg.architecture in ("TRILETTER_LR", "BOW_LR"):
        return linear_baseline(batch.bag_ids, batch.bag_weights, batch.features, params)
    q = encode_batch(cfg, params, batch, allow_empty=allow_empty)
    return fuse_wide_deep(q, batch.features if cfg.feature_width else None, params)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# bundle and prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntentDistribution:
    """Probabilities aligned to the label set. ``argmax`` ties go to the lowest id."""

    probs: tuple[float, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        p = np.asarray(self.probs)
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be nonnegative and sum to 1")

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def argmax_label(self) -> str:
        return self.labels[self.argmax] if self.labels else str(self.argmax)

    def by_label(self) -> dict[str, float]:
        return dict(zip(self.labels, self.probs))


@dataclass
class ModelBundle:
    """Config, named parameters, vocabulary, labels and optional locale registry."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: Vocabulary
    labels: IntentLabelSet
    locales: LocaleRegistry | None = None
    features: FeatureSpec | None = None
    format_version: int = BUNDLE_FORMAT_VERSION
    _tensors: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        expected = param_shapes(self.config)
        missing = [n for n in expected if n not in self.params]
        extra = [n for n in self.params if n not in expected]
        if missing or extra:
            raise ShapeError(f"bundle manifest mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        if self.config.objective == "classify" and len(self.labels) != self.config.n_labels:
            raise ShapeError(f"{len(self.labels)} labels but config expects {self.config.n_labels}")
        if self.config.multilingual != "none":
            if self.locales is None or len(self.locales) != self.config.n_locales:
                raise ShapeError("multilingual bundle needs a locale registry matching n_locales")
        if self.config.architecture != "TRILETTER_LR" and len(self.vocab) > self.config.vocab_size:
            raise ShapeError(f"vocabulary of {len(self.vocab)} exceeds configured size {self.config.vocab_size}")

    def tensors(self) -> dict[str, Tensor]:
        """Read-only (no-grad) tensor views, built once."""
        if self._tensors is None:
            self._tensors = {k: Tensor(v, requires_grad=False, name=k) for k, v in self.params.items()}
        return self._tensors

    def header(self) -> dict:
        return {
            "format_version": self.format_version,
            "architecture": self.config.architecture,
            "config": self.config.to_dict(),
            "vocab": self.vocab.to_dict(),
            "labels": list(self.labels.names),
            "locales": list(self.locales.codes) if self.locales is not None else None,
            "features": self.features.to_dict() if self.features is not None else None,
        }

    def checksum(self) -> str:
        """sha256 over the canonical header and every tensor (name, shape, little-endian bytes)."""
        h = hashlib.sha256()
        h.update(json.dumps(self.header(), sort_keys=True, ensure_ascii=False).encode("utf-8"))
        for name in param_shapes(self.config):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            h.update(name.encode("utf-8"))
            h.update(repr(arr.shape).encode("ascii"))
            h.update(arr.tobytes())
        return h.hexdigest()

    @property
    def version(self) -> str:
        return self.checksum()[:12]


def new_bundle(
    cfg: ModelConfig,
    vocab: Vocabulary,
    labels: IntentLabelSet,
    locales: LocaleRegistry | None = None,
    features: FeatureSpec | None = None,
    seed: int = 0,
    zero_head: bool = False,
) -> ModelBundle:
    params = init_params(cfg, seed)
    if zero_head:
        for k in params:
            if k.startswith("head.") or k.startswith("lr."):
                params[k] = np.zeros_like(params[k])
    return ModelBundle(cfg, params, vocab, labels, locales, features)


def query_batch(bundle: ModelBundle, queries: Sequence[Query], users: Sequence[UserContext | None]) -> Batch:
    cfg = bundle.config
    n_loc = len(bundle.locales) if bundle.locales is not None else 1
    for q in queries:
        if not 0 <= q.locale < n_loc:
            raise UnknownLocaleError(f"locale id {q.locale} not registered with this bundle")
    feats = np.zeros((len(queries), cfg.feature_width))
    for r, (q, u) in enumerate(zip(queries, users)):
        if cfg.feature_width == 0:
            continue
        if u is None:
            spec = bundle.features or FeatureSpec(len(bundle.labels), cfg.feature_width, 0)
            feats[r] = spec.build([], q.locale)
        else:
            if len(u.features) != cfg.feature_width:
                raise ShapeError(f"user features of width {len(u.features)}, model expects {cfg.feature_width}")
            feats[r] = u.features
    locales = np.array([q.locale for q in queries], dtype=np.int64)
    if cfg.architecture == "TRILETTER_LR":
        bag_ids, bag_w = _pack_bags([featurize_triletter(q.text, cfg.hash_buckets) for q in queries])
        ids = np.zeros((len(queries), 1), dtype=np.int64)
        return Batch(ids, locales, feats, None, bag_ids, bag_w)
    rows = np.array([encode_text(q.text, bundle.vocab, cfg.max_len) for q in queries], dtype=np.int64)
    L = max(int((rows != PAD).sum(axis=1).max()), 1)
    batch = Batch(rows[:, :L], locales, feats)
    if cfg.architecture == "BOW_LR":
        batch.bag_ids, batch.bag_weights = _pack_bags([featurize_bow(r, cfg.vocab_size) for r in rows])
    return batch


def predict_proba(bundle: ModelBundle, batch: Batch) -> np.ndarray:
    logits = forward_logits(bundle.config, bundle.tensors(), batch, allow_empty=True)
    return softmax_rows(logits.data)


def predict(bundle: ModelBundle, q: Query, user: UserContext | None = None) -> IntentDistribution:
    """Full pipeline for one query: encode, embed, encode sequence, fuse, softmax."""
    probs = predict_proba(bundle, query_batch(bundle, [q], [user]))[0]
    return IntentDistribution(tuple(probs.tolist()), tuple(bundle.labels.names))


@dataclass(frozen=True)
class ParamCount:
    breakdown: dict[str, int]
    total: int
    core: int  # everything outside the fusion/classification head

    def to_dict(self) -> dict:
        return {"breakdown": self.breakdown, "core": self.core, "total": self.total}


def param_count(bundle_or_cfg: ModelBundle | ModelConfig) -> ParamCount:
    cfg = bundle_or_cfg.config if isinstance(bundle_or_cfg, ModelBundle) else bundle_or_cfg
    breakdown = {name: int(np.prod(shape)) for name, shape in param_shapes(cfg).items()}
    core = sum(v for k, v in breakdown.items() if not k.startswith("head.") and not k.startswith("locale."))
    return ParamCount(breakdown, sum(breakdown.values()), core)
