"""Optimizers, supervised classifier training and masked-LM pre-training.

RNG streams: parameter init draws from ``default_rng([seed, STREAM_INIT])``,
epoch ``e`` shuffles from ``default_rng([seed, STREAM_SHUFFLE, e])`` and MLM
masking from ``default_rng([seed, STREAM_MASK, e])``, so no two consumers
ever share draws and each epoch is reproducible on its own.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .models import (
    STREAM_INIT,
    STREAM_MASK,
    STREAM_SHUFFLE,
    Batch,
    DatasetArrays,
    ModelBundle,
    ModelConfig,
    encode_transformer,
    forward_logits,
    init_params,
    param_shapes,
)
from .text import (
    CLS,
    DEFAULT_INTENTS,
    MASK,
    PAD,
    FeatureSpec,
    IntentLabelSet,
    LabeledExample,
    LocaleRegistry,
    Vocabulary,
    encode_text,
)

RESERVED_COUNT = 4


@dataclass(frozen=True)
class TrainHyper:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    clip_norm: float | None = 5.0
    patience: int | None = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask_rate: float = 0.15

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    hyper: TrainHyper,
) -> tuple[Mapping[str, np.ndarray], OptimizerState]:
    """In-place SGD or bias-corrected Adam update, after optional global-norm clipping."""
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ag.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise FloatingPointError(f"non-finite gradient in {name}: {bad} of {g.size} entries")
    scale = 1.0
    if hyper.clip_norm is not None:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values() if g is not None))
        if norm > hyper.clip_norm:
            scale = hyper.clip_norm / norm
    state.step += 1
    if hyper.optimizer == "sgd":
        for name, g in grads.items():
            if g is not None:
                params[name] -= hyper.lr * scale * g
        return params, state
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        v *= b2
        if g is not None:
            gs = g * scale if scale != 1.0 else g
            m += (1.0 - b1) * gs
            v += (1.0 - b2) * gs * gs
        p -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return params, state


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_accuracy: float | None
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    final_epoch: int = -1
    best_epoch: int = -1
    stop_reason: str = ""
    initial_loss: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def _bucketed_batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle, group similar lengths inside large chunks, then shuffle batch order."""
    perm = rng.permutation(len(lengths))
    chunk = batch_size * 32
    batches = []
    for s in range(0, len(perm), chunk):
        part = perm[s : s + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches.extend(part[i : i + batch_size] for i in range(0, len(part), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def batch_loss(cfg: ModelConfig, tensors: Mapping[str, Tensor], batch: Batch) -> tuple[np.ndarray, Tensor]:
    """Softmax probabilities and mean cross-entropy for one batch."""
    logits = forward_logits(cfg, tensors, batch, allow_empty=True)
    return ag.softmax_xent(logits, batch.labels)


def compute_grads(cfg: ModelConfig, tensors: Mapping[str, Tensor], batch: Batch) -> tuple[float, dict[str, np.ndarray | None]]:
    for t in tensors.values():
        t.grad = None
    _, loss = batch_loss(cfg, tensors, batch)
    ag.backward(loss)
    return float(loss.item()), {k: t.grad for k, t in tensors.items()}


def predict_arrays(cfg: ModelConfig, tensors: Mapping[str, Tensor], data: DatasetArrays, chunk: int = 1024) -> np.ndarray:
    """Argmax predictions for every row of ``data`` (no graph is recorded)."""
    frozen = {k: Tensor(t.data) for k, t in tensors.items()}
    out = np.empty(len(data), dtype=np.int64)
    for s in range(0, len(data), chunk):
        idx = np.arange(s, min(s + chunk, len(data)))
        logits = forward_logits(cfg, frozen, data.take(idx), allow_empty=True)
        out[idx] = logits.data.argmax(axis=1)
    return out


def _check_labels(cfg: ModelConfig, data: DatasetArrays, split: str) -> None:
    if len(data) and (data.labels.min() < 0 or data.labels.max() >= cfg.n_labels):
        raise ValueError(f"{split} split has label ids outside [0, {cfg.n_labels})")


def _write_metrics(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def train_classifier(
    cfg: ModelConfig,
    train: Sequence[LabeledExample],
    dev: Sequence[LabeledExample] | None,
    hyper: TrainHyper,
    vocab: Vocabulary,
    labels: IntentLabelSet,
    locales: LocaleRegistry | None = None,
    features: FeatureSpec | None = None,
    init: ModelBundle | None = None,
    metrics_path: str | Path | None = None,
) -> tuple[ModelBundle, TrainHistory]:
    """Mini-batch cross-entropy training with per-epoch dev evaluation.

    Returns the bundle from the epoch with the best dev accuracy (the last
    epoch when no dev split is given). ``init`` copies every tensor whose name
    and shape match, e.g. a masked-LM pre-trained encoder.
    """
    if not train:
        raise ValueError("training split is empty")
    if cfg.objective != "classify":
        raise ValueError("train_classifier needs a classification config")
    tr = DatasetArrays.build(cfg, train)
    dv = DatasetArrays.build(cfg, dev) if dev else None
    _check_labels(cfg, tr, "train")
    if dv is not None:
        _check_labels(cfg, dv, "dev")

    params = init_params(cfg, hyper.seed)
    if init is not None:
        for name, arr in init.params.items():
            if name in params and params[name].shape == arr.shape:
                params[name] = arr.astype(np.float64, copy=True)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    params = {k: t.data for k, t in tensors.items()}
    state = OptimizerState()
    history = TrainHistory()
    best_acc, best_params, stale = -1.0, None, 0
    fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(hyper.epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng([hyper.seed, STREAM_SHUFFLE, epoch])
            total, count = 0.0, 0
            for idx in _bucketed_batches(tr.lengths, hyper.batch_size, rng):
                loss, grads = compute_grads(cfg, tensors, tr.take(idx))
                if count == 0 and epoch == 0:
                    history.initial_loss = loss
                optimizer_step(params, grads, state, hyper)
                total += loss * len(idx)
                count += len(idx)
            dev_acc = None
            if dv is not None:
                dev_acc = float((predict_arrays(cfg, tensors, dv) == dv.labels).mean())
            stats = EpochStats(epoch, total / count, dev_acc, time.perf_counter() - t0)
            history.epochs.append(stats)
            history.final_epoch = epoch
            _write_metrics(fh, asdict(stats))
            score = dev_acc if dev_acc is not None else float(epoch)
            if score > best_acc:
                best_acc, stale = score, 0
                best_params = {k: v.copy() for k, v in params.items()}
                history.best_epoch = epoch
            else:
                stale += 1
                if dv is not None and hyper.patience is not None and stale >= hyper.patience:
                    history.stop_reason = "early_stop"
                    break
        if not history.stop_reason:
            history.stop_reason = "max_epochs"
    finally:
        if fh is not None:
            fh.close()
    bundle = ModelBundle(cfg, best_params, vocab, labels, locales, features)
    return bundle, history


# ---------------------------------------------------------------------------
# masked-LM pre-training
# ---------------------------------------------------------------------------


def mask_tokens(
    ids,
    mask_rate: float = 0.15,
    seed: int | np.random.Generator = 0,
    vocab_size: int | None = None,
    split: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Select non-PAD, non-CLS positions with probability ``mask_rate``.

    Selected positions become MASK, a random non-reserved token, or stay
    unchanged according to ``split``. Returns ``(corrupted, selected, targets)``
    where ``selected`` is a boolean array shaped like ``ids`` and ``targets``
    are the original ids at the selected positions in row-major order.
    """
    if not 0.0 <= mask_rate <= 1.0:
        raise ValueError("mask_rate must be in [0, 1]")
    ids = np.asarray(ids, dtype=np.int64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng([seed, STREAM_MASK])
    eligible = (ids != PAD) & (ids != CLS)
    selected = eligible & (rng.random(ids.shape) < mask_rate)
    targets = ids[selected]
    corrupted = ids.copy()
    n = int(selected.sum())
    choice = rng.choice(3, size=n, p=np.asarray(split, dtype=float) / sum(split))
    replaced = targets.copy()
    replaced[choice == 0] = MASK
    if vocab_size is not None and vocab_size > RESERVED_COUNT:
        n_rand = int((choice == 1).sum())
        replaced[choice == 1] = rng.integers(RESERVED_COUNT, vocab_size, size=n_rand)
    corrupted[selected] = replaced
    return corrupted, selected, targets


def mlm_loss(cfg: ModelConfig, tensors: Mapping[str, Tensor], corrupted: np.ndarray, selected: np.ndarray, targets: np.ndarray) -> Tensor:
    seq = encode_transformer(corrupted, tensors, cfg)  # [B, L+1, H], CLS at 0
    rows, cols = np.nonzero(selected)
    picked = ag.index(seq, (rows, cols + 1))
    logits = ag.add(ag.matmul(picked, tensors["mlm.w"]), tensors["mlm.b"])
    return ag.softmax_xent(logits, targets)[1]


def pretrain_mlm(
    cfg: ModelConfig,
    corpus: Iterable[str],
    vocab: Vocabulary,
    hyper: TrainHyper,
    labels: IntentLabelSet | None = None,
    metrics_path: str | Path | None = None,
) -> tuple[ModelBundle, TrainHistory]:
    """Masked-token cross-entropy with a separate output projection."""
    if cfg.architecture != "TRANSFORMER":
        raise ValueError("masked-LM pre-training requires the TRANSFORMER architecture")
    cfg = ModelConfig.from_dict({**cfg.to_dict(), "objective": "mlm"})
    rows = [encode_text(s, vocab, cfg.max_len) for s in corpus]
    rows = [r for r in rows if r[0] != PAD]
    if not rows:
        raise ValueError("pre-training corpus is empty")
    ids = np.array(rows, dtype=np.int64)
    lengths = (ids != PAD).sum(axis=1)
    params = init_params(cfg, hyper.seed)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    params = {k: t.data for k, t in tensors.items()}
    state = OptimizerState()
    history = TrainHistory()
    fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(hyper.epochs):
            t0 = time.perf_counter()
            shuffle_rng = np.random.default_rng([hyper.seed, STREAM_SHUFFLE, epoch])
            mask_rng = np.random.default_rng([hyper.seed, STREAM_MASK, epoch])
            total, count = 0.0, 0
            for idx in _bucketed_batches(lengths, hyper.batch_size, shuffle_rng):
                L = int(lengths[idx].max())
                corrupted, selected, targets = mask_tokens(ids[idx, :L], hyper.mask_rate, mask_rng, cfg.vocab_size)
                if not selected.any():
                    continue
                for t in tensors.values():
                    t.grad = None
                loss = mlm_loss(cfg, tensors, corrupted, selected, targets)
                ag.backward(loss)
                if count == 0 and epoch == 0:
                    history.initial_loss = float(loss.item())
                optimizer_step(params, {k: t.grad for k, t in tensors.items()}, state, hyper)
                total += float(loss.item()) * len(targets)
                count += len(targets)
            stats = EpochStats(epoch, total / max(count, 1), None, time.perf_counter() - t0)
            history.epochs.append(stats)
            history.final_epoch = history.best_epoch = epoch
            _write_metrics(fh, asdict(stats))
        history.stop_reason = "max_epochs"
    finally:
        if fh is not None:
            fh.close()
    bundle = ModelBundle(cfg, params, vocab, labels or IntentLabelSet(DEFAULT_INTENTS))
    return bundle, history


def encoder_names(cfg: ModelConfig) -> list[str]:
    """Parameter names shared between a classifier and its pre-training counterpart."""
    return [n for n in param_shapes(cfg) if not n.startswith(("head.", "mlm."))]


__all__ = [
    "EpochStats",
    "OptimizerState",
    "TrainHistory",
    "TrainHyper",
    "batch_loss",
    "compute_grads",
    "encoder_names",
    "mask_tokens",
    "mlm_loss",
    "optimizer_step",
    "predict_arrays",
    "pretrain_mlm",
    "train_classifier",
    "STREAM_INIT",
]
