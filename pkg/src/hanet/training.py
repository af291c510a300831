"""Masked cross-entropy, Adam, the training loop and a gradient checker."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from hanet import autodiff as ad
from hanet.autodiff import NonFiniteError, Tensor
from hanet.data import FeatureSequence, LabelTrack, SequenceWindow
from hanet.metrics import aggregate, evaluate_sequence
from hanet.model import ModelConfig, ModelParams, forward, init_params
from hanet.predict import predict_sequence

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    shuffle: bool = True
    early_stop_patience: int | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.epsilon <= 0:
            raise ValueError("learning_rate must be >= 0 and epsilon > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    s: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> OptimizerState:
        return cls({n: np.zeros_like(t.data) for n, t in params.named_tensors()},
                   {n: np.zeros_like(t.data) for n, t in params.named_tensors()})


def cross_entropy(probs: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-probability of the true class over real rows."""
    labels = np.asarray(labels)
    mask = np.ones(len(labels), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("cross_entropy: no real frames")
    picked = ad.take(probs, (rows, labels[rows]))
    return ad.scale(ad.total(ad.log(picked)), -1.0 / rows.size)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
              cfg: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    t = state.t + 1
    m, s = {}, {}
    b1, b2 = cfg.beta1, cfg.beta2

    def update(name: str, p: Tensor) -> Tensor:
        g = grads[name]
        m[name] = b1 * state.m[name] + (1 - b1) * g
        s[name] = b2 * state.s[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        s_hat = s[name] / (1 - b2 ** t)
        return Tensor(p.data - cfg.learning_rate * m_hat / (np.sqrt(s_hat) + cfg.epsilon),
                      dtype=p.dtype)

    new = params.map(update)
    return new, OptimizerState(m, s, t)


def loss_and_grads(params: ModelParams, window: SequenceWindow) -> tuple[float, dict[str, np.ndarray]]:
    """One forward/backward pass on a fresh tape."""
    tape = ad.Tape()
    watched = {}

    def watch(name, t):
        watched[name] = tape.watch(t)
        return watched[name]

    tracked = params.map(watch)
    out = forward(tracked, window.feats, window.mask)
    loss = cross_entropy(out.probs, window.labels, window.mask)
    grads = ad.backward(tape, loss)
    return loss.item(), {name: grads.array(t) for name, t in watched.items()}


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {n: g * (max_norm / norm) for n, g in grads.items()}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_f1_50: float
    wall_ms: float

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["val_f1@50"] = d.pop("val_f1_50")
        return json.dumps(d)


@dataclass
class TrainResult:
    params: ModelParams          # best by validation accuracy
    final_params: ModelParams
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0


def evaluate(params: ModelParams, data: Sequence[tuple[FeatureSequence, LabelTrack]],
             background: int | None = None, mode: str = "per-video"):
    evals = []
    for seq, track in data:
        pred, probs, _ = predict_sequence(params, seq)
        evals.append(evaluate_sequence(pred, track.labels, params.cfg.C, probs, track.mask,
                                       background, seq.source_id))
    return aggregate(evals, params.cfg.C, mode, background), evals


def train(params: ModelParams, windows: Sequence[SequenceWindow],
          val_data: Sequence[tuple[FeatureSequence, LabelTrack]], cfg: TrainConfig,
          log_path=None, background: int | None = None) -> TrainResult:
    """Adam on masked cross-entropy, one tape per step; keeps the best-validating params."""
    if not windows:
        raise ValueError("train: no training windows")
    if not val_data:
        raise ValueError("train: no validation sequences")
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.zeros_like(params)
    best, best_acc, best_epoch, stale = params, -1.0, 0, 0
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(windows)) if cfg.shuffle else np.arange(len(windows))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = order[b:b + cfg.batch_size]
            acc: dict[str, np.ndarray] = {}
            try:
                for k in batch:
                    loss, grads = loss_and_grads(params, windows[k])
                    losses.append(loss)
                    for n, g in grads.items():
                        acc[n] = acc[n] + g if n in acc else g
                grads = {n: g / len(batch) for n, g in acc.items()}
                if cfg.clip_norm is not None:
                    grads = _clip(grads, cfg.clip_norm)
                params, state = adam_step(params, grads, state, cfg)
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged at step {step} (epoch {epoch}): {exc}") \
                    from exc
            step += 1
        report, _ = evaluate(params, val_data, background)
        record = EpochRecord(epoch, float(np.mean(losses)), report.accuracy, report.f1[50],
                             1000 * (time.perf_counter() - t0))
        history.append(record)
        log.info("epoch %d loss %.4f val acc %.2f f1@50 %.2f", epoch, record.train_loss,
                 record.val_accuracy, record.val_f1_50)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(record.to_json() + "\n")
        if report.accuracy > best_acc:
            best, best_acc, best_epoch, stale = params, report.accuracy, epoch, 0
        else:
            stale += 1
            if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
                break
    return TrainResult(best, params, history, best_epoch)


@dataclass
class GradCheckReport:
    variant: str
    max_rel_error: float
    worst_parameter: str
    checked: int
    seconds: float

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic, numeric) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(cfg: ModelConfig, seed: int = 0, step: float = 1e-5,
               oracle_dtype=np.longdouble) -> GradCheckReport:
    """Compare 64-bit tape gradients with central differences on every parameter.

    Uses one random unpadded window with random labels. The difference
    quotients are evaluated in ``oracle_dtype``: with plain float64 the loss
    rounding (about 2e-16) divided by the step leaves ~1e-11 of noise, which
    swamps the ~1e-10 gradients of the segment-level blocks at initialization.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed, dtype=np.float64)
    window = SequenceWindow(rng.standard_normal((cfg.window, cfg.D_feat)),
                            rng.integers(cfg.C, size=cfg.window), np.ones(cfg.window, dtype=bool))
    _, grads = loss_and_grads(params, window)

    hi = params.map(lambda _, t: Tensor(t.data.astype(oracle_dtype), dtype=oracle_dtype))
    feats = Tensor(window.feats.astype(oracle_dtype), dtype=oracle_dtype)
    h = oracle_dtype(step)

    def loss_with(name: str, value: np.ndarray):
        p = hi.map(lambda n, t: Tensor(value, dtype=oracle_dtype) if n == name else t)
        return cross_entropy(forward(p, feats).probs, window.labels).data

    worst, worst_name, checked = 0.0, "", 0
    for name, t in hi.named_tensors():
        base = t.data
        numeric = np.empty(base.shape)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = float((loss_with(name, plus) - loss_with(name, minus)) / (2 * h))
        err = relative_error(grads[name], numeric)
        checked += err.size
        k = np.unravel_index(np.argmax(err), err.shape)
        if err[k] > worst or not worst_name:
            worst = float(err[k])
            worst_name = f"{name}[{', '.join(map(str, k))}]"
    return GradCheckReport(cfg.variant.value, worst, worst_name, checked,
                           time.perf_counter() - t0)
