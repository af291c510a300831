"""Hierarchical attention encoder-decoder for frame-wise segmentation.

A window of N segments x T frames flows through:

    reduce (dense D_feat -> L)
    frame encoder LSTM per segment -> frame attention -> segment embedding s_i
    segment encoder LSTM over s_1..s_N -> segment attention -> video embedding v
    segment decoder LSTM seeded with v, fed s_i -> h_dec_i
    frame decoder LSTM per segment seeded with h_dec_i, fed the reduced frames
    classifier + softmax per frame

The two ablations drop blocks from the top of the hierarchy. ``minus-ve`` has
no segment encoder, segment attention or segment decoder; each segment's frame
decoder is seeded with that segment's embedding s_i. ``minus-ve-se`` further
replaces frame attention with the last frame-encoder state.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from hanet import autodiff as ad
from hanet.autodiff import ShapeError, Tensor
from hanet.layers import (AttentionParams, DenseParams, LstmParams, LstmState,
                          attention_pool, dense, lstm_sequence, lstm_step)

REFERENCE_PARAM_COUNT = 13_500_000


class Variant(str, enum.Enum):
    FULL = "full"
    MINUS_VE = "minus-ve"
    MINUS_VE_SE = "minus-ve-se"

    @property
    def code(self) -> int:
        return list(Variant).index(self)


class DecoderSeed(str, enum.Enum):
    PER_SEGMENT = "per_segment"
    LAST_SEGMENT = "last_segment"

    @property
    def code(self) -> int:
        return list(DecoderSeed).index(self)


@dataclass(frozen=True)
class ModelConfig:
    L: int = 200
    T: int = 50
    N: int = 5
    D_feat: int = 2048
    C: int = 6
    variant: Variant = Variant.FULL
    decoder_seed: DecoderSeed = DecoderSeed.PER_SEGMENT

    def __post_init__(self):
        for name in ("L", "T", "N", "D_feat", "C"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "decoder_seed", DecoderSeed(self.decoder_seed))

    @property
    def window(self) -> int:
        return self.N * self.T

    @classmethod
    def reference(cls, **overrides) -> ModelConfig:
        return cls(**{"L": 200, "T": 50, "N": 5, "D_feat": 2048, "C": 6, **overrides})

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)


# block name -> (class, present in which variants); order is the checkpoint order
BLOCKS: list[tuple[str, type, tuple[Variant, ...]]] = [
    ("reduce", DenseParams, tuple(Variant)),
    ("enc_frame", LstmParams, tuple(Variant)),
    ("attn_frame", AttentionParams, (Variant.FULL, Variant.MINUS_VE)),
    ("enc_segment", LstmParams, (Variant.FULL,)),
    ("attn_segment", AttentionParams, (Variant.FULL,)),
    ("dec_segment", LstmParams, (Variant.FULL,)),
    ("dec_frame", LstmParams, tuple(Variant)),
    ("classifier", DenseParams, tuple(Variant)),
]


@dataclass(frozen=True)
class ModelParams:
    cfg: ModelConfig
    reduce: DenseParams
    enc_frame: LstmParams
    attn_frame: AttentionParams | None
    enc_segment: LstmParams | None
    attn_segment: AttentionParams | None
    dec_segment: LstmParams | None
    dec_frame: LstmParams
    classifier: DenseParams

    def __post_init__(self):
        for name, _, variants in BLOCKS:
            present = getattr(self, name) is not None
            if present != (self.cfg.variant in variants):
                state = "missing" if not present else "unexpected"
                raise ValueError(f"{state} block {name!r} for variant {self.cfg.variant.value}")

    def blocks(self) -> list[tuple[str, object]]:
        return [(name, getattr(self, name)) for name, _, _ in BLOCKS
                if getattr(self, name) is not None]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(f"{block}.{leaf}", t) for block, params in self.blocks()
                for leaf, t in params.tensors()]

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> ModelParams:
        """New params with every tensor replaced by ``fn(name, tensor)``."""
        changes = {}
        for block, params in self.blocks():
            changes[block] = dataclasses.replace(
                params, **{leaf: fn(f"{block}.{leaf}", t) for leaf, t in params.tensors()})
        return dataclasses.replace(self, **changes)

    def astype(self, dtype) -> ModelParams:
        return self.map(lambda _, t: Tensor(t.data, dtype=dtype))


@dataclass
class WindowOutput:
    probs: Tensor                       # [N*T, C]
    frame_alphas: list[Tensor]          # N vectors; empty for minus-ve-se
    segment_alphas: Tensor | None       # [n_segments]; full only
    video_embedding: Tensor | None      # [L]; full only
    segment_embeddings: list[Tensor]


def init_params(cfg: ModelConfig, seed: int, dtype=None) -> ModelParams:
    """Deterministic Glorot-uniform initialization.

    Each block draws from its own stream keyed by block position, so the
    blocks shared between variants get identical values for a given seed.
    """
    dtype = dtype or ad.default_dtype()
    L = cfg.L
    blocks = {}
    for k, (name, cls, variants) in enumerate(BLOCKS):
        if cfg.variant not in variants:
            blocks[name] = None
            continue
        rng = np.random.default_rng([seed, k])
        if name == "reduce":
            blocks[name] = DenseParams.init(rng, cfg.D_feat, L, dtype)
        elif name == "classifier":
            blocks[name] = DenseParams.init(rng, L, cfg.C, dtype)
        elif cls is LstmParams:
            blocks[name] = LstmParams.init(rng, L, L, dtype)
        else:
            blocks[name] = AttentionParams.init(rng, L, dtype)
    return ModelParams(cfg=cfg, **blocks)


def param_count(p: ModelParams) -> int:
    return sum(t.size for _, t in p.named_tensors())


def param_count_formula(cfg: ModelConfig) -> int:
    L, D, C = cfg.L, cfg.D_feat, cfg.C
    lstms = {Variant.FULL: 4, Variant.MINUS_VE: 2, Variant.MINUS_VE_SE: 2}[cfg.variant]
    attns = {Variant.FULL: 2, Variant.MINUS_VE: 1, Variant.MINUS_VE_SE: 0}[cfg.variant]
    return (D * L + L) + lstms * 4 * L * (2 * L + 1) + attns * (L * L + 2 * L) + (L * C + C)


def _real_counts(cfg: ModelConfig, mask: np.ndarray | None) -> np.ndarray:
    """Real frames per segment. Padding may only occupy the window tail."""
    if mask is None:
        return np.full(cfg.N, cfg.T)
    mask = np.asarray(mask, dtype=bool)
    n_real = int(mask.sum())
    if mask.shape != (cfg.window,) or not mask[:n_real].all():
        raise ShapeError("mask must have N*T entries with padding only at the tail")
    return np.clip(n_real - np.arange(cfg.N) * cfg.T, 0, cfg.T)


def _segment_rows(cfg: ModelConfig, feats: Tensor, i: int) -> Tensor:
    return ad.take(feats, slice(i * cfg.T, (i + 1) * cfg.T))


def encode_frames(p: ModelParams, feats: Tensor, mask: np.ndarray | None = None
                  ) -> tuple[list[Tensor], list[Tensor]]:
    """Per-segment frame encoding and pooling into segment embeddings.

    The frame encoder restarts from a zero state in every segment. Attention
    only covers real frames; a fully padded segment attends over all of its
    (padding) frames, which never reaches a real output.
    """
    cfg = p.cfg
    if feats.shape != (cfg.window, cfg.L):
        raise ShapeError(f"encode_frames: expected reduced features of shape "
                         f"{(cfg.window, cfg.L)}, got {feats.shape}")
    real = _real_counts(cfg, mask)
    segs, alphas = [], []
    for i in range(cfg.N):
        states = lstm_sequence(p.enc_frame, _segment_rows(cfg, feats, i))
        n = int(real[i]) or cfg.T
        if p.attn_frame is None:
            segs.append(states[n - 1].h)
            continue
        pooled, alpha = attention_pool(p.attn_frame, [s.h for s in states[:n]])
        segs.append(pooled)
        alphas.append(alpha)
    return segs, alphas


def encode_segments(p: ModelParams, segs: list[Tensor], n_real: int | None = None
                    ) -> tuple[Tensor, Tensor]:
    """Segment-level LSTM plus attention; returns (video embedding, alphas)."""
    if not segs:
        raise ShapeError("encode_segments: no segment embeddings")
    if p.enc_segment is None:
        raise ValueError(f"variant {p.cfg.variant.value} has no segment encoder")
    states = lstm_sequence(p.enc_segment, segs)
    n = n_real or len(states)
    return attention_pool(p.attn_segment, [s.h for s in states[:n]])


def decode(p: ModelParams, v: Tensor | None, segs: list[Tensor], feats: Tensor,
           mask: np.ndarray | None = None) -> Tensor:
    """Segment decoder then frame decoder; returns per-frame class probabilities."""
    cfg = p.cfg
    if len(segs) != cfg.N or feats.shape != (cfg.window, cfg.L):
        raise ShapeError(f"decode: expected {cfg.N} segments and features "
                         f"{(cfg.window, cfg.L)}, got {len(segs)} and {feats.shape}")
    zero = ad.zeros(cfg.L, feats.dtype)
    if cfg.variant is Variant.FULL:
        if v is None:
            raise ValueError("full variant needs a video embedding")
        state = LstmState(v, zero)
        dec = []
        for s in segs:
            state = lstm_step(p.dec_segment, s, state)
            dec.append(state.h)
        if cfg.decoder_seed is DecoderSeed.LAST_SEGMENT:
            last = int(np.count_nonzero(_real_counts(cfg, mask))) or cfg.N
            seeds = [dec[last - 1]] * cfg.N
        else:
            seeds = dec
    else:
        seeds = segs
    hidden = []
    for i in range(cfg.N):
        states = lstm_sequence(p.dec_frame, _segment_rows(cfg, feats, i), LstmState(seeds[i], zero))
        hidden.extend(s.h for s in states)
    return ad.softmax(dense(p.classifier, ad.stack(hidden)))


def forward(p: ModelParams, feats, mask: np.ndarray | None = None) -> WindowOutput:
    """Run one N*T window of raw features through the model.

    ``feats`` may be a :class:`~hanet.data.SequenceWindow` (its mask is used)
    or a [N*T, D_feat] array/tensor.
    """
    cfg = p.cfg
    if hasattr(feats, "feats") and hasattr(feats, "mask"):
        feats, mask = feats.feats, (feats.mask if mask is None else mask)
    x = ad.as_tensor(feats) if isinstance(feats, Tensor) else Tensor(feats, dtype=p.reduce.W.dtype)
    if x.shape != (cfg.window, cfg.D_feat):
        raise ShapeError(f"forward: expected features {(cfg.window, cfg.D_feat)}, got {x.shape}")
    e = dense(p.reduce, x)
    segs, frame_alphas = encode_frames(p, e, mask)
    v = seg_alpha = None
    if cfg.variant is Variant.FULL:
        n_real = int(np.count_nonzero(_real_counts(cfg, mask))) or cfg.N
        v, seg_alpha = encode_segments(p, segs, n_real)
    probs = decode(p, v, segs, e, mask)
    return WindowOutput(probs, frame_alphas, seg_alpha, v, segs)


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)
