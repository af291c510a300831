"""Binary model checkpoints.

Layout (all integers little-endian uint64)::

    b"HANET1"
    L, T, N, D_feat, C, variant code, decoder-seed code
    for every tensor in block order:
        rank, extents..., float32 data (little-endian, row-major)

Block order is reduce, enc_frame, attn_frame, enc_segment, attn_segment,
dec_segment, dec_frame, classifier, skipping blocks the variant lacks.
Inside a block: dense (W, b), LSTM (W_x, W_h, b), attention (W, b, u).
Variant codes: 0 full, 1 minus-ve, 2 minus-ve-se. Decoder-seed codes:
0 per_segment, 1 last_segment.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from hanet.autodiff import Tensor
from hanet.data import FormatError
from hanet.model import (DecoderSeed, ModelConfig, ModelParams, Variant, init_params,
                         param_count_formula)

MAGIC = b"HANET1"
_U64 = struct.Struct("<Q")


def to_bytes(p: ModelParams) -> bytes:
    cfg = p.cfg
    out = [MAGIC]
    for value in (cfg.L, cfg.T, cfg.N, cfg.D_feat, cfg.C, cfg.variant.code, cfg.decoder_seed.code):
        out.append(_U64.pack(value))
    for _, t in p.named_tensors():
        out.append(_U64.pack(t.data.ndim))
        out.extend(_U64.pack(n) for n in t.shape)
        out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(out)


def from_bytes(raw: bytes) -> ModelParams:
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"not a checkpoint (magic {raw[:len(MAGIC)]!r})")
    pos = len(MAGIC)

    def u64() -> int:
        nonlocal pos
        if pos + 8 > len(raw):
            raise FormatError(f"checkpoint truncated at byte {pos}")
        (value,) = _U64.unpack_from(raw, pos)
        pos += 8
        return value

    L, T, N, D, C, variant, seed_mode = (u64() for _ in range(7))
    try:
        cfg = ModelConfig(L=L, T=T, N=N, D_feat=D, C=C, variant=list(Variant)[variant],
                          decoder_seed=list(DecoderSeed)[seed_mode])
    except IndexError:
        raise FormatError(f"unknown variant/decoder codes {variant}/{seed_mode}") from None
    except ValueError as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None
    if 4 * param_count_formula(cfg) > len(raw):
        raise FormatError(f"checkpoint of {len(raw)} bytes is too small for {cfg}")
    template = init_params(cfg, 0)
    loaded = {}
    for name, t in template.named_tensors():
        rank = u64()
        shape = tuple(u64() for _ in range(rank))
        if shape != t.shape:
            raise FormatError(f"{name}: stored shape {shape}, expected {t.shape}")
        nbytes = 4 * t.size
        if pos + nbytes > len(raw):
            raise FormatError(f"{name}: checkpoint truncated")
        loaded[name] = np.frombuffer(raw, dtype="<f4", count=t.size, offset=pos) \
            .reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after last tensor")
    return template.map(lambda name, _: Tensor(loaded[name]))


def save(path, p: ModelParams) -> None:
    Path(path).write_bytes(to_bytes(p))


def load(path) -> ModelParams:
    return from_bytes(Path(path).read_bytes())
