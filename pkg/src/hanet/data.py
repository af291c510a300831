"""Feature/label file IO, windowing and a synthetic sequence generator.

File formats
------------
Feature file: ``b"HAFT1"``, then F and D_feat as little-endian uint64, then
F*D_feat little-endian float32 values, row-major.

Label file: text, one decimal class id per line.

Manifest: text, one ``features_path<TAB>labels_path`` per line. Relative
paths resolve against the manifest's directory.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"HAFT1"
_HEADER = struct.Struct("<QQ")


class FormatError(ValueError):
    """A data file does not match its declared format."""


@dataclass
class FeatureSequence:
    frames: np.ndarray  # [F, D_feat] float32
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(f"feature matrix must be F x D with F, D >= 1, got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class LabelTrack:
    labels: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mask = (np.ones(len(self.labels), dtype=bool) if self.mask is None
                     else np.asarray(self.mask, dtype=bool))
        if self.labels.shape != self.mask.shape or self.labels.ndim != 1:
            raise ValueError(f"labels {self.labels.shape} and mask {self.mask.shape} must be "
                             "equal-length vectors")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SequenceWindow:
    feats: np.ndarray   # [N*T, D_feat]
    labels: np.ndarray  # [N*T]; padding holds the sentinel C
    mask: np.ndarray    # [N*T]; False on padding
    origin: tuple[str, int] = ("", 0)

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())


def save_features(path, seq: FeatureSequence) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(_HEADER.pack(*frames.shape))
        fh.write(frames.tobytes())


def load_features(path) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    head = len(FEATURE_MAGIC) + _HEADER.size
    if raw[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(FEATURE_MAGIC)]!r}")
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    F, D = _HEADER.unpack_from(raw, len(FEATURE_MAGIC))
    expected = F * D * 4
    actual = len(raw) - head
    if actual != expected:
        raise FormatError(f"{path}: payload is {actual} bytes, expected {expected} for F={F}, D={D}")
    if F < 1 or D < 1:
        raise FormatError(f"{path}: empty feature matrix F={F}, D={D}")
    frames = np.frombuffer(raw, dtype="<f4", offset=head).reshape(F, D).astype(np.float32)
    return FeatureSequence(frames, path.stem)


def save_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{int(c)}\n" for c in labels))


def load_labels(path, C: int) -> LabelTrack:
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            c = int(line)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: not an integer label: {line!r}") from None
        if not 0 <= c < C:
            raise FormatError(f"{path}:{lineno}: label {c} outside [0, {C})")
        labels.append(c)
    if not labels:
        raise FormatError(f"{path}: no labels")
    return LabelTrack(np.array(labels))


def check_pair(seq: FeatureSequence, track: LabelTrack) -> None:
    if len(seq) != len(track):
        raise FormatError(f"{seq.source_id or 'sequence'}: {len(seq)} feature frames but "
                          f"{len(track)} labels")


def read_manifest(path) -> list[tuple[Path, Path]]:
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'features<TAB>labels'")
        pairs.append(tuple(p if Path(p).is_absolute() else path.parent / p
                           for p in map(Path, parts)))
    if not pairs:
        raise FormatError(f"{path}: empty manifest")
    return pairs


def write_manifest(path, pairs) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        return str(p.relative_to(base)) if p.is_relative_to(base) else str(p)

    path.write_text("".join(f"{rel(feat)}\t{rel(lab)}\n" for feat, lab in pairs))


def load_dataset(manifest, C: int) -> list[tuple[FeatureSequence, LabelTrack]]:
    data = []
    for feat_path, label_path in read_manifest(manifest):
        seq = load_features(feat_path)
        track = load_labels(label_path, C)
        check_pair(seq, track)
        data.append((seq, track))
    return data


def window_sequence(seq: FeatureSequence, track: LabelTrack | None, cfg) -> list[SequenceWindow]:
    """Cut a sequence into consecutive non-overlapping N*T windows.

    The last window is zero-padded; padded frames get the sentinel label
    ``cfg.C`` and ``mask=False``.
    """
    F = len(seq)
    if track is not None:
        check_pair(seq, track)
    size = cfg.N * cfg.T
    labels = track.labels if track is not None else np.zeros(F, dtype=np.int64)
    windows = []
    for k in range(math.ceil(F / size)):
        start = k * size
        n = min(size, F - start)
        feats = np.zeros((size, seq.frames.shape[1]), dtype=np.float32)
        feats[:n] = seq.frames[start:start + n]
        lab = np.full(size, cfg.C, dtype=np.int64)
        lab[:n] = labels[start:start + n]
        mask = np.zeros(size, dtype=bool)
        mask[:n] = True if track is None else track.mask[start:start + n]
        windows.append(SequenceWindow(feats, lab, mask, (seq.source_id, start)))
    return windows


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic segmentation task.

    ``order=0`` draws each next action uniformly among classes other than the
    current one. ``order=2`` makes the next action depend on the previous two
    through a fixed random transition table with concentration ``peak``.
    """
    C: int = 3
    D_feat: int = 16
    num_sequences: int = 20
    min_len: int = 100
    max_len: int = 300
    mean_action_len: float = 10.0
    noise_sigma: float = 0.0
    order: int = 0
    peak: float = 0.9

    def __post_init__(self):
        if self.C < 2:
            raise ValueError(f"need at least 2 classes, got C={self.C}")
        if self.D_feat < self.C:
            raise ValueError(f"D_feat={self.D_feat} cannot hold {self.C} orthogonal class means")
        if self.num_sequences < 1 or not 1 <= self.min_len <= self.max_len:
            raise ValueError("need num_sequences >= 1 and 1 <= min_len <= max_len")
        if self.mean_action_len < 1 or self.noise_sigma < 0:
            raise ValueError("need mean_action_len >= 1 and noise_sigma >= 0")
        if self.order not in (0, 2):
            raise ValueError(f"order must be 0 or 2, got {self.order}")
        if not 0 < self.peak <= 1:
            raise ValueError(f"peak must lie in (0, 1], got {self.peak}")


def class_means(C: int, D: int) -> np.ndarray:
    """Orthonormal class means: class c is the normalized indicator of its dim block."""
    means = np.zeros((C, D))
    edges = np.linspace(0, D, C + 1).round().astype(int)
    for c in range(C):
        width = edges[c + 1] - edges[c]
        means[c, edges[c]:edges[c + 1]] = 1.0 / np.sqrt(width)
    return means


def _transition_table(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    # P[a, b] is the distribution of the action after (a, b); never repeats b
    C = spec.C
    table = np.zeros((C, C, C))
    for a in range(C):
        for b in range(C):
            options = [c for c in range(C) if c != b]
            favourite = options[rng.integers(len(options))]
            rest = (1.0 - spec.peak) / max(len(options) - 1, 1)
            for c in options:
                table[a, b, c] = spec.peak if c == favourite else rest
            table[a, b] /= table[a, b].sum()
    return table


def synth_generate(spec: SynthSpec, seed: int) -> list[tuple[FeatureSequence, LabelTrack]]:
    rng = np.random.default_rng(seed)
    means = class_means(spec.C, spec.D_feat)
    table = _transition_table(spec, rng) if spec.order == 2 else None
    out = []
    for k in range(spec.num_sequences):
        F = int(rng.integers(spec.min_len, spec.max_len + 1))
        labels = np.empty(F, dtype=np.int64)
        prev, cur = None, int(rng.integers(spec.C))
        pos = 0
        while pos < F:
            dur = min(int(rng.geometric(1.0 / spec.mean_action_len)), spec.max_len)
            labels[pos:pos + dur] = cur
            pos += dur
            if table is not None and prev is not None:
                nxt = int(rng.choice(spec.C, p=table[prev, cur]))
            else:
                nxt = int(rng.integers(spec.C - 1))
                nxt += nxt >= cur
            prev, cur = cur, nxt
        frames = means[labels] + spec.noise_sigma * rng.standard_normal((F, spec.D_feat))
        out.append((FeatureSequence(frames, f"seq{k:04d}"), LabelTrack(labels)))
    return out


def split(data: list, val_fraction: float) -> tuple[list, list]:
    """The last ``val_fraction`` of the sequences become validation data."""
    n_val = max(1, int(round(len(data) * val_fraction))) if val_fraction > 0 else 0
    if n_val >= len(data):
        raise ValueError(f"cannot hold out {n_val} of {len(data)} sequences")
    return data[:len(data) - n_val], data[len(data) - n_val:]
