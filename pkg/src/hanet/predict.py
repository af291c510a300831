"""Whole-sequence inference and export of predicted label tracks."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from hanet.data import FeatureSequence, LabelTrack, window_sequence
from hanet.model import ModelParams, WindowOutput, forward, predict_labels


def predict_sequence(params: ModelParams, seq: FeatureSequence
                     ) -> tuple[np.ndarray, np.ndarray, list[WindowOutput]]:
    """Labels [F], probabilities [F, C] and the raw per-window outputs."""
    cfg = params.cfg
    if seq.frames.shape[1] != cfg.D_feat:
        raise ValueError(f"{seq.source_id}: features have {seq.frames.shape[1]} dims, "
                         f"checkpoint expects {cfg.D_feat}")
    outputs = [forward(params, w) for w in window_sequence(seq, None, cfg)]
    probs = np.concatenate([o.probs.data for o in outputs])[:len(seq)]
    return predict_labels(probs), probs, outputs


def _attention_doc(outputs: Sequence[WindowOutput], n_frames: int, cfg) -> dict:
    windows = []
    for k, out in enumerate(outputs):
        start = k * cfg.window
        windows.append({
            "start_frame": start,
            "real_frames": int(min(cfg.window, n_frames - start)),
            "frame_alphas": [a.data.astype(float).tolist() for a in out.frame_alphas],
            "segment_alphas": (None if out.segment_alphas is None
                               else out.segment_alphas.data.astype(float).tolist()),
        })
    return {"T": cfg.T, "N": cfg.N, "windows": windows}


def write_probs(path, pred: np.ndarray, probs: np.ndarray) -> None:
    C = probs.shape[1]
    header = "frame,pred,max_prob," + ",".join(f"p{c}" for c in range(C))
    lines = [header]
    for t, (label, row) in enumerate(zip(pred, probs)):
        lines.append(f"{t},{label},{row.max():.9g}," + ",".join(f"{v:.9g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_probs(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_probs`; probabilities come back as float32."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 1].astype(np.int64), rows[:, 3:].astype(np.float32)


def predict_export(params: ModelParams, data: Sequence[tuple[FeatureSequence, LabelTrack | None]],
                   out_dir, attention: bool = True, threads: int = 1, plot: bool = False
                   ) -> list[str]:
    """Write ``<id>.pred.txt``, ``<id>.probs.csv``, ``<id>.track.csv`` and
    optionally ``<id>.attention.json`` / ``<id>.track.png`` per sequence."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(item) -> str:
        seq, track = item
        pred, probs, outputs = predict_sequence(params, seq)
        stem = out_dir / seq.source_id
        Path(f"{stem}.pred.txt").write_text("".join(f"{c}\n" for c in pred))
        write_probs(f"{stem}.probs.csv", pred, probs)
        gt = track.labels if track is not None else np.full(len(pred), -1)
        Path(f"{stem}.track.csv").write_text(
            "frame,gt,pred\n" + "".join(f"{t},{g},{p}\n" for t, (g, p) in enumerate(zip(gt, pred))))
        if attention:
            with open(f"{stem}.attention.json", "w") as fh:
                json.dump(_attention_doc(outputs, len(seq), params.cfg), fh)
        if plot:
            from hanet.plotting import plot_label_tracks
            plot_label_tracks(gt if track is not None else None, pred, params.cfg.C,
                              f"{stem}.track.png", title=seq.source_id)
        return seq.source_id

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, data))
    return [one(item) for item in data]
