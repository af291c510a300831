"""Desk-scale experiments: synthetic training runs, ablations, sweeps, timing."""
from __future__ import annotations

import csv
import gc
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hanet.data import SynthSpec, split, synth_generate, window_sequence
from hanet.model import ModelConfig, Variant, forward, init_params
from hanet.training import TrainConfig, TrainResult, evaluate, train

REFERENCE_WINDOWS_PER_SECOND = 1000 / 21.2


def windows_for(data, cfg: ModelConfig) -> list:
    return [w for seq, track in data for w in window_sequence(seq, track, cfg)]


def fit(cfg: ModelConfig, train_data, val_data, tcfg: TrainConfig, seed: int = 0,
        log_path=None) -> TrainResult:
    params = init_params(cfg, seed)
    return train(params, windows_for(train_data, cfg), val_data, tcfg, log_path=log_path)


def synthetic_split(spec: SynthSpec, seed: int, val_fraction: float = 0.25):
    return split(synth_generate(spec, seed), val_fraction)


# Noiseless learnability task
LEARNABILITY_SPEC = SynthSpec(C=3, D_feat=16, num_sequences=16, min_len=60, max_len=180,
                              mean_action_len=10, noise_sigma=0.0)
LEARNABILITY_MODEL = ModelConfig(L=32, T=20, N=3, D_feat=16, C=3)

# Long-range task for the ablation ordering: next action depends on the previous two
ABLATION_SPEC = SynthSpec(C=4, D_feat=16, num_sequences=16, min_len=60, max_len=180,
                          mean_action_len=10, noise_sigma=0.5, order=2)
ABLATION_MODEL = ModelConfig(L=32, T=20, N=3, D_feat=16, C=4)


@dataclass
class AblationResult:
    scores: dict[str, list[float]]  # variant -> val F1@50 per seed

    @property
    def medians(self) -> dict[str, float]:
        return {v: statistics.median(s) for v, s in self.scores.items()}

    def ordered(self) -> bool:
        m = self.medians
        return m["full"] >= m["minus-ve"] >= m["minus-ve-se"]


def ablation(spec: SynthSpec = ABLATION_SPEC, cfg: ModelConfig = ABLATION_MODEL,
             seeds: Sequence[int] = range(5), epochs: int = 20) -> AblationResult:
    """Train every variant on the same data per seed; score validation F1@50."""
    scores: dict[str, list[float]] = {v.value: [] for v in Variant}
    for seed in seeds:
        train_data, val_data = synthetic_split(spec, seed)
        for variant in Variant:
            result = fit(cfg.replace(variant=variant), train_data, val_data,
                         TrainConfig(epochs=epochs, seed=seed), seed=seed)
            report, _ = evaluate(result.params, val_data)
            scores[variant.value].append(report.f1[50])
    return AblationResult(scores)


SWEEP_GRID = {"L": (8, 32, 128), "T": (10, 20, 50), "N": (2, 5, 8)}
SWEEP_COLUMNS = ["swept", "L", "T", "N", "val_accuracy", "f1@10", "f1@25", "f1@50", "edit",
                 "map_mid", "best_epoch"]


def sweep(base: ModelConfig, train_data, val_data, tcfg: TrainConfig,
          grid: dict[str, Sequence[int]] = SWEEP_GRID, seed: int = 0) -> list[dict]:
    """Vary one of L, T, N at a time around ``base``; one row per setting."""
    rows = []
    for name, values in grid.items():
        for value in values:
            cfg = base.replace(**{name: value})
            result = fit(cfg, train_data, val_data, tcfg, seed=seed)
            report, _ = evaluate(result.params, val_data)
            rows.append({"swept": name, "L": cfg.L, "T": cfg.T, "N": cfg.N,
                         "val_accuracy": report.accuracy, **{f"f1@{k}": v for k, v in report.f1.items()},
                         "edit": report.edit, "map_mid": report.map_mid,
                         "best_epoch": result.best_epoch})
    return rows


def write_csv(path, rows: list[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in columns})


@dataclass
class BenchResult:
    windows: int
    seconds: float
    frames_per_window: int

    @property
    def windows_per_second(self) -> float:
        return self.windows / self.seconds

    def summary(self) -> str:
        return (f"windows={self.windows} frames/window={self.frames_per_window} "
                f"seconds={self.seconds:.3f} windows/s={self.windows_per_second:.2f} "
                f"reference_windows/s={REFERENCE_WINDOWS_PER_SECOND:.2f} "
                f"(1000 windows in 21.2 s on one 2.5 GHz core)")


def bench(cfg: ModelConfig, n_windows: int = 50, seed: int = 0, threads: int = 1) -> BenchResult:
    """Time tape-free forward passes over random full windows.

    BLAS is pinned to ``threads`` threads and, as in ``timeit``, the cyclic
    garbage collector is paused while timing.
    """
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    feats = rng.standard_normal((n_windows, cfg.window, cfg.D_feat)).astype(np.float32)
    with threadpool_limits(limits=threads):
        forward(params, feats[0])  # warm-up
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            t0 = time.perf_counter()
            for x in feats:
                forward(params, x)
            seconds = time.perf_counter() - t0
        finally:
            if gc_was_enabled:
                gc.enable()
    return BenchResult(n_windows, seconds, cfg.window)
