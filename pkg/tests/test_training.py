import json
import math

import numpy as np
import pytest

from hanet import autodiff as ad
from hanet.autodiff import NonFiniteError, Tensor
from hanet.data import FeatureSequence, LabelTrack, SequenceWindow, SynthSpec, window_sequence
from hanet.experiments import synthetic_split, windows_for
from hanet.model import ModelConfig, Variant, init_params
from hanet.training import (DivergenceError, OptimizerState, TrainConfig, adam_step,
                            cross_entropy, grad_check, loss_and_grads, relative_error, train)

import oracles

TINY = ModelConfig(L=4, T=3, N=2, D_feat=5, C=3)


class TestCrossEntropy:
    def test_uniform(self):
        probs = Tensor(np.full((2, 4), 0.25))
        assert cross_entropy(probs, [0, 3]).item() == pytest.approx(math.log(4), rel=1e-6)

    def test_confident(self):
        probs = Tensor([[0.9, 0.1]], dtype=np.float64)
        assert cross_entropy(probs, [0]).item() == pytest.approx(-math.log(0.9))

    def test_mask_excludes_rows(self):
        probs = Tensor([[0.5, 0.5], [1e-3, 1 - 1e-3]], dtype=np.float64)
        assert cross_entropy(probs, [0, 0], [True, False]).item() == pytest.approx(math.log(2))

    def test_zero_probability_is_clamped(self):
        probs = Tensor([[0.0, 1.0]], dtype=np.float64)
        assert cross_entropy(probs, [0]).item() == pytest.approx(-math.log(1e-12))

    def test_no_real_rows(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([[0.5, 0.5]]), [0], [False])


class TestAdam:
    def test_matches_scalar_recurrence(self):
        p = init_params(TINY, 0, dtype=np.float64)
        rng = np.random.default_rng(0)
        cfg = TrainConfig()
        p_cur, state = p, OptimizerState.zeros_like(p)
        stream = [{n: rng.standard_normal(t.shape) for n, t in p.named_tensors()} for _ in range(5)]
        for g in stream:
            p_cur, state = adam_step(p_cur, g, state, cfg)
        name = "classifier.W"
        theta0 = dict(p.named_tensors())[name].data[1, 2]
        ref = oracles.adam(float(theta0), [g[name][1, 2] for g in stream])
        assert dict(p_cur.named_tensors())[name].data[1, 2] == pytest.approx(ref, rel=1e-12)
        assert state.t == 5

    def test_first_step_moves_by_lr(self):
        p = init_params(TINY, 0, dtype=np.float64)
        grads = {n: np.full(t.shape, 3.0) for n, t in p.named_tensors()}
        q, _ = adam_step(p, grads, OptimizerState.zeros_like(p), TrainConfig(learning_rate=0.01))
        for (_, a), (_, b) in zip(p.named_tensors(), q.named_tensors()):
            np.testing.assert_allclose(a.data - b.data, 0.01, rtol=1e-6)

    def test_zero_learning_rate_is_identity(self):
        p = init_params(TINY, 0)
        grads = {n: np.ones(t.shape) for n, t in p.named_tensors()}
        q, _ = adam_step(p, grads, OptimizerState.zeros_like(p), TrainConfig(learning_rate=0.0))
        for (_, a), (_, b) in zip(p.named_tensors(), q.named_tensors()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_nan_gradient(self):
        p = init_params(TINY, 0)
        grads = {n: np.zeros(t.shape) for n, t in p.named_tensors()}
        grads["reduce.W"][0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            adam_step(p, grads, OptimizerState.zeros_like(p), TrainConfig())

    @pytest.mark.parametrize("bad", [{"learning_rate": -1}, {"beta1": 1.0}, {"epsilon": 0},
                                     {"epochs": 0}, {"clip_norm": 0}])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def tiny_data():
    spec = SynthSpec(C=3, D_feat=5, num_sequences=4, min_len=8, max_len=14)
    return synthetic_split(spec, 0)


def test_zero_learning_rate_training_keeps_params(tmp_path):
    train_data, val_data = tiny_data()
    p = init_params(TINY, 0)
    res = train(p, windows_for(train_data, TINY), val_data,
                TrainConfig(learning_rate=0.0, epochs=2), log_path=tmp_path / "log.jsonl")
    for (_, a), (_, b) in zip(p.named_tensors(), res.final_params.named_tensors()):
        np.testing.assert_array_equal(a.data, b.data)
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    assert set(lines[0]) == {"epoch", "train_loss", "val_accuracy", "val_f1@50", "wall_ms"}
    assert lines[0]["train_loss"] == lines[1]["train_loss"]


def test_training_reduces_loss():
    train_data, val_data = tiny_data()
    res = train(init_params(TINY, 0), windows_for(train_data, TINY), val_data,
                TrainConfig(learning_rate=1e-2, epochs=8))
    assert res.history[-1].train_loss < res.history[0].train_loss
    assert 1 <= res.best_epoch <= 8


def test_training_is_deterministic():
    train_data, val_data = tiny_data()
    runs = [train(init_params(TINY, 0), windows_for(train_data, TINY), val_data,
                  TrainConfig(epochs=2, batch_size=2)) for _ in range(2)]
    for (_, a), (_, b) in zip(runs[0].final_params.named_tensors(),
                              runs[1].final_params.named_tensors()):
        np.testing.assert_array_equal(a.data, b.data)


def test_early_stopping():
    train_data, val_data = tiny_data()
    res = train(init_params(TINY, 0), windows_for(train_data, TINY), val_data,
                TrainConfig(learning_rate=0.0, epochs=10, early_stop_patience=2))
    assert len(res.history) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    train_data, val_data = tiny_data()
    p = init_params(TINY, 0).map(lambda n, t: Tensor(np.full(t.shape, 3e38, dtype=np.float32)) if n == "reduce.W" else t)
    with pytest.raises(DivergenceError, match="step 0"):
        train(p, windows_for(train_data, TINY), val_data, TrainConfig(epochs=1))


def test_empty_inputs():
    _, val_data = tiny_data()
    with pytest.raises(ValueError):
        train(init_params(TINY, 0), [], val_data, TrainConfig(epochs=1))


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, -1.0) == 1.0


SMALL = ModelConfig(L=3, T=2, N=2, D_feat=3, C=2)


@pytest.mark.parametrize("variant", list(Variant))
def test_grad_check_small(variant):
    report = grad_check(SMALL.replace(variant=variant))
    assert report.passed(1e-4), report
    assert report.checked > 0


def test_grad_check_catches_wrong_tanh_derivative(monkeypatch):
    monkeypatch.setattr(ad, "_tanh_local", lambda y: np.ones_like(y))
    report = grad_check(SMALL)
    assert report.max_rel_error > 1e-2


def test_grad_check_catches_wrong_sigmoid_derivative(monkeypatch):
    monkeypatch.setattr(ad, "_sigmoid_local", lambda y: y)
    assert grad_check(SMALL).max_rel_error > 1e-2


def test_masked_window_gradient():
    rng = np.random.default_rng(0)
    seq = FeatureSequence(rng.standard_normal((4, 5)))
    (w,) = window_sequence(seq, LabelTrack(rng.integers(3, size=4)), TINY)
    loss, grads = loss_and_grads(init_params(TINY, 0), w)
    assert np.isfinite(loss) and all(np.isfinite(g).all() for g in grads.values())
    assert isinstance(w, SequenceWindow)
