"""Loss, optimizer, metrics, and the training loop on the synthetic oracle."""

import json
import math

import numpy as np
import pytest

from tristream import (AblationFlags, DataError, RngState, Tensor,
                       adam_step, cross_entropy, evaluate, fit, gradcheck,
                       init_adam, make_train_config, metrics_from_predictions,
                       split_ratio, synth_generate, tiny_config, build,
                       forward)
from tristream.train import ABLATION_ROWS, ablate, ablation_table


class TestCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        for K in (2, 6, 52):
            logits = Tensor(np.zeros((3, K)))
            loss = cross_entropy(logits, [0, 1, K - 1]).item()
            assert abs(loss - math.log(K)) <= 1e-12

    def test_fifty_two_classes_value(self):
        loss = cross_entropy(Tensor(np.zeros((1, 52))), [17]).item()
        assert abs(loss - 3.9512) <= 1e-4

    def test_confident_logits_drive_loss_to_zero(self):
        logits = np.full((2, 4), -100.0)
        logits[0, 1] = 100.0
        logits[1, 3] = 100.0
        loss = cross_entropy(Tensor(logits), [1, 3]).item()
        assert 0.0 <= loss <= 1e-12

    def test_out_of_range_label_rejected(self):
        with pytest.raises(DataError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_gradcheck_tight(self):
        rng = RngState(0)
        logits = Tensor(rng.normal((4, 5)), requires_grad=True, name="logits")
        labels = [0, 2, 4, 1]
        report = gradcheck(lambda: cross_entropy(logits, labels),
                           {"logits": logits}, tol=1e-6)
        assert report.passed, report.summary()


class FakeParams:
    """Minimal stand-in exposing .named for the optimizer."""

    def __init__(self, arrays):
        self.named = {name: Tensor(a, requires_grad=True, name=name)
                      for name, a in arrays.items()}


class TestAdam:
    def test_first_step_magnitude(self):
        params = FakeParams({"w": np.array([1.0, 1.0, 1.0])})
        state = init_adam(params, learning_rate=0.01)
        adam_step(params, {"w": np.full(3, 3.0)}, state)
        delta = params.named["w"].data - 1.0
        assert np.all(np.abs(delta + 0.01) <= 1e-9)
        assert state.step_count == 1

    def test_zero_gradient_leaves_parameters(self):
        params = FakeParams({"w": np.array([2.0, -1.0])})
        state = init_adam(params, learning_rate=0.5)
        adam_step(params, {"w": np.zeros(2)}, state)
        assert np.array_equal(params.named["w"].data, [2.0, -1.0])
        assert state.step_count == 1

    def test_deterministic_trajectories(self):
        def run():
            params = FakeParams({"w": np.array([0.3, -0.7])})
            state = init_adam(params, learning_rate=0.02)
            rng = RngState(5)
            for _ in range(25):
                adam_step(params, {"w": rng.normal(2)}, state)
            return params.named["w"].data
        assert np.array_equal(run(), run())

    def test_gradient_scale_near_invariance(self):
        # scaling g by 10 changes the first-step update only through epsilon
        def first_step(g):
            params = FakeParams({"w": np.array([0.0])})
            state = init_adam(params, learning_rate=0.01)
            adam_step(params, {"w": np.array([g])}, state)
            return params.named["w"].data[0]
        u1 = first_step(2.0)
        u2 = first_step(20.0)
        assert abs(u1 - u2) / abs(u1) <= 1e-6

    def test_shape_mismatch_rejected(self):
        params = FakeParams({"w": np.zeros(3)})
        state = init_adam(params, learning_rate=0.1)
        with pytest.raises(Exception):
            adam_step(params, {"w": np.zeros(4)}, state)


class TestMetrics:
    def test_perfect_predictions(self):
        y = np.array([0, 1, 2, 0, 1, 2])
        m = metrics_from_predictions(y, y, 3)
        assert m.accuracy == 100.0
        assert m.f1 == 100.0

    def test_hand_confusion(self):
        # confusion [[3,1],[1,3]] -> accuracy 75%, macro F1 75%
        y_true = np.array([0] * 4 + [1] * 4)
        y_pred = np.array([0, 0, 0, 1, 1, 1, 1, 0])
        m = metrics_from_predictions(y_true, y_pred, 2)
        assert m.confusion.tolist() == [[3, 1], [1, 3]]
        assert m.accuracy == 75.0
        assert abs(m.f1 - 75.0) <= 1e-9

    def test_all_one_class_predictor(self):
        y_true = np.array([0] * 4 + [1] * 4)
        y_pred = np.zeros(8, dtype=int)
        m = metrics_from_predictions(y_true, y_pred, 2)
        assert m.accuracy == 50.0
        assert abs(m.recall - 50.0) <= 1e-9   # (100% + 0%) / 2

    def test_confusion_row_sums_are_support(self):
        rng = np.random.default_rng(0)
        y_true = rng.integers(0, 4, 100)
        y_pred = rng.integers(0, 4, 100)
        m = metrics_from_predictions(y_true, y_pred, 4)
        assert np.array_equal(m.confusion.sum(axis=1),
                              np.bincount(y_true, minlength=4))
        assert m.accuracy == 100.0 * np.trace(m.confusion) / 100

    def test_absent_class_rules(self):
        # class 2 absent and never predicted: excluded from macro means;
        # class 3 absent but predicted: counts as precision 0
        y_true = np.array([0, 0, 1, 1])
        y_pred = np.array([0, 3, 1, 1])
        m = metrics_from_predictions(y_true, y_pred, 4)
        # precision: class0 1.0, class1 1.0, class3 0.0 -> 66.67
        assert abs(m.precision - 100.0 * 2 / 3) <= 1e-9


def synth_setup(seed=0, per_class=8):
    config = tiny_config(channels=3, window=16, num_classes=3)
    flags = AblationFlags()
    ds = synth_generate(3, 3, 16, per_class, RngState(seed), noise_std=0.05)
    train, val, test = split_ratio(ds, (6, 2, 2), RngState(seed))
    return config, flags, train, val, test


class TestFit:
    def test_zero_epochs_returns_initial_params(self):
        config, flags, train, val, _ = synth_setup()
        params = build(config, flags, RngState(1))
        before = {n: t.data.copy() for n, t in params.named.items()}
        result = fit(params, config, flags, train, val,
                     make_train_config(epochs=0, seed=0))
        assert result.log == []
        for name, t in result.params.named.items():
            assert np.array_equal(t.data, before[name])

    def test_first_batch_loss_near_log_k(self):
        # random init keeps logits small, so the loss starts near ln K
        config, flags, train, _, _ = synth_setup(seed=3)
        params = build(config, flags, RngState(2))
        x = train.windows[:8].astype(np.float64)
        loss0 = cross_entropy(forward(params, config, flags, x),
                              train.labels[:8]).item()
        assert abs(loss0 - math.log(3)) / math.log(3) <= 0.10

    def test_loss_decreases_by_epoch_ten(self):
        config, flags, train, val, _ = synth_setup(seed=4)
        params = build(config, flags, RngState(0))
        result = fit(params, config, flags, train, val,
                     make_train_config(epochs=11, seed=0))
        assert result.log[10]["train_loss"] < result.log[0]["train_loss"]

    def test_seeded_runs_identical_logs(self):
        def run():
            config, flags, train, val, _ = synth_setup(seed=5)
            params = build(config, flags, RngState(0))
            result = fit(params, config, flags, train, val,
                         make_train_config(epochs=3, seed=9))
            return json.dumps(result.log, sort_keys=True)
        assert run() == run()

    def test_nan_aborts_with_context(self):
        config, flags, train, val, _ = synth_setup()
        params = build(config, flags, RngState(0))
        params.classifier_w.data[:] = np.nan
        from tristream import NumericError, TristreamError
        with pytest.raises(TristreamError):
            fit(params, config, flags, train, val,
                make_train_config(epochs=1, seed=0))

    def test_empty_dataset_rejected(self):
        config, flags, train, val, _ = synth_setup()
        params = build(config, flags, RngState(0))
        empty = train.subset(np.array([], dtype=int))
        with pytest.raises(DataError):
            fit(params, config, flags, empty, val, make_train_config(epochs=1))


class TestEvaluate:
    def test_matches_manual_argmax(self):
        config, flags, train, val, test = synth_setup(seed=6)
        params = build(config, flags, RngState(0))
        from tristream import no_grad
        metrics = evaluate(params, config, flags, test, batch_size=4)
        with no_grad():
            logits = forward(params, config, flags,
                             test.windows.astype(np.float64))
        manual = (logits.data.argmax(axis=1) == test.labels).mean() * 100
        assert abs(metrics.accuracy - manual) <= 1e-12

    def test_thread_pool_matches_serial(self, monkeypatch):
        config, flags, train, val, test = synth_setup(seed=7)
        params = build(config, flags, RngState(0))
        serial = evaluate(params, config, flags, test, batch_size=2, threads=1)
        monkeypatch.setenv("TRISTREAM_THREADS", "4")
        threaded = evaluate(params, config, flags, test, batch_size=2)
        assert serial.accuracy == threaded.accuracy
        assert serial.loss == threaded.loss
        assert np.array_equal(serial.confusion, threaded.confusion)


class TestPresets:
    def test_known_presets(self):
        assert make_train_config("db2").learning_rate == 0.01
        assert make_train_config("db4").learning_rate == 0.0025
        assert make_train_config("db5").learning_rate == 0.01
        assert make_train_config("legacy").learning_rate == 0.001
        assert make_train_config("db5").batch_size == 32
        assert make_train_config("db2").epochs == 100

    def test_unknown_preset_rejected(self):
        with pytest.raises(DataError):
            make_train_config("db9")

    def test_overrides_win(self):
        cfg = make_train_config("db5", epochs=7, seed=3)
        assert cfg.epochs == 7 and cfg.seed == 3 and cfg.learning_rate == 0.01


class TestAblate:
    def test_five_rows_structure_and_run(self):
        config, flags, train, val, test = synth_setup(seed=8, per_class=6)
        rows = ablate(config, ABLATION_ROWS, train, val, test,
                      make_train_config(epochs=1, seed=0))
        assert len(rows) == 5
        labels = [r.label for r in rows]
        assert labels[-1] == "proposed"
        # the paper's flag pattern: exactly one component off per study row
        offs = [sum(1 for v in (r.flags.stream_a, r.flags.stream_b,
                                r.flags.stream_c, r.flags.attention) if not v)
                for r in rows]
        assert offs == [1, 1, 1, 1, 0]
        for row in rows:
            assert 0.0 <= row.metrics.accuracy <= 100.0
        table = ablation_table(rows)
        assert "Branch-1 (BiLSTM)" in table and "Ch-Attention" in table

    def test_single_stream_rows_valid(self):
        config, flags, train, val, test = synth_setup(seed=9, per_class=6)
        only_b = AblationFlags(stream_a=False, stream_b=True, stream_c=False,
                               attention=True)
        rows = ablate(config, [("only stream B", only_b)], train, val, test,
                      make_train_config(epochs=1, seed=0))
        assert len(rows) == 1
