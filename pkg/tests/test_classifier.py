import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petslice.classifier import (
    ModelConfig,
    TrainConfig,
    TrainingDivergedError,
    batch_focal_loss,
    build_model,
    evaluate_loss,
    focal_loss,
    focal_loss_terms,
    label_from_probability,
    load_model,
    predict,
    save_model_checkpoint,
    score_dataset,
    train,
)
from petslice.nn import ShapeError, grad_check

TINY = dict(input_size=(8, 8), stage_widths=(4, 6), blocks_per_stage=(1, 1), fc_widths=(5, 1))


def bce(p, y):
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def blob_data(n, seed, size=16):
    """Half the images carry a bright square, the rest only noise."""
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3, size, size)).astype(np.float32) * 0.2
    y = (np.arange(n) % 2).astype(np.float64)
    for i in np.nonzero(y)[0]:
        r, c = rng.integers(0, size - 3, size=2)
        x[i, :, r:r + 4, c:c + 4] = 1.0
    return x, y


def focal_oracle(p, y, a, g):
    return -a * y * (1 - p) ** g * math.log(p) - (1 - a) * (1 - y) * p ** g * math.log(1 - p)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(in_channels=1), dict(stage_widths=(8,), blocks_per_stage=(1, 1)),
                                    dict(fc_widths=(8, 2)), dict(input_size=(8, 8)), dict(blocks_per_stage=(0, 1, 1))])
    def test_invalid_model(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    @pytest.mark.parametrize("kw", [dict(lr=-1e-3), dict(focal_alpha=1.0), dict(focal_gamma=-1),
                                    dict(threshold=1.0), dict(batch_size=1), dict(epochs=0)])
    def test_invalid_train(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.focal_alpha, cfg.focal_gamma, cfg.threshold) == (1e-3, 0.25, 2.0, 0.5)
        m = ModelConfig()
        assert m.input_size == (64, 64) and m.stage_widths == (16, 32, 64) and m.fc_widths == (64, 1)


class TestModel:
    def test_forward_shape_and_range(self):
        model = build_model(ModelConfig(), seed=0)
        x = np.random.default_rng(0).random((2, 3, 64, 64)).astype(np.float32)
        p = model.predict_proba(x)
        assert p.shape == (2,)
        assert np.all((p > 0) & (p < 1))

    def test_same_seed_same_init(self):
        a = build_model(ModelConfig(**TINY), seed=3)
        b = build_model(ModelConfig(**TINY), seed=3)
        c = build_model(ModelConfig(**TINY), seed=4)
        pa = [p for _, p, _ in a.named_parameters()]
        pb = [p for _, p, _ in b.named_parameters()]
        assert all(np.array_equal(u, v) for u, v in zip(pa, pb))
        assert not all(np.array_equal(u, p) for u, (_, p, _) in zip(pa, c.named_parameters()))

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeError):
            build_model(ModelConfig(**TINY)).forward(np.zeros((2, 3, 9, 9), np.float32))

    @pytest.mark.parametrize("seed", range(3))
    def test_full_model_gradient(self, seed):
        rng = np.random.default_rng(seed)
        model = build_model(ModelConfig(**TINY), seed=seed, dtype=np.float64)
        x = rng.random((4, 3, 8, 8))
        y = np.array([1.0, 0.0, 1.0, 0.0])
        rep = grad_check(model, x, 1e-3, loss_fn=lambda z: batch_focal_loss(z, y), max_entries=20, seed=seed)
        assert rep.passed, str(rep)


class TestFocalLoss:
    def test_closed_form(self):
        loss, _ = focal_loss(0.5, 1, 0.25, 2.0)
        assert abs(loss - 0.25 * 0.25 * math.log(2)) < 1e-9

    @pytest.mark.parametrize("y", [0, 1])
    @pytest.mark.parametrize("p", [1e-6, 0.01, 0.3, 0.5, 0.77, 0.999999])
    def test_reduces_to_half_bce(self, p, y):
        loss, _ = focal_loss(p, y, 0.5, 0.0)
        assert abs(loss - 0.5 * bce(p, y)) <= 1e-12 * max(1.0, bce(p, y))

    @pytest.mark.parametrize("y", [0, 1])
    @pytest.mark.parametrize("p", [0.01, 0.2, 0.5, 0.8, 0.99])
    def test_matches_direct_formula(self, p, y):
        assert abs(focal_loss(p, y)[0] - focal_oracle(p, y, 0.25, 2.0)) < 1e-12

    def test_saturated_logits_finite(self):
        loss, grad = focal_loss_terms(np.array([800.0, -800.0, 800.0, -800.0]), np.array([1, 1, 0, 0]))
        assert np.all(np.isfinite(loss)) and np.all(np.isfinite(grad))
        assert loss[0] == 0.0 and loss[3] == 0.0
        assert loss[1] > 0 and loss[2] > 0

    def test_probability_outside_open_interval(self):
        with pytest.raises(ValueError):
            focal_loss(1.0, 1)

    def test_confident_correct_is_near_zero(self):
        assert focal_loss(1 - 1e-9, 1)[0] < 1e-20

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-30, 30), st.integers(0, 1), st.floats(0.05, 0.95), st.floats(0, 4))
    def test_gradient_finite_difference(self, z, y, a, g):
        h = 1e-5
        _, grad = focal_loss_terms(np.array([z]), np.array([y]), a, g)
        lp, _ = focal_loss_terms(np.array([z + h]), np.array([y]), a, g)
        lm, _ = focal_loss_terms(np.array([z - h]), np.array([y]), a, g)
        num = (lp[0] - lm[0]) / (2 * h)
        assert abs(grad[0] - num) <= 1e-6 * max(abs(grad[0]), abs(num), 1e-3)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-40, 40), st.integers(0, 1), st.floats(0.01, 0.99), st.floats(0, 5))
    def test_non_negative(self, z, y, a, g):
        loss, _ = focal_loss_terms(np.array([z]), np.array([y]), a, g)
        assert loss[0] >= 0.0

    def test_batch_mean(self):
        z = np.array([0.3, -1.2, 2.0])
        y = np.array([1, 0, 0])
        mean, g = batch_focal_loss(z, y)
        per, gper = focal_loss_terms(z, y)
        assert mean == per.mean()
        np.testing.assert_allclose(g, gper / 3)


class TestPredict:
    def test_threshold_inclusive(self):
        assert label_from_probability(0.5) == 1
        assert label_from_probability(0.4999) == 0

    @settings(max_examples=100)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert label_from_probability(lo) <= label_from_probability(hi)

    @pytest.mark.parametrize("seed", range(5))
    def test_bias_increase_never_flips_positive(self, seed):
        model = build_model(ModelConfig(**TINY), seed=seed).eval()
        x = np.random.default_rng(seed).random((16, 3, 8, 8)).astype(np.float32)
        before = label_from_probability(model.predict_proba(x))
        model.final_bias[...] += 0.7
        after = label_from_probability(model.predict_proba(x))
        assert np.all(after >= before)

    def test_predict_single(self):
        model = build_model(ModelConfig(**TINY), seed=0).eval()
        p, lab = predict(model, np.zeros((3, 8, 8), np.float32))
        assert 0 < p < 1 and lab == int(p >= 0.5)


class TestTrain:
    def test_separable_toy(self):
        x, y = blob_data(96, 0)
        vx, vy = blob_data(32, 1)
        cfg = TrainConfig(epochs=10, batch_size=16, seed=0)
        model = build_model(ModelConfig(input_size=(16, 16), stage_widths=(8, 16), blocks_per_stage=(1, 1),
                                        fc_widths=(16, 1)), seed=0)
        best, log = train(model, x, y, vx, vy, cfg)
        assert best.val_loss < 0.01
        assert best.val_loss == min(r["val_loss"] for r in log)
        assert [r["checkpoint_saved"] for r in log].count(True) >= 1
        saved = [r for r in log if r["checkpoint_saved"]]
        assert all(b["val_loss"] < a["val_loss"] for a, b in zip(saved, saved[1:]))
        assert saved[-1]["epoch"] == best.epoch

    def test_deterministic(self):
        x, y = blob_data(24, 2, size=8)
        cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
        logs = []
        for _ in range(2):
            _, log = train(build_model(ModelConfig(**TINY), seed=1), x, y, x[:8], y[:8], cfg)
            logs.append(log)
        for a, b in zip(*logs):
            assert abs(a["train_loss"] - b["train_loss"]) <= 1e-6
            assert abs(a["val_loss"] - b["val_loss"]) <= 1e-6

    def test_lr_zero_constant(self):
        x, y = blob_data(20, 3, size=8)
        cfg = TrainConfig(lr=0.0, epochs=3, batch_size=8)
        model = build_model(ModelConfig(**TINY), seed=2)
        before = {n: p.copy() for n, p, _ in model.named_parameters()}
        buffers = {n: b.copy() for n, b in model.named_buffers()}
        initial_val = evaluate_loss(model, x[:6], y[:6], cfg)
        train(model, x, y, x[:6], y[:6], cfg)
        for n, p, _ in model.named_parameters():
            np.testing.assert_array_equal(p, before[n])
        # eval-mode val loss moves only through batch-norm running statistics
        for n, b in model.named_buffers():
            b[...] = buffers[n]
        assert evaluate_loss(model, x[:6], y[:6], cfg) == initial_val

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_input_aborts(self):
        x, y = blob_data(8, 4, size=8)
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDivergedError, match="epoch 1"):
            train(build_model(ModelConfig(**TINY)), x, y, x[:2], y[:2], TrainConfig(epochs=1, batch_size=4))

    def test_empty_val(self):
        x, y = blob_data(8, 4, size=8)
        with pytest.raises(ValueError):
            train(build_model(ModelConfig(**TINY)), x, y, x[:0], y[:0], TrainConfig(epochs=1))

    def test_checkpoint_round_trip(self, tmp_path):
        x, y = blob_data(16, 5, size=8)
        cfg = TrainConfig(epochs=2, batch_size=8)
        mcfg = ModelConfig(**TINY)
        model = build_model(mcfg, seed=0)
        best, _ = train(model, x, y, x[:4], y[:4], cfg)
        best.apply(model)
        path = save_model_checkpoint(tmp_path / "m.ckpt", best, mcfg, seed=0)
        loaded, header = load_model(path)
        assert header["epoch"] == best.epoch and header["step"] == best.step
        np.testing.assert_array_equal(loaded.predict_proba(x), model.predict_proba(x))
        assert abs(evaluate_loss(loaded, x[:4], y[:4], cfg) - best.val_loss) < 1e-6


class TestScore:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(0)
        x = rng.random((6, 3, 8, 8)).astype(np.float32)
        recs = [{"patient_id": pid, "center_id": "A", "slice_index": k, "label": k % 2,
                 "tumor_suvmax": 3.0 if k % 2 else None}
                for pid, k in [("B", 1), ("A", 2), ("A", 0), ("B", 0), ("A", 1), ("C", 5)]]
        return build_model(ModelConfig(**TINY), seed=0).eval(), x, recs

    def test_rows(self, setup):
        model, x, recs = setup
        rows = score_dataset(model, x, recs)
        assert len(rows) == 6
        assert [r["sample_id"] for r in rows] == ["A:0", "A:1", "A:2", "B:0", "B:1", "C:5"]
        assert all(r["pred"] == label_from_probability(r["p"]) for r in rows)
        # aligned with the original input
        i = [k for k, r in enumerate(recs) if (r["patient_id"], r["slice_index"]) == ("B", 1)][0]
        assert rows[4]["p"] == float(model.predict_proba(x[i:i + 1])[0])

    def test_rescoring_identical(self, setup):
        model, x, recs = setup
        assert score_dataset(model, x, recs) == score_dataset(model, x, recs)

    def test_size_mismatch(self, setup):
        model, x, recs = setup
        with pytest.raises(ShapeError):
            score_dataset(model, np.zeros((6, 3, 16, 16), np.float32), recs)
        with pytest.raises(ValueError):
            score_dataset(model, x[:5], recs)
