import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from hidisc import tensor as T
from hidisc import trainer as TR
from hidisc.augment import NONE, WEAK
from hidisc.data import SynthConfig, generate_synthetic
from hidisc.loss import LossConfig
from hidisc.sampler import SampleSpec, sample_batch
from hidisc.tensor import Tape, Tensor, grad_check
from hidisc.trainer import (
    AdamState, Checkpoint, DigestMismatch, EncoderConfig, OptimConfig, TrainingAborted, adamw_step, backbone,
    embed, encode, init_params, lr_at, train, warmup_iterations,
)

from oracles import adamw_scalar

SHAPE = (8, 8, 1)
ENC = EncoderConfig(widths=(4, 8), projection_dim=8, patch_shape=SHAPE)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(SynthConfig(n_classes=2, patients_per_class=4, slides_per_patient=2,
                                          patches_per_slide=4, patch_shape=SHAPE, test_patients_per_class=1))


def small_run(**optim):
    kw = dict(total_iterations=20, peak_lr=3e-3)
    kw.update(optim)
    return SampleSpec(4, 2, 2, 2, WEAK), LossConfig(), ENC, OptimConfig(**kw)


class TestEncoder:
    def test_unit_rows(self):
        x = np.random.default_rng(0).random((5,) + SHAPE)
        z = encode(init_params(ENC), x, ENC).data
        assert_allclose(np.linalg.norm(z, axis=1), 1.0, rtol=1e-5)

    def test_rows_independent_of_batch(self):
        x = np.random.default_rng(1).random((6,) + SHAPE).astype(np.float32)
        p = init_params(ENC)
        full = encode(p, x, ENC).data
        for i in range(6):
            assert_allclose(encode(p, x[i : i + 1], ENC).data[0], full[i], rtol=1e-5, atol=1e-6)

    def test_embed_chunking(self):
        x = np.random.default_rng(2).random((7,) + SHAPE).astype(np.float32)
        p = init_params(ENC)
        assert_allclose(embed(p, x, ENC, chunk=3), embed(p, x, ENC, chunk=100), rtol=1e-6)
        assert_allclose(embed(p, x, ENC, which="projection"), encode(p, x, ENC).data, rtol=1e-6)

    def test_shape_checked(self):
        with pytest.raises(T.ShapeError):
            encode(init_params(ENC), np.zeros((2, 4, 4, 1)), ENC)

    def test_init_seeded(self):
        a, b = init_params(ENC), init_params(ENC)
        c = init_params(EncoderConfig(widths=(4, 8), projection_dim=8, patch_shape=SHAPE, init_seed=1))
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        assert not np.array_equal(a["conv0.w"].data, c["conv0.w"].data)

    @pytest.mark.parametrize("kind", ["tiny_cnn", "mlp"])
    def test_parameter_gradients_match_finite_differences(self, kind):
        cfg = EncoderConfig(backbone=kind, widths=(3, 4), projection_dim=3, patch_shape=(4, 4, 1))
        params = init_params(cfg, dtype=np.float64)
        x = np.random.default_rng(3).random((3, 4, 4, 1))
        w = np.random.default_rng(4).standard_normal((3, 3))
        name = "conv1.w" if kind == "tiny_cnn" else "fc1.w"

        def f(t):
            p = dict(params)
            p[name] = t
            return T.reduce_sum(T.mul(encode(p, x, cfg), Tensor(w)))

        assert grad_check(f, params[name].data) < 1e-4


class TestAdamW:
    def test_scalar_oracle_over_steps(self):
        cfg = OptimConfig(peak_lr=0.01, weight_decay=0.1)
        rng = np.random.default_rng(0)
        p = {"w": Tensor(rng.standard_normal(5), requires_grad=True)}
        ref = p["w"].data.copy()
        m = np.zeros(5)
        v = np.zeros(5)
        state = AdamState()
        for t in range(1, 11):
            g = rng.standard_normal(5)
            adamw_step(p, {"w": g}, state, 0.01, cfg)
            for i in range(5):
                ref[i], m[i], v[i] = adamw_scalar(ref[i], g[i], m[i], v[i], t, 0.01, 0.9, 0.999, 1e-8, 0.1)
        assert_allclose(p["w"].data, ref, rtol=0, atol=1e-12)

    def test_first_step_is_lr_times_sign(self):
        cfg = OptimConfig(weight_decay=0.0)
        p = {"w": Tensor(np.zeros(3), requires_grad=True)}
        adamw_step(p, {"w": np.array([2.0, -0.5, 0.0])}, AdamState(), 0.1, cfg)
        assert_allclose(p["w"].data, [-0.1, 0.1, 0.0], atol=1e-8)

    def test_zero_gradient_only_decays(self):
        cfg = OptimConfig(weight_decay=0.5)
        p = {"w": Tensor(np.array([2.0]), requires_grad=True)}
        adamw_step(p, {"w": np.zeros(1)}, AdamState(), 0.1, cfg)
        assert_allclose(p["w"].data, [2.0 * (1 - 0.05)])

    def test_non_finite_gradient_aborts(self):
        p = {"w": Tensor(np.zeros(2), requires_grad=True)}
        with pytest.raises(TrainingAborted, match="iteration 4"):
            adamw_step(p, {"w": np.array([np.nan, 0.0])}, AdamState(), 0.1, OptimConfig(), iteration=4)


class TestSchedule:
    def test_shape(self):
        cfg = OptimConfig(peak_lr=1.0, total_iterations=100, warmup_fraction=0.1)
        assert warmup_iterations(cfg) == 10
        assert lr_at(0, cfg) == 0.0
        assert lr_at(5, cfg) == pytest.approx(0.5)
        assert lr_at(10, cfg) == pytest.approx(1.0)
        assert lr_at(99, cfg) == pytest.approx(0.0, abs=1e-12)
        mid = 10 + (99 - 10) / 2
        assert lr_at(int(mid), cfg) == pytest.approx(0.5 * (1 + math.cos(math.pi * (int(mid) - 10) / 89)))

    def test_monotone_after_warmup(self):
        cfg = OptimConfig(total_iterations=50)
        lrs = [lr_at(i, cfg) for i in range(warmup_iterations(cfg), 50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(10, OptimConfig(total_iterations=10))

    def test_zero_iterations_yields_untrained_checkpoint(self, corpus, tmp_path):
        spec, loss, enc, optim = small_run(total_iterations=0)
        res = train(corpus, spec, loss, enc, optim, tmp_path)
        assert res.metrics == [] and res.checkpoint.iteration == 0
        fresh = init_params(enc)
        assert all(np.array_equal(res.checkpoint.params[k].data, fresh[k].data) for k in fresh)


class TestTraining:
    @pytest.mark.slow
    def test_loss_decreases_for_most_seeds(self, corpus):
        improved = 0
        for seed in range(20):
            spec = SampleSpec(4, 2, 2, 2, NONE, seed=seed)
            enc = EncoderConfig(widths=(4, 8), projection_dim=8, patch_shape=SHAPE, init_seed=seed)
            res = train(corpus, spec, LossConfig(), enc, OptimConfig(total_iterations=200, peak_lr=1e-2))
            losses = [float(r["loss_total"]) for r in res.metrics]
            improved += np.mean(losses[-20:]) < np.mean(losses[:20])
        assert improved >= 19

    def test_resume_is_bit_identical(self, corpus, tmp_path):
        spec, loss, enc, optim = small_run(total_iterations=20, checkpoint_every=5)
        full = train(corpus, spec, loss, enc, optim, tmp_path / "full")
        train(corpus, spec, loss, enc, optim, tmp_path / "split", stop_after=10)
        resumed = train(corpus, spec, loss, enc, optim, tmp_path / "split")
        for k, p in full.checkpoint.params.items():
            assert p.data.tobytes() == resumed.checkpoint.params[k].data.tobytes()
        assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "split" / "metrics.csv").read_bytes()

    def test_workers_do_not_change_trajectory(self, corpus, tmp_path):
        spec, loss, enc, optim = small_run(total_iterations=8)
        a = train(corpus, spec, loss, enc, optim, tmp_path / "a", workers=1)
        b = train(corpus, spec, loss, enc, optim, tmp_path / "b", workers=3)
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert all(a.checkpoint.params[k].data.tobytes() == b.checkpoint.params[k].data.tobytes()
                   for k in a.checkpoint.params)

    def test_digest_mismatch_refuses_resume(self, corpus, tmp_path):
        spec, loss, enc, optim = small_run(total_iterations=4)
        train(corpus, spec, loss, enc, optim, tmp_path)
        with pytest.raises(DigestMismatch):
            train(corpus, spec, LossConfig(tau=0.5), enc, optim, tmp_path)
        ck = Checkpoint.load(tmp_path / "checkpoint.npz")
        with pytest.raises(DigestMismatch):
            Checkpoint.load(tmp_path / "checkpoint.npz", expected_digest="0" * 64)
        assert ck.iteration == 4

    def test_uniform_loss_scale_leaves_first_update_unchanged(self, corpus):
        # Adam normalizes the gradient, so scaling every lambda by 2 at the same
        # learning rate gives the same step (up to eps); halving lr would halve it.
        spec = SampleSpec(4, 2, 2, 2, NONE)
        optim = OptimConfig(total_iterations=10, warmup_fraction=0.1, weight_decay=0.0)
        batch = sample_batch(corpus, spec, 0)

        def first_update(loss_cfg, lr):
            params = init_params(ENC, dtype=np.float64)
            before = {k: p.data.copy() for k, p in params.items()}
            with Tape():
                T.backward(TR.batch_loss(params, batch, loss_cfg, ENC).total)
            adamw_step(params, {k: p.grad for k, p in params.items()}, AdamState(), lr, optim)
            return np.concatenate([(params[k].data - before[k]).ravel() for k in params])

        base = first_update(LossConfig(), 1e-3)
        doubled = first_update(LossConfig(lambda_patch=2, lambda_slide=2, lambda_patient=2), 1e-3)
        halved_lr = first_update(LossConfig(lambda_patch=2, lambda_slide=2, lambda_patient=2), 5e-4)
        assert_allclose(doubled, base, rtol=1e-4, atol=1e-10)
        assert_allclose(halved_lr, base / 2, rtol=1e-4, atol=1e-10)

    def test_non_finite_loss_dumps_batch(self, corpus, tmp_path, monkeypatch):
        spec, loss, enc, optim = small_run(total_iterations=5)
        real = TR.batch_loss
        calls = {"n": 0}

        def poisoned(*a, **k):
            calls["n"] += 1
            if calls["n"] == 3:
                raise T.NonFiniteError("overflow in exp")
            return real(*a, **k)

        monkeypatch.setattr(TR, "batch_loss", poisoned)
        with pytest.raises(TrainingAborted, match="iteration 2"):
            train(corpus, spec, loss, enc, optim, tmp_path)
        with np.load(tmp_path / "abort_batch_2.npz") as z:
            assert z["images"].shape == (32,) + SHAPE
            assert len(z["patch_ids"]) == 32

    def test_metrics_rows(self, corpus):
        spec, loss, enc, optim = small_run(total_iterations=3)
        res = train(corpus, spec, loss, enc, optim)
        assert [r["iteration"] for r in res.metrics] == [0, 1, 2]
        assert all(r["skipped_anchors"] == 0 for r in res.metrics)
        r = res.metrics[1]
        total = float(r["loss_patch"]) + float(r["loss_slide"]) + float(r["loss_patient"])
        assert float(r["loss_total"]) == pytest.approx(total, rel=1e-5)

    def test_supcon_run(self, corpus):
        spec = SampleSpec(4, 2, 2, 2, WEAK)
        res = train(corpus, spec, LossConfig(supcon=True), ENC, OptimConfig(total_iterations=3))
        assert all(r["loss_patch"] == "" for r in res.metrics)

    def test_patch_shape_mismatch(self, corpus):
        spec, loss, _, optim = small_run()
        with pytest.raises(ValueError, match="encoder expects"):
            train(corpus, spec, loss, EncoderConfig(patch_shape=(4, 4, 1)), optim)


def test_backbone_feature_width():
    x = np.zeros((2,) + SHAPE, np.float32)
    assert backbone(init_params(ENC), x, ENC).shape == (2, 8)
