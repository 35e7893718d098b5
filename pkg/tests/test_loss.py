import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from hidisc import tensor as T
from hidisc.augment import NONE
from hidisc.data import LEVELS, Level, SynthConfig, generate_synthetic
from hidisc.loss import (
    LossConfig, LossError, hidisc_loss, hidisc_loss_from_labels, level_loss, level_loss_with_skips, supcon_loss,
    supcon_loss_with_skips,
)
from hidisc.sampler import SampleSpec, positive_sets_from_labels, sample_batch
from hidisc.tensor import Tape, Tensor, grad_check

from oracles import contrastive_loss_loops, hierarchical_loss_loops, nt_xent_pairs, positives_by_pairs

TAU = 0.7


def unit(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def t64(z):
    return Tensor(np.asarray(z, np.float64))


class TestExamples:
    def test_identical_rows(self):
        z = np.tile([[1.0, 0.0]], (4, 1))
        loss = level_loss(t64(z), [[1], [0], [3], [2]], TAU)
        assert_allclose(loss.item(), 4 * math.log(3), rtol=1e-12)

    def test_all_empty_positive_sets(self):
        z = unit(np.random.default_rng(0), 5, 3)
        loss, skipped = level_loss_with_skips(t64(z), [[]] * 5, TAU)
        assert loss.item() == 0.0 and skipped == 5

    def test_partial_skips_counted(self):
        z = unit(np.random.default_rng(0), 4, 3)
        _, skipped = level_loss_with_skips(t64(z), [[1], [0], [], []], TAU)
        assert skipped == 2

    def test_non_unit_rejected(self):
        with pytest.raises(LossError, match="norm"):
            level_loss(t64([[2.0, 0.0], [0.0, 1.0]]), [[1], [0]], TAU)

    def test_self_positive_rejected(self):
        with pytest.raises(LossError):
            level_loss(t64(np.eye(2)), [[0], [0]], TAU)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            LossConfig(tau=0.0)
        with pytest.raises(ValueError):
            LossConfig(lambda_slide=-1.0)
        with pytest.raises(ValueError):
            LossConfig(levels=())

    def test_config_round_trip(self):
        cfg = LossConfig(tau=0.5, lambda_patch=0.0, levels=(Level.SLIDE, Level.PATCH))
        assert LossConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.levels == (Level.PATCH, Level.SLIDE)


class TestOracle:
    @pytest.mark.parametrize("seed", range(10))
    def test_level_loss_matches_loops(self, seed):
        rng = np.random.default_rng(seed)
        z = unit(rng, 10, 4)
        keys = rng.integers(0, 4, 10).tolist()
        pos = positives_by_pairs(keys)
        expected, skipped = contrastive_loss_loops(z, pos, TAU)
        got, got_skipped = level_loss_with_skips(t64(z), pos, TAU)
        assert_allclose(got.item(), expected, rtol=1e-10)
        assert got_skipped == skipped

    def test_mask_and_index_forms_agree(self):
        rng = np.random.default_rng(1)
        z = unit(rng, 8, 3)
        labels = rng.integers(0, 3, 8)
        mask = labels[:, None] == labels[None, :]
        np.fill_diagonal(mask, False)
        assert level_loss(t64(z), mask, TAU).item() == pytest.approx(
            level_loss(t64(z), positive_sets_from_labels(labels), TAU).item(), rel=1e-12)

    @pytest.mark.parametrize("lambdas", [(1, 1, 1), (1, 0, 1), (0.5, 2.0, 1.5)])
    def test_hierarchical_matches_loops(self, lambdas):
        corpus = generate_synthetic(SynthConfig(n_classes=2, patients_per_class=3, patches_per_slide=4,
                                                patch_shape=(4, 4, 1), test_patients_per_class=1))
        b = sample_batch(corpus, SampleSpec(3, 2, 2, 2, NONE), 0)
        z = unit(np.random.default_rng(2), len(b), 5)
        cfg = LossConfig(TAU, *lambdas)
        expected, per = hierarchical_loss_loops(
            z, b.patient_idx.tolist(), b.slide_idx.tolist(), b.patch_idx.tolist(), TAU,
            {"patch": lambdas[0], "slide": lambdas[1], "patient": lambdas[2]}, ["patch", "slide", "patient"])
        got = hidisc_loss(t64(z), b, cfg)
        assert_allclose(got.total.item(), expected, rtol=1e-10)
        for lv in LEVELS:
            assert_allclose(got.value(lv), per[lv.value], rtol=1e-10)


class TestProperties:
    def test_lambda_linearity(self):
        rng = np.random.default_rng(3)
        z = t64(unit(rng, 12, 4))
        labels = {Level.PATCH: np.repeat(np.arange(6), 2), Level.SLIDE: np.repeat(np.arange(3), 4),
                  Level.PATIENT: np.repeat(np.arange(2), 6)}
        base = hidisc_loss_from_labels(z, labels, LossConfig(TAU, 0.3, 0.5, 0.7)).total.item()
        doubled = hidisc_loss_from_labels(z, labels, LossConfig(TAU, 0.6, 1.0, 1.4)).total.item()
        assert_allclose(doubled, 2 * base, rtol=1e-12)
        only_slide = hidisc_loss_from_labels(z, labels, LossConfig(TAU, 0.0, 1.0, 0.0)).total.item()
        assert_allclose(only_slide, level_loss(z, positive_sets_from_labels(labels[Level.SLIDE]), TAU).item(),
                        rtol=1e-12)

    def test_degenerate_levels_coincide(self):
        # one slide per patient: slide and patient positives are the same sets
        rng = np.random.default_rng(4)
        z = t64(unit(rng, 8, 3))
        groups = np.repeat(np.arange(2), 4)
        labels = {Level.PATCH: np.repeat(np.arange(4), 2), Level.SLIDE: groups, Level.PATIENT: groups}
        br = hidisc_loss_from_labels(z, labels, LossConfig(TAU))
        assert br.value(Level.SLIDE) == br.value(Level.PATIENT)

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        z = unit(rng, 9, 4)
        keys = rng.integers(0, 3, 9)
        perm = rng.permutation(9)
        a = level_loss(t64(z), positive_sets_from_labels(keys), TAU).item()
        b = level_loss(t64(z[perm]), positive_sets_from_labels(keys[perm]), TAU).item()
        assert_allclose(a, b, rtol=1e-12)

    def test_descent_step_lowers_loss(self):
        lowered = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            z0 = unit(rng, 8, 4)
            pos = positives_by_pairs(np.repeat(np.arange(4), 2).tolist())
            x = Tensor(z0, requires_grad=True)
            with Tape():
                loss = level_loss(T.l2_normalize(x), pos, TAU)
                T.backward(loss)
            z1 = z0 - 1e-3 * x.grad
            z1 /= np.linalg.norm(z1, axis=1, keepdims=True)
            lowered += level_loss(t64(z1), pos, TAU).item() < loss.item()
        assert lowered == 20

    def test_pairs_reduce_to_nt_xent(self):
        rng = np.random.default_rng(5)
        z = unit(rng, 10, 6)
        pairs = [(2 * i, 2 * i + 1) for i in range(5)]
        pos = positives_by_pairs(np.repeat(np.arange(5), 2).tolist())
        assert_allclose(level_loss(t64(z), pos, TAU).item(), nt_xent_pairs(z, pairs, TAU), rtol=1e-10)

    def test_gradient_matches_finite_differences(self):
        x = np.random.default_rng(6).standard_normal((6, 3))
        pos = positives_by_pairs([0, 0, 1, 1, 1, 2])
        assert grad_check(lambda t: level_loss(T.l2_normalize(t), pos, TAU), x) < 1e-4


class TestSupCon:
    def test_matches_class_keyed_loops(self):
        rng = np.random.default_rng(7)
        z = unit(rng, 10, 4)
        labels = rng.integers(0, 3, 10)
        expected, skipped = contrastive_loss_loops(z, positives_by_pairs(labels.tolist()), TAU)
        got, got_skipped = supcon_loss_with_skips(t64(z), labels, TAU)
        assert_allclose(got.item(), expected, rtol=1e-10)
        assert got_skipped == skipped

    def test_single_class_uses_all_rows(self):
        z = np.tile([[0.0, 1.0]], (5, 1))
        # every other row is a positive with the same logit: each anchor scores ln 4
        assert_allclose(supcon_loss(t64(z), [1] * 5, TAU).item(), 5 * math.log(4), rtol=1e-12)

    def test_label_length_checked(self):
        with pytest.raises(LossError):
            supcon_loss(t64(np.eye(3)), [0, 1], TAU)
