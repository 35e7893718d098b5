import numpy as np
import pytest

from hidisc.augment import NONE, STRONG
from hidisc.data import Level, SynthConfig, ancestry, generate_synthetic
from hidisc.sampler import (
    SampleSpec, SamplingError, batch_patients, positive_mask, positive_sets, sample_batch, sample_refs,
)

from oracles import positives_by_pairs


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(SynthConfig(n_classes=2, patients_per_class=6, slides_per_patient=2,
                                          patches_per_slide=6, patch_shape=(8, 8, 1), test_patients_per_class=1))


# (n_s, n_p, n_a) -> expected (|P_patch|, |P_slide|, |P_patient|) for every anchor
TABLE = {
    (1, 1, 2): (1, 1, 1),
    (2, 1, 2): (1, 1, 3),
    (2, 2, 2): (1, 3, 7),
}


class TestSpec:
    def test_for_total(self):
        spec = SampleSpec.for_total(512, 2, 2, 2)
        assert spec.n == 64 and spec.batch_size == 512

    def test_for_total_rejects_remainder(self):
        with pytest.raises(ValueError):
            SampleSpec.for_total(30, 2, 2, 2)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            SampleSpec(0, 1, 1, 2)

    def test_round_trip(self):
        spec = SampleSpec(4, 2, 2, 2, STRONG, seed=3)
        assert SampleSpec.from_dict(spec.to_dict()) == spec


class TestBatches:
    @pytest.mark.parametrize("shape", list(TABLE))
    def test_positive_set_sizes(self, corpus, shape):
        spec = SampleSpec(4, *shape, NONE)
        b = sample_batch(corpus, spec, 0)
        assert len(b) == spec.batch_size
        for lv, size in zip((Level.PATCH, Level.SLIDE, Level.PATIENT), TABLE[shape]):
            assert all(len(p) == size for p in positive_sets(b, lv)), lv

    @pytest.mark.parametrize("counter", range(5))
    def test_positive_sets_match_pair_oracle(self, corpus, counter):
        b = sample_batch(corpus, SampleSpec(3, 2, 2, 2, NONE), counter)
        for lv in (Level.PATCH, Level.SLIDE, Level.PATIENT):
            keys = [ancestry(corpus, r, lv) for r in b.source_refs]
            expected = positives_by_pairs(keys)
            got = [p.tolist() for p in positive_sets(b, lv)]
            assert got == expected

    def test_canonical_row_order(self, corpus):
        b = sample_batch(corpus, SampleSpec(3, 2, 2, 2, NONE), 0)
        rows = np.arange(len(b))
        # rows in the same patch group share a patch; patient groups are contiguous blocks of 8
        assert np.all(b.patch_idx == b.patch_idx[rows // 2 * 2])
        assert np.all(b.patient_idx == rows // 8)

    def test_coarsening(self, corpus):
        b = sample_batch(corpus, SampleSpec(4, 2, 2, 2, NONE), 1)
        patch, slide, patient = (positive_mask(b.labels(lv)) for lv in (Level.PATCH, Level.SLIDE, Level.PATIENT))
        assert not np.any(patch & ~slide)
        assert not np.any(slide & ~patient)

    def test_views_of_same_patch(self, corpus):
        b = sample_batch(corpus, SampleSpec(2, 1, 1, 2, STRONG), 0)
        assert b.source_refs[0] == b.source_refs[1]
        assert not np.array_equal(b.images[0], b.images[1])

    def test_repeated_slide_gets_distinct_patches(self):
        one_slide = generate_synthetic(SynthConfig(n_classes=2, patients_per_class=2, slides_per_patient=1,
                                                   patches_per_slide=8, patch_shape=(4, 4, 1),
                                                   test_patients_per_class=1))
        spec = SampleSpec(2, 2, 2, 1, NONE)
        for counter in range(5):
            refs = sample_refs(one_slide, spec, counter)
            for g in range(spec.n):
                group = refs[g * 4 : (g + 1) * 4]
                assert len({r.index for r in group}) == 4
            b = sample_batch(one_slide, spec, counter)
            # both slide slots point at the one real slide
            assert all(len(p) == 3 for p in positive_sets(b, Level.SLIDE))

    def test_epoch_covers_every_patient_once(self, corpus):
        spec = SampleSpec(3, 1, 1, 2, NONE)
        seen = [p for c in range(4) for p in batch_patients(corpus, spec, c)]
        assert sorted(seen) == list(range(12))

    def test_patient_subset(self, corpus):
        train = corpus.split_patients("train")
        for c in range(6):
            assert set(batch_patients(corpus, SampleSpec(3, 1, 1, 2), c, train)) <= set(train)

    def test_pure_function_of_arguments(self, corpus):
        spec = SampleSpec(3, 2, 2, 2, STRONG, seed=5)
        a = sample_batch(corpus, spec, 7)
        # an unrelated draw in between must not matter
        sample_batch(corpus, spec, 2)
        b = sample_batch(corpus, spec, 7)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.slide_idx, b.slide_idx)

    def test_seed_changes_batch(self, corpus):
        a = sample_batch(corpus, SampleSpec(3, 2, 2, 2, STRONG, seed=1), 0)
        b = sample_batch(corpus, SampleSpec(3, 2, 2, 2, STRONG, seed=2), 0)
        assert a.images.tobytes() != b.images.tobytes()

    def test_too_few_patients(self, corpus):
        with pytest.raises(SamplingError, match="patients"):
            sample_batch(corpus, SampleSpec(13, 1, 1, 2), 0)

    def test_too_few_patches(self, corpus):
        with pytest.raises(SamplingError, match="n_p"):
            sample_batch(corpus, SampleSpec(2, 1, 7, 2), 0)
