"""Hierarchical minibatches of ``n`` patients x ``n_s`` slides x ``n_p`` patches x ``n_a`` views.

Rows are laid out in canonical nesting order (patient, slide slot, patch
slot, augmentation), so row ``r`` belongs to slot ``r // n_a`` at patch
level, ``r // (n_p * n_a)`` at slide level and ``r // (n_s * n_p * n_a)``
at patient level. The ancestry arrays on :class:`HierBatch` index the
*actual* ancestors: when a patient with too few slides has a slide
repeated, both slots carry the same slide index.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .augment import AugPolicy, augment
from .data import Corpus, Level, PatchRef


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SampleSpec:
    n: int
    n_s: int
    n_p: int
    n_a: int
    policy: AugPolicy = AugPolicy()
    seed: int = 0

    def __post_init__(self):
        for name in ("n", "n_s", "n_p", "n_a"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def batch_size(self) -> int:
        return self.n * self.n_s * self.n_p * self.n_a

    @classmethod
    def for_total(cls, total: int, n_s: int, n_p: int, n_a: int, **kw) -> "SampleSpec":
        per_patient = n_s * n_p * n_a
        if total % per_patient:
            raise ValueError(f"total batch {total} is not a multiple of n_s*n_p*n_a = {per_patient}")
        return cls(total // per_patient, n_s, n_p, n_a, **kw)

    def to_dict(self) -> dict:
        return {"n": self.n, "n_s": self.n_s, "n_p": self.n_p, "n_a": self.n_a,
                "policy": self.policy.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SampleSpec":
        d = dict(d)
        if "policy" in d:
            d["policy"] = AugPolicy.from_dict(d["policy"])
        return cls(**d)


@dataclass
class HierBatch:
    images: np.ndarray
    patient_idx: np.ndarray
    slide_idx: np.ndarray
    patch_idx: np.ndarray
    source_refs: list
    spec: Optional[SampleSpec] = None

    def __len__(self) -> int:
        return len(self.patient_idx)

    def labels(self, level: Level) -> np.ndarray:
        if level is Level.PATCH:
            return self.patch_idx
        if level is Level.SLIDE:
            return self.slide_idx
        if level is Level.PATIENT:
            return self.patient_idx
        raise ValueError(f"unknown level {level!r}")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in key]))


def _draw_without_replacement(rng: np.random.Generator, pool: int, count: int) -> np.ndarray:
    """``count`` draws from ``range(pool)``; cycles through fresh shuffles when count > pool."""
    out = []
    while len(out) < count:
        perm = rng.permutation(pool)
        out.extend(perm[: count - len(out)].tolist())
    return np.asarray(out, dtype=np.int64)


def batch_patients(corpus: Corpus, spec: SampleSpec, batch_counter: int, patients=None) -> list[int]:
    """Patients for one batch: consecutive slices of a per-epoch permutation."""
    pool = list(range(corpus.n_patients)) if patients is None else list(patients)
    if len(pool) < spec.n:
        raise SamplingError(f"need {spec.n} patients per batch, corpus has {len(pool)}")
    per_epoch = len(pool) // spec.n
    epoch, slot = divmod(int(batch_counter), per_epoch)
    perm = _rng(spec.seed, 0, epoch).permutation(len(pool))
    return [pool[i] for i in perm[slot * spec.n : (slot + 1) * spec.n]]


def sample_refs(corpus: Corpus, spec: SampleSpec, batch_counter: int, patients=None) -> list[PatchRef]:
    """Source patch per row-group ``(patient, slide slot, patch slot)``, in canonical order."""
    for p in corpus.patients:
        for s in p.slides:
            if len(s.patches) < spec.n_p:
                raise SamplingError(
                    f"slide {s.slide_id!r} of patient {p.patient_id!r} has {len(s.patches)} patches, need n_p={spec.n_p}"
                )
    chosen = batch_patients(corpus, spec, batch_counter, patients)
    refs: list[PatchRef] = []
    for slot, pi in enumerate(chosen):
        rng = _rng(spec.seed, 1, batch_counter, slot)
        patient = corpus.patients[pi]
        slide_draws = _draw_without_replacement(rng, len(patient.slides), spec.n_s)
        occurrences: dict[int, list[int]] = {}
        for k, si in enumerate(slide_draws.tolist()):
            occurrences.setdefault(si, []).append(k)
        per_slot: dict[int, np.ndarray] = {}
        for si in sorted(occurrences):
            slots = occurrences[si]
            patches = patient.slides[si].patches
            # repeated slides draw their patches jointly, without replacement when possible
            draws = _draw_without_replacement(rng, len(patches), spec.n_p * len(slots))
            for j, k in enumerate(slots):
                per_slot[k] = draws[j * spec.n_p : (j + 1) * spec.n_p]
        for k, si in enumerate(slide_draws.tolist()):
            patches = patient.slides[si].patches
            refs.extend(patches[x] for x in per_slot[k].tolist())
    return refs


def sample_batch(corpus: Corpus, spec: SampleSpec, batch_counter: int, patients=None) -> HierBatch:
    """Draw the ``batch_counter``-th batch; a pure function of its arguments.

    ``patients`` restricts sampling to a subset of patient positions (e.g.
    the training split).
    """
    refs = sample_refs(corpus, spec, batch_counter, patients)
    n_a = spec.n_a
    h, w, c = corpus.patch_shape
    images = np.empty((len(refs) * n_a, h, w, c), dtype=np.float32)
    source = []
    for g, ref in enumerate(refs):
        img = corpus.load(ref)
        for a in range(n_a):
            images[g * n_a + a] = augment(img, spec.policy, (spec.seed, batch_counter, g, a))
            source.append(ref)
    patient_idx, slide_idx, patch_idx = _ancestry_indices(corpus, source)
    return HierBatch(images, patient_idx, slide_idx, patch_idx, source, spec)


def _ancestry_indices(corpus: Corpus, refs: list[PatchRef]):
    def dense(keys):
        seen: dict = {}
        return np.asarray([seen.setdefault(k, len(seen)) for k in keys], dtype=np.int64)

    idx = [r.index for r in refs]
    return (
        dense(corpus.patch_patient[idx].tolist()),
        dense(corpus.patch_slide[idx].tolist()),
        dense(idx),
    )


def positive_sets(batch: HierBatch, level: Level) -> list[np.ndarray]:
    """Rows sharing the anchor's ``level`` ancestry, anchor excluded."""
    return positive_sets_from_labels(batch.labels(level))


def positive_sets_from_labels(labels) -> list[np.ndarray]:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return [np.nonzero(row)[0] for row in same]


def positive_mask(labels) -> np.ndarray:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return same
