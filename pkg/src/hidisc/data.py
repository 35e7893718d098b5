"""Patient -> slide -> patch corpora.

A :class:`Corpus` is an immutable tree of patients, slides and patches plus
a patch store. Stores are either in-memory arrays (synthetic corpora) or
per-patch binary files addressed through a JSON-lines manifest and read
lazily through an LRU cache.
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PATCH_MAGIC = b"HDPATCH1"
_HEADER = struct.Struct("<8sIII")


class Level(enum.Enum):
    PATCH = "patch"
    SLIDE = "slide"
    PATIENT = "patient"


LEVELS = (Level.PATCH, Level.SLIDE, Level.PATIENT)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class PatchRef:
    """Handle to one patch: its position in the corpus plus its storage key."""

    index: int
    patch_id: str
    key: str


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    patches: tuple[PatchRef, ...]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    class_label: int
    slides: tuple[SlideRecord, ...]
    split: str = "train"


class ArrayStore:
    def __init__(self, images: np.ndarray):
        self.images = np.ascontiguousarray(images, dtype=np.float32)

    def load(self, ref: PatchRef) -> np.ndarray:
        return self.images[ref.index]


class FileStore:
    """Reads patch files relative to ``root``; the LRU cache is thread-safe."""

    def __init__(self, root: Path, cache_size: int = 4096):
        self.root = Path(root)
        self._load = functools.lru_cache(maxsize=cache_size)(self._read)

    def _read(self, key: str) -> np.ndarray:
        arr = read_patch(self.root / key)
        arr.setflags(write=False)
        return arr

    def load(self, ref: PatchRef) -> np.ndarray:
        return self._load(ref.key)


class Corpus:
    def __init__(
        self,
        patients: Sequence[PatientRecord],
        classes: Sequence[str],
        patch_shape: tuple[int, int, int],
        store,
    ):
        self.patients = tuple(patients)
        self.classes = tuple(classes)
        self.patch_shape = tuple(int(s) for s in patch_shape)
        self.store = store
        self._index()

    def _index(self) -> None:
        refs, pat_of, slide_of = [], [], []
        self.slide_keys: list[tuple[str, str]] = []
        seen_patients = set()
        for pi, p in enumerate(self.patients):
            if p.patient_id in seen_patients:
                raise CorpusError(f"duplicate patient id {p.patient_id!r}")
            seen_patients.add(p.patient_id)
            if not 0 <= p.class_label < len(self.classes):
                raise CorpusError(f"patient {p.patient_id!r} has class label {p.class_label} outside {len(self.classes)} classes")
            if not p.slides:
                raise CorpusError(f"patient {p.patient_id!r} has no slides")
            seen_slides = set()
            for s in p.slides:
                if s.slide_id in seen_slides:
                    raise CorpusError(f"duplicate slide id {s.slide_id!r} in patient {p.patient_id!r}")
                seen_slides.add(s.slide_id)
                if not s.patches:
                    raise CorpusError(f"slide {s.slide_id!r} of patient {p.patient_id!r} has no patches")
                si = len(self.slide_keys)
                self.slide_keys.append((p.patient_id, s.slide_id))
                for ref in s.patches:
                    if ref.index != len(refs):
                        raise CorpusError(f"patch {ref.patch_id!r} has index {ref.index}, expected {len(refs)}")
                    refs.append(ref)
                    pat_of.append(pi)
                    slide_of.append(si)
        self.refs: tuple[PatchRef, ...] = tuple(refs)
        self.patch_patient = np.asarray(pat_of, dtype=np.int64)
        self.patch_slide = np.asarray(slide_of, dtype=np.int64)
        self._by_index = {r.index: r for r in refs}

    # -- counts -------------------------------------------------------------
    @property
    def n_patients(self) -> int:
        return len(self.patients)

    @property
    def n_slides(self) -> int:
        return len(self.slide_keys)

    @property
    def n_patches(self) -> int:
        return len(self.refs)

    def class_counts(self) -> dict[str, dict[str, int]]:
        out = {c: {"patients": 0, "slides": 0, "patches": 0} for c in self.classes}
        for p in self.patients:
            row = out[self.classes[p.class_label]]
            row["patients"] += 1
            row["slides"] += len(p.slides)
            row["patches"] += sum(len(s.patches) for s in p.slides)
        return out

    # -- access -------------------------------------------------------------
    def load(self, ref: PatchRef) -> np.ndarray:
        return self.store.load(ref)

    def load_many(self, refs: Iterable[PatchRef]) -> np.ndarray:
        return np.stack([self.store.load(r) for r in refs]).astype(np.float32, copy=False)

    def patient_of(self, ref: PatchRef) -> PatientRecord:
        return self.patients[self.patch_patient[self._check(ref)]]

    def label_of(self, ref: PatchRef) -> int:
        return self.patient_of(ref).class_label

    def _check(self, ref: PatchRef) -> int:
        if self._by_index.get(ref.index) != ref:
            raise CorpusError(f"patch {ref.patch_id!r} does not belong to this corpus")
        return ref.index

    def split_patients(self, split: Optional[str]) -> list[int]:
        return [i for i, p in enumerate(self.patients) if split is None or p.split == split]

    def subset(self, split: str) -> "Corpus":
        """Corpus view restricted to one split, re-indexed from zero."""
        keep = [p for p in self.patients if p.split == split]
        if not keep:
            raise CorpusError(f"split {split!r} is empty")
        new_patients, src = [], []
        for p in keep:
            slides = []
            for s in p.slides:
                refs = []
                for r in s.patches:
                    refs.append(PatchRef(len(src), r.patch_id, r.key))
                    src.append(r)
                slides.append(SlideRecord(s.slide_id, tuple(refs)))
            new_patients.append(dataclasses.replace(p, slides=tuple(slides)))
        return Corpus(new_patients, self.classes, self.patch_shape, _RemappedStore(self.store, src))


class _RemappedStore:
    def __init__(self, base, src: list[PatchRef]):
        self.base = base
        self.src = src

    def load(self, ref: PatchRef) -> np.ndarray:
        return self.base.load(self.src[ref.index])


def ancestry(corpus: Corpus, patch: PatchRef, level: Level):
    """Key identifying the ``level`` ancestor of ``patch``.

    Two patches compare equal at a level iff they share that ancestor.
    """
    idx = corpus._check(patch)
    if level is Level.PATCH:
        return ("patch", idx)
    if level is Level.SLIDE:
        return ("slide",) + corpus.slide_keys[corpus.patch_slide[idx]]
    if level is Level.PATIENT:
        return ("patient", corpus.patients[corpus.patch_patient[idx]].patient_id)
    raise ValueError(f"unknown level {level!r}")


# ---------------------------------------------------------------------------
# patch files


def write_patch(path: Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 3:
        raise CorpusError(f"patch must be [h, w, c], got {image.shape}")
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PATCH_MAGIC, h, w, c))
        fh.write(image.tobytes(order="C"))


def read_patch(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CorpusError(f"{path}: truncated header")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != PATCH_MAGIC:
        raise CorpusError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size :]
    if len(body) != 4 * h * w * c:
        raise CorpusError(f"{path}: expected {h * w * c} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)


def _read_header(path: Path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise CorpusError(f"{path}: truncated header")
    magic, h, w, c = _HEADER.unpack(raw)
    if magic != PATCH_MAGIC:
        raise CorpusError(f"{path}: bad magic {magic!r}")
    if os.path.getsize(path) != _HEADER.size + 4 * h * w * c:
        raise CorpusError(f"{path}: size does not match header")
    return h, w, c


# ---------------------------------------------------------------------------
# manifests

MANIFEST_FIELDS = ("patch_path", "patch_id", "slide_id", "patient_id", "class_label")


def load_manifest(path, cache_size: int = 4096, verify: bool = True) -> Corpus:
    """Build a corpus from a JSON-lines manifest with one record per patch.

    Records carry ``patch_path`` (relative to the manifest), ``patch_id``,
    ``slide_id``, ``patient_id`` and ``class_label``; ``split`` is optional
    and defaults to ``"train"``.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"manifest {path} not found")
    root = path.parent
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
            for f in ("patch_path", "patch_id"):
                if f not in rec:
                    raise CorpusError(f"{path}:{lineno}: record missing {f!r}")
            if rec.get("slide_id") is None or rec.get("patient_id") is None:
                raise CorpusError(f"{path}:{lineno}: orphan patch {rec['patch_id']!r} has no slide or patient")
            if "class_label" not in rec:
                raise CorpusError(f"{path}:{lineno}: record missing 'class_label'")
            records.append(rec)
    if not records:
        raise CorpusError(f"manifest {path} is empty")

    labels = [r["class_label"] for r in records]
    int_labels = all(isinstance(x, int) and x >= 0 for x in labels)
    if int_labels:
        classes = [str(i) for i in range(max(labels) + 1)]
        to_idx = {}
    else:
        classes = sorted({str(x) for x in labels})
        to_idx = {c: i for i, c in enumerate(classes)}

    patient_order: list[str] = []
    patients: dict[str, dict] = {}
    slide_owner: dict[str, str] = {}
    patch_home: dict[str, tuple[str, str]] = {}
    for rec in records:
        pid, sid, xid = str(rec["patient_id"]), str(rec["slide_id"]), str(rec["patch_id"])
        raw = rec["class_label"]
        label = raw if isinstance(raw, int) and int_labels else to_idx[str(raw)]
        if xid in patch_home:
            prev_p, prev_s = patch_home[xid]
            if (prev_p, prev_s) == (pid, sid):
                raise CorpusError(f"duplicate patch id {xid!r} in slide {sid!r}")
            raise CorpusError(f"patch {xid!r} listed under two slides: {prev_s!r} and {sid!r}")
        patch_home[xid] = (pid, sid)
        if sid in slide_owner and slide_owner[sid] != pid:
            raise CorpusError(f"slide {sid!r} listed under two patients: {slide_owner[sid]!r} and {pid!r}")
        slide_owner[sid] = pid
        if pid not in patients:
            patients[pid] = {"label": label, "split": rec.get("split", "train"), "slides": {}}
            patient_order.append(pid)
        prec = patients[pid]
        if prec["label"] != label:
            raise CorpusError(f"patient {pid!r} has conflicting class labels")
        if prec["split"] != rec.get("split", "train"):
            raise CorpusError(f"patient {pid!r} spans more than one split")
        prec["slides"].setdefault(sid, []).append((xid, rec["patch_path"]))

    shape = None
    out, index = [], 0
    for pid in patient_order:
        prec = patients[pid]
        slides = []
        for sid, items in prec["slides"].items():
            refs = []
            for xid, rel in items:
                fpath = root / rel
                if verify:
                    if not fpath.is_file():
                        raise CorpusError(f"missing patch file {rel!r} for patch {xid!r}")
                    hdr = _read_header(fpath)
                    if shape is None:
                        shape = hdr
                    elif hdr != shape:
                        raise CorpusError(f"patch {xid!r} has shape {hdr}, expected {shape}")
                refs.append(PatchRef(index, xid, rel))
                index += 1
            slides.append(SlideRecord(sid, tuple(refs)))
        out.append(PatientRecord(pid, prec["label"], tuple(slides), prec["split"]))
    if shape is None:
        shape = read_patch(root / out[0].slides[0].patches[0].key).shape
    return Corpus(out, classes, shape, FileStore(root, cache_size))


def manifest_records(corpus: Corpus) -> list[dict]:
    recs = []
    for p in corpus.patients:
        for s in p.slides:
            for r in s.patches:
                recs.append(
                    {
                        "patch_path": r.key,
                        "patch_id": r.patch_id,
                        "slide_id": s.slide_id,
                        "patient_id": p.patient_id,
                        "class_label": p.class_label,
                        "split": p.split,
                    }
                )
    return recs


def export_corpus(corpus: Corpus, out_dir, provenance: Optional[dict] = None, force: bool = False) -> Path:
    """Write patch files, ``manifest.jsonl`` and optionally ``provenance.json``."""
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.jsonl"
    if manifest.exists() and not force:
        raise FileExistsError(f"{manifest} exists; pass force to overwrite")
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    lines = []
    for p in corpus.patients:
        for s in p.slides:
            for r in s.patches:
                rel = f"patches/{r.patch_id}.f32"
                write_patch(out_dir / rel, corpus.load(r))
                rec = {
                    "patch_path": rel,
                    "patch_id": r.patch_id,
                    "slide_id": s.slide_id,
                    "patient_id": p.patient_id,
                    "class_label": p.class_label,
                    "split": p.split,
                }
                lines.append(json.dumps(rec, sort_keys=True))
    manifest.write_text("\n".join(lines) + "\n")
    if provenance is not None:
        (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass(frozen=True)
class SynthConfig:
    """Hierarchical band-texture corpus.

    Each class owns a frequency band centred at ``base_frequency + c *
    sigma_class`` (cycles/pixel). Patients, slides and patches jitter the
    band centre by Gaussian offsets of scale ``sigma_patient``,
    ``sigma_slide`` and ``sigma_patch``. The texture's random Fourier
    coefficients are a weighted sum of one component per hierarchy node, so
    patches sharing an ancestor share part of their texture. ``acquisition``
    scales per-patch nuisance: an independent texture component, intensity
    offset, gain and a smooth illumination field.
    """

    n_classes: int = 4
    patients_per_class: int = 10
    slides_per_patient: int = 2
    patches_per_slide: int = 32
    sigma_class: float = 0.04
    sigma_patient: float = 0.008
    sigma_slide: float = 0.005
    sigma_patch: float = 0.003
    patch_shape: tuple[int, int, int] = (32, 32, 1)
    seed: int = 0
    test_patients_per_class: int = 2
    base_frequency: float = 0.12
    band_width: float = 0.02
    texture_amplitude: float = 0.1
    class_share: float = 0.2
    acquisition: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))
        self.validate()

    def validate(self) -> None:
        counts = (self.n_classes, self.patients_per_class, self.slides_per_patient, self.patches_per_slide)
        if any(int(c) < 1 for c in counts):
            raise ValueError("synthetic corpus counts must all be >= 1")
        if not self.sigma_class > self.sigma_patient >= self.sigma_slide >= self.sigma_patch >= 0:
            raise ValueError(
                "need sigma_class > sigma_patient >= sigma_slide >= sigma_patch >= 0, got "
                f"{self.sigma_class}, {self.sigma_patient}, {self.sigma_slide}, {self.sigma_patch}"
            )
        if not 0 <= self.test_patients_per_class < self.patients_per_class:
            raise ValueError("test_patients_per_class must leave at least one training patient per class")
        if len(self.patch_shape) != 3 or any(s < 1 for s in self.patch_shape):
            raise ValueError(f"bad patch shape {self.patch_shape}")
        if min(self.band_width, self.texture_amplitude, self.class_share, self.acquisition) < 0:
            raise ValueError("band_width, texture_amplitude, class_share and acquisition must be nonnegative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_shape"] = list(d["patch_shape"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config fields: {sorted(unknown)}")
        return cls(**d)


# per-patch nuisance at acquisition=1
_DC_STD = 0.15
_LOG_GAIN_STD = 0.6
_ILLUMINATION = 0.25
_ILLUMINATION_BAND = (0.0, 0.1)


def _coefficients(rng: np.random.Generator, shape: tuple[int, int, int]) -> np.ndarray:
    h, w, c = shape
    size = (h, w // 2 + 1, c)
    return rng.standard_normal(size) + 1j * rng.standard_normal(size)


def _render(coef: np.ndarray, shape: tuple[int, int, int], band: tuple[float, float]) -> np.ndarray:
    """Band-limited texture from half-spectrum coefficients, scaled to unit RMS per channel."""
    h, w, _ = shape
    radius = np.sqrt(np.fft.fftfreq(h)[:, None] ** 2 + np.fft.rfftfreq(w)[None, :] ** 2)
    mask = ((radius >= band[0]) & (radius <= band[1])).astype(np.float64)
    mask[0, 0] = 0.0
    tex = np.fft.irfft2(coef * mask[:, :, None], s=(h, w), axes=(0, 1))
    rms = np.sqrt(np.mean(tex**2, axis=(0, 1), keepdims=True))
    return np.divide(tex, rms, out=np.zeros_like(tex), where=rms > 0)


def generate_synthetic(cfg: SynthConfig) -> Corpus:
    """Render a hierarchical corpus; a pure function of ``cfg``."""
    cfg.validate()
    shape = cfg.patch_shape
    half = cfg.band_width
    share = lambda sigma: sigma / cfg.sigma_class
    root = np.random.SeedSequence(cfg.seed)
    class_seqs = root.spawn(cfg.n_classes)

    n_total = cfg.n_classes * cfg.patients_per_class * cfg.slides_per_patient * cfg.patches_per_slide
    images = np.empty((n_total,) + shape, dtype=np.float32)
    patients = []
    index = 0
    for c, cseq in enumerate(class_seqs):
        crng = np.random.default_rng(cseq)
        class_coef = cfg.class_share * _coefficients(crng, shape)
        centre_c = cfg.base_frequency + c * cfg.sigma_class
        for k, pseq in enumerate(cseq.spawn(cfg.patients_per_class)):
            prng = np.random.default_rng(pseq)
            centre_p = centre_c + cfg.sigma_patient * prng.standard_normal()
            coef_p = class_coef + share(cfg.sigma_patient) * _coefficients(prng, shape)
            pid = f"c{c}p{k:03d}"
            slides = []
            for s, sseq in enumerate(pseq.spawn(cfg.slides_per_patient)):
                srng = np.random.default_rng(sseq)
                centre_s = centre_p + cfg.sigma_slide * srng.standard_normal()
                coef_s = coef_p + share(cfg.sigma_slide) * _coefficients(srng, shape)
                sid = f"{pid}s{s}"
                refs = []
                for x in range(cfg.patches_per_slide):
                    centre = centre_s + cfg.sigma_patch * srng.standard_normal()
                    coef = coef_s + share(cfg.sigma_patch) * _coefficients(srng, shape)
                    coef = coef + cfg.acquisition * _coefficients(srng, shape)
                    gain = np.exp(cfg.acquisition * _LOG_GAIN_STD * srng.standard_normal())
                    offset = cfg.acquisition * _DC_STD * srng.standard_normal()
                    light = cfg.acquisition * _ILLUMINATION * _render(_coefficients(srng, shape), shape, _ILLUMINATION_BAND)
                    tex = _render(coef, shape, (centre - half, centre + half))
                    img = 0.5 + offset + cfg.texture_amplitude * gain * tex + light
                    images[index] = np.clip(img, 0.0, 1.0)
                    xid = f"{sid}x{x:03d}"
                    refs.append(PatchRef(index, xid, f"patches/{xid}.f32"))
                    index += 1
                slides.append(SlideRecord(sid, tuple(refs)))
            split = "test" if k >= cfg.patients_per_class - cfg.test_patients_per_class else "train"
            patients.append(PatientRecord(pid, c, tuple(slides), split))
    classes = [str(c) for c in range(cfg.n_classes)]
    return Corpus(patients, classes, shape, ArrayStore(images))
