"""Frozen-encoder kNN evaluation with slide/patient score pooling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Corpus, PatchRef
from .trainer import EncoderConfig, embed

DEFAULT_K = 10
DEFAULT_SUBSAMPLE = 400


class UndefinedMetricError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    refs: list
    labels: np.ndarray
    split: str
    slide_keys: list = field(default_factory=list)
    patient_keys: list = field(default_factory=list)

    def __post_init__(self):
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if self.vectors.ndim != 2 or np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValueError("embedding rows must be unit-norm")
        if not (len(self.refs) == len(self.labels) == len(self.vectors)):
            raise ValueError("vectors, refs and labels must align")


def subsample_refs(corpus: Corpus, split: Optional[str], per_slide: Optional[int], seed: int) -> list[PatchRef]:
    """All patches of the split, or at most ``per_slide`` random ones per slide."""
    out = []
    for pi in corpus.split_patients(split):
        p = corpus.patients[pi]
        for si, s in enumerate(p.slides):
            refs = list(s.patches)
            if per_slide is not None and len(refs) > per_slide:
                rng = np.random.default_rng(np.random.SeedSequence([int(seed), pi, si]))
                keep = np.sort(rng.choice(len(refs), size=per_slide, replace=False))
                refs = [refs[i] for i in keep]
            out.extend(refs)
    return out


def embed_corpus(
    params: dict,
    enc_cfg: EncoderConfig,
    corpus: Corpus,
    split: Optional[str],
    per_slide_subsample: Optional[int] = DEFAULT_SUBSAMPLE,
    seed: int = 0,
    which: str = "backbone",
) -> EmbeddingSet:
    """Embed un-augmented patches of ``split`` with the frozen encoder."""
    refs = subsample_refs(corpus, split, per_slide_subsample, seed)
    if not refs:
        raise ValueError(f"split {split!r} has no patches")
    vecs = embed(params, corpus.load_many(refs), enc_cfg, which=which)
    labels = np.asarray([corpus.label_of(r) for r in refs], dtype=np.int64)
    slides = [corpus.slide_keys[corpus.patch_slide[r.index]] for r in refs]
    patients = [corpus.patients[corpus.patch_patient[r.index]].patient_id for r in refs]
    return EmbeddingSet(vecs, refs, labels, split or "all", ["/".join(s) for s in slides], patients)


# ---------------------------------------------------------------------------
# kNN


@dataclass
class KnnResult:
    scores: np.ndarray
    predictions: np.ndarray
    k: int
    warnings: list


def knn_scores(train: EmbeddingSet, test: EmbeddingSet, k: int = DEFAULT_K, n_classes: Optional[int] = None) -> KnnResult:
    """Exact cosine kNN with similarity-weighted class scores.

    Neighbour ties go to the lower training row; argmax ties to the lower
    class index. If the summed neighbour similarity is not positive the
    score falls back to neighbour-count fractions.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(train.vectors) == 0:
        raise ValueError("empty training set")
    if train.vectors.shape[1] != test.vectors.shape[1]:
        raise ValueError(f"dimension mismatch: {train.vectors.shape[1]} vs {test.vectors.shape[1]}")
    warnings = []
    if k > len(train.vectors):
        warnings.append(f"k={k} exceeds {len(train.vectors)} training rows; clamped")
        k = len(train.vectors)
    C = int(n_classes) if n_classes is not None else int(max(train.labels.max(), test.labels.max())) + 1
    sims = test.vectors.astype(np.float64) @ train.vectors.astype(np.float64).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    nsim = np.take_along_axis(sims, order, axis=1)
    nlab = train.labels[order]
    scores = np.zeros((len(sims), C), dtype=np.float64)
    counts = np.zeros((len(sims), C), dtype=np.float64)
    rows = np.arange(len(sims))[:, None]
    np.add.at(scores, (np.broadcast_to(rows, nlab.shape), nlab), nsim)
    np.add.at(counts, (np.broadcast_to(rows, nlab.shape), nlab), 1.0)
    denom = nsim.sum(axis=1)
    good = denom > 0
    scores[good] /= denom[good, None]
    scores[~good] = counts[~good] / k
    return KnnResult(scores, np.argmax(scores, axis=1), k, warnings)


def pool_scores(scores: np.ndarray, groups: Sequence) -> tuple[list, np.ndarray, np.ndarray]:
    """Average patch score vectors within each group.

    Returns group keys in first-appearance order, pooled scores, predictions.
    """
    keys: list = []
    index: dict = {}
    member = np.empty(len(groups), dtype=np.int64)
    for i, g in enumerate(groups):
        if g not in index:
            index[g] = len(keys)
            keys.append(g)
        member[i] = index[g]
    sums = np.zeros((len(keys), scores.shape[1]), dtype=np.float64)
    np.add.at(sums, member, scores)
    counts = np.bincount(member, minlength=len(keys)).astype(np.float64)
    pooled = sums / counts[:, None]
    return keys, pooled, np.argmax(pooled, axis=1)


# ---------------------------------------------------------------------------
# metrics


def auroc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Probability a positive outscores a negative, ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative examples")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auprc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Average precision: step integration of precision over recall.

    Each distinct score is one threshold; tied examples enter together.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == len(pos):
        raise UndefinedMetricError("AUPRC needs both positive and negative examples")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], pos[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def compute_metrics(scores: np.ndarray, labels: np.ndarray, n_classes: int) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.argmax(scores, axis=1)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    support = conf.sum(axis=1)
    present = support > 0
    per_class = [float(conf[c, c] / support[c]) if support[c] else None for c in range(n_classes)]
    out = {
        "n": int(len(labels)),
        "accuracy": float(np.mean(preds == labels)) if len(labels) else None,
        "mca": float(np.mean([per_class[c] for c in range(n_classes) if present[c]])) if present.any() else None,
        "per_class_accuracy": per_class,
        "confusion": conf.tolist(),
        "undefined": [],
    }
    try:
        if n_classes == 2:
            out["auroc"] = auroc(scores[:, 1], labels == 1)
            out["auprc"] = auprc(scores[:, 1], labels == 1)
        else:
            present_cls = [c for c in range(n_classes) if present[c]]
            if len(present_cls) < 2:
                raise UndefinedMetricError("AUROC needs at least two classes present")
            out["auroc"] = float(np.mean([auroc(scores[:, c], labels == c) for c in present_cls]))
            out["auprc"] = float(np.mean([auprc(scores[:, c], labels == c) for c in present_cls]))
    except UndefinedMetricError as exc:
        out["auroc"] = out["auprc"] = None
        out["undefined"].append(str(exc))
    if n_classes == 2:
        tp, fn = conf[1, 1], conf[1, 0]
        tn, fp = conf[0, 0], conf[0, 1]
        out["sensitivity"] = float(tp / (tp + fn)) if tp + fn else None
        out["specificity"] = float(tn / (tn + fp)) if tn + fp else None
    return out


# ---------------------------------------------------------------------------
# collapse diagnostics


def mean_pairwise_cosine(vectors: np.ndarray) -> float:
    v = np.asarray(vectors, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    g = v @ v.T
    n = len(v)
    return float((g.sum() - np.trace(g)) / (n * (n - 1)))


def effective_rank(vectors: np.ndarray, center: bool = True) -> float:
    """exp(entropy) of the normalized singular value spectrum."""
    v = np.asarray(vectors, dtype=np.float64)
    if center:
        v = v - v.mean(axis=0, keepdims=True)
    s = np.linalg.svd(v, compute_uv=False)
    total = s.sum()
    if total <= 1e-12 * max(1.0, np.abs(v).max(initial=0.0)) * math.sqrt(v.size):
        return 1.0
    p = s / total
    p = p[p > 0]
    return float(math.exp(-np.sum(p * np.log(p))))


def collapse_diagnostics(vectors: np.ndarray, probe_size: int = 512, seed: int = 0) -> dict:
    if probe_size < 2:
        raise ValueError("probe size must be >= 2")
    v = np.asarray(vectors)
    if len(v) > probe_size:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0]))
        v = v[np.sort(rng.choice(len(v), size=probe_size, replace=False))]
    return {"mean_pairwise_cosine": mean_pairwise_cosine(v), "effective_rank": effective_rank(v), "probe_size": int(len(v))}


# ---------------------------------------------------------------------------
# full protocol


def evaluate_embeddings(train: EmbeddingSet, test: EmbeddingSet, n_classes: int, k: int = DEFAULT_K,
                        probe_size: int = 512, seed: int = 0) -> dict:
    knn = knn_scores(train, test, k, n_classes)
    report = {"k": knn.k, "warnings": list(knn.warnings), "levels": {}}
    report["levels"]["patch"] = compute_metrics(knn.scores, test.labels, n_classes)
    for level, keys in (("slide", test.slide_keys), ("patient", test.patient_keys)):
        gkeys, pooled, _ = pool_scores(knn.scores, keys)
        first = {}
        for key, lab in zip(keys, test.labels):
            first.setdefault(key, lab)
        glabels = np.asarray([first[g] for g in gkeys])
        report["levels"][level] = compute_metrics(pooled, glabels, n_classes)
    report["collapse"] = collapse_diagnostics(test.vectors, probe_size, seed)
    return report


def export_embeddings(es: EmbeddingSet, path, digest: str = "") -> None:
    """Flat little-endian f32 ``[M, d]`` matrix plus a JSON sidecar."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(es.vectors, dtype="<f4").tobytes())
    side = {
        "shape": list(es.vectors.shape),
        "dtype": "<f4",
        "split": es.split,
        "digest": digest,
        "patch_ids": [r.patch_id for r in es.refs],
        "labels": es.labels.tolist(),
        "slides": es.slide_keys,
        "patients": es.patient_keys,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, sort_keys=True) + "\n")


def load_embeddings(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    vecs = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(side["shape"])
    return vecs, side


def format_report(report: dict) -> str:
    lines = [f"{'level':<8} {'acc':>7} {'mca':>7} {'auroc':>7} {'auprc':>7}"]
    for level in ("patch", "slide", "patient"):
        m = report["levels"][level]

        def f(x):
            return f"{x:7.4f}" if x is not None else "    n/a"

        lines.append(f"{level:<8} {f(m['accuracy'])} {f(m['mca'])} {f(m.get('auroc'))} {f(m.get('auprc'))}")
    c = report["collapse"]
    lines.append(f"mean pairwise cosine {c['mean_pairwise_cosine']:.4f}, effective rank {c['effective_rank']:.2f}")
    return "\n".join(lines)
