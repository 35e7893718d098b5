"""Encoder, AdamW, warmup + cosine schedule and the training loop."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import LEVELS, Corpus, Level
from .loss import LossBreakdown, LossConfig, hidisc_loss, supcon_loss_with_skips
from .sampler import HierBatch, SampleSpec, sample_batch
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("iteration", "lr", "loss_total", "loss_patch", "loss_slide", "loss_patient", "skipped_anchors")


class TrainingAborted(RuntimeError):
    pass


class DigestMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "tiny_cnn"
    widths: tuple = (16, 32, 64)
    projection_dim: int = 128
    patch_shape: tuple = (32, 32, 1)
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))
        if self.backbone not in ("tiny_cnn", "mlp"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.projection_dim < 1 or not self.widths or min(self.widths) < 1:
            raise ValueError("projection_dim and widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["patch_shape"] = list(self.patch_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_iterations: int = 2000
    warmup_fraction: float = 0.10
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# encoder


def init_params(cfg: EncoderConfig, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in scaled uniform init, seeded by ``cfg.init_seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.init_seed, 0x5EED]))

    def uniform(shape, fan_in, gain):
        bound = gain * math.sqrt(3.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    def const(shape, v):
        return Tensor(np.full(shape, v, dtype=dtype), requires_grad=True)

    h, w, c = cfg.patch_shape
    params: dict[str, Tensor] = {}
    relu_gain = math.sqrt(2.0)
    if cfg.backbone == "tiny_cnn":
        cin = c
        for i, cout in enumerate(cfg.widths):
            params[f"conv{i}.w"] = uniform((3, 3, cin, cout), 9 * cin, relu_gain)
            params[f"conv{i}.scale"] = const((cout,), 1.0)
            params[f"conv{i}.shift"] = const((cout,), 0.0)
            cin = cout
        feat = cin
    else:
        fin = h * w * c
        for i, width in enumerate(cfg.widths):
            params[f"fc{i}.w"] = uniform((fin, width), fin, relu_gain)
            params[f"fc{i}.b"] = const((width,), 0.0)
            fin = width
        feat = fin
    params["proj.w"] = uniform((feat, cfg.projection_dim), feat, 1.0)
    params["proj.b"] = const((cfg.projection_dim,), 0.0)
    return params


def _input(images, cfg: EncoderConfig, dtype) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=dtype))
    if x.data.ndim != 4 or tuple(x.shape[1:]) != cfg.patch_shape:
        raise T.ShapeError(f"images must be [B, {', '.join(map(str, cfg.patch_shape))}], got {x.shape}")
    return x


def backbone(params: dict, images, cfg: EncoderConfig) -> Tensor:
    """Backbone representation, before the projection head."""
    dtype = params["proj.w"].dtype
    x = _input(images, cfg, dtype)
    if cfg.backbone == "tiny_cnn":
        for i in range(len(cfg.widths)):
            x = T.conv2d(x, params[f"conv{i}.w"], stride=2, padding=1)
            x = T.add(T.mul(x, params[f"conv{i}.scale"]), params[f"conv{i}.shift"])
            x = T.relu(x)
        return T.reduce_mean(x, axis=(1, 2))
    x = T.reshape(x, (x.shape[0], -1))
    for i in range(len(cfg.widths)):
        x = T.relu(T.add(T.matmul(x, params[f"fc{i}.w"]), params[f"fc{i}.b"]))
    return x


def encode(params: dict, images, cfg: EncoderConfig) -> Tensor:
    """Backbone -> one affine projection -> unit rows."""
    feats = backbone(params, images, cfg)
    z = T.add(T.matmul(feats, params["proj.w"]), params["proj.b"])
    return T.l2_normalize(z)


def embed(params: dict, images: np.ndarray, cfg: EncoderConfig, which: str = "backbone", chunk: int = 256) -> np.ndarray:
    """Frozen-encoder embeddings (no tape), L2-normalized rows."""
    outs = []
    for start in range(0, len(images), chunk):
        part = images[start : start + chunk]
        if which == "backbone":
            v = backbone(params, part, cfg)
            outs.append(T.l2_normalize(v).data)
        elif which == "projection":
            outs.append(encode(params, part, cfg).data)
        else:
            raise ValueError(f"unknown embedding source {which!r}")
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr_t: float, cfg: OptimConfig, iteration: int = -1) -> None:
    """In-place AdamW update with decoupled weight decay applied first."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for {name!r} at iteration {iteration}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        dt = p.data.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        decayed = p.data * dt(1.0 - lr_t * cfg.weight_decay)
        step = dt(lr_t) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(cfg.eps))
        p.data = (decayed - step).astype(p.data.dtype, copy=False)


def warmup_iterations(cfg: OptimConfig) -> int:
    return max(1, int(round(cfg.warmup_fraction * cfg.total_iterations)))


def lr_at(iteration: int, cfg: OptimConfig) -> float:
    """Linear warmup from 0, then cosine decay reaching 0 at the last iteration."""
    total = cfg.total_iterations
    if not 0 <= iteration < total:
        raise ValueError(f"iteration {iteration} outside [0, {total})")
    warm = warmup_iterations(cfg)
    if iteration < warm:
        return cfg.peak_lr * iteration / warm
    span = total - 1 - warm
    if span <= 0:
        return cfg.peak_lr
    progress = (iteration - warm) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# checkpoints


def config_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def run_digest(spec: SampleSpec, loss_cfg: LossConfig, enc_cfg: EncoderConfig, optim_cfg: OptimConfig,
               extra: Optional[dict] = None) -> str:
    """Digest of everything that determines a training trajectory."""
    return config_digest(
        {
            "sample": spec.to_dict(),
            "loss": loss_cfg.to_dict(),
            "encoder": enc_cfg.to_dict(),
            "optim": optim_cfg.to_dict(),
            "extra": extra or {},
        }
    )


@dataclass
class Checkpoint:
    iteration: int
    params: dict
    state: AdamState
    digest: str
    rng: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def save(self, path) -> None:
        path = Path(path)
        arrays = {"__meta__": np.frombuffer(json.dumps(self._meta()).encode(), dtype=np.uint8)}
        for k, t in self.params.items():
            arrays[f"p/{k}"] = t.data
        for k, a in self.state.m.items():
            arrays[f"m/{k}"] = a
        for k, a in self.state.v.items():
            arrays[f"v/{k}"] = a
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-", suffix=".npz")
        os.close(fd)
        try:
            with open(tmp, "wb") as fh:
                np.savez(fh, **arrays)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    def _meta(self) -> dict:
        return {"version": self.version, "iteration": self.iteration, "digest": self.digest,
                "step": self.state.step, "rng": self.rng}

    @classmethod
    def load(cls, path, expected_digest: Optional[str] = None) -> "Checkpoint":
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            if expected_digest is not None and meta["digest"] != expected_digest:
                raise DigestMismatch(f"checkpoint digest {meta['digest'][:12]} does not match config {expected_digest[:12]}")
            params, m, v = {}, {}, {}
            for k in z.files:
                if k.startswith("p/"):
                    params[k[2:]] = Tensor(z[k].copy(), requires_grad=True)
                elif k.startswith("m/"):
                    m[k[2:]] = z[k].copy()
                elif k.startswith("v/"):
                    v[k[2:]] = z[k].copy()
        return cls(meta["iteration"], params, AdamState(meta["step"], m, v), meta["digest"], meta.get("rng", {}))


# ---------------------------------------------------------------------------
# training loop


def batch_loss(params, batch: HierBatch, loss_cfg: LossConfig, enc_cfg: EncoderConfig, class_labels=None) -> LossBreakdown:
    z = encode(params, batch.images, enc_cfg)
    if loss_cfg.supcon:
        if class_labels is None:
            raise ValueError("supcon needs per-row class labels")
        loss, skipped = supcon_loss_with_skips(z, class_labels, loss_cfg.tau)
        return LossBreakdown({"supcon": loss}, loss, {"supcon": skipped})
    return hidisc_loss(z, batch, loss_cfg)


def _fmt(x: float) -> str:
    return repr(float(x))


def _metric_row(it: int, lr: float, br: LossBreakdown) -> dict:
    row = {"iteration": it, "lr": _fmt(lr), "loss_total": _fmt(br.total.data)}
    for lv in LEVELS:
        key = f"loss_{lv.value}"
        row[key] = _fmt(br.per_level[lv].data) if lv in br.per_level else ""
    row["skipped_anchors"] = int(sum(br.skipped_anchor_count.values()))
    return row


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list


def train(
    corpus: Corpus,
    spec: SampleSpec,
    loss_cfg: LossConfig,
    enc_cfg: EncoderConfig,
    optim_cfg: OptimConfig,
    run_dir=None,
    *,
    patients=None,
    workers: int = 1,
    resume: bool = True,
    digest_extra: Optional[dict] = None,
    stop_after: Optional[int] = None,
    on_iteration: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Run the sample -> encode -> loss -> backward -> AdamW loop.

    With ``run_dir`` set, metrics go to ``metrics.csv`` and checkpoints to
    ``checkpoint.npz`` (atomically replaced). An existing checkpoint with a
    matching digest is resumed; a mismatched one raises
    :class:`DigestMismatch`. ``stop_after`` ends the run early at that
    iteration, leaving a resumable checkpoint.
    """
    if tuple(enc_cfg.patch_shape) != tuple(corpus.patch_shape):
        raise ValueError(f"encoder expects {enc_cfg.patch_shape}, corpus patches are {corpus.patch_shape}")
    digest = run_digest(spec, loss_cfg, enc_cfg, optim_cfg, digest_extra)
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_path = run_dir / "checkpoint.npz" if run_dir else None
    metrics_path = run_dir / "metrics.csv" if run_dir else None

    if ckpt_path is not None and resume and ckpt_path.exists():
        ckpt = Checkpoint.load(ckpt_path, expected_digest=digest)
        params, state, start = ckpt.params, ckpt.state, ckpt.iteration
    else:
        params, state, start = init_params(enc_cfg), AdamState(), 0
    rng_info = {"sample_seed": spec.seed, "init_seed": enc_cfg.init_seed, "aug_namespace": spec.policy.seed_namespace}

    metrics: list[dict] = []
    if metrics_path is not None:
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        metrics = _read_metrics(metrics_path)[:start] if start else []
        _write_metrics(metrics_path, metrics)

    total = optim_cfg.total_iterations
    end = total if stop_after is None else min(total, stop_after)
    every = optim_cfg.checkpoint_every or max(1, total // 10)

    def make_batch(it):
        return sample_batch(corpus, spec, it, patients)

    def save(it):
        ck = Checkpoint(it, params, state, digest, rng_info)
        if ckpt_path is not None:
            ck.save(ckpt_path)
        return ck

    if start == 0 and ckpt_path is not None:
        save(0)

    lookahead = max(1, workers) * 2
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pending = {}
        for it in range(start, min(end, start + lookahead)):
            pending[it] = pool.submit(make_batch, it)
        for it in range(start, end):
            batch = pending.pop(it).result()
            nxt = it + lookahead
            if nxt < end:
                pending[nxt] = pool.submit(make_batch, nxt)
            lr = lr_at(it, optim_cfg)
            labels = [corpus.label_of(r) for r in batch.source_refs] if loss_cfg.supcon else None
            try:
                with Tape():
                    br = batch_loss(params, batch, loss_cfg, enc_cfg, labels)
                    if not np.isfinite(br.total.data).all():
                        raise T.NonFiniteError("non-finite loss")
                    T.backward(br.total)
            except T.NonFiniteError as exc:
                dump = _dump_batch(run_dir, it, batch)
                raise TrainingAborted(f"iteration {it}: {exc}; batch dumped to {dump}") from exc
            grads = {k: p.grad for k, p in params.items()}
            for p in params.values():
                p.grad = None
            adamw_step(params, grads, state, lr, optim_cfg, iteration=it)
            row = _metric_row(it, lr, br)
            metrics.append(row)
            if metrics_path is not None:
                _append_metric(metrics_path, row)
            if on_iteration is not None:
                on_iteration(row)
            if (it + 1) % every == 0 and it + 1 < end:
                save(it + 1)
    final = save(end)
    return TrainResult(final, metrics)


def _dump_batch(run_dir, it: int, batch: HierBatch) -> Optional[str]:
    if run_dir is None:
        return None
    path = Path(run_dir) / f"abort_batch_{it}.npz"
    np.savez(path, images=batch.images, patient_idx=batch.patient_idx, slide_idx=batch.slide_idx,
             patch_idx=batch.patch_idx, patch_ids=np.asarray([r.patch_id for r in batch.source_refs]))
    return str(path)


def _write_metrics(path: Path, rows: list) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _append_metric(path: Path, row: dict) -> None:
    with open(path, "a", newline="") as fh:
        csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n").writerow(row)


def _read_metrics(path: Path) -> list:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["iteration"] = int(r["iteration"])
        r["skipped_anchors"] = int(r["skipped_anchors"])
    return rows
