"""Weak and strong patch augmentations with counter-based seeding.

Every call draws from a fresh generator keyed by ``(seed_namespace, epoch,
sample index, replica)``, so results do not depend on call order or on how
work is spread over workers.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class AugKind(enum.Enum):
    NONE = "none"
    WEAK = "weak"
    STRONG = "strong"


DEFAULT_STRONG_OPS: tuple[tuple[str, dict], ...] = (
    ("hflip", {}),
    ("vflip", {}),
    ("gaussian_noise", {"std": 0.05}),
    ("intensity_jitter", {"brightness": 0.4, "contrast": 0.4}),
    ("gaussian_blur", {"kernel_size": 5, "sigma": 1.0}),
    ("random_erasing", {"scale": [0.02, 0.33], "value": 0.0}),
    ("random_resized_crop", {"scale": [0.5, 1.0], "ratio": [0.75, 4.0 / 3.0]}),
)


@dataclass(frozen=True)
class AugPolicy:
    kind: AugKind = AugKind.WEAK
    per_op_probability: float = 0.3
    op_list: tuple = DEFAULT_STRONG_OPS
    seed_namespace: int = 0

    def __post_init__(self):
        kind = self.kind if isinstance(self.kind, AugKind) else AugKind(self.kind)
        object.__setattr__(self, "kind", kind)
        ops = tuple((str(name), dict(params)) for name, params in self.op_list)
        object.__setattr__(self, "op_list", ops)
        if not 0.0 <= self.per_op_probability <= 1.0:
            raise ValueError(f"per_op_probability must lie in [0, 1], got {self.per_op_probability}")
        if kind is AugKind.STRONG and not ops:
            raise ValueError("strong policy needs at least one op")
        for name, _ in ops:
            if name not in _OPS:
                raise ValueError(f"unknown augmentation op {name!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "per_op_probability": self.per_op_probability,
            "op_list": [[name, params] for name, params in self.op_list],
            "seed_namespace": self.seed_namespace,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugPolicy":
        d = dict(d)
        if "op_list" in d:
            d["op_list"] = tuple((n, p) for n, p in d["op_list"])
        return cls(**d)


def stream_rng(namespace: int, stream_key: Sequence[int]) -> np.random.Generator:
    entropy = [int(namespace) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in stream_key]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def augment(patch: np.ndarray, policy: AugPolicy, stream_key: Sequence[int], shape=None) -> np.ndarray:
    return augment_traced(patch, policy, stream_key, shape)[0]


def augment_traced(patch: np.ndarray, policy: AugPolicy, stream_key: Sequence[int], shape=None):
    """Like :func:`augment` but also returns the names of the ops applied."""
    patch = np.asarray(patch)
    if shape is not None and tuple(patch.shape) != tuple(shape):
        raise ValueError(f"patch shape {patch.shape} does not match expected {tuple(shape)}")
    if patch.ndim != 3:
        raise ValueError(f"patch must be [h, w, c], got {patch.shape}")
    if policy.kind is AugKind.NONE:
        return patch.copy(), []
    rng = stream_rng(policy.seed_namespace, stream_key)
    out = patch.astype(np.float32, copy=True)
    applied = []
    if policy.kind is AugKind.WEAK:
        flips = rng.random(2) < 0.5
        if flips[0]:
            out = hflip(out)
            applied.append("hflip")
        if flips[1]:
            out = vflip(out)
            applied.append("vflip")
        return np.ascontiguousarray(out), applied
    # activation draws come first so op parameters cannot shift them
    active = rng.random(len(policy.op_list)) < policy.per_op_probability
    for on, (name, params) in zip(active, policy.op_list):
        if on:
            out = _OPS[name](out, rng, **params)
            applied.append(name)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0).astype(np.float32)), applied


# ---------------------------------------------------------------------------
# individual ops


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[::-1, :, :].copy()


def _op_hflip(img, rng):
    return hflip(img)


def _op_vflip(img, rng):
    return vflip(img)


def _op_noise(img, rng, std=0.05):
    return np.clip(img + rng.standard_normal(img.shape).astype(np.float32) * np.float32(std), 0.0, 1.0)


def _op_jitter(img, rng, brightness=0.4, contrast=0.4):
    b = rng.uniform(max(0.0, 1 - brightness), 1 + brightness)
    c = rng.uniform(max(0.0, 1 - contrast), 1 + contrast)
    out = np.clip(img * np.float32(b), 0.0, 1.0)
    mean = out.mean(dtype=np.float64)
    return np.clip((out - mean) * np.float32(c) + mean, 0.0, 1.0).astype(np.float32)


@functools.lru_cache(maxsize=16)
def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(img: np.ndarray, kernel_size: int = 5, sigma: float = 1.0) -> np.ndarray:
    k = _gauss_kernel(int(kernel_size), float(sigma))
    r = len(k) // 2
    h, w, _ = img.shape
    p = np.pad(img, ((r, r), (0, 0), (0, 0)), mode="reflect")
    tmp = sum(k[i] * p[i : i + h] for i in range(len(k)))
    p = np.pad(tmp, ((0, 0), (r, r), (0, 0)), mode="reflect")
    return sum(k[i] * p[:, i : i + w] for i in range(len(k))).astype(np.float32)


def _op_blur(img, rng, kernel_size=5, sigma=1.0):
    return gaussian_blur(img, kernel_size, sigma)


@functools.lru_cache(maxsize=64)
def _erase_candidates(h: int, w: int, lo: float, hi: float) -> tuple:
    total = h * w
    a_lo = math.ceil(lo * total - 1e-9)
    a_hi = math.floor(hi * total + 1e-9)
    pairs = [(rh, rw) for rh in range(1, h + 1) for rw in range(1, w + 1) if a_lo <= rh * rw <= a_hi]
    if not pairs:
        # no rectangle hits the range exactly: take the nearest realizable area
        target = (lo + hi) / 2 * total
        all_pairs = [(rh, rw) for rh in range(1, h + 1) for rw in range(1, w + 1)]
        best = min(abs(rh * rw - target) for rh, rw in all_pairs)
        pairs = [p for p in all_pairs if abs(p[0] * p[1] - target) == best]
    return tuple(pairs)


def erase_region(img: np.ndarray, area_range, value: float, rng: np.random.Generator):
    """Overwrite one axis-aligned rectangle whose area fraction lies in ``area_range``.

    Returns the erased image and the rectangle ``(top, left, height, width)``.
    """
    lo, hi = float(area_range[0]), float(area_range[1])
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"area fraction range must be a non-empty subset of (0, 1), got {area_range}")
    h, w = img.shape[:2]
    pairs = _erase_candidates(h, w, lo, hi)
    rh, rw = pairs[int(rng.integers(len(pairs)))]
    top = int(rng.integers(h - rh + 1))
    left = int(rng.integers(w - rw + 1))
    out = img.copy()
    out[top : top + rh, left : left + rw, :] = value
    return out, (top, left, rh, rw)


def _op_erase(img, rng, scale=(0.02, 0.33), value=0.0):
    return erase_region(img, scale, value, rng)[0]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w, _ = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def _op_crop(img, rng, scale=(0.5, 1.0), ratio=(0.75, 4.0 / 3.0)):
    h, w, _ = img.shape
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        ar = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(h - ch + 1))
            left = int(rng.integers(w - cw + 1))
            return resize_bilinear(img[top : top + ch, left : left + cw], h, w)
    return img


_OPS = {
    "hflip": _op_hflip,
    "vflip": _op_vflip,
    "gaussian_noise": _op_noise,
    "intensity_jitter": _op_jitter,
    "gaussian_blur": _op_blur,
    "random_erasing": _op_erase,
    "random_resized_crop": _op_crop,
}

WEAK = AugPolicy(AugKind.WEAK)
STRONG = AugPolicy(AugKind.STRONG)
NONE = AugPolicy(AugKind.NONE)
