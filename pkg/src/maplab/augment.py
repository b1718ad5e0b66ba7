"""Seeded augmentation policies over NHWC float batches.

Every transform takes an explicit ``numpy.random.Generator``; the same
generator state always yields the same views. Mix-based policies record the
partner's original index and the mixing coefficient on each view so that
target construction downstream needs no hidden state.
"""
import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import kernels
from .datasets import normalize
from .errors import ConfigError

log = logging.getLogger(__name__)

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class AugKind(str, Enum):
    NoAug = "NoAug"
    ColorJitter = "ColorJitter"
    Crop = "Crop"
    StdAug = "StdAug"
    MixUp = "MixUp"
    CutMix = "CutMix"

    @property
    def is_mix(self):
        return self in (AugKind.MixUp, AugKind.CutMix)


@dataclass(frozen=True)
class AugPolicy:
    kind: AugKind = AugKind.NoAug
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    gray_p: float = 0.2
    flip_p: float = 0.5
    scale: tuple = (0.08, 1.0)
    ratio: tuple = (3 / 4, 4 / 3)
    mixup_beta: tuple = (0.8, 0.8)
    cutmix_beta: tuple = (1.0, 1.0)

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", AugKind(self.kind))
        except ValueError as exc:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}") from exc
        lo, hi = self.scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop scale range must lie in (0, 1], got {self.scale}")

    @classmethod
    def of(cls, kind, **overrides):
        return cls(kind=AugKind(kind), **overrides)

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass(frozen=True)
class AugmentedView:
    image: np.ndarray
    origin: int
    partner: Optional[int] = None
    lam: Optional[float] = None


@dataclass
class ViewBatch:
    """A batch of augmented views in struct-of-arrays form.

    ``partners``/``partner_labels``/``lams`` are ``None`` for non-mix policies.
    """

    images: np.ndarray
    origins: np.ndarray
    labels: np.ndarray
    partners: Optional[np.ndarray] = None
    partner_labels: Optional[np.ndarray] = None
    lams: Optional[np.ndarray] = None

    @property
    def is_mixed(self):
        return self.lams is not None

    def __len__(self):
        return len(self.origins)

    def view(self, i):
        if self.is_mixed:
            return AugmentedView(self.images[i], int(self.origins[i]), int(self.partners[i]), float(self.lams[i]))
        return AugmentedView(self.images[i], int(self.origins[i]))

    def views(self):
        return [self.view(i) for i in range(len(self))]


# ---------------------------------------------------------------------------
# geometric


def sample_crop_box(height, width, scale, ratio, rng, attempts=10):
    """Draw ``(top, left, h, w)`` with area fraction uniform in ``scale``.

    Aspect ratio is log-uniform in ``ratio``. A candidate is kept only if it
    fits and its realized (rounded) area fraction still lies in ``scale``.
    """
    area = height * width
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(attempts):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height and scale[0] <= h * w / area <= scale[1]:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # centre crop of the closest admissible shape
    aspect = min(max(width / height, ratio[0]), ratio[1])
    target = area * scale[1]
    w = max(1, min(width, int(round(math.sqrt(target * aspect)))))
    h = max(1, min(height, int(round(math.sqrt(target / aspect)))))
    return (height - h) // 2, (width - w) // 2, h, w


def random_resized_crop(image, scale_range, rng, ratio=(3 / 4, 4 / 3)):
    h, w = image.shape[:2]
    box = sample_crop_box(h, w, scale_range, ratio, rng)
    return kernels.crop_resize(image[None], np.array([box]), h, w)[0]


def _crop_batch(images, policy, rng):
    n, h, w, _ = images.shape
    boxes = np.array([sample_crop_box(h, w, policy.scale, policy.ratio, rng) for _ in range(n)], dtype=np.int64)
    return kernels.crop_resize(images, boxes, h, w)


def _flip_batch(images, p, rng):
    mask = rng.random(len(images)) < p
    out = images.copy()
    out[mask] = out[mask, :, ::-1]
    return out


# ---------------------------------------------------------------------------
# photometric


def _gray(images):
    if images.shape[-1] != 3:
        return images.mean(axis=-1, keepdims=True)
    return (images @ _LUMA)[..., None]


def _grayscale_batch(images, p, rng):
    mask = rng.random(len(images)) < p
    out = images.copy()
    if mask.any():
        out[mask] = np.broadcast_to(_gray(images[mask]), images[mask].shape)
    return out


def _jitter_batch(images, policy, rng):
    n = len(images)
    mask = rng.random(n) < policy.jitter_p
    b = rng.uniform(1 - policy.brightness, 1 + policy.brightness, n).astype(np.float32)
    c = rng.uniform(1 - policy.contrast, 1 + policy.contrast, n).astype(np.float32)
    s = rng.uniform(1 - policy.saturation, 1 + policy.saturation, n).astype(np.float32)
    out = images.copy()
    if not mask.any():
        return out
    x = out[mask]
    x = np.clip(x * b[mask, None, None, None], 0.0, 1.0)
    mean = _gray(x).mean(axis=(1, 2, 3), keepdims=True)
    x = np.clip((x - mean) * c[mask, None, None, None] + mean, 0.0, 1.0)
    g = _gray(x)
    x = np.clip((x - g) * s[mask, None, None, None] + g, 0.0, 1.0)
    out[mask] = x
    return out


def color_jitter(image, rng, policy=None):
    policy = policy or AugPolicy(AugKind.ColorJitter)
    return _jitter_batch(image[None], policy, rng)[0]


# ---------------------------------------------------------------------------
# mixing


def mixup(x1, x2, lam):
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch {x1.shape} vs {x2.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * x1 + (1.0 - lam) * x2


def mix_targets(t1, t2, lam):
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    if t1.shape != t2.shape:
        raise ValueError(f"target length mismatch {t1.shape} vs {t2.shape}")
    return lam * t1 + (1.0 - lam) * t2


def sample_cutmix_box(height, width, lam_raw, rng):
    """Return ``(y1, y2, x1, x2)``: a box of side ``sqrt(1 - lam)`` centred uniformly, clipped."""
    cut = math.sqrt(1.0 - lam_raw)
    cut_h, cut_w = int(height * cut), int(width * cut)
    cy = int(rng.integers(0, height))
    cx = int(rng.integers(0, width))
    y1 = min(max(cy - cut_h // 2, 0), height)
    y2 = min(max(cy + cut_h - cut_h // 2, 0), height)
    x1 = min(max(cx - cut_w // 2, 0), width)
    x2 = min(max(cx + cut_w - cut_w // 2, 0), width)
    return y1, y2, x1, x2


def paste_box(x1, x2, box):
    """Paste ``x2[box]`` into a copy of ``x1``; return the image and surviving fraction of ``x1``."""
    if np.shape(x1) != np.shape(x2):
        raise ValueError(f"shape mismatch {np.shape(x1)} vs {np.shape(x2)}")
    y_lo, y_hi, x_lo, x_hi = box
    out = np.array(x1, copy=True)
    out[y_lo:y_hi, x_lo:x_hi] = x2[y_lo:y_hi, x_lo:x_hi]
    h, w = out.shape[:2]
    return out, 1.0 - (y_hi - y_lo) * (x_hi - x_lo) / (h * w)


def cutmix(x1, x2, lam_raw, rng):
    if not 0.0 <= lam_raw <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam_raw}")
    h, w = np.shape(x1)[:2]
    return paste_box(x1, x2, sample_cutmix_box(h, w, lam_raw, rng))


# ---------------------------------------------------------------------------


def apply_policy(images, labels, origins, policy, rng, stats, pair_permutation=None):
    """Produce one stochastic, normalized view per input image.

    ``images`` are raw [0, 1] NHWC. Photometric and geometric transforms run
    before normalization; MixUp/CutMix mix the normalized images.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    origins = np.asarray(origins, dtype=np.int64)
    kind = policy.kind
    if kind.is_mix and len(images) < 2:
        log.info("mix policy %s on a batch of %d; using NoAug for this batch", kind.value, len(images))
        kind = AugKind.NoAug

    # StdAug runs jitter, grayscale, flip, crop in that order
    x = images
    if kind in (AugKind.ColorJitter, AugKind.StdAug):
        x = _jitter_batch(x, policy, rng)
    if kind is AugKind.StdAug:
        x = _grayscale_batch(x, policy.gray_p, rng)
        x = _flip_batch(x, policy.flip_p, rng)
    if kind in (AugKind.Crop, AugKind.StdAug):
        x = _crop_batch(x, policy, rng)
    x = normalize(x, stats)
    if not kind.is_mix:
        return ViewBatch(x, origins, labels)

    n = len(x)
    perm = rng.permutation(n) if pair_permutation is None else np.asarray(pair_permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("pair_permutation must be a permutation of the batch")
    if kind is AugKind.MixUp:
        lams = rng.beta(*policy.mixup_beta, size=n)
        mixed = (lams[:, None, None, None] * x + (1.0 - lams[:, None, None, None]) * x[perm]).astype(np.float32)
    else:
        raw = rng.beta(*policy.cutmix_beta, size=n)
        mixed = np.empty_like(x)
        lams = np.empty(n)
        h, w = x.shape[1:3]
        for i in range(n):
            box = sample_cutmix_box(h, w, raw[i], rng)
            mixed[i], lams[i] = paste_box(x[i], x[perm[i]], box)
    return ViewBatch(mixed, origins, labels, origins[perm], labels[perm], lams)

