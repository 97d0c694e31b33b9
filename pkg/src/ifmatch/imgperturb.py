"""Image-level weak and strong augmentation at desk scale.

Weak augmentation is the classic crop-and-flip pair: reflect-pad then
random crop, plus a horizontal flip with probability 0.5.  Strong
augmentation is a reduced RandAugment: ``n_ops`` operators sampled from a
small pool covering movement (translate/shear), value remapping
(brightness/contrast/posterize/solarize), followed by cutout, with the
result clamped to the legal value range.

Operators act on (C, H, W) float arrays in [0, 1] and are pure functions
of (image, rng draw); weak and strong paths consume distinct named
streams so reordering one never disturbs the other.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

DEFAULT_STRONG_POOL = (
    "translate_x", "translate_y", "shear_x", "shear_y",
    "brightness", "contrast", "posterize", "solarize",
)
MOVEMENT_MAX_FRACTION = 0.3  # peak shift/shear as a fraction of the extent
VALUE_MAX_DELTA = 0.9        # peak brightness/contrast factor offset


@dataclass(frozen=True)
class ImageAugPolicy:
    crop_pad: int = 4                      # reflect pad before random crop
    flip_prob: float = 0.5
    n_ops: int = 2
    magnitude_range: Tuple[float, float] = (0.0, 1.0)
    pool: Tuple[str, ...] = DEFAULT_STRONG_POOL
    cutout: bool = True
    cutout_fraction: float = 0.5
    fill: Tuple[float, ...] = (0.5,)       # per-channel fill for vacated pixels
    value_range: Tuple[float, float] = (0.0, 1.0)

    @staticmethod
    def for_image(shape, fill=None) -> "ImageAugPolicy":
        """Policy scaled to an image shape: pad 4 at 32x32, proportional below."""
        c, h, w = shape
        pad = max(1, round(min(h, w) / 8))
        if fill is None:
            fill = tuple(0.5 for _ in range(c))
        return ImageAugPolicy(crop_pad=pad, fill=tuple(float(v) for v in fill))


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def weak_aug(img: np.ndarray, rng: np.random.Generator, policy: ImageAugPolicy) -> np.ndarray:
    """Reflect-pad + random crop, then horizontal flip with prob 0.5."""
    c, h, w = img.shape
    pad = policy.crop_pad
    if pad >= min(h, w):
        raise ValueError(f"crop pad {pad} too large for image {h}x{w}")
    if pad > 0:
        padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        dx = int(rng.integers(0, 2 * pad + 1))
        dy = int(rng.integers(0, 2 * pad + 1))
        out = padded[:, dx : dx + h, dy : dy + w].copy()
    else:
        dx = int(rng.integers(0, 1))
        dy = int(rng.integers(0, 1))
        out = img.copy()
    if rng.random() < policy.flip_prob:
        out = hflip(out)
    return out


def cutout(img: np.ndarray, rect, fill) -> np.ndarray:
    """Zero out one rectangle (x, y, h, w) with per-channel fill values."""
    x, y, rh, rw = rect
    out = img.copy()
    for c in range(out.shape[0]):
        out[c, x : x + rh, y : y + rw] = fill[c]
    return out


def _translate_img(img, shift, axis, fill):
    if shift == 0:
        return img
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = fill[c]
    if axis == "x":
        if shift > 0:
            out[:, :, shift:] = img[:, :, :-shift]
        else:
            out[:, :, :shift] = img[:, :, -shift:]
    else:
        if shift > 0:
            out[:, shift:, :] = img[:, :-shift, :]
        else:
            out[:, :shift, :] = img[:, -shift:, :]
    return out


def _shear_img(img, factor, axis, fill):
    c, h, w = img.shape
    n_lines = h if axis == "x" else w
    offsets = [int(round(factor * i)) for i in range(n_lines)]
    if all(o == 0 for o in offsets):
        return img
    out = np.empty_like(img)
    for ci in range(c):
        out[ci] = fill[ci]
    for line, o in enumerate(offsets):
        if axis == "x":
            if o >= 0:
                if o < w:
                    out[:, line, o:] = img[:, line, : w - o]
            else:
                if -o < w:
                    out[:, line, : w + o] = img[:, line, -o:]
        else:
            if o >= 0:
                if o < h:
                    out[:, o:, line] = img[:, : h - o, line]
            else:
                if -o < h:
                    out[:, : h + o, line] = img[:, -o:, line]
    return out


def _apply_strong_op(img, op, magnitude, sign, policy):
    c, h, w = img.shape
    if magnitude == 0.0:
        return img
    if op == "translate_x":
        return _translate_img(img, int(sign) * int(round(magnitude * MOVEMENT_MAX_FRACTION * w)), "x", policy.fill)
    if op == "translate_y":
        return _translate_img(img, int(sign) * int(round(magnitude * MOVEMENT_MAX_FRACTION * h)), "y", policy.fill)
    if op == "shear_x":
        return _shear_img(img, sign * magnitude * MOVEMENT_MAX_FRACTION, "x", policy.fill)
    if op == "shear_y":
        return _shear_img(img, sign * magnitude * MOVEMENT_MAX_FRACTION, "y", policy.fill)
    if op == "brightness":
        return img * (1.0 + sign * magnitude * VALUE_MAX_DELTA)
    if op == "contrast":
        mean = img.mean(axis=(1, 2), keepdims=True)
        return mean + (1.0 + sign * magnitude * VALUE_MAX_DELTA) * (img - mean)
    if op == "posterize":
        levels = max(2, int(round(2 ** (8 - 6 * magnitude))))
        if levels >= 256:
            return img
        lo, hi = policy.value_range
        unit = (img - lo) / (hi - lo)
        return lo + np.round(unit * (levels - 1)) / (levels - 1) * (hi - lo)
    if op == "solarize":
        lo, hi = policy.value_range
        threshold = hi - magnitude * (hi - lo)
        return np.where(img > threshold, hi + lo - img, img)
    raise ValueError(f"unknown strong op {op!r}")


def strong_aug(img: np.ndarray, rng: np.random.Generator, policy: ImageAugPolicy) -> np.ndarray:
    """n_ops pool draws with sampled magnitudes, then cutout, then clamp."""
    c, h, w = img.shape
    if len(policy.fill) != c:
        raise ValueError(f"fill has {len(policy.fill)} channels, image has {c}")
    out = img
    lo_m, hi_m = policy.magnitude_range
    for _ in range(policy.n_ops):
        op = policy.pool[int(rng.integers(len(policy.pool)))]
        magnitude = float(rng.uniform(lo_m, hi_m))
        sign = -1.0 if rng.random() < 0.5 else 1.0
        out = _apply_strong_op(out, op, magnitude, sign, policy)
    if policy.cutout:
        ch = int(policy.cutout_fraction * h)
        cw = int(policy.cutout_fraction * w)
        x = int(rng.integers(0, h - ch + 1))
        y = int(rng.integers(0, w - cw + 1))
        if ch > 0 and cw > 0:
            out = cutout(out, (x, y, ch, cw), policy.fill)
    lo, hi = policy.value_range
    return np.clip(out, lo, hi)
