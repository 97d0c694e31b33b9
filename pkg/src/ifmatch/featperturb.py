"""Feature-level perturbation strategies.

Five randomized transforms of intermediate feature maps, grouped the same
way strong image augmentations are: dropout (channel-wise, spatial-wise),
movement (translation, shearing), and value (local smoothing).  Each
strategy is split into two phases:

* :func:`sample_draw` materializes every random choice into a frozen,
  replayable :class:`PerturbDraw`;
* the operator applies a frozen draw to a feature tensor as a pure,
  differentiable linear map.

With the randomness frozen, every operator is a linear function of its
input, so gradients are exact and replays are bit-identical.

Summation-order contract: wherever an operator computes a mean (the fill
value of movement ops, the window mean of smoothing), the sum is a plain
left-to-right fold in row-major order.  The naive re-implementations in
``oracle`` follow the same order, which makes production and reference
outputs agree bit for bit, not merely within tolerance.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import oracle
from .tensor import Tensor, accumulate, make_op

STRATEGIES = ("channel_drop", "spatial_drop", "translate", "shear", "value_smooth")
DIRECTIONS = ("up", "down", "left", "right")

CHANNEL_DROP_P = 0.5        # drop probability per channel
SPATIAL_FRACTION = 0.5      # dropped rectangle is int(0.5*H) x int(0.5*W)
TRANSLATE_ALPHA_MAX = 0.5   # shift length l = int(alpha * extent), alpha ~ U[0, 0.5]
SHEAR_ALPHA_MAX = 1.0       # shear length alpha ~ U[0, 1.0]
SMOOTH_ALPHA_RANGE = (0.50, 0.95)  # blend factor range
SMOOTH_MIN_KERNEL = 3


@dataclass(frozen=True)
class PerturbDraw:
    """A fully sampled perturbation instance; replays bit-exactly."""

    strategy: str
    intensity: str                      # "weak" or "strong"
    feature_shape: Tuple[int, int, int]  # (C, H, W) it was sampled for
    keep_mask: Optional[Tuple[bool, ...]] = None    # channel_drop
    rect: Optional[Tuple[int, int, int, int]] = None  # spatial_drop (x, y, h, w)
    direction: Optional[str] = None     # translate / shear
    length: int = 0                     # translate / shear
    offsets: Optional[Tuple[int, ...]] = None  # shear per-line shifts
    kernel: int = 0                     # value_smooth
    blend: float = 0.0                  # value_smooth


def _eligible(strategy: str, shape) -> bool:
    _, h, w = shape
    if strategy == "value_smooth":
        return min(h, w) >= SMOOTH_MIN_KERNEL
    return True


def sample_draw(strategy_pool, feature_shape, intensity: str, rng: np.random.Generator) -> PerturbDraw:
    """Sample one perturbation uniformly from the eligible pool.

    All randomness is consumed here; applying the returned draw is
    deterministic.
    """
    pool = sorted(strategy_pool)
    if not pool:
        raise ValueError("empty strategy pool")
    for s in pool:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; known: {STRATEGIES}")
    if intensity not in ("weak", "strong"):
        raise ValueError(f"intensity must be 'weak' or 'strong', got {intensity!r}")
    c, h, w = feature_shape
    eligible = [s for s in pool if _eligible(s, feature_shape)]
    if not eligible:
        raise ValueError(
            f"feature shape {tuple(feature_shape)} too small for every pooled strategy {pool}"
        )
    strategy = eligible[int(rng.integers(len(eligible)))]
    shape = (int(c), int(h), int(w))

    if strategy == "channel_drop":
        keep = tuple(bool(v) for v in (rng.random(c) >= CHANNEL_DROP_P))
        return PerturbDraw(strategy, intensity, shape, keep_mask=keep)

    if strategy == "spatial_drop":
        rh, rw = int(SPATIAL_FRACTION * h), int(SPATIAL_FRACTION * w)
        x = int(rng.integers(0, h - rh + 1))
        y = int(rng.integers(0, w - rw + 1))
        return PerturbDraw(strategy, intensity, shape, rect=(x, y, rh, rw))

    if strategy == "translate":
        direction = DIRECTIONS[int(rng.integers(4))]
        alpha = float(rng.uniform(0.0, TRANSLATE_ALPHA_MAX))
        extent = h if direction in ("up", "down") else w
        return PerturbDraw(strategy, intensity, shape, direction=direction,
                           length=int(alpha * extent))

    if strategy == "shear":
        direction = DIRECTIONS[int(rng.integers(4))]
        alpha = float(rng.uniform(0.0, SHEAR_ALPHA_MAX))
        horizontal = direction in ("left", "right")
        length = int(alpha * (w if horizontal else h))
        n_lines = h if horizontal else w
        offsets = tuple(int(v) for v in np.rint(np.linspace(0.0, length, n_lines)))
        return PerturbDraw(strategy, intensity, shape, direction=direction,
                           length=length, offsets=offsets)

    # value_smooth
    kmax = min(h, w)
    kernels = list(range(SMOOTH_MIN_KERNEL, kmax + 1, 2))
    k = kernels[int(rng.integers(len(kernels)))]
    alpha = float(rng.uniform(*SMOOTH_ALPHA_RANGE))
    return PerturbDraw(strategy, intensity, shape, kernel=k, blend=alpha)


def apply(f: Tensor, draw: PerturbDraw) -> Tensor:
    """Apply a frozen draw to an (N, C, H, W) feature tensor."""
    ops = {
        "channel_drop": channel_dropout,
        "spatial_drop": spatial_dropout,
        "translate": translate,
        "shear": shear,
        "value_smooth": value_smooth,
    }
    return ops[draw.strategy](f, draw)


def _check_shape(f: Tensor, draw: PerturbDraw):
    if f.data.ndim != 4:
        raise ValueError(f"feature tensor must be rank 4, got shape {f.shape}")
    if tuple(f.data.shape[1:]) != tuple(draw.feature_shape):
        raise ValueError(
            f"draw sampled for {draw.feature_shape} applied to {tuple(f.data.shape[1:])}"
        )


def channel_dropout(f: Tensor, draw: PerturbDraw) -> Tensor:
    """Zero dropped channels; kept channels scaled by 1/(1-p) = 2."""
    _check_shape(f, draw)
    c = f.data.shape[1]
    if draw.keep_mask is None or len(draw.keep_mask) != c:
        raise ValueError(f"keep mask length {draw.keep_mask} does not match C={c}")
    factors = np.where(np.asarray(draw.keep_mask, dtype=bool), 2.0, 0.0)
    f4 = factors[None, :, None, None]
    data = f.data * f4

    def bw(g):
        accumulate(f, g * f4)

    return make_op(data, (f,), bw)


def spatial_dropout(f: Tensor, draw: PerturbDraw) -> Tensor:
    """Zero one rectangle across all channels; rescale the rest by HW/(HW-hw)."""
    _check_shape(f, draw)
    _, _, h, w = f.data.shape
    x, y, rh, rw = draw.rect
    if not (0 <= x <= h - rh and 0 <= y <= w - rw) or rh < 0 or rw < 0:
        raise ValueError(f"rectangle {draw.rect} out of bounds for {h}x{w}")
    area = rh * rw
    scale = (h * w) / (h * w - area)
    m = np.full((h, w), scale)
    m[x : x + rh, y : y + rw] = 0.0
    m4 = m[None, None, :, :]
    data = f.data * m4

    def bw(g):
        accumulate(f, g * m4)

    return make_op(data, (f,), bw)


def _region_mean(f: np.ndarray, cells):
    """Left-fold mean over explicit (i, j) cells, per (n, c) plane."""
    n, c = f.shape[:2]
    acc = np.zeros((n, c))
    for (i, j) in cells:
        acc = acc + f[:, :, i, j]
    return acc / len(cells)


def translate(f: Tensor, draw: PerturbDraw) -> Tensor:
    """Shift content along one axis; the vacated strip is filled with the
    per-channel mean of the values shifted out of bounds."""
    _check_shape(f, draw)
    n, c, h, w = f.data.shape
    d, l = draw.direction, draw.length
    extent = h if d in ("up", "down") else w
    if not 0 <= l <= extent:
        raise ValueError(f"translate length {l} out of range for extent {extent}")

    if d == "right":
        out_cells = [(i, j) for i in range(h) for j in range(w - l, w)]
    elif d == "left":
        out_cells = [(i, j) for i in range(h) for j in range(l)]
    elif d == "down":
        out_cells = [(i, j) for i in range(h - l, h) for j in range(w)]
    else:
        out_cells = [(i, j) for i in range(l) for j in range(w)]

    data = np.empty_like(f.data)
    if d == "right":
        data[:, :, :, l:] = f.data[:, :, :, : w - l]
    elif d == "left":
        data[:, :, :, : w - l] = f.data[:, :, :, l:]
    elif d == "down":
        data[:, :, l:, :] = f.data[:, :, : h - l, :]
    else:
        data[:, :, : h - l, :] = f.data[:, :, l:, :]
    if out_cells:
        fill = _region_mean(f.data, out_cells)
        if d == "right":
            data[:, :, :, :l] = fill[:, :, None, None]
        elif d == "left":
            data[:, :, :, w - l :] = fill[:, :, None, None]
        elif d == "down":
            data[:, :, :l, :] = fill[:, :, None, None]
        else:
            data[:, :, h - l :, :] = fill[:, :, None, None]

    def bw(g):
        gx = np.zeros_like(f.data)
        if d == "right":
            gx[:, :, :, : w - l] += g[:, :, :, l:]
            vac = g[:, :, :, :l]
        elif d == "left":
            gx[:, :, :, l:] += g[:, :, :, : w - l]
            vac = g[:, :, :, w - l :]
        elif d == "down":
            gx[:, :, : h - l, :] += g[:, :, l:, :]
            vac = g[:, :, :l, :]
        else:
            gx[:, :, l:, :] += g[:, :, : h - l, :]
            vac = g[:, :, h - l :, :]
        if out_cells:
            spread = vac.sum(axis=(2, 3)) / len(out_cells)
            for (i, j) in out_cells:
                gx[:, :, i, j] += spread
        accumulate(f, gx)

    return make_op(data, (f,), bw)


def shear(f: Tensor, draw: PerturbDraw) -> Tensor:
    """Shift each line by its own offset (0..l, linearly interpolated along
    the orthogonal axis); vacated cells take the per-channel mean of all
    shifted-out values."""
    _check_shape(f, draw)
    n, c, h, w = f.data.shape
    d = draw.direction
    horizontal = d in ("left", "right")
    extent = w if horizontal else h
    if not 0 <= draw.length <= extent:
        raise ValueError(f"shear length {draw.length} out of range for extent {extent}")
    offsets = draw.offsets
    n_lines = h if horizontal else w
    if offsets is None or len(offsets) != n_lines:
        raise ValueError(f"shear needs {n_lines} per-line offsets, got {offsets}")

    out_cells = []
    for line in range(n_lines):
        o = offsets[line]
        if horizontal:
            cols = range(w - o, w) if d == "right" else range(o)
            out_cells.extend((line, j) for j in cols)
        else:
            rows = range(h - o, h) if d == "down" else range(o)
            out_cells.extend((i, line) for i in rows)

    data = np.empty_like(f.data)
    fill = _region_mean(f.data, out_cells) if out_cells else None
    for line in range(n_lines):
        o = offsets[line]
        if d == "right":
            data[:, :, line, o:] = f.data[:, :, line, : w - o]
            if o:
                data[:, :, line, :o] = fill[:, :, None]
        elif d == "left":
            data[:, :, line, : w - o] = f.data[:, :, line, o:]
            if o:
                data[:, :, line, w - o :] = fill[:, :, None]
        elif d == "down":
            data[:, :, o:, line] = f.data[:, :, : h - o, line]
            if o:
                data[:, :, :o, line] = fill[:, :, None]
        else:
            data[:, :, : h - o, line] = f.data[:, :, o:, line]
            if o:
                data[:, :, h - o :, line] = fill[:, :, None]

    def bw(g):
        gx = np.zeros_like(f.data)
        vac = np.zeros((n, c))
        for line in range(n_lines):
            o = offsets[line]
            if d == "right":
                gx[:, :, line, : w - o] += g[:, :, line, o:]
                if o:
                    vac += g[:, :, line, :o].sum(axis=2)
            elif d == "left":
                gx[:, :, line, o:] += g[:, :, line, : w - o]
                if o:
                    vac += g[:, :, line, w - o :].sum(axis=2)
            elif d == "down":
                gx[:, :, : h - o, line] += g[:, :, o:, line]
                if o:
                    vac += g[:, :, :o, line].sum(axis=2)
            else:
                gx[:, :, o:, line] += g[:, :, : h - o, line]
                if o:
                    vac += g[:, :, h - o :, line].sum(axis=2)
        if out_cells:
            spread = vac / len(out_cells)
            for (i, j) in out_cells:
                gx[:, :, i, j] += spread
        accumulate(f, gx)

    return make_op(data, (f,), bw)


def value_smooth(f: Tensor, draw: PerturbDraw) -> Tensor:
    """Depthwise box smoothing blended with the input.

    S is the mean over the in-bounds window (renormalized at borders),
    computed in deviation form S = f0 + sum(f - f0)/count around the
    window's first in-bounds cell, and the blend is out = f + alpha*(S - f).
    Both make constant maps exact fixed points.
    """
    _check_shape(f, draw)
    n, c, h, w = f.data.shape
    k, alpha = draw.kernel, draw.blend
    if k % 2 == 0 or not SMOOTH_MIN_KERNEL <= k <= min(h, w):
        raise ValueError(f"kernel {k} must be odd and within [3, {min(h, w)}]")
    r = k // 2

    rows_in = np.minimum(np.arange(h) + r + 1, h) - np.maximum(np.arange(h) - r, 0)
    cols_in = np.minimum(np.arange(w) + r + 1, w) - np.maximum(np.arange(w) - r, 0)
    cnt = (rows_in[:, None] * cols_in[None, :]).astype(np.float64)

    f0 = f.data[:, :, np.maximum(np.arange(h) - r, 0)[:, None],
                np.maximum(np.arange(w) - r, 0)[None, :]]
    acc = np.zeros_like(f.data)
    for di in range(-r, r + 1):
        i0, i1 = max(0, -di), min(h, h - di)
        for dj in range(-r, r + 1):
            j0, j1 = max(0, -dj), min(w, w - dj)
            acc[:, :, i0:i1, j0:j1] += (
                f.data[:, :, i0 + di : i1 + di, j0 + dj : j1 + dj] - f0[:, :, i0:i1, j0:j1]
            )
    smooth = f0 + acc / cnt
    data = f.data + alpha * (smooth - f.data)

    def bw(g):
        # In exact arithmetic S is the plain in-bounds window mean, so the
        # adjoint is a box sum of g/count plus the residual (1-alpha) path.
        t = alpha * g / cnt
        gx = (1.0 - alpha) * g
        for di in range(-r, r + 1):
            i0, i1 = max(0, -di), min(h, h - di)
            for dj in range(-r, r + 1):
                j0, j1 = max(0, -dj), min(w, w - dj)
                gx[:, :, i0 + di : i1 + di, j0 + dj : j1 + dj] += t[:, :, i0:i1, j0:j1]
        accumulate(f, gx)

    return make_op(data, (f,), bw)


def reference(f, draw: PerturbDraw) -> Tensor:
    """Brute-force twin of :func:`apply`; must agree bit for bit."""
    arr = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    if draw.strategy == "channel_drop":
        out = oracle.channel_dropout_reference(arr, draw.keep_mask)
    elif draw.strategy == "spatial_drop":
        out = oracle.spatial_dropout_reference(arr, draw.rect)
    elif draw.strategy == "translate":
        out = oracle.translate_reference(arr, draw.direction, draw.length)
    elif draw.strategy == "shear":
        out = oracle.shear_reference(arr, draw.direction, draw.offsets)
    elif draw.strategy == "value_smooth":
        out = oracle.value_smooth_reference(arr, draw.kernel, draw.blend)
    else:
        raise ValueError(f"unknown strategy {draw.strategy!r}")
    return Tensor(out)
