"""Slow, obviously-correct reference implementations.

Every function here mirrors one production operation with the most naive
formulation available: nested Python loops, exhaustive enumeration, or
direct definitions.  They are used as ground truth in tests and must not
call into any production module.

All reference operators accumulate strictly in row-major order with a
plain left-to-right fold, which is the documented summation order of the
production operators; with both sides computing the identical sequence of
IEEE-754 operations the results agree bit for bit.

Inputs are size-guarded: these run in test profile on desk-scale shapes
only.
"""

import numpy as np

MAX_FEATURE_SHAPE = (4, 8, 16, 16)
MAX_MASK_CHANNELS = 8


class OracleSizeError(ValueError):
    """Input exceeds the exhaustive-work size guard."""


def _guard(shape):
    if len(shape) != 4:
        raise OracleSizeError(f"expected rank-4 shape, got {shape}")
    for got, cap in zip(shape, MAX_FEATURE_SHAPE):
        if got > cap:
            raise OracleSizeError(f"shape {shape} exceeds guard {MAX_FEATURE_SHAPE}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d_reference(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Quadruple-loop cross-correlation with zero padding."""
    n, c, h, wd = x.shape
    f, cin, k, k2 = w.shape
    assert cin == c and k == k2
    if n * c * h * wd > 4 * 8 * 32 * 32:
        raise OracleSizeError(f"input {x.shape} too large for the loop oracle")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                ii = oi * stride + ki - pad
                                jj = oj * stride + kj - pad
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[ni, ci, ii, jj] * w[fi, ci, ki, kj]
                    out[ni, fi, oi, oj] = acc
    return out


# ---------------------------------------------------------------------------
# feature perturbations
# ---------------------------------------------------------------------------


def channel_dropout_reference(f: np.ndarray, keep_mask) -> np.ndarray:
    _guard(f.shape)
    n, c, h, w = f.shape
    out = np.zeros_like(f)
    for ni in range(n):
        for ci in range(c):
            factor = 2.0 if keep_mask[ci] else 0.0
            for i in range(h):
                for j in range(w):
                    out[ni, ci, i, j] = f[ni, ci, i, j] * factor
    return out


def spatial_dropout_reference(f: np.ndarray, rect) -> np.ndarray:
    _guard(f.shape)
    n, c, h, w = f.shape
    x, y, rh, rw = rect
    area = rh * rw
    scale = (h * w) / (h * w - area)
    out = np.zeros_like(f)
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    if x <= i < x + rh and y <= j < y + rw:
                        out[ni, ci, i, j] = 0.0
                    else:
                        out[ni, ci, i, j] = f[ni, ci, i, j] * scale
    return out


def translate_reference(f: np.ndarray, direction: str, length: int) -> np.ndarray:
    """Index-loop translation; vacated strip takes the per-(n,c) mean of the
    shifted-out region, accumulated row-major."""
    _guard(f.shape)
    n, c, h, w = f.shape
    l = length
    out = np.empty_like(f)
    vals = f.tolist()
    for ni in range(n):
        for ci in range(c):
            plane = vals[ni][ci]
            if direction == "right":
                src = [(i, j) for i in range(h) for j in range(w - l, w)]
            elif direction == "left":
                src = [(i, j) for i in range(h) for j in range(l)]
            elif direction == "down":
                src = [(i, j) for i in range(h - l, h) for j in range(w)]
            elif direction == "up":
                src = [(i, j) for i in range(l) for j in range(w)]
            else:
                raise ValueError(f"unknown direction {direction!r}")
            fill = 0.0
            if src:
                s = 0.0
                for (i, j) in src:
                    s += plane[i][j]
                fill = s / len(src)
            for i in range(h):
                for j in range(w):
                    if direction == "right":
                        out[ni, ci, i, j] = plane[i][j - l] if j >= l else fill
                    elif direction == "left":
                        out[ni, ci, i, j] = plane[i][j + l] if j < w - l else fill
                    elif direction == "down":
                        out[ni, ci, i, j] = plane[i - l][j] if i >= l else fill
                    else:
                        out[ni, ci, i, j] = plane[i + l][j] if i < h - l else fill
    return out


def shear_reference(f: np.ndarray, direction: str, offsets) -> np.ndarray:
    """Per-line shifts; vacated cells take the per-(n,c) mean of everything
    shifted out, lines ascending then in-line positions ascending."""
    _guard(f.shape)
    n, c, h, w = f.shape
    horizontal = direction in ("left", "right")
    n_lines = h if horizontal else w
    assert len(offsets) == n_lines
    out = np.empty_like(f)
    vals = f.tolist()
    for ni in range(n):
        for ci in range(c):
            plane = vals[ni][ci]
            s = 0.0
            cnt = 0
            for line in range(n_lines):
                o = offsets[line]
                if horizontal:
                    rng = range(w - o, w) if direction == "right" else range(o)
                    for j in rng:
                        s += plane[line][j]
                        cnt += 1
                else:
                    rng = range(h - o, h) if direction == "down" else range(o)
                    for i in rng:
                        s += plane[i][line]
                        cnt += 1
            fill = s / cnt if cnt else 0.0
            for i in range(h):
                for j in range(w):
                    if horizontal:
                        o = offsets[i]
                        if direction == "right":
                            out[ni, ci, i, j] = plane[i][j - o] if j >= o else fill
                        else:
                            out[ni, ci, i, j] = plane[i][j + o] if j < w - o else fill
                    else:
                        o = offsets[j]
                        if direction == "down":
                            out[ni, ci, i, j] = plane[i - o][j] if i >= o else fill
                        else:
                            out[ni, ci, i, j] = plane[i + o][j] if i < h - o else fill
    return out


def value_smooth_reference(f: np.ndarray, k: int, alpha: float) -> np.ndarray:
    """Windowed-mean smoothing blended with the input.

    The in-bounds window mean is computed in deviation form around the
    window's first in-bounds cell, S = f0 + sum(f - f0)/count, and blended
    as out = f + alpha*(S - f); both choices make constant maps exact
    fixed points and are shared with the production operator.
    """
    _guard(f.shape)
    n, c, h, w = f.shape
    r = k // 2
    out = np.empty_like(f)
    vals = f.tolist()
    for ni in range(n):
        for ci in range(c):
            plane = vals[ni][ci]
            for i in range(h):
                for j in range(w):
                    f0 = plane[max(0, i - r)][max(0, j - r)]
                    acc = 0.0
                    cnt = 0
                    for di in range(-r, r + 1):
                        for dj in range(-r, r + 1):
                            ii, jj = i + di, j + dj
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += plane[ii][jj] - f0
                                cnt += 1
                    smooth = f0 + acc / cnt
                    out[ni, ci, i, j] = plane[i][j] + alpha * (smooth - plane[i][j])
    return out


# ---------------------------------------------------------------------------
# enumeration / histogram oracles
# ---------------------------------------------------------------------------


def enumerate_channel_masks(c: int):
    """All 2^C boolean keep-masks, for expectation checks."""
    if c > MAX_MASK_CHANNELS:
        raise OracleSizeError(f"mask enumeration capped at C={MAX_MASK_CHANNELS}, got {c}")
    masks = []
    for bits in range(1 << c):
        masks.append(tuple(bool((bits >> i) & 1) for i in range(c)))
    return masks


def otsu_reference(values, bins: int = 256) -> float:
    """Exhaustive maximization of between-class variance over bin splits.

    Classic grey-level formulation: class means are taken over bin
    indices, so the whole maximization runs in exact integer arithmetic
    (w0*w1*(mu0-mu1)^2 ranks splits identically to the cross-multiplied
    integer quantity used here; ties keep the first maximizing split).
    Returns the left edge of the first foreground bin, or +inf when the
    histogram is degenerate (all values equal).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty value list")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return float("inf")
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    counts = [int(v) for v in hist]
    total = sum(counts)
    total_weighted = sum(i * counts[i] for i in range(bins))
    best_num = -1
    best_den = 1
    best_split = None
    for split in range(1, bins):
        s0 = sum(counts[:split])
        s1 = total - s0
        if s0 == 0 or s1 == 0:
            continue
        w0sum = sum(i * counts[i] for i in range(split))
        w1sum = total_weighted - w0sum
        num = (w0sum * s1 - w1sum * s0) ** 2
        den = s0 * s1
        # compare num/den > best_num/best_den exactly
        if num * best_den > best_num * den:
            best_num, best_den = num, den
            best_split = split
    if best_split is None:
        return float("inf")
    return float(edges[best_split])


def finite_difference_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued ``fn`` at ``x``."""
    if x.size > 4 * 8 * 16 * 16:
        raise OracleSizeError(f"finite differencing capped, got {x.size} elements")
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
