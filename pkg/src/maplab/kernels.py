"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``MAPLAB_DISABLE_NUMBA`` is unset or ``0``. Both paths are always
importable by name (``*_numba`` is ``None`` when numba is off) so tests and
the benchmark can compare them directly.
"""
import math
import os
import warnings

import numpy as np

__all__ = [
    "USE_NUMBA",
    "crop_resize",
    "crop_resize_numpy",
    "crop_resize_numba",
    "lowess_sorted",
    "lowess_sorted_numpy",
    "lowess_sorted_numba",
]


def _numba_requested():
    flag = os.environ.get("MAPLAB_DISABLE_NUMBA", "0").strip().lower()
    return flag in ("", "0", "false", "no")


try:
    if not _numba_requested():
        raise ImportError("disabled by MAPLAB_DISABLE_NUMBA")
    from numba import njit
except ImportError as exc:  # pragma: no cover - depends on environment
    njit = None
    if _numba_requested():
        warnings.warn(f"numba is not available, using numpy kernels: {exc}")

USE_NUMBA = njit is not None


# --------------------------------------------------------------------------
# crop + bilinear resize
#
# boxes[b] = (top, left, height, width) in source pixels. Sampling uses
# half-pixel centres, so a full-image box at the source size is an exact copy.


def _axis_coords(start, length, out_len):
    scale = length / out_len
    src = (np.arange(out_len) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, length - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, length - 1)
    frac = src - i0
    return i0 + start, i1 + start, frac


def crop_resize_numpy(images, boxes, out_h, out_w):
    images = np.asarray(images)
    n, _, _, c = images.shape
    out = np.empty((n, out_h, out_w, c), dtype=images.dtype)
    for b in range(n):
        top, left, h, w = (int(v) for v in boxes[b])
        y0, y1, fy = _axis_coords(top, h, out_h)
        x0, x1, fx = _axis_coords(left, w, out_w)
        img = images[b]
        fy = fy[:, None, None]
        fx = fx[None, :, None]
        top_row = img[y0][:, x0] * (1.0 - fx) + img[y0][:, x1] * fx
        bot_row = img[y1][:, x0] * (1.0 - fx) + img[y1][:, x1] * fx
        out[b] = top_row * (1.0 - fy) + bot_row * fy
    return out


def _crop_resize_loops(images, boxes, out_h, out_w):
    n = images.shape[0]
    c = images.shape[3]
    out = np.empty((n, out_h, out_w, c), dtype=images.dtype)
    for b in range(n):
        top = boxes[b, 0]
        left = boxes[b, 1]
        h = boxes[b, 2]
        w = boxes[b, 3]
        sy = h / out_h
        sx = w / out_w
        for y in range(out_h):
            fy = (y + 0.5) * sy - 0.5
            fy = min(max(fy, 0.0), h - 1.0)
            y0 = int(math.floor(fy))
            y1 = min(y0 + 1, h - 1)
            wy = fy - y0
            for x in range(out_w):
                fx = (x + 0.5) * sx - 0.5
                fx = min(max(fx, 0.0), w - 1.0)
                x0 = int(math.floor(fx))
                x1 = min(x0 + 1, w - 1)
                wx = fx - x0
                for ch in range(c):
                    a = images[b, top + y0, left + x0, ch] * (1.0 - wx) + images[b, top + y0, left + x1, ch] * wx
                    d = images[b, top + y1, left + x0, ch] * (1.0 - wx) + images[b, top + y1, left + x1, ch] * wx
                    out[b, y, x, ch] = a * (1.0 - wy) + d * wy
    return out


# --------------------------------------------------------------------------
# LOWESS on sorted x, one pass, tricube weights, k nearest neighbours.
#
# The neighbourhood of x[i] is the contiguous window [lo, lo + k) with the
# smallest lo such that x[lo] + x[lo + k] >= 2 x[i]; both paths use this same
# comparison so they pick identical windows under ties.


def _window_starts(x, k):
    n = x.shape[0]
    if k >= n:
        return np.zeros(n, dtype=np.int64)
    pair_sums = x[: n - k] + x[k:]
    return np.searchsorted(pair_sums, 2.0 * x, side="left").astype(np.int64)


def lowess_sorted_numpy(x, y, k, chunk=2048):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    k = min(k, n)
    lo = _window_starts(x, k)
    out = np.empty(n)
    offsets = np.arange(k)
    for start in range(0, n, chunk):
        rows = slice(start, min(start + chunk, n))
        idx = lo[rows, None] + offsets[None, :]
        xi = x[rows, None]
        dx = x[idx] - xi
        yy = y[idx]
        bw = np.maximum(xi[:, 0] - x[lo[rows]], x[lo[rows] + k - 1] - xi[:, 0])[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(bw > 0, np.abs(dx) / bw, 0.0)
        w = np.where(u < 1.0, (1.0 - u**3) ** 3, 0.0)
        sw = w.sum(axis=1)
        mx = (w * dx).sum(axis=1) / sw
        my = (w * yy).sum(axis=1) / sw
        vxx = (w * dx * dx).sum(axis=1) / sw - mx * mx
        cxy = (w * dx * yy).sum(axis=1) / sw - mx * my
        bwf = bw[:, 0]
        ok = vxx > 1e-12 * bwf * bwf
        slope = np.where(ok, cxy / np.where(ok, vxx, 1.0), 0.0)
        out[rows] = my - slope * mx
    return out


def _lowess_loops(x, y, k):
    n = x.shape[0]
    if k > n:
        k = n
    out = np.empty(n)
    lo = 0
    for i in range(n):
        xi = x[i]
        while lo + k < n and x[lo] + x[lo + k] < 2.0 * xi:
            lo += 1
        hi = lo + k
        bw = max(xi - x[lo], x[hi - 1] - xi)
        sw = 0.0
        swx = 0.0
        swy = 0.0
        swxx = 0.0
        swxy = 0.0
        for j in range(lo, hi):
            dx = x[j] - xi
            if bw > 0.0:
                u = abs(dx) / bw
            else:
                u = 0.0
            if u < 1.0:
                w = (1.0 - u * u * u) ** 3
            else:
                w = 0.0
            sw += w
            swx += w * dx
            swy += w * y[j]
            swxx += w * dx * dx
            swxy += w * dx * y[j]
        mx = swx / sw
        my = swy / sw
        vxx = swxx / sw - mx * mx
        if vxx > 1e-12 * bw * bw:
            slope = (swxy / sw - mx * my) / vxx
        else:
            slope = 0.0
        out[i] = my - slope * mx
    return out


if USE_NUMBA:
    _crop_resize_nb = njit(cache=True)(_crop_resize_loops)
    _lowess_nb = njit(cache=True)(_lowess_loops)

    def crop_resize_numba(images, boxes, out_h, out_w):
        return _crop_resize_nb(
            np.ascontiguousarray(images),
            np.ascontiguousarray(boxes, dtype=np.int64),
            int(out_h),
            int(out_w),
        )

    def lowess_sorted_numba(x, y, k):
        return _lowess_nb(
            np.ascontiguousarray(x, dtype=np.float64),
            np.ascontiguousarray(y, dtype=np.float64),
            int(k),
        )

    crop_resize = crop_resize_numba
    lowess_sorted = lowess_sorted_numba
else:
    crop_resize_numba = None
    lowess_sorted_numba = None
    crop_resize = crop_resize_numpy
    lowess_sorted = lowess_sorted_numpy
