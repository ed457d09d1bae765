"""Per-pixel and per-cell inner loops used by evaluation, preprocessing and decoding.

Every kernel has two implementations with identical results: an explicit-loop
version compiled with numba and a vectorized numpy version. The public name
dispatches on :data:`scleraseg._accel.USE_NUMBA`; both variants stay importable
so they can be compared directly.
"""
from __future__ import annotations

import math

import numpy as np

from . import _accel
from ._accel import njit

FP_COLOR = (0, 255, 0)
FN_COLOR = (255, 0, 0)

# decoded row layout: cx, cy, w, h, confidence, objectness, class_score, row, col, anchor
DECODE_FIELDS = 10


# --------------------------------------------------------------------------
# confusion counts

@njit
def _pixel_counts_loop(pred, gt):
    tp = 0
    fp = 0
    tn = 0
    fn = 0
    h, w = pred.shape
    for i in range(h):
        for j in range(w):
            p = pred[i, j]
            g = gt[i, j]
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
            else:
                tn += 1
    return tp, fp, tn, fn


def pixel_counts_numba(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    tp, fp, tn, fn = _pixel_counts_loop(np.ascontiguousarray(pred, dtype=np.bool_),
                                        np.ascontiguousarray(gt, dtype=np.bool_))
    return int(tp), int(fp), int(tn), int(fn)


def pixel_counts_numpy(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = pred.size - tp - fp - fn
    return tp, fp, int(tn), fn


def pixel_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    if _accel.USE_NUMBA:
        return pixel_counts_numba(pred, gt)
    return pixel_counts_numpy(pred, gt)


# --------------------------------------------------------------------------
# FP/FN overlay

@njit
def _overlay_loop(base, pred, gt, out):
    h, w = pred.shape
    for i in range(h):
        for j in range(w):
            p = pred[i, j]
            g = gt[i, j]
            if p and not g:
                out[i, j, 0] = 0
                out[i, j, 1] = 255
                out[i, j, 2] = 0
            elif g and not p:
                out[i, j, 0] = 255
                out[i, j, 1] = 0
                out[i, j, 2] = 0
            else:
                out[i, j, 0] = base[i, j, 0]
                out[i, j, 1] = base[i, j, 1]
                out[i, j, 2] = base[i, j, 2]


def overlay_numba(base: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    base = np.ascontiguousarray(base, dtype=np.uint8)
    out = np.empty_like(base)
    _overlay_loop(base, np.ascontiguousarray(pred, dtype=np.bool_),
                  np.ascontiguousarray(gt, dtype=np.bool_), out)
    return out


def overlay_numpy(base: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    out = np.array(base, dtype=np.uint8, copy=True)
    out[pred & ~gt] = FP_COLOR
    out[gt & ~pred] = FN_COLOR
    return out


def overlay(base: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if _accel.USE_NUMBA:
        return overlay_numba(base, pred, gt)
    return overlay_numpy(base, pred, gt)


# --------------------------------------------------------------------------
# nearest-neighbour resampling of 2-D masks

@njit
def _resize_nearest_loop(src, out):
    in_h, in_w = src.shape
    out_h, out_w = out.shape
    for i in range(out_h):
        si = min(int((i + 0.5) * in_h / out_h), in_h - 1)
        for j in range(out_w):
            sj = min(int((j + 0.5) * in_w / out_w), in_w - 1)
            out[i, j] = src[si, sj]


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    idx = ((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def resize_nearest_numba(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    src = np.ascontiguousarray(src)
    out = np.empty((out_h, out_w), dtype=src.dtype)
    _resize_nearest_loop(src, out)
    return out


def resize_nearest_numpy(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    src = np.asarray(src)
    rows = _nearest_index(out_h, src.shape[0])
    cols = _nearest_index(out_w, src.shape[1])
    return src[rows[:, None], cols[None, :]]


def resize_nearest(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D array; pixel centres are aligned."""
    if src.shape[0] == out_h and src.shape[1] == out_w:
        return np.array(src, copy=True)
    if _accel.USE_NUMBA:
        return resize_nearest_numba(src, out_h, out_w)
    return resize_nearest_numpy(src, out_h, out_w)


# --------------------------------------------------------------------------
# YOLO grid decoding

@njit
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit
def _decode_loop(raw, anchors, n_classes, threshold, out):
    gh, gw, _ = raw.shape
    n_anchors = anchors.shape[0]
    stride = 5 + n_classes
    n = 0
    for r in range(gh):
        for c in range(gw):
            for a in range(n_anchors):
                base = a * stride
                obj = _sigmoid(raw[r, c, base + 4])
                best = 0.0
                for k in range(n_classes):
                    s = _sigmoid(raw[r, c, base + 5 + k])
                    if s > best:
                        best = s
                conf = obj * best
                if conf >= threshold:
                    out[n, 0] = (c + _sigmoid(raw[r, c, base + 0])) / gw
                    out[n, 1] = (r + _sigmoid(raw[r, c, base + 1])) / gh
                    out[n, 2] = anchors[a, 0] * math.exp(raw[r, c, base + 2]) / gw
                    out[n, 3] = anchors[a, 1] * math.exp(raw[r, c, base + 3]) / gh
                    out[n, 4] = conf
                    out[n, 5] = obj
                    out[n, 6] = best
                    out[n, 7] = r
                    out[n, 8] = c
                    out[n, 9] = a
                    n += 1
    return n


def decode_grid_numba(raw: np.ndarray, anchors: np.ndarray, n_classes: int,
                      threshold: float) -> np.ndarray:
    raw = np.ascontiguousarray(raw, dtype=np.float64)
    anchors = np.ascontiguousarray(anchors, dtype=np.float64)
    out = np.empty((raw.shape[0] * raw.shape[1] * anchors.shape[0], DECODE_FIELDS))
    n = _decode_loop(raw, anchors, n_classes, float(threshold), out)
    return out[:n].copy()


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def decode_grid_numpy(raw: np.ndarray, anchors: np.ndarray, n_classes: int,
                      threshold: float) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    gh, gw, _ = raw.shape
    n_anchors = anchors.shape[0]
    t = raw.reshape(gh, gw, n_anchors, 5 + n_classes)
    obj = _np_sigmoid(t[..., 4])
    cls = _np_sigmoid(t[..., 5:]).max(axis=-1)
    conf = obj * cls
    rows, cols, anc = np.nonzero(conf >= threshold)  # C order: row, col, anchor
    sel = t[rows, cols, anc]
    out = np.empty((rows.size, DECODE_FIELDS))
    out[:, 0] = (cols + _np_sigmoid(sel[:, 0])) / gw
    out[:, 1] = (rows + _np_sigmoid(sel[:, 1])) / gh
    out[:, 2] = anchors[anc, 0] * np.exp(sel[:, 2]) / gw
    out[:, 3] = anchors[anc, 1] * np.exp(sel[:, 3]) / gh
    out[:, 4] = conf[rows, cols, anc]
    out[:, 5] = obj[rows, cols, anc]
    out[:, 6] = cls[rows, cols, anc]
    out[:, 7] = rows
    out[:, 8] = cols
    out[:, 9] = anc
    return out


def decode_grid(raw: np.ndarray, anchors: np.ndarray, n_classes: int,
                threshold: float) -> np.ndarray:
    """Decode a ``(grid_h, grid_w, anchors * (5 + classes))`` head into box rows.

    Rows come out in row-major cell order, then anchor index, and carry the
    fields listed in ``DECODE_FIELDS``.
    """
    if _accel.USE_NUMBA:
        return decode_grid_numba(raw, anchors, n_classes, threshold)
    return decode_grid_numpy(raw, anchors, n_classes, threshold)
