"""Brute-force reference implementations used as test oracles.

These are deliberately naive (scalar loops, ``math`` only) and share no code
with the package.
"""
import math


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def decode(raw, anchors, classes, threshold):
    """Exhaustive per-cell, per-anchor decoder -> list of (cx, cy, w, h, conf, row, col, anchor)."""
    gh, gw = len(raw), len(raw[0])
    stride = 5 + classes
    found = []
    for r in range(gh):
        for c in range(gw):
            for a, (aw, ah) in enumerate(anchors):
                v = [float(x) for x in raw[r][c][a * stride:(a + 1) * stride]]
                obj = sigmoid(v[4])
                cls = max(sigmoid(x) for x in v[5:])
                conf = obj * cls
                if conf >= threshold:
                    found.append(((c + sigmoid(v[0])) / gw, (r + sigmoid(v[1])) / gh,
                                  aw * math.exp(v[2]) / gw, ah * math.exp(v[3]) / gh,
                                  conf, r, c, a))
    return found


def counts(pred, gt):
    """Double-loop confusion counts (tp, fp, tn, fn)."""
    tp = fp = tn = fn = 0
    for i in range(len(gt)):
        for j in range(len(gt[0])):
            p, g = bool(pred[i][j]), bool(gt[i][j])
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
            else:
                tn += 1
    return tp, fp, tn, fn


def prf(tp, fp, tn, fn):
    """Precision, recall and F with the package's zero-division conventions."""
    if tp + fp == 0:
        p = 1.0 if fn == 0 else 0.0
    else:
        p = tp / (tp + fp)
    if tp + fn == 0:
        r = 1.0 if fp == 0 else 0.0
    else:
        r = tp / (tp + fn)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def overlay_colour_counts(image):
    """Pixels painted exactly green / exactly red."""
    green = red = 0
    for row in image:
        for px in row:
            px = tuple(int(v) for v in px)
            if px == (0, 255, 0):
                green += 1
            elif px == (255, 0, 0):
                red += 1
    return green, red


def mean_std(values):
    n = len(values)
    m = sum(values) / n
    return m, math.sqrt(sum((v - m) ** 2 for v in values) / n)
