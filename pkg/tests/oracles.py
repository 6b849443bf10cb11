"""Brute-force reference implementations shared by the unit and acceptance tests."""
import numpy as np


def ap_threshold_sweep(scores, labels):
    """AP from precision/recall evaluated at every distinct score threshold.

    Sweeps thresholds from high to low; each step adds precision times the
    recall gained. Equal to the ranked definition when scores are distinct.
    """
    scores = [float(s) for s in scores]
    labels = [bool(y) for y in labels]
    npos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        picked = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(picked)
        recall = tp / npos
        ap += (tp / len(picked)) * (recall - prev_recall)
        prev_recall = recall
    return ap


def iou_pixels(a, b):
    """IoU of integer-coordinate boxes by counting unit pixels."""
    lo = int(min(a[0], b[0], a[1], b[1]))
    hi = int(max(a[2], b[2], a[3], b[3]))
    inter = union = 0
    for x in range(lo, hi):
        for y in range(lo, hi):
            ina = a[0] <= x < a[2] and a[1] <= y < a[3]
            inb = b[0] <= x < b[2] and b[1] <= y < b[3]
            inter += ina and inb
            union += ina or inb
    return inter / union


def topk_sort_oracle(scores, k):
    """Indices of the top min(k, N) scores: a full sort keyed on (-score, index)."""
    return [i for _, i in sorted((-s, i) for i, s in enumerate(scores))][:k]


def elementwise_max(maps):
    out = np.array(maps[0], copy=True)
    for m in maps[1:]:
        for idx in np.ndindex(out.shape):
            if m[idx] > out[idx]:
                out[idx] = m[idx]
    return out


def subwindow_max(fm, y0, x0, y1, x1, out_h, out_w):
    """RoI max pooling by explicit sub-window enumeration on map-cell coordinates."""
    c = fm.shape[0]
    out = np.zeros((c, out_h, out_w))
    h, w = y1 - y0, x1 - x0
    for i in range(out_h):
        for j in range(out_w):
            r0, r1 = y0 + (i * h) // out_h, y0 + -(-((i + 1) * h) // out_h)
            c0, c1 = x0 + (j * w) // out_w, x0 + -(-((j + 1) * w) // out_w)
            for ch in range(c):
                out[ch, i, j] = max(fm[ch, r, s] for r in range(r0, r1) for s in range(c0, c1))
    return out
