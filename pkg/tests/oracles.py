"""Brute-force reference implementations shared by the test modules."""

from collections import deque

import numpy as np


def flood_largest(mask):
    """Largest 8-connected blob by breadth-first flood fill."""
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    best = 0
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            size, queue = 0, deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                size += 1
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            queue.append((yy, xx))
            best = max(best, size)
    return best


def loop_iou(p, g):
    inter = union = 0
    for a, b in zip(p.ravel(), g.ravel()):
        inter += bool(a) and bool(b)
        union += bool(a) or bool(b)
    return 1.0 if union == 0 else inter / union


def loop_var(vals):
    m = sum(vals) / len(vals)
    return sum((v - m) ** 2 for v in vals) / (len(vals) - 1)


def loop_prf(preds, gts):
    tp = fp = fn = 0
    for p, g in zip(preds, gts):
        for a, b in zip(np.ravel(p), np.ravel(g)):
            tp += bool(a) and bool(b)
            fp += bool(a) and not b
            fn += bool(b) and not a
    return tp, fp, fn
