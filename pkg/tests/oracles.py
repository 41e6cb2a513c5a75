"""Slow, independent reference implementations used by the metric tests."""
import math

import numpy as np


def pixels_in_boxes(boxes, shape):
    H, W = shape
    inside = set()
    for b in boxes:
        for i in range(H):
            for j in range(W):
                if b.x_min <= j + 0.5 < b.x_max and b.y_min <= i + 0.5 < b.y_max:
                    inside.add((i, j))
    return inside


def cnr_two_pass(values, inside):
    H, W = values.shape
    a = [values[i, j] for i in range(H) for j in range(W) if (i, j) in inside]
    b = [values[i, j] for i in range(H) for j in range(W) if (i, j) not in inside]
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    va = sum((x - ma) ** 2 for x in a) / len(a)
    vb = sum((x - mb) ** 2 for x in b) / len(b)
    return (ma - mb) / math.sqrt(va + vb)


def iou_sets(values, inside, threshold):
    H, W = values.shape
    on = {(i, j) for i in range(H) for j in range(W) if values[i, j] >= threshold}
    union = on | inside
    return len(on & inside) / len(union) if union else 0.0


def otsu_exhaustive(values):
    """Try every bin boundary k/256 directly on the pixels' bin-center levels."""
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0, 1)
    bins = np.minimum(np.floor(v * 256).astype(int), 255)
    levels = (bins + 0.5) / 256
    best_k, best = None, -1.0
    for k in range(1, 256):
        low, high = levels[bins < k], levels[bins >= k]
        if low.size == 0 or high.size == 0:
            continue
        w0, w1 = low.size / v.size, high.size / v.size
        between = w0 * w1 * (low.mean() - high.mean()) ** 2
        if between > best * (1 + 1e-12) + 1e-300:
            best_k, best = k, between
    return best_k / 256
