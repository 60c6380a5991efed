from __future__ import annotations

import numpy as np


def f1_at_threshold(pred, target, threshold: float = 0.5) -> tuple[float, float, float]:
    """Pixelwise (precision, recall, f1) of ``pred >= threshold`` against a binary target.

    A metric whose denominator is empty is reported as 0, and f1 is 0
    whenever precision + recall is 0.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    hit = pred >= threshold
    pos = target > 0.5
    tp = int(np.count_nonzero(hit & pos))
    fp = int(np.count_nonzero(hit & ~pos))
    fn = int(np.count_nonzero(~hit & pos))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1
