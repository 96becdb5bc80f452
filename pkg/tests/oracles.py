"""Reference computations kept independent of the package under test."""

import math

import numpy as np


def central_diff(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def aaml_reference(f, labels, centers, s, m):
    """Per-sample loop straight from the margin-softmax formula."""
    total = 0.0
    for fi, y in zip(f, labels):
        logits = []
        for j, c in enumerate(centers):
            cos = float(np.dot(fi, c) / (np.linalg.norm(fi) * np.linalg.norm(c)))
            theta = math.acos(min(max(cos, -1.0), 1.0))
            logits.append(s * (math.cos(theta + m) if j == y else math.cos(theta)))
        top = max(logits)
        lse = top + math.log(sum(math.exp(v - top) for v in logits))
        total += lse - logits[y]
    return total / len(labels)


def softmax_ce(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        top = max(row)
        total += top + math.log(sum(math.exp(v - top) for v in row)) - row[y]
    return total / len(labels)


def recall_bruteforce(scores, truth_cols, k):
    """Rank every column by (-score, column index) with a full sort."""
    hits = 0
    for row, t in zip(scores, truth_cols):
        ranked = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += t in ranked[:k]
    return hits / len(truth_cols)
