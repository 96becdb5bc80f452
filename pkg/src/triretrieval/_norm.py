import numpy as np


class DegenerateInputError(ValueError):
    """A zero-norm row reached an operation that normalizes rows."""


def unit_rows(x: np.ndarray, what: str = "row") -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise DegenerateInputError(f"{what} {bad} has zero norm")
    return x / norms[:, None], norms


def unit_rows_backward(u: np.ndarray, norms: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``u = x / |x|`` back to ``x``."""
    radial = np.sum(grad_u * u, axis=1, keepdims=True)
    return (grad_u - u * radial) / norms[:, None]


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
