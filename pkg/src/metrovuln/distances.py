"""Distances between flow vectors and between discrete distributions."""
import numpy as np

DEFAULT_KL_EPS = 1e-6
_SUM_TOL = 1e-9


class UndefinedDivergence(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def _check_distribution(p, name):
    if (p < 0).any() or not np.isfinite(p).all():
        raise ValueError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > _SUM_TOL:
        raise ValueError(f"{name} does not sum to 1 (sum={p.sum()!r})")


def normalize(counts, eps=0.0):
    """Probability vector from counts, optionally adding ``eps`` to every cell."""
    c = np.asarray(counts, dtype=float) + eps
    total = c.sum()
    if total <= 0:
        raise ValueError("cannot normalise an all-zero vector without smoothing")
    return c / total


def euclidean(r1, r0):
    """Euclidean distance between raw count vectors (no normalisation)."""
    r1, r0 = _pair(r1, r0)
    return float(np.sqrt(np.sum((r1 - r0) ** 2)))


def hellinger(p1, p0):
    """Hellinger distance in [0, 1] between two probability vectors."""
    p1, p0 = _pair(p1, p0)
    _check_distribution(p1, "p1")
    _check_distribution(p0, "p0")
    return float(np.sqrt(np.sum((np.sqrt(p1) - np.sqrt(p0)) ** 2)) / np.sqrt(2.0))


def kl(p1, p0, eps=DEFAULT_KL_EPS):
    """KL divergence ``sum p1 * ln(p1 / p0)`` in nats.

    With ``eps > 0`` both inputs are smoothed (``eps`` added to every cell)
    and renormalised first.  With ``eps == 0`` a cell where ``p0`` is zero
    but ``p1`` is not raises :class:`UndefinedDivergence`.
    """
    p1, p0 = _pair(p1, p0)
    _check_distribution(p1, "p1")
    _check_distribution(p0, "p0")
    if eps > 0:
        p1 = normalize(p1, eps)
        p0 = normalize(p0, eps)
    support = p1 > 0
    if (p0[support] == 0).any():
        raise UndefinedDivergence("undefined divergence: p0 is zero where p1 is positive")
    # Gibbs' inequality; clamp float round-off just below zero
    return max(0.0, float(np.sum(p1[support] * np.log(p1[support] / p0[support]))))
