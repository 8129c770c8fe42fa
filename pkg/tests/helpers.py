"""Small shared oracles for the test suite."""

import numpy as np
import sympy


def chi_square_pvalue(counts) -> float:
    """Upper-tail p-value of Pearson's statistic against a uniform expectation."""
    counts = np.asarray(counts, dtype=float)
    expected = counts.sum() / len(counts)
    stat = float(((counts - expected) ** 2 / expected).sum())
    k = sympy.Rational(len(counts) - 1, 2)
    return float(sympy.uppergamma(k, sympy.Float(stat) / 2) / sympy.gamma(k))


def uniform_bins(values, q: int, bins: int = 16) -> np.ndarray:
    idx = np.array([int(v) * bins // q for v in values])
    return np.bincount(idx, minlength=bins)


def plain_topk(mat: np.ndarray, ids, q: np.ndarray, k: int) -> list[int]:
    s = mat @ q
    order = sorted(range(len(ids)), key=lambda i: (-s[i], ids[i]))
    return [ids[i] for i in order[:k]]


def gap_ok(mat: np.ndarray, q: np.ndarray, k: int, gap: float = 2e-3) -> bool:
    s = np.sort(mat @ q)[::-1]
    return len(s) <= k or s[k - 1] - s[k] > gap
