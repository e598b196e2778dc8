"""Wigner small-d rotation matrices by three-term recursion in j.

Convention: ``d[j][i, i'] = <j, m_i | exp(-i beta J_y) | j, m_i'>`` with the
magnetic index ascending, ``m_i = -j + i``. The recursion seeds each block's
boundary rows/columns from closed binomial forms evaluated in log space, then
fills the interior from the two previous j blocks, so no factorial is ever
formed explicitly. Every block is verified against ``d d^T = 1``.
"""
from __future__ import annotations

import numpy as np
from scipy.special import gammaln

ORTHOGONALITY_TOL = 1e-10


class WignerRecursionError(RuntimeError):
    """Raised when a recursed block fails the orthogonality self-check."""


def _signed_power(base: float, exponents: np.ndarray) -> np.ndarray:
    """base**k for integer-valued float exponents k >= 0, any sign of base."""
    exponents = np.asarray(exponents, dtype=float)
    parity = np.round(exponents).astype(int) % 2
    if base == 0.0:
        return np.where(exponents == 0, 1.0, 0.0)
    mag = np.exp(exponents * np.log(abs(base)))
    if base < 0.0:
        return mag * np.where(parity == 1, -1.0, 1.0)
    return mag


def _sqrt_binom(n: float, k: np.ndarray) -> np.ndarray:
    """sqrt(C(n, k)) via log-gamma; n, k integer-valued floats."""
    return np.exp(0.5 * (gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)))


def _seed_edges(d: np.ndarray, j: float, cos_half: float, sin_half: float) -> None:
    """Fill the |m| = j or |m'| = j boundary of a (2j+1)-dim block in place."""
    m = -j + np.arange(d.shape[0], dtype=float)
    # row m = +j and row m = -j
    d[-1, :] = _sqrt_binom(2 * j, j - m) * _signed_power(cos_half, j + m) * _signed_power(-sin_half, j - m)
    d[0, :] = _sqrt_binom(2 * j, j - m) * _signed_power(cos_half, j - m) * _signed_power(sin_half, j + m)
    # column m' = +j and column m' = -j
    d[:, -1] = _sqrt_binom(2 * j, j - m) * _signed_power(cos_half, j + m) * _signed_power(sin_half, j - m)
    d[:, 0] = _sqrt_binom(2 * j, j + m) * _signed_power(cos_half, j - m) * _signed_power(-sin_half, j + m)


def wigner_d_blocks(j_max: float, beta: float) -> dict[float, np.ndarray]:
    """All d^j(beta) for j in {j_max, j_max-1, ..., 1/2 or 0}.

    Returns a dict keyed by j. Each block is checked for orthogonality to
    ORTHOGONALITY_TOL; failure raises WignerRecursionError.
    """
    j_min = j_max - int(j_max)  # 0.0 or 0.5
    cos_half = np.cos(beta / 2.0)
    sin_half = np.sin(beta / 2.0)
    cos_beta = np.cos(beta)

    blocks: dict[float, np.ndarray] = {}
    d_prev2: np.ndarray | None = None  # j - 2, unpadded
    d_prev: np.ndarray | None = None  # j - 1, unpadded

    j = j_min
    while j <= j_max + 1e-9:
        dim = int(round(2 * j)) + 1
        d = np.zeros((dim, dim))
        if dim == 1:
            d[0, 0] = 1.0
        elif dim == 3:
            # j = 1: the recursion prefactor (j - 1) vanishes, so the lone
            # interior element comes from the closed form.
            d[1, 1] = cos_beta
            _seed_edges(d, j, cos_half, sin_half)
        else:
            if d_prev is not None and dim > 2:
                # interior entries: |m|, |m'| <= j - 1
                m = -j + 1.0 + np.arange(dim - 2, dtype=float)
                mm = np.multiply.outer(m, m)
                num = np.sqrt(np.multiply.outer(j * j - m * m, j * j - m * m))
                a = (2.0 * j - 1.0) * ((j - 1.0) * j * cos_beta - mm)
                b = j * np.sqrt(
                    np.multiply.outer((j - 1.0) ** 2 - m * m, (j - 1.0) ** 2 - m * m)
                )
                prev = d_prev  # spans m in [-(j-1), j-1]: exactly the interior grid
                if d_prev2 is not None and d_prev2.shape[0] > 0:
                    prev2 = np.zeros_like(prev)
                    prev2[1:-1, 1:-1] = d_prev2
                else:
                    prev2 = np.zeros_like(prev)
                d[1:-1, 1:-1] = (a * prev - b * prev2) / ((j - 1.0) * num)
            _seed_edges(d, j, cos_half, sin_half)
        err = np.max(np.abs(d @ d.T - np.eye(dim)))
        if err > ORTHOGONALITY_TOL:
            raise WignerRecursionError(
                f"d^{j}({beta}) failed orthogonality self-check: max deviation {err:.3e}"
            )
        blocks[j] = d
        d_prev2, d_prev = d_prev, d
        j += 1.0
    return blocks


def wigner_d(j: float, beta: float) -> np.ndarray:
    """Single d^j(beta) block, ascending-m convention."""
    return wigner_d_blocks(j, beta)[j]
