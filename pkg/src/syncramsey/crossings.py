"""Zero-crossing extraction shared by the protocol and trajectory modules."""
from __future__ import annotations

import numpy as np


def find_zero_crossings(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Linearly interpolated times where the signal changes sign, ascending.

    Sign changes are located between consecutive nonzero samples; exact-zero
    samples flanked by opposite signs count once, at their own time. Zeros at
    the boundary without a sign flip across them are not crossings.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.ndim != 1:
        raise ValueError("times and values must be matching 1d arrays")
    nz = np.flatnonzero(v != 0.0)
    if nz.size < 2:
        return np.empty(0)
    out = []
    for a, b in zip(nz[:-1], nz[1:]):
        if np.sign(v[a]) == np.sign(v[b]):
            continue
        if b == a + 1:
            tc = t[a] - v[a] * (t[b] - t[a]) / (v[b] - v[a])
        else:
            # one or more exact zeros in between
            tc = 0.5 * (t[a + 1] + t[b - 1])
        out.append(tc)
    return np.asarray(out)
