"""Permutation-invariant master-equation solver in the Dicke basis.

A permutation-invariant density matrix of N spin-1/2 atoms is block-diagonal
over total-spin sectors j with equal weight on each of the d_N(j) degenerate
copies:

    rho = sum_j  1_{d_N(j)} (x) rho_j,     p[j][m][m'] = <j,m| rho_j |j,m'>

which needs only sum_j (2j+1)^2 = O(N^3) coefficients. Detuning and the
collective decay act within each block; the local repump/decay/dephasing
channels couple j -> j, j +- 1. Their transfer coefficients are built here
from first principles: the multiplicity copies are organised by the total
spin j~ of the first N-1 atoms, a local operator A on the last atom has the
in-block matrix element

    M_A(j~; j', n; j, m) = sum_mu <j',n | j~,mu; 1/2,n-mu> <j,m | j~,mu; 1/2,m-mu> <n-mu|A|m-mu>

(Clebsch-Gordan coupling of j~ with the last spin), and permutation
invariance turns the sum over atoms and copies into the exact weight
N d_{N-1}(j~) / d_N(j'). Correctness of every coefficient is pinned to the
dense oracle, not to this derivation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import comb

import numpy as np
from scipy.integrate import solve_ivp

from .params import ModelParams, derive_rates
from .wigner import wigner_d_blocks

TRACE_DRIFT_PER_TIME = 1e-9
HERM_TOL = 1e-12


class DickeIntegrationError(RuntimeError):
    pass


def j_values(n_atoms: int) -> list[float]:
    """Total-spin sectors, descending: N/2, N/2-1, ..., 1/2 or 0."""
    top = n_atoms / 2.0
    count = int(top) + 1 if n_atoms % 2 == 0 else int(top + 0.5)
    return [top - k for k in range(count)]

def degeneracy(n_atoms: int, j: float) -> int:
    """Multiplicity d_N(j) of the spin-j sector for N spin-1/2 particles."""
    k = round(n_atoms / 2.0 - j)
    if k < 0 or j < -1e-12 or round(2 * j) != 2 * j or (n_atoms % 2) != (round(2 * j) % 2):
        return 0
    first = comb(n_atoms, k)
    second = comb(n_atoms, k - 1) if k >= 1 else 0
    return first - second


def num_coefficients(n_atoms: int) -> int:
    """Coefficient count sum_j (2j+1)^2."""
    return sum((int(round(2 * j)) + 1) ** 2 for j in j_values(n_atoms))


@dataclass
class DickeDensityMatrix:
    """Block coefficients p[j][m][m'] with ascending m inside each block.

    blocks[k] corresponds to j_values(n_atoms)[k] (descending j). The trace
    convention is sum_j d_N(j) sum_m p[j][m][m] = 1.
    """

    n_atoms: int
    blocks: list[np.ndarray]

    @property
    def j_list(self) -> list[float]:
        return j_values(self.n_atoms)

    def copy(self) -> "DickeDensityMatrix":
        return DickeDensityMatrix(self.n_atoms, [b.copy() for b in self.blocks])

    def trace(self) -> float:
        return float(
            sum(
                degeneracy(self.n_atoms, j) * np.trace(b).real
                for j, b in zip(self.j_list, self.blocks)
            )
        )

    def hermiticity_defect(self) -> float:
        return max(float(np.max(np.abs(b - b.conj().T))) for b in self.blocks)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks])

    @classmethod
    def from_flat(cls, n_atoms: int, flat: np.ndarray) -> "DickeDensityMatrix":
        blocks = []
        pos = 0
        for j in j_values(n_atoms):
            dim = int(round(2 * j)) + 1
            blocks.append(flat[pos : pos + dim * dim].reshape(dim, dim).copy())
            pos += dim * dim
        return cls(n_atoms, blocks)

    def to_json_dict(self) -> dict:
        return {
            "n_atoms": self.n_atoms,
            "blocks": [
                {"j": j, "matrix_real": b.real.tolist(), "matrix_imag": b.imag.tolist()}
                for j, b in zip(self.j_list, self.blocks)
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def from_json_dict(cls, payload: dict) -> "DickeDensityMatrix":
        n = payload["n_atoms"]
        by_j = {float(b["j"]): b for b in payload["blocks"]}
        blocks = []
        for j in j_values(n):
            entry = by_j[j]
            blocks.append(np.array(entry["matrix_real"]) + 1j * np.array(entry["matrix_imag"]))
        return cls(n, blocks)


def ground_state(n_atoms: int) -> DickeDensityMatrix:
    """All population in |j=N/2, m=-N/2> (every atom in |g>)."""
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    blocks = []
    for j in j_values(n_atoms):
        dim = int(round(2 * j)) + 1
        blocks.append(np.zeros((dim, dim), dtype=complex))
    blocks[0][0, 0] = 1.0  # top block, ascending m: index 0 is m = -j
    return DickeDensityMatrix(n_atoms, blocks)


def collective_rotation(state: DickeDensityMatrix, axis: str, angle: float) -> DickeDensityMatrix:
    """Apply exp(+i angle J_axis) rho exp(-i angle J_axis) blockwise.

    Sign convention: a +pi/2 rotation about y carries the south pole onto the
    +x axis of the Bloch sphere.
    """
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    jmax = state.n_atoms / 2.0
    dmats = wigner_d_blocks(jmax, angle)
    out = []
    for j, block in zip(state.j_list, state.blocks):
        r = dmats[j].T  # exp(+i angle J_y) = d(angle)^T
        if axis == "x":
            dim = int(round(2 * j)) + 1
            m = -j + np.arange(dim)
            phase = np.exp(1j * (np.pi / 2.0) * m)
            r = (phase[:, None] * r) * phase.conj()[None, :]
        out.append(r @ block @ np.conj(r).T)
    return DickeDensityMatrix(state.n_atoms, out)


def _cg(j: float, j_tilde: float, m: np.ndarray, s: float) -> np.ndarray:
    """<j~, m-s; 1/2, s | j, m> for j = j~ +- 1/2, vectorized over m.

    Returns 0 where |m| > j or the coupled weight vanishes.
    """
    m = np.asarray(m, dtype=float)
    denom = 2.0 * j_tilde + 1.0
    plus_arg = np.maximum(j_tilde + m + 0.5, 0.0) / denom
    minus_arg = np.maximum(j_tilde - m + 0.5, 0.0) / denom
    if abs(j - (j_tilde + 0.5)) < 1e-9:
        val = np.sqrt(plus_arg) if s > 0 else np.sqrt(minus_arg)
    elif abs(j - (j_tilde - 0.5)) < 1e-9:
        val = -np.sqrt(minus_arg) if s > 0 else np.sqrt(plus_arg)
    else:
        raise ValueError("j must be j_tilde +- 1/2")
    return np.where(np.abs(m) <= j + 1e-9, val, 0.0)


_CHANNEL_SHIFT = {"sm": 1, "sp": -1, "sz": 0}


def _channel_element(channel: str, j_t: float, j_s: float, j_tilde: float, m_t: np.ndarray):
    """M_ch(j~; j_t, m; j_s, m + shift) over the target m grid."""
    if channel == "sm":
        return _cg(j_t, j_tilde, m_t, -0.5) * _cg(j_s, j_tilde, m_t + 1.0, +0.5)
    if channel == "sp":
        return _cg(j_t, j_tilde, m_t, +0.5) * _cg(j_s, j_tilde, m_t - 1.0, -0.5)
    if channel == "sz":
        return _cg(j_t, j_tilde, m_t, +0.5) * _cg(j_s, j_tilde, m_t, +0.5) - _cg(
            j_t, j_tilde, m_t, -0.5
        ) * _cg(j_s, j_tilde, m_t, -0.5)
    raise ValueError(channel)


def _copy_ratio(n_atoms: int, j_tilde: float, j_target: float) -> float:
    """Exact weight N d_{N-1}(j~) / d_N(j_target)."""
    d_sub = degeneracy(n_atoms - 1, j_tilde)
    if d_sub == 0:
        return 0.0
    return float(Fraction(n_atoms * d_sub, degeneracy(n_atoms, j_target)))


def _lowering_coeff(j: float, m: np.ndarray) -> np.ndarray:
    """c(j, m) with J^- |j,m> = c |j,m-1>."""
    return np.sqrt(np.maximum((j + m) * (j - m + 1.0), 0.0))


class DickeGenerator:
    """Precomputed right-hand side of the atom-only master equation.

    Per target block the derivative is one complex elementwise product
    (detuning + every anticommutator + the dephasing sandwich), two real
    shifted products (collective feed plus in-block decay / repump
    sandwiches), and up to six rank-one transfers from the j +- 1 neighbours.
    """

    def __init__(self, params: ModelParams):
        self.params = params
        self.n_atoms = params.n_atoms
        rates = derive_rates(params)
        n = params.n_atoms
        jl = j_values(n)
        self.j_list = jl
        self.dims = [int(round(2 * j)) + 1 for j in jl]
        self.size = sum(d * d for d in self.dims)

        rate_of = {"sm": 1.0 / params.t1, "sp": params.w, "sz": 1.0 / (4.0 * params.t2)}
        gamma_c = rates.gamma_c

        self.c0: list[np.ndarray] = []  # no-shift complex factor
        self.s1: list[np.ndarray] = []  # feed from p[m+1, m'+1], cropped
        self.s2: list[np.ndarray] = []  # feed from p[m-1, m'-1], cropped
        # transfers[b] = list of (source_block, delta, phi) with
        # out[i, i'] += phi[i] phi[i'] * p_src[i + delta, i' + delta]
        self.transfers: list[list[tuple[int, int, np.ndarray]]] = [[] for _ in jl]

        for b, j in enumerate(jl):
            dim = self.dims[b]
            m = -j + np.arange(dim)
            low = _lowering_coeff(j, m)

            diag = (
                -0.5 * gamma_c * low**2
                - 0.5 / params.t1 * (n / 2.0 + m)
                - 0.5 * params.w * (n / 2.0 - m)
                - 0.25 / params.t2 * (n / 2.0)
            )
            c0 = (diag[:, None] + diag[None, :]) - 1j * params.delta_nu * (m[:, None] - m[None, :])

            # in-block sandwiches, one rank-1 term per branch j~ = j -+ 1/2
            within = {"sm": np.zeros((dim, dim)), "sp": np.zeros((dim, dim)), "sz": np.zeros((dim, dim))}
            for j_tilde in (j - 0.5, j + 0.5):
                ratio = _copy_ratio(n, j_tilde, j)
                if ratio == 0.0 or j_tilde < 0:
                    continue
                for ch in ("sm", "sp", "sz"):
                    v = _channel_element(ch, j, j, j_tilde, m) * np.sqrt(rate_of[ch] * ratio)
                    within[ch] += v[:, None] * v[None, :]
            c0 += within["sz"]
            self.c0.append(c0)

            if dim > 1:
                s1 = gamma_c * np.outer(low[1:], low[1:]) + within["sm"][:-1, :-1]
                s2 = within["sp"][1:, 1:]
            else:
                s1 = np.zeros((0, 0))
                s2 = np.zeros((0, 0))
            self.s1.append(s1)
            self.s2.append(s2)

        # cross-block transfers
        for b, j in enumerate(jl):
            dim = self.dims[b]
            m = -j + np.arange(dim)
            for b_src, j_src in ((b - 1, j + 1.0), (b + 1, j - 1.0)):
                if b_src < 0 or b_src >= len(jl) or j_src < 0:
                    continue
                j_tilde = 0.5 * (j + j_src)
                ratio = _copy_ratio(n, j_tilde, j)
                if ratio == 0.0:
                    continue
                for ch in ("sm", "sp", "sz"):
                    if rate_of[ch] == 0.0:
                        continue
                    delta = _CHANNEL_SHIFT[ch] + int(round(j_src - j))
                    phi = _channel_element(ch, j, j_src, j_tilde, m) * np.sqrt(rate_of[ch] * ratio)
                    if not np.any(phi):
                        continue
                    self.transfers[b].append((b_src, delta, phi))

    def apply_blocks(self, blocks_in: list[np.ndarray]) -> list[np.ndarray]:
        out = [np.empty_like(b) for b in blocks_in]
        self._apply_into(blocks_in, out)
        return out

    def _apply_into(self, blocks_in, blocks_out):
        for b in range(len(self.dims)):
            p = blocks_in[b]
            o = blocks_out[b]
            np.multiply(self.c0[b], p, out=o)
            if self.dims[b] > 1:
                o[:-1, :-1] += self.s1[b] * p[1:, 1:]
                o[1:, 1:] += self.s2[b] * p[:-1, :-1]
            for b_src, delta, phi in self.transfers[b]:
                ps = blocks_in[b_src]
                dim_t = self.dims[b]
                dim_s = self.dims[b_src]
                lo = max(0, -delta)
                hi = min(dim_t, dim_s - delta)
                if hi <= lo:
                    continue
                sub = ps[lo + delta : hi + delta, lo + delta : hi + delta]
                pv = phi[lo:hi]
                o[lo:hi, lo:hi] += pv[:, None] * (sub * pv[None, :])

    def apply_flat(self, flat_in: np.ndarray) -> np.ndarray:
        blocks_in = []
        pos = 0
        for d in self.dims:
            blocks_in.append(flat_in[pos : pos + d * d].reshape(d, d))
            pos += d * d
        out = np.empty_like(flat_in)
        blocks_out = []
        pos = 0
        for d in self.dims:
            blocks_out.append(out[pos : pos + d * d].reshape(d, d))
            pos += d * d
        self._apply_into(blocks_in, blocks_out)
        return out

    def sparse_matrix(self):
        """The same map compiled to one sparse CSR matrix on the flat
        coefficient vector; built lazily and cached. Integration uses it
        because a single C matvec beats hundreds of small block updates."""
        cached = getattr(self, "_sparse", None)
        if cached is not None:
            return cached
        import scipy.sparse as sp

        offsets = np.concatenate([[0], np.cumsum([d * d for d in self.dims])])
        rows_all, cols_all, vals_all = [], [], []

        def add(rows, cols, vals):
            rows_all.append(rows.ravel())
            cols_all.append(cols.ravel())
            vals_all.append(vals.ravel().astype(complex))

        for b, dim in enumerate(self.dims):
            off = offsets[b]
            ii, jj = np.meshgrid(np.arange(dim), np.arange(dim), indexing="ij")
            flat = off + ii * dim + jj
            add(flat, flat, self.c0[b])
            if dim > 1:
                tgt = flat[:-1, :-1]
                src = off + (ii[:-1, :-1] + 1) * dim + (jj[:-1, :-1] + 1)
                add(tgt, src, self.s1[b])
                tgt = flat[1:, 1:]
                src = off + (ii[1:, 1:] - 1) * dim + (jj[1:, 1:] - 1)
                add(tgt, src, self.s2[b])
            for b_src, delta, phi in self.transfers[b]:
                dim_s = self.dims[b_src]
                off_s = offsets[b_src]
                lo = max(0, -delta)
                hi = min(dim, dim_s - delta)
                if hi <= lo:
                    continue
                it, jt = np.meshgrid(np.arange(lo, hi), np.arange(lo, hi), indexing="ij")
                add(
                    off + it * dim + jt,
                    off_s + (it + delta) * dim_s + (jt + delta),
                    phi[lo:hi][:, None] * phi[lo:hi][None, :],
                )

        mat = sp.coo_matrix(
            (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(self.size, self.size),
        ).tocsr()
        self._sparse = mat
        return mat


@lru_cache(maxsize=8)
def _cached_generator(params: ModelParams) -> DickeGenerator:
    return DickeGenerator(params)


def apply_generator(state: DickeDensityMatrix, params: ModelParams) -> DickeDensityMatrix:
    """Time derivative d rho/dt of the master equation, blockwise."""
    gen = _cached_generator(params)
    return DickeDensityMatrix(state.n_atoms, gen.apply_blocks(state.blocks))


def evolve_dicke(
    state: DickeDensityMatrix,
    params: ModelParams,
    duration: float,
    tol: float = 1e-8,
    t_eval: np.ndarray | None = None,
    method: str = "RK45",
):
    """Adaptive propagation of the block coefficients.

    Returns the final state, or a list of states at t_eval. Trace drift is
    bounded by 1e-9 per unit time and hermiticity rechecked at exit.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if params.n_atoms != state.n_atoms:
        raise ValueError("params.n_atoms does not match the state")
    gen = _cached_generator(params)
    y0 = state.to_flat()
    if duration == 0 and t_eval is None:
        return state.copy()

    mat = gen.sparse_matrix()
    sol = solve_ivp(
        lambda _t, y: mat @ y,
        (0.0, duration),
        y0,
        method=method,
        rtol=tol,
        atol=tol * 1e-2,
        t_eval=t_eval,
    )
    if not sol.success:
        raise DickeIntegrationError(f"integrator stopped at t={sol.t[-1]:.6g}: {sol.message}")

    tr0 = state.trace()

    def wrap(y):
        out = DickeDensityMatrix.from_flat(state.n_atoms, y)
        drift = abs(out.trace() - tr0)
        budget = TRACE_DRIFT_PER_TIME * max(abs(duration), 1.0)
        if drift > max(budget, 10 * tol):
            raise DickeIntegrationError(f"trace drift {drift:.3e} exceeds budget {budget:.3e}")
        if out.hermiticity_defect() > max(HERM_TOL, 10 * tol):
            raise DickeIntegrationError("hermiticity lost during integration")
        return out

    if t_eval is None:
        return wrap(sol.y[:, -1])
    return [wrap(sol.y[:, k]) for k in range(sol.y.shape[1])]


@dataclass
class ExpectationSet:
    """Single-atom, cross-pair and collective moments of a symmetric state."""

    sz: float
    splus: complex
    spsm_cross: float
    spsz_cross: complex
    jz: float
    jplusjminus: float
    alpha: complex
    alpha_defined: bool


def expectations(state: DickeDensityMatrix) -> ExpectationSet:
    """Collective moments from the blocks, then per-atom and cross-pair
    values through the permutation-symmetric extraction identities."""
    n = state.n_atoms
    jz = 0.0
    jpjm = 0.0
    jplus = 0.0 + 0.0j
    jpjz = 0.0 + 0.0j
    for j, block in zip(state.j_list, state.blocks):
        d = degeneracy(n, j)
        if d == 0:
            continue
        dim = block.shape[0]
        m = -j + np.arange(dim)
        pops = np.diag(block).real
        jz += d * float(np.dot(m, pops))
        jpjm += d * float(np.dot(_lowering_coeff(j, m) ** 2, pops))
        if dim > 1:
            coh = np.diag(block, k=1)  # p[m, m+1] entries, i.e. rho_{m, m+1}
            cc = _lowering_coeff(j, m[1:])
            jplus += d * complex(np.sum(cc * coh))
            jpjz += d * complex(np.sum(cc * (m[1:] - 1.0) * coh))
    sz = 2.0 * jz / n
    splus = jplus / n
    if n >= 2:
        spsm = (jpjm - n * (1.0 + sz) / 2.0) / (n * (n - 1.0))
        spsz = (2.0 * jpjz + jplus) / (n * (n - 1.0))
    else:
        spsm = float("nan")
        spsz = complex("nan")
    denom = splus * sz
    alpha_defined = abs(denom) >= 1e-12 and n >= 2
    alpha = spsz / denom if alpha_defined else 0.0 + 0.0j
    return ExpectationSet(
        sz=sz,
        splus=splus,
        spsm_cross=float(np.real(spsm)),
        spsz_cross=spsz,
        jz=jz,
        jplusjminus=jpjm,
        alpha=alpha,
        alpha_defined=alpha_defined,
    )


# ---------------------------------------------------------------------------
# Exact embedding into the full 2^N space, for oracle cross-checks (small N).


def _dicke_isometries(n_atoms: int) -> dict[float, list[np.ndarray]]:
    """Orthonormal copies V (2^N x (2j+1)) of each spin-j sector.

    Copies are labelled by the coupling path; columns are ascending m. Atom
    ordering matches the dense module (atom 1 most significant; inside one
    atom the basis is (|e>, |g>)).
    """
    if n_atoms > 8:
        raise ValueError("isometry construction is meant for small N")
    # one atom: columns m = -1/2 (|g>, dense index 1) and +1/2 (|e>, index 0)
    current: dict[float, list[np.ndarray]] = {0.5: [np.array([[0.0, 1.0], [1.0, 0.0]])]}
    for _k in range(1, n_atoms):
        nxt: dict[float, list[np.ndarray]] = {}
        for j_tilde, copies in current.items():
            dim_tilde = int(round(2 * j_tilde)) + 1
            for j_new in (j_tilde + 0.5, j_tilde - 0.5):
                if j_new < 0:
                    continue
                dim_new = int(round(2 * j_new)) + 1
                m_new = -j_new + np.arange(dim_new)
                up = _cg(j_new, j_tilde, m_new, +0.5)
                down = _cg(j_new, j_tilde, m_new, -0.5)
                # w[mu, spin, column]: spin index 0 = |e>, 1 = |g>
                w = np.zeros((dim_tilde, 2, dim_new))
                for col, mm in enumerate(m_new):
                    if abs(mm - 0.5) <= j_tilde + 1e-9:
                        w[int(round(mm - 0.5 + j_tilde)), 0, col] = up[col]
                    if abs(mm + 0.5) <= j_tilde + 1e-9:
                        w[int(round(mm + 0.5 + j_tilde)), 1, col] = down[col]
                for v in copies:
                    # new atom least significant: full index = i_prev * 2 + spin
                    lifted = np.einsum("pu,usc->psc", v, w).reshape(-1, dim_new)
                    nxt.setdefault(j_new, []).append(lifted)
        current = nxt
    return current


def dicke_to_dense(state: DickeDensityMatrix) -> np.ndarray:
    """Expand the block representation to the full 2^N density matrix."""
    isos = _dicke_isometries(state.n_atoms)
    dim = 2 ** state.n_atoms
    rho = np.zeros((dim, dim), dtype=complex)
    for j, block in zip(state.j_list, state.blocks):
        for v in isos.get(j, []):
            rho += v @ block @ v.T
    return rho


def dense_to_dicke(n_atoms: int, rho: np.ndarray) -> DickeDensityMatrix:
    """Project a (symmetric) dense density matrix onto block coefficients."""
    isos = _dicke_isometries(n_atoms)
    blocks = []
    for j in j_values(n_atoms):
        copies = isos.get(j, [])
        dim = int(round(2 * j)) + 1
        acc = np.zeros((dim, dim), dtype=complex)
        for v in copies:
            acc += v.T @ rho @ v
        blocks.append(acc / len(copies))
    return DickeDensityMatrix(n_atoms, blocks)
