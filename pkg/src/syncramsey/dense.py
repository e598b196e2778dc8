"""Brute-force solvers on the full Hilbert/Liouville space for small N.

This is the ground truth for every other solver. States live on the tensor
product atom_1 x ... x atom_N (x photon last, when a cavity is included);
atom 1 is the most significant factor. Density matrices are propagated in
vectorized (row-major) form by a sparse Liouvillian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .params import ModelParams, derive_rates

MAX_ATOMS_DENSE = 8
MAX_ATOMS_CAVITY = 4
MAX_PHOTON_CUTOFF = 10

TRACE_TOL = 1e-10
HERM_TOL = 1e-12
TOP_FOCK_TOL = 1e-6


class DimensionGuardError(ValueError):
    """Requested system exceeds the oracle's size guard."""


class IntegrationError(RuntimeError):
    """The integrator stalled or returned an unphysical state."""


class CutoffError(RuntimeError):
    """Photon population reached the top Fock level; cutoff too small."""


_SP = sp.csr_matrix(np.array([[0, 1], [0, 0]], dtype=complex))  # |e><g|
_SM = sp.csr_matrix(np.array([[0, 0], [1, 0]], dtype=complex))
_SZ = sp.csr_matrix(np.array([[1, 0], [0, -1]], dtype=complex))
_ID2 = sp.identity(2, dtype=complex, format="csr")


def _site_operator(op: sp.spmatrix, site: int, n_atoms: int, photon_dim: int | None = None):
    """op on one atom, identity elsewhere; photon factor last."""
    factors = [_ID2] * n_atoms
    factors[site] = op
    if photon_dim is not None:
        factors.append(sp.identity(photon_dim, dtype=complex, format="csr"))
    out = factors[0]
    for f in factors[1:]:
        out = sp.kron(out, f, format="csr")
    return out


def _photon_operator(op: sp.spmatrix, n_atoms: int):
    atom_id = sp.identity(2 ** n_atoms, dtype=complex, format="csr")
    return sp.kron(atom_id, op, format="csr")


def _annihilation(photon_dim: int):
    data = np.sqrt(np.arange(1, photon_dim, dtype=float))
    return sp.diags(data, offsets=1, dtype=complex, format="csr")


def collective_lowering(n_atoms: int, photon_dim: int | None = None):
    out = _site_operator(_SM, 0, n_atoms, photon_dim)
    for site in range(1, n_atoms):
        out = out + _site_operator(_SM, site, n_atoms, photon_dim)
    return out


def _spre(a: sp.spmatrix):
    return sp.kron(a, sp.identity(a.shape[0], dtype=complex, format="csr"), format="csr")


def _spost(b: sp.spmatrix):
    return sp.kron(sp.identity(b.shape[0], dtype=complex, format="csr"), b.T, format="csr")


def _lindblad_super(op: sp.spmatrix, rate: float):
    """rate * (O rho O+ - {O+O, rho}/2) on the row-major vectorized rho."""
    opd = op.conj().T.tocsr()
    opdop = (opd @ op).tocsr()
    term = sp.kron(op, op.conj(), format="csr")
    term = term - 0.5 * (_spre(opdop) + _spost(opdop))
    return rate * term


def _hamiltonian_super(h: sp.spmatrix):
    return -1j * (_spre(h) - _spost(h))


@dataclass
class LinearGenerator:
    """Sparse map rho -> d rho/dt on the vectorized density matrix."""

    matrix: sp.spmatrix
    n_atoms: int
    photon_dim: int | None = None

    @property
    def dim(self) -> int:
        d = 2 ** self.n_atoms
        return d * self.photon_dim if self.photon_dim else d


@dataclass
class DenseState:
    """Full density matrix or pure state on the explicit tensor space."""

    kind: str  # "density_matrix" | "pure_state"
    n_atoms: int
    data: np.ndarray
    photon_dim: int | None = None

    @property
    def dim(self) -> int:
        d = 2 ** self.n_atoms
        return d * self.photon_dim if self.photon_dim else d

    def copy(self) -> "DenseState":
        return DenseState(self.kind, self.n_atoms, self.data.copy(), self.photon_dim)

    def as_density_matrix(self) -> "DenseState":
        if self.kind == "density_matrix":
            return self
        rho = np.outer(self.data, self.data.conj())
        return DenseState("density_matrix", self.n_atoms, rho, self.photon_dim)

    def check(self):
        if self.kind == "density_matrix":
            herm = np.max(np.abs(self.data - self.data.conj().T))
            if herm > HERM_TOL:
                raise IntegrationError(f"hermiticity violated: {herm:.3e}")
            tr = np.trace(self.data)
            if abs(tr - 1.0) > TRACE_TOL:
                raise IntegrationError(f"trace drifted to {tr}")
        else:
            norm = np.linalg.norm(self.data)
            if abs(norm - 1.0) > TRACE_TOL:
                raise IntegrationError(f"norm drifted to {norm}")


def ground_state_dense(n_atoms: int, photon_dim: int | None = None) -> DenseState:
    """All atoms in |g>, photon vacuum when a cavity is present."""
    dim = 2 ** n_atoms * (photon_dim or 1)
    psi = np.zeros(dim, dtype=complex)
    # |g...g> is the last atomic basis state; vacuum is Fock index 0.
    idx = (2 ** n_atoms - 1) * (photon_dim or 1)
    psi[idx] = 1.0
    return DenseState("pure_state", n_atoms, psi, photon_dim)


def plus_x_state_dense(n_atoms: int) -> DenseState:
    """Product state with every Bloch vector along +x (post-pulse state)."""
    dim = 2 ** n_atoms
    psi = np.full(dim, 2.0 ** (-n_atoms / 2.0), dtype=complex)
    return DenseState("pure_state", n_atoms, psi)


def rotation_unitary(n_atoms: int, axis: str, angle: float) -> np.ndarray:
    """Product of single-atom exp(+i angle sigma_axis / 2) factors.

    The positive sense matches the Dicke-basis convention: a +pi/2 rotation
    about y carries the south pole onto +x.
    """
    half = angle / 2.0
    if axis == "y":
        u1 = np.array([[np.cos(half), np.sin(half)], [-np.sin(half), np.cos(half)]], dtype=complex)
    elif axis == "x":
        u1 = np.array([[np.cos(half), 1j * np.sin(half)], [1j * np.sin(half), np.cos(half)]], dtype=complex)
    else:
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    u = np.array([[1.0]], dtype=complex)
    for _ in range(n_atoms):
        u = np.kron(u, u1)
    return u


def rotate_dense(state: DenseState, axis: str, angle: float) -> DenseState:
    u = rotation_unitary(state.n_atoms, axis, angle)
    if state.photon_dim:
        u = np.kron(u, np.eye(state.photon_dim, dtype=complex))
    if state.kind == "pure_state":
        return DenseState(state.kind, state.n_atoms, u @ state.data, state.photon_dim)
    return DenseState(state.kind, state.n_atoms, u @ state.data @ u.conj().T, state.photon_dim)


def build_generator_atoms(params: ModelParams) -> LinearGenerator:
    """Atom-only master equation: detuning, collective decay and the local
    repump/decay/dephasing channels."""
    n = params.n_atoms
    if n > MAX_ATOMS_DENSE:
        raise DimensionGuardError(f"dense atom-only solver is guarded to N <= {MAX_ATOMS_DENSE}")
    rates = derive_rates(params)

    h = 0.5 * params.delta_nu * sum(_site_operator(_SZ, k, n) for k in range(n))
    lv = _hamiltonian_super(sp.csr_matrix(h))
    if rates.gamma_c > 0:
        lv = lv + _lindblad_super(collective_lowering(n), rates.gamma_c)
    for k in range(n):
        if params.w > 0:
            lv = lv + _lindblad_super(_site_operator(_SP, k, n), params.w)
        lv = lv + _lindblad_super(_site_operator(_SM, k, n), 1.0 / params.t1)
        lv = lv + _lindblad_super(_site_operator(_SZ, k, n), 1.0 / (4.0 * params.t2))
    return LinearGenerator(lv.tocsr(), n)


def build_generator_cavity(params: ModelParams) -> LinearGenerator:
    """Atom-cavity master equation before adiabatic elimination."""
    n = params.n_atoms
    if n > MAX_ATOMS_CAVITY:
        raise DimensionGuardError(f"cavity solver is guarded to N <= {MAX_ATOMS_CAVITY}")
    if not params.has_cavity:
        raise ValueError("cavity generator requires g, kappa and n_photon_max")
    if params.n_photon_max > MAX_PHOTON_CUTOFF:
        raise DimensionGuardError(f"photon cutoff is guarded to {MAX_PHOTON_CUTOFF}")
    pdim = params.n_photon_max + 1

    a = _photon_operator(_annihilation(pdim), n)
    h = 0.5 * params.delta_nu * sum(_site_operator(_SZ, k, n, pdim) for k in range(n))
    coupling = sum(_site_operator(_SM, k, n, pdim) for k in range(n))
    h = h + 0.5 * params.g * (a.conj().T @ coupling + a @ coupling.conj().T)

    lv = _hamiltonian_super(sp.csr_matrix(h))
    lv = lv + _lindblad_super(a, params.kappa)
    for k in range(n):
        if params.w > 0:
            lv = lv + _lindblad_super(_site_operator(_SP, k, n, pdim), params.w)
        lv = lv + _lindblad_super(_site_operator(_SM, k, n, pdim), 1.0 / params.t1)
        lv = lv + _lindblad_super(_site_operator(_SZ, k, n, pdim), 1.0 / (4.0 * params.t2))
    return LinearGenerator(lv.tocsr(), n, pdim)


def evolve_dense(
    state: DenseState,
    generator: LinearGenerator,
    duration: float,
    tol: float = 1e-10,
    t_eval: np.ndarray | None = None,
    method: str = "DOP853",
):
    """Propagate by an adaptive embedded Runge-Kutta integrator.

    Returns the final DenseState, or a list of DenseStates when t_eval is
    given. Pure states are converted to density matrices first.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rho0 = state.as_density_matrix()
    if rho0.dim != generator.dim:
        raise ValueError(f"state dim {rho0.dim} does not match generator dim {generator.dim}")
    if duration == 0 and t_eval is None:
        out = rho0.copy()
        out.check()
        return out

    mat = generator.matrix
    dim = generator.dim

    def rhs(_t, y):
        return mat @ y

    sol = solve_ivp(
        rhs,
        (0.0, duration),
        rho0.data.reshape(-1),
        method=method,
        rtol=tol,
        atol=tol * 1e-2,
        t_eval=t_eval,
        dense_output=False,
    )
    if not sol.success:
        raise IntegrationError(f"integrator stopped at t={sol.t[-1]:.6g}: {sol.message}")

    def wrap(y):
        rho = y.reshape(dim, dim)
        out = DenseState("density_matrix", state.n_atoms, rho, state.photon_dim)
        out.check()
        if state.photon_dim:
            top = top_fock_population(out)
            if top > TOP_FOCK_TOL:
                raise CutoffError(f"top Fock level population {top:.3e} exceeds {TOP_FOCK_TOL}")
        return out

    if t_eval is None:
        return wrap(sol.y[:, -1])
    return [wrap(sol.y[:, k]) for k in range(sol.y.shape[1])]


_OBSERVABLE_NAMES = (
    "sigma_z_single",
    "sigma_plus_single",
    "Jz",
    "Jplus",
    "JplusJminus",
    "JplusJz",
    "photon_number",
)


def _named_operator(name: str, n_atoms: int, photon_dim: int | None):
    if name == "sigma_z_single":
        return _site_operator(_SZ, 0, n_atoms, photon_dim)
    if name == "sigma_plus_single":
        return _site_operator(_SP, 0, n_atoms, photon_dim)
    jm = collective_lowering(n_atoms, photon_dim)
    jp = jm.conj().T.tocsr()
    jz = 0.5 * sum(_site_operator(_SZ, k, n_atoms, photon_dim) for k in range(n_atoms))
    if name == "Jz":
        return sp.csr_matrix(jz)
    if name == "Jplus":
        return jp
    if name == "JplusJminus":
        return (jp @ jm).tocsr()
    if name == "JplusJz":
        return (jp @ jz).tocsr()
    if name == "photon_number":
        if photon_dim is None:
            raise ValueError("photon_number requires a cavity state")
        num = sp.diags(np.arange(photon_dim, dtype=float), dtype=complex)
        return _photon_operator(num.tocsr(), n_atoms)
    raise ValueError(f"unknown observable {name!r}; known: {_OBSERVABLE_NAMES}")


def expect_dense(state: DenseState, observable: str) -> complex:
    """tr(O rho), or <psi|O|psi> for pure states."""
    op = _named_operator(observable, state.n_atoms, state.photon_dim)
    if state.kind == "pure_state":
        return complex(np.vdot(state.data, op @ state.data))
    return complex(np.trace(op @ state.data))


def top_fock_population(state: DenseState) -> float:
    """Population of the highest retained Fock level."""
    if not state.photon_dim:
        raise ValueError("state has no photon factor")
    rho = state.as_density_matrix().data
    pops = np.real(np.diag(rho))
    mask = (np.arange(state.dim) % state.photon_dim) == state.photon_dim - 1
    return float(np.sum(pops[mask]))


def cross_pair_coherence(state: DenseState) -> complex:
    """<sigma_j^+ sigma_k^->, j != k, computed directly on sites (0, 1)."""
    if state.n_atoms < 2:
        raise ValueError("needs at least two atoms")
    op = _site_operator(_SP, 0, state.n_atoms, state.photon_dim) @ _site_operator(
        _SM, 1, state.n_atoms, state.photon_dim
    )
    rho = state.as_density_matrix().data
    return complex(np.trace(op @ rho))


def cross_pair_plus_z(state: DenseState) -> complex:
    """<sigma_j^+ sigma_k^z>, j != k, computed directly on sites (0, 1)."""
    if state.n_atoms < 2:
        raise ValueError("needs at least two atoms")
    op = _site_operator(_SP, 0, state.n_atoms, state.photon_dim) @ _site_operator(
        _SZ, 1, state.n_atoms, state.photon_dim
    )
    rho = state.as_density_matrix().data
    return complex(np.trace(op @ rho))


_DUMP_MAGIC = b"DNST"


def dump_state(state: DenseState, path) -> None:
    """Binary dump: magic, kind, n_atoms, photon_dim, shape, complex128 data
    (row-major, little-endian)."""
    data = np.ascontiguousarray(state.data, dtype=np.complex128)
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        kind_code = 0 if state.kind == "density_matrix" else 1
        fh.write(struct.pack("<III", kind_code, state.n_atoms, state.photon_dim or 0))
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(data.astype("<c16").tobytes(order="C"))


def load_state(path) -> DenseState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DUMP_MAGIC:
            raise ValueError(f"not a dense-state dump: bad magic {magic!r}")
        kind_code, n_atoms, photon_dim = struct.unpack("<III", fh.read(12))
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        count = int(np.prod(shape))
        data = np.frombuffer(fh.read(16 * count), dtype="<c16").reshape(shape).copy()
    kind = "density_matrix" if kind_code == 0 else "pure_state"
    return DenseState(kind, n_atoms, data, photon_dim or None)
