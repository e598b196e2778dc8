"""Mean-field, phase-model and cumulant reductions of the master equation.

The cumulant closure keeps the inversion <sigma_z> and the cross-atom
coherence <sigma_j^+ sigma_k^-> (j != k). Its algebraic steady state feeds
the closed-form visibility decay rate

    lambda = (gamma_t - (N-1) gamma_c * alpha_ss * sz_ss) / 2,

with the correlation-factor ratio alpha_ss fixed to 1; the mean-field value
sz_ss = gamma_t / ((N-1) gamma_c) would make lambda vanish identically, so
the beyond-mean-field steady state is essential.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .params import ModelParams, derive_rates


class SteadyStateError(RuntimeError):
    """No physical root of the cumulant steady-state equations."""


@dataclass
class CumulantState:
    """Closed pair of symmetric moments."""

    sz: float
    spsm: float


def cumulant_rhs(state: CumulantState, params: ModelParams) -> CumulantState:
    """Time derivative of (sz, spsm) under the cumulant closure."""
    r = derive_rates(params)
    n = params.n_atoms
    sz, spsm = state.sz, state.spsm
    dsz = (
        -(r.gamma_c + 1.0 / params.t1) * (sz + 1.0)
        - params.w * (sz - 1.0)
        - 2.0 * r.gamma_c * (n - 1.0) * spsm
    )
    dspsm = (
        -r.gamma_t * spsm
        + 0.5 * r.gamma_c * sz * (1.0 + sz)
        + r.gamma_c * (n - 2.0) * spsm * sz
    )
    return CumulantState(sz=dsz, spsm=dspsm)


def _steady_residuals(sz: float, spsm: float, params: ModelParams) -> tuple[float, float]:
    d = cumulant_rhs(CumulantState(sz, spsm), params)
    return d.sz, d.spsm


def _spsm_of_sz(sz: float, params: ModelParams) -> float:
    r = derive_rates(params)
    n = params.n_atoms
    denom = r.gamma_t - r.gamma_c * (n - 2.0) * sz
    return 0.5 * r.gamma_c * sz * (1.0 + sz) / denom


def _candidate_roots(params: ModelParams) -> list[float]:
    """Real roots of the eliminated polynomial with |sz| <= 1.

    Clearing the denominator of spsm(sz) turns the fixed-point condition
    into a quadratic in sz (the spsm equation is linear in spsm once sz is
    held fixed).
    """
    r = derive_rates(params)
    n = params.n_atoms
    # [ -(gc + 1/t1)(sz+1) - w(sz-1) ] * [ gt - gc (n-2) sz ] - gc^2 (n-1) sz (1+sz) = 0
    lin1 = np.array([-(r.gamma_c + 1.0 / params.t1 + params.w), params.w - r.gamma_c - 1.0 / params.t1])
    lin2 = np.array([-r.gamma_c * (n - 2.0), r.gamma_t])
    poly = np.polymul(lin1, lin2)
    poly = np.polysub(poly, r.gamma_c**2 * (n - 1.0) * np.array([1.0, 1.0, 0.0]))
    roots = np.roots(poly)
    out = []
    for root in roots:
        if abs(root.imag) > 1e-9:
            continue
        sz = float(root.real)
        if abs(sz) > 1.0 + 1e-9:
            continue
        out.append(min(max(sz, -1.0), 1.0))
    return sorted(out)


def _is_stable(sz: float, spsm: float, params: ModelParams) -> bool:
    """Linear stability of a fixed point of the 2d cumulant flow."""
    r = derive_rates(params)
    n = params.n_atoms
    jac = np.array(
        [
            [-(r.gamma_c + 1.0 / params.t1) - params.w, -2.0 * r.gamma_c * (n - 1.0)],
            [
                0.5 * r.gamma_c * (1.0 + 2.0 * sz) + r.gamma_c * (n - 2.0) * spsm,
                -r.gamma_t + r.gamma_c * (n - 2.0) * sz,
            ],
        ]
    )
    return bool(np.max(np.linalg.eigvals(jac).real) < 0.0)


def cumulant_steady_state(params: ModelParams) -> CumulantState:
    """Physical fixed point of the cumulant equations.

    Roots of the eliminated polynomial are filtered to real values with
    |sz| <= 1, then the dynamically stable branch is selected; it is the one
    continuously connected to the decoupled gamma_c -> 0 root, and it keeps
    spsm >= 0 throughout the synchronized (inverted) regime. The root is
    Newton-polished until both residuals vanish to near machine precision.
    """
    r = derive_rates(params)
    if params.n_atoms < 2:
        raise ValueError("cumulant steady state needs N >= 2")
    if r.gamma_c <= 0:
        raise ValueError("cumulant steady state needs gamma_c > 0")

    candidates = _candidate_roots(params)
    if not candidates:
        raise SteadyStateError(f"no physical steady-state root for {params}")
    stable = [sz for sz in candidates if _is_stable(sz, _spsm_of_sz(sz, params), params)]
    if len(stable) == 1:
        sz = stable[0]
    else:
        # ambiguous or empty: follow the branch continuously connected to
        # the decoupled root by ramping gamma_c up from zero
        pool = stable if stable else candidates
        sz = (params.w - 1.0 / params.t1) / (params.w + 1.0 / params.t1)
        for scale in np.geomspace(1e-6, 1.0, 60):
            scaled = ModelParams(
                n_atoms=params.n_atoms,
                delta_nu=params.delta_nu,
                t1=params.t1,
                t2=params.t2,
                w=params.w,
                cooperativity=params.cooperativity * scale,
            )
            cands = _candidate_roots(scaled)
            if cands:
                sz = min(cands, key=lambda c: abs(c - sz))
        sz = min(pool, key=lambda c: abs(c - sz))

    # Newton polish on the scalar residual f(sz) = dsz(sz, spsm(sz))
    def f(x: float) -> float:
        return _steady_residuals(x, _spsm_of_sz(x, params), params)[0]

    for _ in range(60):
        fx = f(sz)
        if abs(fx) < 1e-14 * max(1.0, r.gamma_t):
            break
        h = 1e-7
        dfdx = (f(sz + h) - f(sz - h)) / (2.0 * h)
        step = fx / dfdx
        sz = sz - step
        if abs(step) < 1e-15:
            break

    spsm = _spsm_of_sz(sz, params)
    res1, res2 = _steady_residuals(sz, spsm, params)
    if max(abs(res1), abs(res2)) > 1e-10 * max(1.0, r.gamma_t):
        raise SteadyStateError(f"steady-state residuals too large: {res1:.3e}, {res2:.3e}")
    return CumulantState(sz=sz, spsm=spsm)


def lambda_semiclassical(params: ModelParams) -> float:
    """Closed-form fringe-visibility decay rate with alpha_ss = 1.

    For gamma_c = 0 the collective term drops and lambda = gamma_t / 2.
    """
    r = derive_rates(params)
    if params.n_atoms < 2 or r.gamma_c <= 0:
        return 0.5 * r.gamma_t
    ss = cumulant_steady_state(params)
    return 0.5 * (r.gamma_t - (params.n_atoms - 1.0) * r.gamma_c * ss.sz)


def cumulant_fringe_rhs(y: np.ndarray, params: ModelParams) -> np.ndarray:
    """RHS for (sz, spsm, Re sp, Im sp): the closed pair plus the coherence
    equation with the alpha_ss = 1 closure <s+ sz> ~ <s+><sz>."""
    r = derive_rates(params)
    n = params.n_atoms
    sz, spsm = y[0], y[1]
    sp = y[2] + 1j * y[3]
    d = cumulant_rhs(CumulantState(sz, spsm), params)
    dsp = (1j * params.delta_nu - 0.5 * r.gamma_t + 0.5 * r.gamma_c * (n - 1.0) * sz) * sp
    return np.array([d.sz, d.spsm, dsp.real, dsp.imag])


def cumulant_fringe(params: ModelParams, t_eval: np.ndarray, tol: float = 1e-10):
    """Integrate the cumulant fringe from the post-pulse product state.

    Returns (sz(t), spsm(t), sp(t)) arrays on t_eval.
    """
    y0 = np.array([0.0, 0.25, 0.5, 0.0])
    sol = solve_ivp(
        lambda _t, y: cumulant_fringe_rhs(y, params),
        (0.0, float(t_eval[-1])),
        y0,
        method="DOP853",
        rtol=tol,
        atol=tol * 1e-2,
        t_eval=t_eval,
    )
    if not sol.success:
        raise RuntimeError(f"cumulant fringe integration failed: {sol.message}")
    return sol.y[0], sol.y[1], sol.y[2] + 1j * sol.y[3]


# ---------------------------------------------------------------------------
# Mean-field single-atom equation and its Kuramoto phase reduction.

_SP2 = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
_SM2 = _SP2.T.conj()
_SZ2 = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)


def _lindblad_2x2(op: np.ndarray, rho: np.ndarray) -> np.ndarray:
    opd = op.conj().T
    return op @ rho @ opd - 0.5 * (opd @ op @ rho + rho @ opd @ op)


def meanfield_rhs(rho: np.ndarray, order_param: complex, params: ModelParams) -> np.ndarray:
    """Single-atom density-matrix derivative with the other atoms replaced
    by the coherence sum order_param = sum_{m != j} <sigma_m^+>."""
    r = derive_rates(params)
    h = 0.5 * params.delta_nu * _SZ2
    out = -1j * (h @ rho - rho @ h)
    out += params.w * _lindblad_2x2(_SP2, rho)
    out += (1.0 / params.t1 + r.gamma_c) * _lindblad_2x2(_SM2, rho)
    out += (1.0 / (4.0 * params.t2)) * _lindblad_2x2(_SZ2, rho)
    out += 0.5 * r.gamma_c * (_SM2 @ rho - rho @ _SM2) * order_param
    out += 0.5 * r.gamma_c * (rho @ _SP2 - _SP2 @ rho) * np.conj(order_param)
    return out


@dataclass
class KuramotoEnsemble:
    """Phase-model state: <sigma_j^+> = amplitudes[j] * exp(-i phases[j])."""

    phases: np.ndarray
    amplitudes: np.ndarray
    inversion: float

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=float)
        self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        if self.phases.shape != self.amplitudes.shape:
            raise ValueError("phases and amplitudes must have equal length")
        if np.any(self.amplitudes < 0):
            raise ValueError("amplitudes must be non-negative")


def kuramoto_step(ensemble: KuramotoEnsemble, params: ModelParams, dt: float) -> KuramotoEnsemble:
    """One explicit Euler step of the phase model; amplitudes held fixed."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if np.any(ensemble.amplitudes == 0):
        raise ValueError("zero amplitude makes the phase undefined")
    r = derive_rates(params)
    phases = ensemble.phases
    amps = ensemble.amplitudes
    field = np.sum(amps * np.exp(1j * phases))
    coupling = np.imag(np.exp(-1j * phases) * field)  # sum_m a_m sin(phi_m - phi_j)
    dphi = -params.delta_nu + 0.5 * r.gamma_c * (ensemble.inversion / amps) * coupling
    return KuramotoEnsemble(
        phases=np.mod(phases + dt * dphi, 2.0 * np.pi),
        amplitudes=amps.copy(),
        inversion=ensemble.inversion,
    )


def order_parameter(ensemble: KuramotoEnsemble) -> complex:
    """O = sum_j amplitudes[j] exp(-i phases[j])."""
    if ensemble.phases.size == 0:
        raise ValueError("empty ensemble")
    return complex(np.sum(ensemble.amplitudes * np.exp(-1j * ensemble.phases)))
