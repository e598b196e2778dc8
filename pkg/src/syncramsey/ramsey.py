"""Ramsey-sequence orchestration, fringe fitting and parameter sweeps.

The sequence is: prepare every atom in |g>, rotate by pi/2 about y onto +x,
evolve under the interrogation master equation, and read the fringe as
2 Im<sigma_j^+>(t) on a sample grid. Measuring the z projection after a
second pi/2 pulse about x at each sample time is an operator identity with
the coherence readout; both are implemented and must agree to integrator
tolerance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.integrate import DOP853, RK45
from scipy.optimize import least_squares

from . import dense, dicke, semiclassical
from .crossings import find_zero_crossings
from .params import ModelParams, derive_rates

BACKENDS = ("dense", "dicke", "cumulant", "trajectory")


class ProtocolError(ValueError):
    pass


class FitError(RuntimeError):
    pass


@dataclass
class FringeSeries:
    """Time-sampled Ramsey signal, per atom, in [-1, 1]."""

    times: np.ndarray
    signal: np.ndarray
    backend: str
    params: ModelParams
    readout: str = "coherence"
    observables: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class FitResult:
    """Damped-sine fit A exp(-lam t) sin(delta_nu_fit t + phase)."""

    amplitude: float
    lam: float
    delta_nu_fit: float
    phase: float
    rms_residual: float
    transient_cut: float
    lam_stderr: float
    lam_envelope: float
    lam_envelope_stderr: float
    n_extrema: int
    converged: bool


def _sample_adaptive(
    rhs: Callable,
    y0: np.ndarray,
    t_grid: np.ndarray,
    tol: float,
    extract: Callable,
    method: str = "RK45",
):
    """March an adaptive stepper across t_grid, extracting observables from
    the dense interpolant at each sample; memory stays O(state)."""
    stepper_cls = {"RK45": RK45, "DOP853": DOP853}[method]
    stepper = stepper_cls(rhs, float(t_grid[0]), y0, t_bound=float(t_grid[-1]), rtol=tol, atol=tol * 1e-2)
    results = [extract(float(t_grid[0]), y0)]
    idx = 1
    while idx < len(t_grid):
        if stepper.status == "finished":
            break
        if stepper.status != "running":
            raise ProtocolError(f"integrator failed at t={stepper.t:.6g}")
        stepper.step()
        interp = None
        while idx < len(t_grid) and t_grid[idx] <= stepper.t + 1e-14:
            if interp is None:
                interp = stepper.dense_output()
            results.append(extract(float(t_grid[idx]), interp(t_grid[idx])))
            idx += 1
    while idx < len(t_grid):  # t_bound hit exactly on a step
        results.append(extract(float(t_grid[idx]), stepper.y))
        idx += 1
    return results


def _pulsed_signal_dicke(state: dicke.DickeDensityMatrix) -> float:
    rotated = dicke.collective_rotation(state, "x", -np.pi / 2.0)
    return dicke.expectations(rotated).sz


def _dicke_row(state, t, delta_nu, readout, record_observables, phase_frame):
    """Observable row; phase_frame restores the detuning phases exp(-i
    delta_nu (m - m') t) that the rotating frame removed."""
    if phase_frame and readout == "pulsed":
        blocks = []
        for j, b in zip(state.j_list, state.blocks):
            m = -j + np.arange(b.shape[0])
            ph = np.exp(-1j * delta_nu * m * t)
            blocks.append(ph[:, None] * b * ph.conj()[None, :])
        state = dicke.DickeDensityMatrix(state.n_atoms, blocks)
        phase_frame = False
    e = dicke.expectations(state)
    splus = e.splus * np.exp(1j * delta_nu * t) if phase_frame else e.splus
    row = {"signal": _pulsed_signal_dicke(state) if readout == "pulsed" else 2.0 * splus.imag}
    if record_observables:
        row.update(
            sz=e.sz,
            spsm_cross=e.spsm_cross,
            corr_minus_product=e.spsm_cross - abs(splus) ** 2,
            alpha_real=e.alpha.real if e.alpha_defined else np.nan,
            alpha_imag=e.alpha.imag if e.alpha_defined else np.nan,
        )
    return row


def _run_dicke(params, t_grid, tol, readout, record_observables, propagator):
    state0 = dicke.collective_rotation(dicke.ground_state(params.n_atoms), "y", np.pi / 2.0)
    if propagator == "auto":
        propagator = "krylov" if dicke.num_coefficients(params.n_atoms) > 20000 else "rk"

    if propagator == "krylov":
        # Every generator term preserves the coherence order m - m', so the
        # detuning superoperator is an exact scalar per order: remove it,
        # integrate the remaining real dissipative flow, restore the phases
        # at each sample.
        params0 = replace(params, delta_nu=0.0)
        gen = dicke._cached_generator(params0)
        mat = gen.sparse_matrix()
        if np.abs(mat.data.imag).max() > 0.0:
            raise ProtocolError("rotating-frame generator is unexpectedly complex")
        import scipy.sparse as sp

        mat_real = sp.csr_matrix((mat.data.real, mat.indices, mat.indptr), shape=mat.shape)
        y0 = state0.to_flat()
        if np.abs(y0.imag).max() > 1e-14:
            raise ProtocolError("post-pulse state should be real in the rotating frame")
        rows = []

        def cb(t, y):
            st = dicke.DickeDensityMatrix.from_flat(params.n_atoms, y.astype(complex))
            rows.append(_dicke_row(st, t, params.delta_nu, readout, record_observables, True))

        expv_sequence(lambda v: mat_real @ v, y0.real.copy(), t_grid, tol=tol, m=40, callback=cb)
        return rows

    gen = dicke._cached_generator(params)
    mat = gen.sparse_matrix()

    def extract(t, y):
        st = dicke.DickeDensityMatrix.from_flat(params.n_atoms, y)
        return _dicke_row(st, t, params.delta_nu, readout, record_observables, False)

    return _sample_adaptive(lambda _t, y: mat @ y, state0.to_flat(), t_grid, tol, extract)


def _run_dense(params, t_grid, tol, readout, record_observables):
    gen = dense.build_generator_atoms(params)
    st0 = dense.rotate_dense(dense.ground_state_dense(params.n_atoms), "y", np.pi / 2.0)
    rho0 = st0.as_density_matrix()
    dim = gen.dim
    mat = gen.matrix
    n = params.n_atoms

    if readout == "pulsed":
        u = dense.rotation_unitary(n, "x", -np.pi / 2.0)

    def extract(_t, y):
        rho = y.reshape(dim, dim)
        state = dense.DenseState("density_matrix", n, rho)
        if readout == "pulsed":
            rot = dense.DenseState("density_matrix", n, u @ rho @ u.conj().T)
            sig = dense.expect_dense(rot, "sigma_z_single").real
        else:
            sig = 2.0 * dense.expect_dense(state, "sigma_plus_single").imag
        row = {"signal": sig}
        if record_observables:
            splus = dense.expect_dense(state, "sigma_plus_single")
            spsm = dense.cross_pair_coherence(state) if n >= 2 else complex("nan")
            spsz = dense.cross_pair_plus_z(state) if n >= 2 else complex("nan")
            sz = dense.expect_dense(state, "sigma_z_single").real
            denom = splus * sz
            alpha = spsz / denom if abs(denom) >= 1e-12 else complex("nan")
            row.update(
                sz=sz,
                spsm_cross=spsm.real,
                corr_minus_product=spsm.real - abs(splus) ** 2,
                alpha_real=alpha.real,
                alpha_imag=alpha.imag,
            )
        return row

    return _sample_adaptive(lambda _t, y: mat @ y, rho0.data.reshape(-1), t_grid, tol, extract)


def _run_cumulant(params, t_grid, tol, record_observables):
    sz, spsm, sp = semiclassical.cumulant_fringe(params, t_grid, tol=tol)
    rows = []
    for k in range(len(t_grid)):
        row = {"signal": 2.0 * sp[k].imag}
        if record_observables:
            row.update(
                sz=sz[k],
                spsm_cross=spsm[k],
                corr_minus_product=spsm[k] - abs(sp[k]) ** 2,
                alpha_real=np.nan,
                alpha_imag=np.nan,
            )
        rows.append(row)
    return rows


def run_ramsey(
    params: ModelParams,
    backend: str,
    t_max: float,
    n_samples: int | None = None,
    tol: float = 1e-9,
    readout: str = "coherence",
    record_observables: bool = False,
    n_trials: int = 200,
    dt: float | None = None,
    base_seed: int = 0,
) -> FringeSeries:
    """Run the full sequence on the requested backend and sample the fringe.

    readout="pulsed" applies the closing pi/2 x pulse at every sample and
    reads the z projection instead (dense and dicke backends only).
    """
    if backend not in BACKENDS:
        raise ProtocolError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    if t_max <= 0:
        raise ProtocolError("t_max must be positive")
    if readout not in ("coherence", "pulsed"):
        raise ProtocolError(f"unknown readout {readout!r}")
    if readout == "pulsed" and backend not in ("dense", "dicke"):
        raise ProtocolError("pulsed readout is implemented for dense and dicke backends")
    if n_samples is None:
        per_period = 40.0 * t_max * max(abs(params.delta_nu), 1.0) / (2.0 * np.pi)
        n_samples = int(min(max(400, per_period), 20000))
    t_grid = np.linspace(0.0, t_max, n_samples)

    observables: dict[str, np.ndarray] = {}
    if backend == "dicke":
        rows = _run_dicke(params, t_grid, tol, readout, record_observables)
    elif backend == "dense":
        rows = _run_dense(params, t_grid, tol, readout, record_observables)
    elif backend == "cumulant":
        rows = _run_cumulant(params, t_grid, tol, record_observables)
    else:
        from . import trajectories

        if dt is None:
            dt = trajectories.default_dt(params)
        records = trajectories.ensemble_run(params, t_max, dt, n_trials, base_seed)
        sig = np.mean([r.conditional_signal for r in records], axis=0)
        sig_times = records[0].times
        sig = np.interp(t_grid, sig_times, sig)
        rows = [{"signal": s} for s in sig]

    signal = np.array([r["signal"] for r in rows])
    for key in rows[0]:
        if key != "signal":
            observables[key] = np.array([r[key] for r in rows])
    if np.max(np.abs(signal)) > 1.0 + 1e-9:
        raise ProtocolError("fringe signal left [-1, 1]; integration is unreliable")
    return FringeSeries(
        times=t_grid,
        signal=signal,
        backend=backend,
        params=params,
        readout=readout,
        observables=observables,
    )


def default_transient_cut(params: ModelParams, t_max: float) -> float:
    """5/w (the phase-locking timescale), clamped to the usable window."""
    cut = 5.0 / params.w if params.w > 0 else 0.0
    try:
        lam_guess = semiclassical.lambda_semiclassical(params)
        if lam_guess > 0:
            cut = min(cut, 1.0 / lam_guess)
    except semiclassical.SteadyStateError:
        pass
    return min(cut, t_max / 4.0)


def _envelope_extrema(times, signal):
    mags = np.abs(signal)
    idx = [
        k
        for k in range(1, len(signal) - 1)
        if mags[k] > mags[k - 1] and mags[k] >= mags[k + 1] and mags[k] > 1e-12
    ]
    return np.array(idx, dtype=int)


def fit_fringe(series: FringeSeries, transient_cut: float | None = None, fix_delta_nu: bool = False) -> FitResult:
    """Two-stage visibility fit.

    Stage 1 regresses log|extrema| linearly in time; stage 2 refines
    (A, lam, delta_nu, phase) by damped least squares on the full
    post-transient series. On refinement failure the stage-1 estimate is
    returned with converged=False.
    """
    if transient_cut is None:
        transient_cut = default_transient_cut(series.params, float(series.times[-1]))
    mask = series.times >= transient_cut
    t = series.times[mask]
    s = series.signal[mask]
    if t.size < 10:
        raise FitError("too few samples beyond the transient cut")
    span_periods = (t[-1] - t[0]) * abs(series.params.delta_nu) / (2.0 * np.pi)
    if span_periods < 5.0:
        raise FitError(f"series spans only {span_periods:.2f} oscillation periods beyond the cut; need >= 5")

    peaks = _envelope_extrema(t, s)
    if peaks.size < 3:
        raise FitError(f"only {peaks.size} usable envelope extrema beyond the cut")
    tp = t[peaks]
    logp = np.log(np.abs(s[peaks]))
    coeffs, cov = np.polyfit(tp, logp, 1, cov=True)
    lam_env = -coeffs[0]
    lam_env_err = float(np.sqrt(max(cov[0, 0], 0.0)))
    amp_env = float(np.exp(coeffs[1]))

    omega0 = abs(series.params.delta_nu)

    def model(x, tt):
        a, lam, om, ph = x
        return a * np.exp(-lam * tt) * np.sin(om * tt + ph)

    best = None
    for phase0 in (0.0, np.pi / 2.0, np.pi, -np.pi / 2.0):
        x0 = np.array([amp_env, lam_env, omega0, phase0])
        if fix_delta_nu:
            def resid(x):
                return model((x[0], x[1], omega0, x[2]), t) - s
            x0_use = np.array([amp_env, lam_env, phase0])
        else:
            def resid(x):
                return model(x, t) - s
            x0_use = x0
        try:
            res = least_squares(resid, x0_use, method="lm", max_nfev=4000)
        except Exception:
            continue
        if best is None or res.cost < best.cost:
            best = res

    if best is None or not np.all(np.isfinite(best.x)):
        return FitResult(
            amplitude=amp_env,
            lam=lam_env,
            delta_nu_fit=omega0,
            phase=0.0,
            rms_residual=float("nan"),
            transient_cut=transient_cut,
            lam_stderr=float("nan"),
            lam_envelope=lam_env,
            lam_envelope_stderr=lam_env_err,
            n_extrema=int(peaks.size),
            converged=False,
        )

    if fix_delta_nu:
        amp, lam, phase = best.x
        om = omega0
    else:
        amp, lam, om, phase = best.x
    if amp < 0:  # absorb the sign into the phase
        amp = -amp
        phase = phase + np.pi
    phase = math.remainder(phase, 2.0 * np.pi)
    rms = float(np.sqrt(2.0 * best.cost / t.size))

    dof = max(t.size - best.x.size, 1)
    try:
        jtj_inv = np.linalg.inv(best.jac.T @ best.jac)
        lam_stderr = float(np.sqrt(jtj_inv[1, 1] * 2.0 * best.cost / dof))
    except np.linalg.LinAlgError:
        lam_stderr = float("nan")

    return FitResult(
        amplitude=float(amp),
        lam=float(lam),
        delta_nu_fit=float(abs(om)),
        phase=float(phase),
        rms_residual=rms,
        transient_cut=transient_cut,
        lam_stderr=lam_stderr,
        lam_envelope=float(lam_env),
        lam_envelope_stderr=lam_env_err,
        n_extrema=int(peaks.size),
        converged=bool(best.success),
    )


def zero_crossings(series: FringeSeries) -> np.ndarray:
    """Interpolated times at which the fringe changes sign."""
    return find_zero_crossings(series.times, series.signal)


@dataclass
class SweepPoint:
    value: float
    lambda_master: float
    lambda_semiclassical: float
    gamma_s: float
    gamma_c: float
    fit: FitResult | None = None
    error: str | None = None


def _auto_protocol(params: ModelParams) -> tuple[float, float]:
    """(t_max, transient_cut) sized from the expected decay rate."""
    try:
        lam_guess = max(semiclassical.lambda_semiclassical(params), 1e-3)
    except semiclassical.SteadyStateError:
        lam_guess = 0.5 * derive_rates(params).gamma_t
    cut = min(5.0 / params.w if params.w > 0 else 0.0, 1.0 / lam_guess)
    window = max(5.0 * 2.0 * np.pi / max(abs(params.delta_nu), 1e-6), min(2.5 / lam_guess, 12.0))
    return cut + window, cut


def _sweep_params(template: ModelParams, axis: str, value: float, w_rule: str | None) -> ModelParams:
    if axis == "w":
        return replace(template, w=float(value))
    if axis == "n_atoms":
        out = replace(template, n_atoms=int(value))
        if w_rule == "half_n_gamma_c":
            gamma_c = out.cooperativity / out.t1
            out = replace(out, w=0.5 * out.n_atoms * gamma_c)
        elif w_rule is not None:
            raise ProtocolError(f"unknown w_rule {w_rule!r}")
        return out
    raise ProtocolError(f"axis must be 'w' or 'n_atoms', got {axis!r}")


def _sweep_one(args) -> SweepPoint:
    template, axis, value, w_rule, t_max, n_samples, tol = args
    params = _sweep_params(template, axis, value, w_rule)
    rates = derive_rates(params)
    try:
        lam_sc = semiclassical.lambda_semiclassical(params)
    except (semiclassical.SteadyStateError, ValueError):
        lam_sc = float("nan")
    try:
        auto_t_max, cut = _auto_protocol(params)
        use_t_max = t_max if t_max is not None else auto_t_max
        cut = min(cut, use_t_max / 4.0)
        series = run_ramsey(params, "dicke", use_t_max, n_samples=n_samples, tol=tol)
        fit = fit_fringe(series, transient_cut=cut)
        return SweepPoint(
            value=float(value),
            lambda_master=fit.lam,
            lambda_semiclassical=lam_sc,
            gamma_s=rates.gamma_s,
            gamma_c=rates.gamma_c,
            fit=fit,
        )
    except Exception as exc:  # per-point failures recorded, sweep continues
        return SweepPoint(
            value=float(value),
            lambda_master=float("nan"),
            lambda_semiclassical=lam_sc,
            gamma_s=rates.gamma_s,
            gamma_c=rates.gamma_c,
            error=f"{type(exc).__name__}: {exc}",
        )


def sweep_lambda(
    params_template: ModelParams,
    axis: str,
    values,
    w_rule: str | None = None,
    t_max: float | None = None,
    n_samples: int | None = None,
    tol: float = 1e-9,
    max_workers: int | None = None,
) -> list[SweepPoint]:
    """Fit the visibility decay rate across a repump or atom-number sweep.

    Each point runs the dicke backend plus the closed-form semiclassical
    rate. w_rule="half_n_gamma_c" re-ties w = N gamma_c / 2 along an
    n_atoms sweep. Points run concurrently; output order follows values.
    """
    values = list(values)
    if not values:
        raise ProtocolError("values must be a nonempty list")
    jobs = [(params_template, axis, v, w_rule, t_max, n_samples, tol) for v in values]
    if max_workers is None:
        import os

        max_workers = min(len(jobs), os.cpu_count() or 1)
    if max_workers <= 1 or len(jobs) == 1:
        return [_sweep_one(job) for job in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_sweep_one, jobs))
