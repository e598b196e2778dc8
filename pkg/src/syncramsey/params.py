"""Model parameters, derived rates and regime diagnostics.

All times are expressed in units of the excited-state lifetime T1 and all
rates in 1/T1; the conventional choice is ``t1 = 1.0`` so that every other
rate is dimensionless. Nothing enforces that choice: rescaling (t1, t2) by s
and w by 1/s rescales every derived rate by 1/s.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    """Raised for invalid parameter values or malformed configuration files."""


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the driven, cavity-coupled ensemble.

    Parameters
    ----------
    n_atoms : int
        Number of two-level atoms.
    delta_nu : float
        Atom/local-oscillator detuning (angular frequency, units 1/t1).
        The default 10/T1 is a tooling default, not a physically preferred
        value; configuration files should set it explicitly.
    t1 : float
        Excited-state lifetime.
    t2 : float
        Dephasing time.
    w : float
        Incoherent repumping rate.
    cooperativity : float
        Dimensionless cavity cooperativity C; the collective decay rate is
        C/t1.
    g, kappa, n_photon_max : optional
        Single-atom cavity coupling, cavity linewidth and photon-space
        cutoff. Only the explicit atom-cavity solver needs these.
    """

    n_atoms: int
    delta_nu: float = 10.0
    t1: float = 1.0
    t2: float = 1.0
    w: float = 0.0
    cooperativity: float = 0.0
    g: float | None = None
    kappa: float | None = None
    n_photon_max: int | None = None

    def __post_init__(self):
        if not isinstance(self.n_atoms, int) or self.n_atoms < 1:
            raise ConfigError(f"n_atoms must be a positive integer, got {self.n_atoms!r}")
        if not (self.t1 > 0):
            raise ConfigError(f"t1 must be positive, got {self.t1}")
        if not (self.t2 > 0):
            raise ConfigError(f"t2 must be positive, got {self.t2}")
        if self.w < 0:
            raise ConfigError(f"w must be non-negative, got {self.w}")
        if self.cooperativity < 0:
            raise ConfigError(f"cooperativity must be non-negative, got {self.cooperativity}")
        if self.kappa is not None and not (self.kappa > 0):
            raise ConfigError(f"kappa must be positive when given, got {self.kappa}")
        if self.n_photon_max is not None and self.n_photon_max < 1:
            raise ConfigError(f"n_photon_max must be >= 1 when given, got {self.n_photon_max}")

    @property
    def has_cavity(self) -> bool:
        return self.g is not None and self.kappa is not None and self.n_photon_max is not None


@dataclass(frozen=True)
class Rates:
    """Derived decay rates.

    gamma_c : collective decay rate C/T1.
    gamma_s : single-atom decoherence rate (1/T1 + 1/T2)/2.
    gamma_t : total coherence decay rate 2*gamma_s + w + gamma_c.
    """

    gamma_c: float
    gamma_s: float
    gamma_t: float


@dataclass(frozen=True)
class RegimeReport:
    """Advisory diagnostics; never blocks a run.

    bad_cavity is None when the cavity parameters are absent.
    """

    bad_cavity: bool | None
    synchronizing: bool
    rabi_to_linewidth: float | None
    w_over_gamma_s: float
    gamma_s_over_gamma_c: float


def derive_rates(params: ModelParams) -> Rates:
    """Compute (gamma_c, gamma_s, gamma_t) from the model parameters."""
    gamma_c = params.cooperativity / params.t1
    gamma_s = 0.5 * (1.0 / params.t1 + 1.0 / params.t2)
    gamma_t = 2.0 * gamma_s + params.w + gamma_c
    return Rates(gamma_c=gamma_c, gamma_s=gamma_s, gamma_t=gamma_t)


def validate_regime(params: ModelParams) -> RegimeReport:
    """Flag whether the parameters sit in the bad-cavity, synchronizing regime."""
    rates = derive_rates(params)
    if params.g is not None and params.kappa is not None:
        ratio = math.sqrt(params.n_atoms) * params.g / params.kappa
        bad_cavity = ratio < 0.1
    else:
        ratio = None
        bad_cavity = None
    synchronizing = params.w > rates.gamma_s and rates.gamma_s > rates.gamma_c
    gs_over_gc = rates.gamma_s / rates.gamma_c if rates.gamma_c > 0 else math.inf
    return RegimeReport(
        bad_cavity=bad_cavity,
        synchronizing=synchronizing,
        rabi_to_linewidth=ratio,
        w_over_gamma_s=params.w / rates.gamma_s,
        gamma_s_over_gamma_c=gs_over_gc,
    )


# Run-protocol settings accepted in the optional "run" section of a config
# file. These drive the CLI commands, not the physics.
_RUN_KEYS = {
    "t_max": float,
    "n_samples": int,
    "dt": float,
    "transient_cut": float,
    "n_record": int,
    "w_rule": str,
}


@dataclass(frozen=True)
class RunSettings:
    """Protocol settings read from the optional "run" config section."""

    t_max: float | None = None
    n_samples: int | None = None
    dt: float | None = None
    transient_cut: float | None = None
    n_record: int | None = None
    w_rule: str | None = None


def parse_config(raw: dict) -> tuple[ModelParams, RunSettings]:
    """Validate a decoded config dict; unknown keys are an error."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = dict(raw)
    run_raw = raw.pop("run", {})
    if not isinstance(run_raw, dict):
        raise ConfigError('"run" section must be a JSON object')

    known = {f.name for f in fields(ModelParams)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "n_atoms" not in raw:
        raise ConfigError('config must set "n_atoms"')

    unknown_run = set(run_raw) - set(_RUN_KEYS)
    if unknown_run:
        raise ConfigError(f"unknown run-section keys: {sorted(unknown_run)}")
    run_kwargs = {}
    for key, value in run_raw.items():
        caster = _RUN_KEYS[key]
        try:
            run_kwargs[key] = caster(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"run.{key}: {exc}") from exc

    try:
        params = ModelParams(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return params, RunSettings(**run_kwargs)


def load_config(path) -> tuple[ModelParams, RunSettings]:
    """Read and validate a JSON configuration file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return parse_config(raw)
