"""Model and scenario types.

A scenario bundles the signal dynamics

    dX_t = a(X_t) dt + b(X_t) dB_t + c(X_{t-}) dJ_t,      J_t = sum_i 1{T_i <= t} xi_i,

the observation process, which is piecewise constant and jumps only at the
scheduled times T_i by

    dY_{T_i} = f(X_{T_i-}, Y_{T_i-}) + eta_i,

the joint mark law of (xi_i, eta_i), and the event schedule (deterministic
times or a threshold rule on the observed Y).  Everything is built from
serializable pieces so scenario files round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import functions
from .errors import (
    HorizonTooShort,
    NegativeDt,
    NonIncreasingTimes,
    NonPSDCovariance,
    UnsupportedScenario,
    ValidationError,
    ZeroConditionalMass,
)

__all__ = [
    "GaussianDistribution",
    "DiscreteDistribution",
    "PointMass",
    "JumpLawSpec",
    "JumpLaw",
    "Schedule",
    "ModelSpec",
    "FilterSettings",
    "ScenarioConfig",
    "ValidatedScenario",
    "validate",
    "conditional_jump_law",
    "scenario_to_dict",
    "scenario_from_dict",
    "scenario_to_json",
    "scenario_from_json",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# small distribution objects returned by conditioning / marginalization


@dataclass(frozen=True)
class GaussianDistribution:
    mean: np.ndarray
    cov: np.ndarray

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        factor = _psd_factor(self.cov)
        z = rng.standard_normal((size, self.cov.shape[0]))
        return self.mean + z @ factor.T

    def log_density(self, x: np.ndarray) -> np.ndarray:
        return _gaussian_log_density(np.atleast_2d(x) - self.mean, self.cov)

    def variance(self) -> np.ndarray:
        return self.cov


@dataclass(frozen=True)
class DiscreteDistribution:
    points: np.ndarray  # (L, d)
    probs: np.ndarray  # (L,)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.choice(len(self.probs), size=size, p=self.probs)
        return self.points[idx]

    def mean(self) -> np.ndarray:
        return self.probs @ self.points

    def variance(self) -> np.ndarray:
        centered = self.points - self.mean()
        return (self.probs[:, None] * centered).T @ centered


@dataclass(frozen=True)
class PointMass:
    point: np.ndarray

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.broadcast_to(self.point, (size, self.point.shape[0])).copy()


# ---------------------------------------------------------------------------
# mark law


@dataclass(frozen=True)
class JumpLawSpec:
    """Serializable description of the i.i.d. mark law of (xi_i, eta_i).

    kind: one of "gaussian_product", "gaussian_joint", "discrete",
    "degenerate_xi_zero".  Fields not used by a kind stay None.
    """

    kind: str
    q: tuple | None = None  # xi covariance (gaussian_product)
    r: tuple | None = None  # eta covariance (gaussian_product, degenerate_xi_zero)
    cov: tuple | None = None  # joint covariance (gaussian_joint)
    points: tuple | None = None  # atoms in R^{m+n} (discrete)
    probs: tuple | None = None  # atom probabilities (discrete)
    match_tol: float = 1e-9  # atom matching tolerance for conditioning


class JumpLaw:
    """A mark law bound to model dimensions, with sampling and densities.

    Built by `validate`; exposes the eta marginal (reference observation
    noise law), the xi marginal (for integrating the jump part of the
    generator), and exact conditioning of xi on an observed eta.
    """

    def __init__(self, spec: JumpLawSpec, m: int, n: int):
        self.spec = spec
        self.m = m
        self.n = n
        kind = spec.kind
        if kind == "gaussian_product":
            self.Q = _check_psd(np.asarray(spec.q, dtype=float).reshape(m, m), "Q")
            self.R = _check_psd(np.asarray(spec.r, dtype=float).reshape(n, n), "R")
            self._q_factor = _psd_factor(self.Q)
            self._r_factor = _psd_factor(self.R)
        elif kind == "gaussian_joint":
            d = m + n
            self.cov = _check_psd(np.asarray(spec.cov, dtype=float).reshape(d, d), "joint cov")
            self.Sxx = self.cov[:m, :m]
            self.Sxe = self.cov[:m, m:]
            self.See = self.cov[m:, m:]
            if np.linalg.matrix_rank(self.See) < n:
                raise NonPSDCovariance("gaussian_joint eta block must be nonsingular")
            self._gain = np.linalg.solve(self.See, self.Sxe.T).T  # Sxe See^-1
            self._cond_cov = _check_psd(
                _symmetrize(self.Sxx - self._gain @ self.Sxe.T), "conditional cov"
            )
            self._joint_factor = _psd_factor(self.cov)
        elif kind == "discrete":
            pts = np.asarray(spec.points, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != m + n:
                raise ValidationError(f"discrete law atoms must have {m + n} columns")
            probs = np.asarray(spec.probs, dtype=float)
            if probs.shape != (pts.shape[0],) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
                raise ValidationError("discrete law probabilities must be nonnegative and sum to 1")
            self.points = pts
            self.probs = probs
        elif kind == "degenerate_xi_zero":
            self.R = _check_psd(np.asarray(spec.r, dtype=float).reshape(n, n), "R")
            self._r_factor = _psd_factor(self.R)
        else:
            raise ValidationError(f"unknown jump law kind: {kind!r}")

    # -- sampling ---------------------------------------------------------

    def sample_marks(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw (xi (size, m), eta (size, n)) jointly."""
        kind = self.spec.kind
        if kind == "gaussian_product":
            xi = rng.standard_normal((size, self.m)) @ self._q_factor.T
            eta = rng.standard_normal((size, self.n)) @ self._r_factor.T
            return xi, eta
        if kind == "gaussian_joint":
            z = rng.standard_normal((size, self.m + self.n)) @ self._joint_factor.T
            return z[:, : self.m], z[:, self.m :]
        if kind == "discrete":
            idx = rng.choice(len(self.probs), size=size, p=self.probs)
            z = self.points[idx]
            return z[:, : self.m], z[:, self.m :]
        if kind == "degenerate_xi_zero":
            eta = rng.standard_normal((size, self.n)) @ self._r_factor.T
            return np.zeros((size, self.m)), eta
        raise AssertionError(kind)

    # -- eta marginal -----------------------------------------------------

    @property
    def eta_has_density(self) -> bool:
        if self.spec.kind == "discrete":
            return False
        return True

    @property
    def eta_cov(self) -> np.ndarray:
        kind = self.spec.kind
        if kind in {"gaussian_product", "degenerate_xi_zero"}:
            return self.R
        if kind == "gaussian_joint":
            return self.See
        if kind == "discrete":
            eta = self.points[:, self.m :]
            mean = self.probs @ eta
            centered = eta - mean
            return (self.probs[:, None] * centered).T @ centered
        raise AssertionError(kind)

    def eta_log_density(self, e: np.ndarray) -> np.ndarray:
        """Log density (or log mass within match_tol, for discrete laws) of eta."""
        e2 = np.atleast_2d(np.asarray(e, dtype=float))
        kind = self.spec.kind
        if kind in {"gaussian_product", "degenerate_xi_zero"}:
            return _gaussian_log_density(e2, self.R)
        if kind == "gaussian_joint":
            return _gaussian_log_density(e2, self.See)
        if kind == "discrete":
            mass = self._eta_match_mass(e2)
            with np.errstate(divide="ignore"):
                return np.log(mass)
        raise AssertionError(kind)

    def _eta_match_mass(self, e2: np.ndarray) -> np.ndarray:
        eta_atoms = self.points[:, self.m :]
        dist = np.max(np.abs(e2[:, None, :] - eta_atoms[None, :, :]), axis=2)
        return (dist <= self.spec.match_tol) @ self.probs

    # -- xi marginal ------------------------------------------------------

    def xi_marginal(self):
        kind = self.spec.kind
        if kind == "gaussian_product":
            return GaussianDistribution(np.zeros(self.m), self.Q)
        if kind == "gaussian_joint":
            return GaussianDistribution(np.zeros(self.m), self.Sxx)
        if kind == "discrete":
            return DiscreteDistribution(self.points[:, : self.m], self.probs)
        if kind == "degenerate_xi_zero":
            return PointMass(np.zeros(self.m))
        raise AssertionError(kind)

    def xi_is_zero(self) -> bool:
        return self.spec.kind == "degenerate_xi_zero"

    # -- conditioning -----------------------------------------------------

    def conditional_xi(self, eta0: np.ndarray):
        """Law of xi given eta = eta0 (exact for every supported kind)."""
        eta0 = np.atleast_1d(np.asarray(eta0, dtype=float)).reshape(self.n)
        kind = self.spec.kind
        if kind == "gaussian_product":
            return GaussianDistribution(np.zeros(self.m), self.Q)
        if kind == "gaussian_joint":
            return GaussianDistribution(self._gain @ eta0, self._cond_cov)
        if kind == "discrete":
            mask = np.max(np.abs(self.points[:, self.m :] - eta0), axis=1) <= self.spec.match_tol
            mass = self.probs[mask].sum()
            if mass <= 0.0:
                raise ZeroConditionalMass(f"no atoms with eta within {self.spec.match_tol} of {eta0}")
            return DiscreteDistribution(self.points[mask, : self.m], self.probs[mask] / mass)
        if kind == "degenerate_xi_zero":
            return PointMass(np.zeros(self.m))
        raise AssertionError(kind)

    def sample_xi_given_eta(self, rng: np.random.Generator, eta_hat: np.ndarray) -> np.ndarray:
        """Vectorized conditional draw: one xi per row of eta_hat (N, n)."""
        eta_hat = np.atleast_2d(np.asarray(eta_hat, dtype=float))
        size = eta_hat.shape[0]
        kind = self.spec.kind
        if kind == "degenerate_xi_zero":
            return np.zeros((size, self.m))
        if kind == "gaussian_product":
            return rng.standard_normal((size, self.m)) @ self._q_factor.T
        if kind == "gaussian_joint":
            factor = _psd_factor(self._cond_cov)
            return eta_hat @ self._gain.T + rng.standard_normal((size, self.m)) @ factor.T
        if kind == "discrete":
            eta_atoms = self.points[:, self.m :]
            match = (
                np.max(np.abs(eta_hat[:, None, :] - eta_atoms[None, :, :]), axis=2)
                <= self.spec.match_tol
            )
            weights = match * self.probs
            mass = weights.sum(axis=1)
            out = np.zeros((size, self.m))
            ok = mass > 0
            if np.any(ok):
                w = weights[ok] / mass[ok, None]
                cum = np.cumsum(w, axis=1)
                u = rng.random(ok.sum())
                idx = (u[:, None] > cum[:, :-1]).sum(axis=1) if w.shape[1] > 1 else np.zeros(ok.sum(), int)
                out[ok] = self.points[idx, : self.m]
            # rows with no matching atom carry zero likelihood upstream;
            # xi = 0 placeholder keeps the array finite
            return out
        raise AssertionError(kind)


def conditional_jump_law(law: JumpLaw, eta0: np.ndarray):
    """Law of xi given eta = eta0; module-level alias for `JumpLaw.conditional_xi`."""
    return law.conditional_xi(eta0)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Schedule:
    """Event schedule: fixed times, or thresholds checked on an observation grid.

    For kind "deterministic", `times` are strictly increasing positive times.
    For kind "threshold", `thresholds` are strictly decreasing levels
    (theta_K > ... > theta_1, listed in that order) checked against the
    observed Y at grid points; threshold i triggers at the first grid time
    with Y <= theta_i, at most once, never resetting.  Untriggered
    thresholds have event time +inf.
    """

    kind: str
    times: tuple = ()
    thresholds: tuple = ()
    obs_grid: tuple = ()

    @property
    def n_events(self) -> int:
        if self.kind == "deterministic":
            return len(self.times)
        return len(self.thresholds)


# ---------------------------------------------------------------------------
# model, filter settings, scenario


@dataclass(frozen=True)
class ModelSpec:
    """Signal/observation model in descriptor form."""

    m: int
    n: int
    x0: tuple
    drift: dict
    diffusion: dict
    jump_coeff: dict
    obs_fn: dict
    jump_law: JumpLawSpec


@dataclass(frozen=True)
class FilterSettings:
    n_particles: int = 20_000
    resample_threshold: float = 0.5
    grid_nodes: int = 2000
    grid_halfwidth_sds: float = 8.0
    reporting_dt: float = 0.05
    quad_order_jump: int = 20
    quad_order_event: int = 64


@dataclass(frozen=True)
class ScenarioConfig:
    model: ModelSpec
    schedule: Schedule
    horizon: float
    dt: float
    seed: int
    filters: FilterSettings = field(default_factory=FilterSettings)
    preset: str = "custom"


@dataclass(frozen=True)
class ValidatedScenario:
    """A checked scenario with compiled coefficient callables.

    Treat as immutable; safe to share across workers.  `config` preserves
    the exact serializable form.
    """

    config: ScenarioConfig
    m: int
    n: int
    x0: np.ndarray
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    jump_coeff: Callable[[np.ndarray], np.ndarray]
    obs_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jump_law: JumpLaw

    @property
    def schedule(self) -> Schedule:
        return self.config.schedule

    @property
    def horizon(self) -> float:
        return self.config.horizon

    @property
    def dt(self) -> float:
        return self.config.dt

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def filters(self) -> FilterSettings:
        return self.config.filters

    def with_overrides(self, **changes: Any) -> "ValidatedScenario":
        """Revalidate with top-level config fields replaced."""
        filter_fields = {k: v for k, v in changes.items() if hasattr(FilterSettings(), k)}
        config_fields = {k: v for k, v in changes.items() if k not in filter_fields}
        cfg = replace(self.config, **config_fields)
        if filter_fields:
            cfg = replace(cfg, filters=replace(cfg.filters, **filter_fields))
        return validate(cfg)


def validate(config: ScenarioConfig) -> ValidatedScenario:
    """Check a scenario and compile its coefficient functions.

    Raises subclasses of ValidationError on malformed input.
    """
    model = config.model
    m, n = model.m, model.n
    if m < 1 or n < 1:
        raise ValidationError("state and observation dimensions must be >= 1")
    if config.dt <= 0:
        raise NegativeDt(f"dt must be positive, got {config.dt}")
    if config.horizon <= 0:
        raise ValidationError(f"horizon must be positive, got {config.horizon}")
    if config.seed < 0:
        raise ValidationError("seed must be nonnegative")

    x0 = np.asarray(model.x0, dtype=float).reshape(-1)
    if x0.shape != (m,):
        raise ValidationError(f"x0 must have length {m}, got {x0.shape}")

    _validate_schedule(config.schedule, config.horizon)
    _validate_filter_settings(config.filters)

    law = JumpLaw(model.jump_law, m, n)

    probe = _probe_states(x0, m)
    for role, desc in [
        ("drift", model.drift),
        ("diffusion", model.diffusion),
        ("jump_coeff", model.jump_coeff),
        ("obs", model.obs_fn),
    ]:
        functions.validate_descriptor(desc, role, m, n, probe)

    return ValidatedScenario(
        config=config,
        m=m,
        n=n,
        x0=x0,
        drift=functions.compile_drift(model.drift, m),
        diffusion=functions.compile_matrix_fn(model.diffusion, m),
        jump_coeff=functions.compile_matrix_fn(model.jump_coeff, m),
        obs_fn=functions.compile_obs_fn(model.obs_fn, m, n),
        jump_law=law,
    )


def _validate_schedule(schedule: Schedule, horizon: float) -> None:
    if schedule.kind == "deterministic":
        times = np.asarray(schedule.times, dtype=float)
        if times.size and (np.any(times <= 0) or np.any(np.diff(times) <= 0)):
            raise NonIncreasingTimes("deterministic times must be strictly increasing and positive")
        # trailing times beyond the horizon are dropped (with a warning) at
        # simulation; a horizon that covers no event at all is a config error
        if times.size and times[0] > horizon:
            raise HorizonTooShort(
                f"horizon {horizon} lies before the first scheduled time {times[0]}"
            )
    elif schedule.kind == "threshold":
        thr = np.asarray(schedule.thresholds, dtype=float)
        if thr.size == 0:
            raise ValidationError("threshold schedule needs at least one threshold")
        if np.any(np.diff(thr) >= 0):
            raise NonIncreasingTimes("thresholds must be strictly decreasing")
        grid = np.asarray(schedule.obs_grid, dtype=float)
        if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
            raise NonIncreasingTimes("observation grid must be strictly increasing and positive")
        if grid[-1] > horizon:
            raise HorizonTooShort("horizon does not cover the observation grid")
    else:
        raise ValidationError(f"unknown schedule kind: {schedule.kind!r}")


def _validate_filter_settings(fs: FilterSettings) -> None:
    if fs.n_particles < 2:
        raise ValidationError("n_particles must be >= 2")
    if not 0.0 <= fs.resample_threshold <= 1.0:
        raise ValidationError("resample_threshold must lie in [0, 1]")
    if fs.grid_nodes < 16:
        raise ValidationError("grid_nodes must be >= 16")
    if fs.grid_halfwidth_sds <= 0:
        raise ValidationError("grid_halfwidth_sds must be positive")
    if fs.reporting_dt <= 0:
        raise NegativeDt("reporting_dt must be positive")
    if fs.quad_order_jump < 20 or fs.quad_order_event < 40:
        raise ValidationError("quadrature orders below the supported minimum")


def _probe_states(x0: np.ndarray, m: int) -> np.ndarray:
    offsets = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    probe = x0[None, :] * (1.0 + 0.1 * offsets[:, None]) + offsets[:, None]
    return probe.reshape(-1, m)


# ---------------------------------------------------------------------------
# serialization (exact JSON round trip)


def scenario_to_dict(config: ScenarioConfig) -> dict:
    model = config.model
    law = model.jump_law
    law_dict: dict[str, Any] = {"kind": law.kind}
    for fname in ("q", "r", "cov", "points", "probs"):
        value = getattr(law, fname)
        if value is not None:
            law_dict[fname] = _nested_list(value)
    if law.kind == "discrete":
        law_dict["match_tol"] = law.match_tol
    sched = config.schedule
    sched_dict: dict[str, Any] = {"kind": sched.kind}
    if sched.kind == "deterministic":
        sched_dict["times"] = list(sched.times)
    else:
        sched_dict["thresholds"] = list(sched.thresholds)
        sched_dict["obs_grid"] = list(sched.obs_grid)
    fs = config.filters
    return {
        "preset": config.preset,
        "model": {
            "m": model.m,
            "n": model.n,
            "x0": list(model.x0),
            "drift": model.drift,
            "diffusion": model.diffusion,
            "jump_coeff": model.jump_coeff,
            "obs_fn": model.obs_fn,
            "jump_law": law_dict,
        },
        "schedule": sched_dict,
        "horizon": config.horizon,
        "dt": config.dt,
        "seed": config.seed,
        "filters": {
            "n_particles": fs.n_particles,
            "resample_threshold": fs.resample_threshold,
            "grid_nodes": fs.grid_nodes,
            "grid_halfwidth_sds": fs.grid_halfwidth_sds,
            "reporting_dt": fs.reporting_dt,
            "quad_order_jump": fs.quad_order_jump,
            "quad_order_event": fs.quad_order_event,
        },
    }


def scenario_from_dict(data: dict) -> ScenarioConfig:
    try:
        mdl = data["model"]
        law_data = dict(mdl["jump_law"])
        kind = law_data.pop("kind")
        law = JumpLawSpec(
            kind=kind,
            q=_nested_tuple(law_data.get("q")),
            r=_nested_tuple(law_data.get("r")),
            cov=_nested_tuple(law_data.get("cov")),
            points=_nested_tuple(law_data.get("points")),
            probs=_nested_tuple(law_data.get("probs")),
            match_tol=law_data.get("match_tol", 1e-9),
        )
        model = ModelSpec(
            m=int(mdl["m"]),
            n=int(mdl["n"]),
            x0=tuple(mdl["x0"]),
            drift=mdl["drift"],
            diffusion=mdl["diffusion"],
            jump_coeff=mdl["jump_coeff"],
            obs_fn=mdl["obs_fn"],
            jump_law=law,
        )
        sched_data = data["schedule"]
        schedule = Schedule(
            kind=sched_data["kind"],
            times=tuple(sched_data.get("times", ())),
            thresholds=tuple(sched_data.get("thresholds", ())),
            obs_grid=tuple(sched_data.get("obs_grid", ())),
        )
        filters = FilterSettings(**data.get("filters", {}))
        return ScenarioConfig(
            model=model,
            schedule=schedule,
            horizon=float(data["horizon"]),
            dt=float(data["dt"]),
            seed=int(data["seed"]),
            filters=filters,
            preset=data.get("preset", "custom"),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed scenario dictionary: {exc}") from exc


def scenario_to_json(config: ScenarioConfig) -> str:
    return json.dumps(scenario_to_dict(config), indent=2, sort_keys=True)


def scenario_from_json(text: str) -> ScenarioConfig:
    return scenario_from_dict(json.loads(text))


def _nested_list(value: Any):
    if isinstance(value, tuple):
        return [_nested_list(v) for v in value]
    return value


def _nested_tuple(value: Any):
    if isinstance(value, list):
        return tuple(_nested_tuple(v) for v in value)
    return value


# ---------------------------------------------------------------------------
# numeric helpers


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def _check_psd(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise NonPSDCovariance(f"{name} must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise NonPSDCovariance(f"{name} must be symmetric")
    eigvals = np.linalg.eigvalsh(_symmetrize(mat))
    if eigvals.size and eigvals.min() < -1e-12 * max(1.0, abs(eigvals.max())):
        raise NonPSDCovariance(f"{name} has negative eigenvalue {eigvals.min()}")
    return _symmetrize(mat)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Factor L with L L^T = cov, tolerant of zero eigenvalues."""
    cov = _symmetrize(np.asarray(cov, dtype=float))
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.clip(eigvals, 0.0, None)
    return eigvecs * np.sqrt(eigvals)


def _gaussian_log_density(e2: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Rows of e2 against N(0, cov); degenerate directions are rejected."""
    d = cov.shape[0]
    eigvals = np.linalg.eigvalsh(_symmetrize(cov))
    if eigvals.min() <= 0:
        raise NonPSDCovariance("density requested for a singular Gaussian")
    chol = np.linalg.cholesky(_symmetrize(cov))
    sol = np.linalg.solve(chol, e2.T)
    quad_form = np.sum(sol**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * _LOG_2PI + logdet + quad_form)
