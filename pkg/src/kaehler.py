"""
Kaehler Structure - L2 metric, fiber-integrated 2-form and their checks

On a world-sheet with normal fields v, w:

    h(v, w)     = sum_p W dvol sigma g(v, w)
    omega(v, w) = sum_p W Omega(w, v, e_1, ..., e_k)        (C3)
    lambda(v)   = -sum_p W Upsilon(v, e_1, ..., e_k)        (d Upsilon = Omega)

with the pointwise identity sigma g(v, w) dvol = Omega(w, J v, e...) giving
h(v, w) = omega(J v, w) up to roundoff on every grid.

Derivatives on the space of sheets use projection extensions: a frozen
ambient field a(p) defines the field P_S' a on every nearby sheet S'.
Directional derivatives and Lie brackets are central differences in the
perturbation chart, and brackets are projected back to the normal bundle.

Sweeps pair each finite-difference step with a grid (coarse grid for the
largest step) so that residuals measure the continuum identity and decay
at the rate of both discretizations.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ambient import ExpressionForm, MetricSpace, exterior_derivative_residual
from sheet import (
    DiscreteSheet, NormalField, normal_frame, perturb, project_normal, rotate_J,
)

DEFAULT_EPSILONS = (1e-2, 5e-3, 2.5e-3)
ROUNDOFF_FLOOR = 1e-11
RANDOM_FIELD_AMPLITUDE = 0.05


class KaehlerError(ValueError):
    """Base class for failures in the Kaehler checks."""


class PotentialMismatchError(KaehlerError):
    """d(Upsilon) differs from the volume form."""

    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(f"Potential does not satisfy d(Upsilon) = Omega (residual {residual:.3e})")


class SweepSpecError(KaehlerError):
    """Invalid refinement sweep settings."""


# ----------------------------------------------------------------------------
# Sweep bookkeeping
# ----------------------------------------------------------------------------

@dataclass
class SweepSpec:
    """Finite-difference sweep: steps, trials, seed and the slope criterion."""
    epsilons: Tuple[float, ...] = DEFAULT_EPSILONS
    trials: int = 3
    seed: int = 42
    expected_slope: float = 2.0
    slope_tolerance: float = 0.3
    threshold: float = 1e-4
    refine_grid: bool = True
    one_sided: bool = False     # pass when slope >= expected - tolerance
    floor: float = ROUNDOFF_FLOOR

    def __post_init__(self):
        self.epsilons = tuple(float(e) for e in self.epsilons)
        errors = self.validate()
        if errors:
            raise SweepSpecError("; ".join(errors))

    def validate(self) -> List[str]:
        errors = []
        if not self.epsilons:
            errors.append("epsilons must not be empty")
        if any(e < 1e-6 for e in self.epsilons):
            errors.append("epsilons must be >= 1e-6")
        if any(b >= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            errors.append("epsilons must be strictly decreasing")
        if self.trials < 3:
            errors.append(f"trials must be >= 3, got {self.trials}")
        if self.slope_tolerance < 0:
            errors.append("slope_tolerance must be >= 0")
        return errors

    def rng(self, trial: int) -> np.random.Generator:
        return np.random.default_rng([int(self.seed), int(trial)])

    def to_dict(self) -> dict:
        return {
            "epsilons": list(self.epsilons), "trials": self.trials, "seed": self.seed,
            "expected_slope": self.expected_slope, "slope_tolerance": self.slope_tolerance,
            "threshold": self.threshold, "refine_grid": self.refine_grid,
            "one_sided": self.one_sided, "floor": self.floor,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class SweepResult:
    """Residuals of one named check over a sweep (or a single fixed-grid value)."""
    check: str
    param: str = ""
    grids: List[str] = field(default_factory=list)
    epsilons: List[Optional[float]] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)
    slope: Optional[float] = None
    passed: bool = False
    seed: Optional[int] = None
    wall_time: float = 0.0
    error: Optional[str] = None
    experimental: bool = False
    details: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "check": self.check, "param": self.param, "grids": list(self.grids),
            "epsilons": list(self.epsilons), "residuals": [float(r) for r in self.residuals],
            "slope": self.slope, "passed": self.passed, "seed": self.seed,
            "wall_time": round(self.wall_time, 4), "error": self.error,
            "experimental": self.experimental, "details": dict(self.details),
        }


def fit_slope(epsilons: Sequence[float], residuals: Sequence[float]) -> Optional[float]:
    """Least-squares slope of log(residual) against log(eps); None below 3 usable points."""
    pairs = [(e, r) for e, r in zip(epsilons, residuals) if e and r > 0 and math.isfinite(r)]
    if len(pairs) < 3 or len(pairs) != len(residuals):
        return None
    x = np.log([e for e, _ in pairs])
    y = np.log([r for _, r in pairs])
    return float(np.polyfit(x, y, 1)[0])


def judge(spec: SweepSpec, residuals: Sequence[float], slope: Optional[float]) -> bool:
    """
    A sweep passes when every residual sits at the roundoff floor, or when the
    fitted slope meets the criterion and the smallest-step residual is below
    the threshold.
    """
    if not residuals or not all(math.isfinite(r) for r in residuals):
        return False
    if max(residuals) <= spec.floor:
        return True
    if slope is None:
        return False
    low = spec.expected_slope - spec.slope_tolerance
    high = math.inf if spec.one_sided else spec.expected_slope + spec.slope_tolerance
    return low <= slope <= high and residuals[-1] < spec.threshold


def sweep_sheets(sheet: DiscreteSheet, spec: SweepSpec) -> List[DiscreteSheet]:
    """One sheet per step: coarsest grid with the largest step when refining."""
    m = len(spec.epsilons)
    if not spec.refine_grid or sheet.map_exprs is None:
        return [sheet] * m
    return [sheet if level == 0 else sheet.refined_to(sheet.domain.coarsened(level))
            for level in range(m - 1, -1, -1)]


def run_sweep(check: str, sheet: DiscreteSheet, spec: SweepSpec,
              residual: Callable[[DiscreteSheet, float, np.random.Generator], float],
              param: str = "") -> SweepResult:
    """
    Evaluate residual(sheet_i, eps_i, rng) for every step and trial.

    The reported residual per step is the maximum over trials; trial t uses
    the generator seeded with (spec.seed, t) on every grid.
    """
    started = time.perf_counter()
    result = SweepResult(check=check, param=param, seed=spec.seed)
    for eps, grid_sheet in zip(spec.epsilons, sweep_sheets(sheet, spec)):
        worst = 0.0
        for trial in range(spec.trials):
            value = float(residual(grid_sheet, eps, spec.rng(trial)))
            worst = math.nan if math.isnan(value) or math.isnan(worst) else max(worst, value)
        result.grids.append("x".join(str(s) for s in grid_sheet.shape))
        result.epsilons.append(eps)
        result.residuals.append(worst)
    result.slope = fit_slope(result.epsilons, result.residuals)
    result.passed = judge(spec, result.residuals, result.slope)
    result.wall_time = time.perf_counter() - started
    return result


def fixed_result(check: str, sheet: DiscreteSheet, residual: float, threshold: float,
                 seed: Optional[int] = None, param: str = "") -> SweepResult:
    return SweepResult(
        check=check, param=param, grids=["x".join(str(s) for s in sheet.shape)], epsilons=[None],
        residuals=[float(residual)], passed=bool(residual < threshold), seed=seed,
    )


# ----------------------------------------------------------------------------
# Random normal fields
# ----------------------------------------------------------------------------

def _jacobi(values: np.ndarray, sheet: DiscreteSheet, passes: int) -> np.ndarray:
    k = sheet.k
    for _ in range(passes):
        total = values.copy()
        for a, axis in enumerate(sheet.domain.axes):
            if axis.periodic:
                total += np.roll(values, 1, axis=a) + np.roll(values, -1, axis=a)
            else:
                idx = np.arange(axis.samples)
                total += np.take(values, np.clip(idx - 1, 0, axis.samples - 1), axis=a)
                total += np.take(values, np.clip(idx + 1, 0, axis.samples - 1), axis=a)
        values = total / (1 + 2 * k)
    return values


def jacobi_random_field(sheet: DiscreteSheet, rng: np.random.Generator, passes: int = 2) -> NormalField:
    """Seeded frame coefficients, Jacobi-smoothed, times the boundary bump."""
    frame = normal_frame(sheet, align=True)
    coeffs = _jacobi(rng.normal(size=sheet.shape + (2,)), sheet, passes)
    coeffs = coeffs * sheet.domain.bump()[..., None]
    values = coeffs[..., :1] * frame.f1 + coeffs[..., 1:] * frame.f2
    values[sheet.boundary_mask] = 0.0
    return NormalField(values, boundary_zero=True)


def _mode_basis(sheet: DiscreteSheet) -> List[np.ndarray]:
    basis = [np.ones(sheet.shape)]
    for tau, axis in zip(sheet.domain.normalized(), sheet.domain.axes):
        if axis.periodic:
            axis_modes = [np.cos(2 * np.pi * tau), np.sin(2 * np.pi * tau)]
        else:
            axis_modes = [2.0 * tau - 1.0]
        basis = basis + [b * m for b in basis for m in axis_modes]
    return basis


def smooth_random_field(sheet: DiscreteSheet, rng: np.random.Generator,
                        amplitude: float = RANDOM_FIELD_AMPLITUDE) -> NormalField:
    """
    Low-mode random ambient field times the bump, projected to the normal
    planes. Coefficients depend only on the generator, so the same draw
    gives the same continuum field on every grid.
    """
    basis = _mode_basis(sheet)
    coeffs = rng.normal(size=(len(basis), sheet.n))
    ambient = amplitude * np.einsum("m...,mi->...i", np.stack(basis), coeffs)
    ambient = ambient * sheet.domain.bump()[..., None]
    return project_normal(sheet, None, ambient, boundary_zero=True)


# ----------------------------------------------------------------------------
# h and omega
# ----------------------------------------------------------------------------

def _check_pair(sheet: DiscreteSheet, *fields: NormalField) -> None:
    for f in fields:
        if f.values.shape != sheet.vertices.shape:
            raise KaehlerError(
                f"Field on grid {f.values.shape[:-1]} does not belong to sheet grid {sheet.shape}"
            )


def omega_density(sheet: DiscreteSheet, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pointwise Omega(w, v, e_1, ..., e_k)."""
    columns = np.concatenate([w[..., None], v[..., None], sheet.tangents], axis=-1)
    return sheet.metric.volume_form_field(sheet.vertices, columns)


def metric_h(sheet: DiscreteSheet, v: NormalField, w: NormalField) -> float:
    _check_pair(sheet, v, w)
    return float(np.sum(sheet.weights * sheet.dvol * sheet.frame.sigma * sheet.inner(v.values, w.values)))


def form_omega(sheet: DiscreteSheet, v: NormalField, w: NormalField) -> float:
    _check_pair(sheet, v, w)
    return float(np.sum(sheet.weights * omega_density(sheet, v.values, w.values)))


def compatibility_residual(sheet: DiscreteSheet, trials: int = 50, seed: int = 42) -> float:
    """max over seeded field pairs of |h(v, w) - omega(J v, w)|."""
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        v = jacobi_random_field(sheet, rng)
        w = jacobi_random_field(sheet, rng)
        worst = max(worst, abs(metric_h(sheet, v, w) - form_omega(sheet, rotate_J(sheet, None, v), w)))
    return worst


def symmetry_residuals(sheet: DiscreteSheet, trials: int = 100, seed: int = 42) -> Dict[str, float]:
    """
    Algebraic battery: symmetry of h, antisymmetry and J-invariance of omega,
    and the smallest h(v, v) (positive on every world-sheet).
    """
    out = {"h_symmetry": 0.0, "omega_antisymmetry": 0.0, "omega_diagonal": 0.0,
           "omega_J_invariance": 0.0, "h_min_diagonal": math.inf}
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        v = jacobi_random_field(sheet, rng)
        w = jacobi_random_field(sheet, rng)
        jv, jw = rotate_J(sheet, None, v), rotate_J(sheet, None, w)
        out["h_symmetry"] = max(out["h_symmetry"], abs(metric_h(sheet, v, w) - metric_h(sheet, w, v)))
        out["omega_antisymmetry"] = max(out["omega_antisymmetry"],
                                        abs(form_omega(sheet, v, w) + form_omega(sheet, w, v)))
        out["omega_diagonal"] = max(out["omega_diagonal"], abs(form_omega(sheet, v, v)))
        out["omega_J_invariance"] = max(out["omega_J_invariance"],
                                        abs(form_omega(sheet, jv, jw) - form_omega(sheet, v, w)))
        out["h_min_diagonal"] = min(out["h_min_diagonal"], metric_h(sheet, v, v))
    return out


def conformal_invariance_residual(sheet: DiscreteSheet, factor: str, trials: int = 10, seed: int = 42) -> float:
    """max |J_g v - J_{factor g} v|; J depends only on the conformal class."""
    scaled = DiscreteSheet(MetricSpace.conformal(factor, sheet.metric), sheet.domain, sheet.vertices)
    worst = 0.0
    for trial in range(trials):
        v = jacobi_random_field(sheet, np.random.default_rng([seed, trial]))
        diff = rotate_J(sheet, None, v).values - rotate_J(scaled, None, v).values
        worst = max(worst, float(np.max(np.abs(diff))))
    return worst


# ----------------------------------------------------------------------------
# Projection extensions, derivatives and brackets on the space of sheets
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Extension:
    """Vector field S' -> P_S' a (or J P_S' a when twisted) from a frozen ambient a."""
    ambient: np.ndarray
    twisted: bool = False

    @classmethod
    def of(cls, v: NormalField) -> "Extension":
        return cls(v.values)

    def J(self) -> "Extension":
        if self.twisted:
            raise KaehlerError("J of a twisted extension is not a projection extension")
        return Extension(self.ambient, True)

    def at(self, sheet: DiscreteSheet) -> NormalField:
        field_ = project_normal(sheet, None, self.ambient)
        return rotate_J(sheet, None, field_) if self.twisted else field_


def directional_derivative(sheet: DiscreteSheet, along: NormalField,
                           fn: Callable[[DiscreteSheet], object], eps: float):
    """(fn(S + eps a) - fn(S - eps a)) / (2 eps) for scalar- or array-valued fn."""
    plus = fn(perturb(sheet, along, eps))
    minus = fn(perturb(sheet, along, -eps))
    return (np.asarray(plus) - np.asarray(minus)) / (2.0 * eps)


def bracket(sheet: DiscreteSheet, a: Extension, b: Extension, eps: float) -> NormalField:
    """[A, B] = P_S (D_A B - D_B A) by central differences."""
    a0, b0 = a.at(sheet), b.at(sheet)
    d_ab = directional_derivative(sheet, a0, lambda s: b.at(s).values, eps)
    d_ba = directional_derivative(sheet, b0, lambda s: a.at(s).values, eps)
    return project_normal(sheet, None, d_ab - d_ba)


def d_omega_residual(sheet: DiscreteSheet, u: NormalField, v: NormalField, w: NormalField, eps: float) -> float:
    """
    |d omega(u, v, w)| with
        d omega = sum_cyc D_u omega(v~, w~) - sum_cyc omega([u, v]~, w~)
    """
    _check_pair(sheet, u, v, w)
    U, V, W = Extension.of(u), Extension.of(v), Extension.of(w)
    fields = {"u": (U, u), "v": (V, v), "w": (W, w)}
    total = 0.0
    for x, y, z in (("u", "v", "w"), ("v", "w", "u"), ("w", "u", "v")):
        X, x0 = fields[x]
        Y, y0 = fields[y]
        Z, z0 = fields[z]
        total += float(directional_derivative(
            sheet, x0, lambda s, Y=Y, Z=Z: form_omega(s, Y.at(s), Z.at(s)), eps))
        total -= form_omega(sheet, bracket(sheet, X, Y, eps), z0)
    return abs(total)


def _normal_norm(sheet: DiscreteSheet, values: np.ndarray) -> np.ndarray:
    return np.sqrt(np.abs(sheet.frame.sigma * sheet.inner(values, values)))


def nijenhuis_field(sheet: DiscreteSheet, v: NormalField, w: NormalField, eps: float) -> NormalField:
    """tau(v, w) = J[v, w] - [v, J w] - [J v, w] - J[J v, J w]."""
    _check_pair(sheet, v, w)
    V, W = Extension.of(v), Extension.of(w)
    JV, JW = V.J(), W.J()
    def J(f: NormalField) -> NormalField:
        return rotate_J(sheet, None, f)

    tau = (J(bracket(sheet, V, W, eps)) - bracket(sheet, V, JW, eps)
           - bracket(sheet, JV, W, eps) - J(bracket(sheet, JV, JW, eps)))
    return tau


def nijenhuis_residual(sheet: DiscreteSheet, v: NormalField, w: NormalField, eps: float) -> float:
    """Sup over vertices of the normal-plane norm of tau(v, w)."""
    tau = nijenhuis_field(sheet, v, w, eps)
    return float(np.max(_normal_norm(sheet, tau.values)))


# ----------------------------------------------------------------------------
# Potential of omega
# ----------------------------------------------------------------------------

def check_potential(metric: MetricSpace, upsilon: ExpressionForm, points: int = 100, seed: int = 0,
                    tolerance: float = 1e-6) -> float:
    """Verify d(Upsilon) = Omega at random chart points; returns the residual."""
    residual = exterior_derivative_residual(metric, upsilon, metric.random_points(points, np.random.default_rng(seed)))
    if not residual < tolerance:
        raise PotentialMismatchError(residual)
    return residual


def _lambda(sheet: DiscreteSheet, v: np.ndarray, upsilon: ExpressionForm) -> float:
    columns = np.concatenate([v[..., None], sheet.tangents], axis=-1)
    return -float(np.sum(sheet.weights * upsilon.evaluate_field(sheet.vertices, columns)))


def potential_lambda(sheet: DiscreteSheet, v: NormalField, upsilon: ExpressionForm, verify: bool = True) -> float:
    """lambda(v) = -sum W Upsilon(v, e_1..e_k), the sign that makes d lambda = omega."""
    _check_pair(sheet, v)
    if verify:
        check_potential(sheet.metric, upsilon)
    return _lambda(sheet, v.values, upsilon)


def d_lambda_residual(sheet: DiscreteSheet, v: NormalField, w: NormalField, upsilon: ExpressionForm,
                      eps: float, verify: bool = True) -> float:
    """|D_v lambda(w~) - D_w lambda(v~) - omega(v, w)|."""
    _check_pair(sheet, v, w)
    if verify:
        check_potential(sheet.metric, upsilon)
    # lambda([v~, w~]) drops: P (dP) P = 0, so brackets of projection
    # extensions vanish at the base sheet
    V, W = Extension.of(v), Extension.of(w)
    dv = float(directional_derivative(sheet, v, lambda s: _lambda(s, W.at(s).values, upsilon), eps))
    dw = float(directional_derivative(sheet, w, lambda s: _lambda(s, V.at(s).values, upsilon), eps))
    return abs(dv - dw - form_omega(sheet, v, w))


# ----------------------------------------------------------------------------
# Sweeps used by the verification engine
# ----------------------------------------------------------------------------

def sweep_d_omega(sheet: DiscreteSheet, spec: SweepSpec) -> SweepResult:
    def residual(s, eps, rng):
        u, v, w = (smooth_random_field(s, rng) for _ in range(3))
        return d_omega_residual(s, u, v, w, eps)
    return run_sweep("domega", sheet, spec, residual)


def sweep_nijenhuis(sheet: DiscreteSheet, spec: SweepSpec) -> SweepResult:
    """
    tau is pointwise in the grid tangents and vanishes identically for the
    discrete J, so the residual is the central-difference error in eps alone.
    The engine runs it with refine_grid=False.
    """
    def residual(s, eps, rng):
        v, w = smooth_random_field(s, rng), smooth_random_field(s, rng)
        return nijenhuis_residual(s, v, w, eps)
    return run_sweep("nijenhuis", sheet, spec, residual)


def sweep_d_lambda(sheet: DiscreteSheet, spec: SweepSpec, upsilon: ExpressionForm) -> SweepResult:
    pre = check_potential(sheet.metric, upsilon)

    def residual(s, eps, rng):
        v, w = smooth_random_field(s, rng), smooth_random_field(s, rng)
        return d_lambda_residual(s, v, w, upsilon, eps, verify=False)
    result = run_sweep("dlambda", sheet, spec, residual)
    result.details["potential_residual"] = pre
    return result

