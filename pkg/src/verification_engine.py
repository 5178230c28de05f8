"""
Verification Engine - runs the checks of a scenario

Builds the metric and the sheet described by a ScenarioManager, runs every
requested check (optionally several at once on a thread pool) and returns
one SweepResult per check in the listed order. Progress is reported
through status and log callbacks.
"""

import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Callable, Dict, List, Optional

import numpy as np

from ambient import ExpressionForm
from flows import CONSISTENCY_LIMIT, FlowConfig, FlowReport, GradientFlow
from kaehler import (
    SweepResult, SweepSpec, compatibility_residual, fixed_result, jacobi_random_field, run_sweep,
    smooth_random_field, sweep_d_lambda, sweep_d_omega, sweep_nijenhuis, symmetry_residuals,
)
from scenario_manager import CheckConfig, ScenarioManager
from sheet import DiscreteSheet, build_sheet, rotate_J
from twistor import (
    LIFT_STEP, RankDeviationError, cr_dimensions, expected_dimensions, gauss_lift, legendrian_residual,
    levi_form, lift_gauge, lift_normal_field, observable_residual, random_twistor_point, synthetic_sheet,
    theta_residual, twistor_form, vertical_field,
)

# Sweep settings that differ from the SweepSpec defaults for a given check.
# The Nijenhuis tensor is pointwise in the grid tangent stencil, so its sweep
# stays on the scenario grid and measures the step error alone.
SWEEP_DEFAULTS: Dict[str, dict] = {
    "nijenhuis": {"refine_grid": False},
    "dlambda": {"threshold": 1e-2},
    "lift_theta": {"one_sided": True, "threshold": 1e-2},
    "legendrian": {"expected_slope": 1.0, "slope_tolerance": 0.0, "one_sided": True, "threshold": math.inf},
    "observable": {"threshold": 1e-2},
}

SEPARATION_THRESHOLD = 1e-2
LEVI_STABILITY = 0.1

CHECK_ERRORS = (ValueError, ArithmeticError, np.linalg.LinAlgError)


class CheckState(Enum):
    """Enumeration of engine states"""
    IDLE = "Idle"
    RUNNING = "Running"
    PASSED = "Passed"
    FAILED = "Failed"
    ERROR = "Error"


class VerificationEngine:
    """
    Runs the checks of one scenario.

    Checks share the base sheet read-only; every randomized check seeds its
    own generators from (seed, trial), so results do not depend on how
    checks are scheduled.
    """

    def __init__(self, scenario: ScenarioManager):
        """
        Initialize the engine.

        Args:
            scenario: A validated scenario
        """
        self.scenario = scenario
        self.state = CheckState.IDLE
        self.results: List[SweepResult] = []
        self.flow_report: Optional[FlowReport] = None
        self.metric = None
        self.sheet: Optional[DiscreteSheet] = None
        self.sheet_error: Optional[str] = None
        self._lock = threading.Lock()

        # Callbacks
        self.status_callback: Optional[Callable] = None
        self.log_callback: Optional[Callable] = None

        # Statistics
        self.completed = 0
        self.passed = 0
        self.failed = 0
        self.start_time: Optional[float] = None

    def set_status_callback(self, callback: Callable[[CheckState, dict], None]):
        """
        Set callback for status updates.

        Args:
            callback: Function(state, stats_dict) called after every check
        """
        self.status_callback = callback

    def set_log_callback(self, callback: Callable[[str, str], None]):
        """
        Set callback for log messages.

        Args:
            callback: Function(level, message) called for logging
                     level: "DEBUG", "INFO", "WARNING", "ERROR"
        """
        self.log_callback = callback

    def prepare(self) -> Optional[DiscreteSheet]:
        """
        Build the metric and the base sheet. A sheet that fails the world-sheet
        conditions is recorded in sheet_error instead of raising.
        """
        self.metric = self.scenario.build_metric()
        try:
            self.sheet = build_sheet(self.metric, self.scenario.build_domain(), self.scenario.sheet.map)
            self.sheet_error = None
            self._log("INFO", self.sheet.describe())
        except CHECK_ERRORS as e:
            self.sheet = None
            self.sheet_error = f"{type(e).__name__}: {e}"
            self._log("ERROR", f"Sheet rejected: {self.sheet_error}")
        return self.sheet

    def run(self, jobs: int = 1) -> List[SweepResult]:
        """
        Run all checks of the scenario.

        Args:
            jobs: Number of checks run concurrently

        Returns:
            One result per listed check, in listed order
        """
        self.results = []
        self.flow_report = None
        self.completed = self.passed = self.failed = 0
        self.start_time = time.perf_counter()
        self._update_state(CheckState.RUNNING)
        try:
            self.prepare()
        except CHECK_ERRORS as e:
            self._log("ERROR", f"Metric could not be built: {e}")
            self._update_state(CheckState.ERROR)
            raise

        checks = list(self.scenario.checks)
        self._log("INFO", f"Running {len(checks)} check(s) with {max(1, jobs)} job(s)")
        if jobs > 1 and len(checks) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                self.results = list(pool.map(self._run_check, checks))
        else:
            self.results = [self._run_check(check) for check in checks]

        all_passed = all(r.passed for r in self.results)
        self._update_state(CheckState.PASSED if all_passed else CheckState.FAILED)
        return self.results

    def get_stats(self) -> dict:
        """
        Get current run statistics.

        Returns:
            Dictionary with state, completed/total counts and elapsed time
        """
        elapsed = time.perf_counter() - self.start_time if self.start_time else 0.0
        return {
            "state": self.state.value,
            "completed": self.completed,
            "total": len(self.scenario.checks),
            "passed": self.passed,
            "failed": self.failed,
            "elapsed_seconds": round(elapsed, 3),
        }

    # -------------------------------------------------------------------------
    # Check dispatch
    # -------------------------------------------------------------------------

    def _run_check(self, check: CheckConfig) -> SweepResult:
        started = time.perf_counter()
        self._log("DEBUG", f"{check.name}: started")
        try:
            if check.name == "validate":
                result = self._check_validate(check)
            elif self.sheet is None:
                result = SweepResult(check=check.name, error=f"sheet invalid ({self.sheet_error})")
            else:
                result = getattr(self, f"_check_{check.name}")(check)
        except CHECK_ERRORS as e:
            result = SweepResult(check=check.name, error=f"{type(e).__name__}: {e}")
        result.wall_time = time.perf_counter() - started

        with self._lock:
            self.completed += 1
            if result.passed:
                self.passed += 1
            else:
                self.failed += 1
        verdict = "pass" if result.passed else "FAIL"
        detail = f" ({result.error})" if result.error else ""
        slope = f", slope {result.slope:.3f}" if result.slope is not None else ""
        self._log("INFO" if result.passed else "WARNING",
                  f"{check.name}: {verdict}{slope} in {result.wall_time:.2f}s{detail}")
        self._notify_status()
        return result

    def _spec(self, check: CheckConfig) -> SweepSpec:
        data = dict(SWEEP_DEFAULTS.get(check.name, {}))
        data.setdefault("seed", self.scenario.seed)
        data.update(check.sweep)
        return SweepSpec.from_dict(data)

    def _seed(self, check: CheckConfig) -> int:
        return int(check.sweep.get("seed", self.scenario.seed))

    def _upsilon(self) -> ExpressionForm:
        n = self.metric.n
        return ExpressionForm.from_dict(n, n - 1, self.scenario.forms.upsilon)

    def _gamma(self) -> ExpressionForm:
        forms = self.scenario.forms
        return twistor_form(self.metric.n, forms.gamma_degree or self.metric.n - 2, forms.gamma)

    # -------------------------------------------------------------------------
    # Checks
    # -------------------------------------------------------------------------

    def _check_validate(self, check: CheckConfig) -> SweepResult:
        if self.sheet is None:
            return SweepResult(check="validate", residuals=[math.nan], error=self.sheet_error)
        sheet = self.sheet
        det = np.abs(np.linalg.det(sheet.induced))
        return SweepResult(
            check="validate", param=f"sigma={sheet.sign:+d}", grids=["x".join(map(str, sheet.shape))],
            epsilons=[None], residuals=[float(np.min(det))], passed=True,
            details={"sigma": sheet.sign, "min_abs_induced_det": float(np.min(det))},
        )

    def _check_compatibility(self, check: CheckConfig) -> SweepResult:
        trials = int(check.options.get("trials", 50))
        seed = self._seed(check)
        residual = compatibility_residual(self.sheet, trials=trials, seed=seed)
        return fixed_result("compatibility", self.sheet, residual,
                            float(check.options.get("threshold", 1e-10)), seed=seed, param=f"trials={trials}")

    def _check_symmetry(self, check: CheckConfig) -> SweepResult:
        trials = int(check.options.get("trials", 100))
        seed = self._seed(check)
        out = symmetry_residuals(self.sheet, trials=trials, seed=seed)
        worst = max(out["h_symmetry"], out["omega_antisymmetry"], out["omega_diagonal"], out["omega_J_invariance"])
        result = fixed_result("symmetry", self.sheet, worst, float(check.options.get("threshold", 1e-10)),
                              seed=seed, param=f"trials={trials}")
        result.passed = result.passed and out["h_min_diagonal"] > 0.0
        result.details.update(out)
        return result

    def _check_complex_structure(self, check: CheckConfig) -> SweepResult:
        trials = int(check.options.get("trials", 20))
        seed = self._seed(check)
        sheet = self.sheet
        square, isometry = 0.0, 0.0
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial])
            v, w = jacobi_random_field(sheet, rng), jacobi_random_field(sheet, rng)
            jv, jw = rotate_J(sheet, None, v), rotate_J(sheet, None, w)
            square = max(square, float(np.max(np.abs(rotate_J(sheet, None, jv).values + v.values))))
            isometry = max(isometry, float(np.max(np.abs(sheet.inner(jv.values, jw.values)
                                                         - sheet.inner(v.values, w.values)))))
        result = fixed_result("complex_structure", sheet, max(square, isometry),
                              float(check.options.get("threshold", 1e-12)), seed=seed, param=f"trials={trials}")
        result.details.update({"J_squared": square, "g_invariance": isometry})
        return result

    def _check_domega(self, check: CheckConfig) -> SweepResult:
        return sweep_d_omega(self.sheet, self._spec(check))

    def _check_nijenhuis(self, check: CheckConfig) -> SweepResult:
        return sweep_nijenhuis(self.sheet, self._spec(check))

    def _check_dlambda(self, check: CheckConfig) -> SweepResult:
        upsilon = self._upsilon()
        result = sweep_d_lambda(self.sheet, self._spec(check), upsilon)
        result.param = "upsilon=" + ";".join(f"{k}:{v}" for k, v in upsilon.to_dict().items())
        return result

    def _check_lift_theta(self, check: CheckConfig) -> SweepResult:
        gauge = lift_gauge(self.sheet)
        gauss_lift(self.sheet, gauge)  # transversality on the scenario grid
        result = run_sweep("lift_theta", self.sheet, self._spec(check),
                           lambda s, eps, rng: theta_residual(gauss_lift(s, gauge, check_transversal=False)),
                           param=f"gauge={gauge}")
        synthetic = check.options.get("synthetic")
        if synthetic:
            fake = theta_residual(synthetic_sheet(self.sheet, synthetic[0], synthetic[1]))
            result.details["synthetic_residual"] = fake
            result.passed = result.passed and fake > SEPARATION_THRESHOLD
        return result

    def _check_legendrian(self, check: CheckConfig) -> SweepResult:
        gauge = lift_gauge(self.sheet)

        def residual(s, eps, rng):
            nu = smooth_random_field(s, rng)
            return legendrian_residual(gauss_lift(s, gauge, check_transversal=False),
                                       lift_normal_field(s, nu, eps, gauge))
        result = run_sweep("legendrian", self.sheet, self._spec(check), residual, param=f"gauge={gauge}")
        lift = gauss_lift(self.sheet, gauge, check_transversal=False)
        vertical = legendrian_residual(lift, vertical_field(lift))
        result.details["vertical_residual"] = vertical
        result.passed = result.passed and vertical > SEPARATION_THRESHOLD
        return result

    def _check_observable(self, check: CheckConfig) -> SweepResult:
        gamma = self._gamma()
        gauge = lift_gauge(self.sheet)
        lift_step = float(check.options.get("lift_step", LIFT_STEP))

        def residual(s, eps, rng):
            w = lift_normal_field(s, smooth_random_field(s, rng), lift_step, gauge)
            return observable_residual(gauss_lift(s, gauge, check_transversal=False), gamma, w, eps)
        return run_sweep("observable", self.sheet, self._spec(check), residual,
                         param="gamma=" + ";".join(f"{k}:{v}" for k, v in gamma.to_dict().items()))

    def _check_levi(self, check: CheckConfig) -> SweepResult:
        points = int(check.options.get("points", 20))
        step = float(check.options.get("step", 1e-4))
        seed = self._seed(check)
        sigmas, drift = [], 0.0
        for i in range(points):
            point = random_twistor_point(self.metric, np.random.default_rng([seed, i]))
            full = levi_form(self.metric, point, step).sigma_min
            half = levi_form(self.metric, point, step / 2.0).sigma_min
            sigmas.append(full)
            drift = max(drift, abs(full - half) / max(full, 1e-300))
        smallest = float(min(sigmas)) if sigmas else math.nan
        result = SweepResult(check="levi", param=f"points={points}", grids=["pointwise"], epsilons=[step],
                             residuals=[smallest], seed=seed,
                             passed=bool(sigmas) and smallest > 1e-6 and drift < LEVI_STABILITY)
        result.details.update({"sigma_min": smallest, "max_relative_change": drift})
        return result

    def _check_dimensions(self, check: CheckConfig) -> SweepResult:
        points = int(check.options.get("points", 50))
        seed = self._seed(check)
        n = self.metric.n
        expected = expected_dimensions(n)
        mismatches = 0
        for i in range(points):
            point = random_twistor_point(self.metric, np.random.default_rng([seed, i]))
            try:
                if cr_dimensions(self.metric, point) != expected:
                    mismatches += 1
            except RankDeviationError as e:
                mismatches += 1
                self._log("DEBUG", f"dimensions: point {i}: {e}")
        result = SweepResult(check="dimensions", param=f"points={points}", grids=["pointwise"], epsilons=[None],
                             residuals=[float(mismatches)], passed=mismatches == 0, seed=seed)
        result.details.update(expected)
        return result

    def _check_flow(self, check: CheckConfig) -> SweepResult:
        settings = self.scenario.flow
        sheet = self.sheet
        if settings.grid:
            sheet = build_sheet(self.metric, self.scenario.build_domain(settings.grid), self.scenario.sheet.map)
        flow = GradientFlow(FlowConfig.from_dict(settings.flow_config_dict()))
        flow.log_callback = self.log_callback
        report = flow.run(sheet)
        self.flow_report = report

        boundary_fixed = bool(np.array_equal(report.sheet.vertices[sheet.boundary_mask],
                                              sheet.vertices[sheet.boundary_mask]))
        monotone = report.monotone() if settings.backtracking else True
        max_consistency = report.max_consistency()
        consistent = max_consistency is None or max_consistency < CONSISTENCY_LIMIT
        passed = monotone and boundary_fixed and consistent
        target = check.options.get("target_area")
        if target is not None:
            tolerance = float(check.options.get("area_tolerance", 0.01))
            passed = passed and abs(report.final_area - float(target)) <= tolerance * abs(float(target))
        last = report.steps[-1].grad_norm if report.steps else 0.0
        result = SweepResult(check="flow", param=f"steps={len(report.steps)}",
                             grids=["x".join(map(str, sheet.shape))], epsilons=[settings.step],
                             residuals=[float(last)], passed=passed, experimental=report.experimental)
        result.details.update({
            "initial_area": report.initial_area, "final_area": report.final_area,
            "converged": report.converged, "stop_reason": report.stop_reason,
            "monotone": monotone, "boundary_fixed": boundary_fixed,
            "max_consistency": max_consistency, "consistent": consistent,
        })
        return result

    # -------------------------------------------------------------------------
    # Private methods
    # -------------------------------------------------------------------------

    def _update_state(self, new_state: CheckState):
        """Update state and notify callback."""
        self.state = new_state
        self._notify_status()

    def _notify_status(self):
        """Notify status callback with current state and stats."""
        if self.status_callback:
            self.status_callback(self.state, self.get_stats())

    def _log(self, level: str, message: str):
        """Send log message to callback."""
        if self.log_callback:
            self.log_callback(level, message)
