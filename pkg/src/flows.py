"""
Area Flow - string action, its h-gradient and gradient descent

The discrete area is the sum of cell areas computed from edge vectors (see
sheet.cell_areas), so a sheet cannot lower its area with zig-zag vertex
modes. It is differentiated along nodal normal fields phi_{q,a} (frame
vector f_a at vertex q, zero elsewhere). With the lumped h mass matrix the
gradient has coefficients

    grad(q) = sum_a dA(phi_{q,a}) / (W_q dvol_q) f_a(q)

and vanishes on the boundary. All dA(phi_{q,a}) are assembled from a few
batched area evaluations: vertices are coloured so that no cell has two
corners of the same colour, which lets the change of every cell area be
attributed to the single perturbed corner it depends on.

Descent steps S <- perturb(S, grad, -eta) halve eta until the area does not
increase (when backtracking is on). Flows of sheets with Lorentzian induced
metric run but are reported as experimental.
"""

import itertools
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np

from kaehler import metric_h
from sheet import DiscreteSheet, NormalField, ParamAxis, ParamDomain, WorldSheetError, cell_areas, perturb

DEFAULT_DIFFERENCE_STEP = 1e-5
MIN_STEP_FRACTION = 2.0 ** -30
CONSISTENCY_MIN_NORM = 1e-3
CONSISTENCY_LIMIT = 1e-6
COLOUR_SEPARATION = 2


class FlowError(ValueError):
    """World-sheet violation or invalid settings during a flow."""

    def __init__(self, message: str, step: Optional[int] = None, vertex: Optional[Tuple[int, ...]] = None):
        self.step = step
        self.vertex = vertex
        super().__init__(message)


class FlowState(Enum):
    """Enumeration of flow states"""
    IDLE = "Idle"
    RUNNING = "Running"
    CONVERGED = "Converged"
    STOPPED = "Stopped"
    ERROR = "Error"


@dataclass
class FlowConfig:
    """Gradient descent settings."""
    step: float = 5e-3
    max_steps: int = 500
    tolerance: float = 1e-6
    backtracking: bool = True
    log_every: int = 10
    difference_step: float = DEFAULT_DIFFERENCE_STEP

    def validate(self) -> List[str]:
        errors = []
        if not 0.0 < self.step <= 1.0:
            errors.append(f"step must be in (0, 1], got {self.step}")
        if not 0 <= self.max_steps <= 100_000:
            errors.append(f"max_steps must be in [0, 100000], got {self.max_steps}")
        if self.tolerance < 0:
            errors.append("tolerance must be >= 0")
        if self.log_every < 1:
            errors.append("log_every must be >= 1")
        if not self.difference_step > 0:
            errors.append("difference_step must be > 0")
        return errors

    def to_dict(self) -> dict:
        return {"step": self.step, "max_steps": self.max_steps, "tolerance": self.tolerance,
                "backtracking": self.backtracking, "log_every": self.log_every,
                "difference_step": self.difference_step}

    @classmethod
    def from_dict(cls, data: dict) -> "FlowConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class FlowStep:
    step: int
    area: float
    grad_norm: float
    eta: float = 0.0
    backtracks: int = 0
    consistency: Optional[float] = None

    def to_dict(self) -> dict:
        return {"step": self.step, "area": self.area, "grad_norm": self.grad_norm, "eta": self.eta,
                "backtracks": self.backtracks, "consistency": self.consistency}


@dataclass
class FlowReport:
    initial_area: float
    final_area: float
    converged: bool
    stop_reason: str
    sheet: DiscreteSheet
    steps: List[FlowStep] = field(default_factory=list)
    experimental: bool = False
    wall_time: float = 0.0

    def monotone(self) -> bool:
        areas = [s.area for s in self.steps] + [self.final_area]
        return all(b <= a for a, b in zip(areas, areas[1:]))

    def max_consistency(self) -> Optional[float]:
        """Largest gradient consistency recorded at a logged step, None if none was recorded."""
        logged = [s.consistency for s in self.steps if s.consistency is not None]
        return max(logged) if logged else None


# ----------------------------------------------------------------------------
# Area and its differential
# ----------------------------------------------------------------------------

def area(sheet: DiscreteSheet) -> float:
    return float(np.sum(cell_areas(sheet.metric, sheet.domain, sheet.vertices)))


def is_lorentzian(sheet: DiscreteSheet) -> bool:
    return bool(np.any(np.linalg.det(sheet.induced) < 0))


def colour_period(axis: ParamAxis) -> int:
    """
    Colour period along one axis. Two vertices of equal colour on the same
    line are at least COLOUR_SEPARATION apart, also across the seam of a
    periodic axis (the wrap gap is N mod m, or m when m divides N).
    """
    if not axis.periodic:
        return COLOUR_SEPARATION
    for m in range(COLOUR_SEPARATION, axis.samples + 1):
        r = axis.samples % m
        if r == 0 or r >= COLOUR_SEPARATION:
            return m
    return axis.samples


def _cells_to_vertices(values: np.ndarray, domain: ParamDomain) -> np.ndarray:
    """out[q] = sum of values over the cells having q as a corner."""
    out = values
    for a, axis in enumerate(domain.axes):
        if axis.periodic:
            out = out + np.roll(out, 1, axis=a)
        else:
            pad = [(0, 0)] * out.ndim
            pad[a] = (1, 1)
            padded = np.pad(out, pad)
            out = (np.take(padded, np.arange(1, axis.samples + 1), axis=a)
                   + np.take(padded, np.arange(axis.samples), axis=a))
    return out


def area_differential(sheet: DiscreteSheet, step: float = DEFAULT_DIFFERENCE_STEP) -> np.ndarray:
    """
    dA(phi_{q,a}) for every vertex q and frame index a, shape (*grid, 2).

    Boundary entries are zero.
    """
    domain = sheet.domain
    periods = [colour_period(axis) for axis in domain.axes]
    index = np.meshgrid(*[np.arange(axis.samples) for axis in domain.axes], indexing="ij")
    interior = ~sheet.boundary_mask
    frames = (sheet.frame.f1, sheet.frame.f2)

    colours = []
    for colour in itertools.product(*[range(m) for m in periods]):
        mask = interior.copy()
        for idx, m, c in zip(index, periods, colour):
            mask &= (idx % m) == c
        if mask.any():
            colours.append(mask)

    batch = []
    for mask in colours:
        for f in frames:
            delta = step * mask[..., None] * f
            batch.extend([sheet.vertices + delta, sheet.vertices - delta])
    cells = cell_areas(sheet.metric, domain, np.stack(batch))
    change = (cells[0::2] - cells[1::2]) / (2.0 * step)

    out = np.zeros(domain.shape + (2,))
    for c, mask in enumerate(colours):
        for a in range(2):
            gathered = _cells_to_vertices(change[2 * c + a], domain)
            out[..., a] += np.where(mask, gathered, 0.0)
    return out


def h_gradient_area(sheet: DiscreteSheet, step: float = DEFAULT_DIFFERENCE_STEP) -> NormalField:
    """
    h-gradient of the area with the lumped mass matrix.

    Raises:
        FlowError: zero lumped mass at an interior vertex
    """
    mass = sheet.weights * sheet.dvol
    interior = ~sheet.boundary_mask
    if np.any(mass[interior] <= 0):
        vertex = tuple(int(i) for i in np.argwhere(interior & (mass <= 0))[0])
        raise FlowError(f"Singular lumped mass at vertex {vertex}", vertex=vertex)
    coeffs = area_differential(sheet, step) / np.where(interior, mass, 1.0)[..., None]
    values = coeffs[..., :1] * sheet.frame.f1 + coeffs[..., 1:] * sheet.frame.f2
    values[sheet.boundary_mask] = 0.0
    return NormalField(values, boundary_zero=True)


def directional_area_derivative(sheet: DiscreteSheet, v: NormalField,
                                step: float = DEFAULT_DIFFERENCE_STEP) -> float:
    return (area(perturb(sheet, v, step)) - area(perturb(sheet, v, -step))) / (2.0 * step)


def gradient_consistency(sheet: DiscreteSheet, grad: NormalField, v: NormalField,
                         step: float = DEFAULT_DIFFERENCE_STEP) -> float:
    """|dA(v) - h(grad, v)| / |dA(v)|."""
    da = directional_area_derivative(sheet, v, step)
    return abs(da - metric_h(sheet, grad, v)) / max(abs(da), 1e-300)


# ----------------------------------------------------------------------------
# Descent
# ----------------------------------------------------------------------------

class GradientFlow:
    """
    Fixed-boundary gradient descent of the area on (sheets, h).

    Reports progress through log_callback(level, message) and
    status_callback(state, stats) when they are set.
    """

    def __init__(self, config: Optional[FlowConfig] = None):
        self.config = config or FlowConfig()
        errors = self.config.validate()
        if errors:
            raise FlowError("; ".join(errors))
        self.state = FlowState.IDLE
        self.steps: List[FlowStep] = []

        # Callbacks
        self.status_callback: Optional[Callable] = None
        self.log_callback: Optional[Callable] = None

    def run(self, sheet: DiscreteSheet) -> FlowReport:
        cfg = self.config
        started = time.perf_counter()
        experimental = is_lorentzian(sheet)
        self.steps = []
        self._update_state(FlowState.RUNNING)
        if experimental:
            self._log("WARNING", "Lorentzian sheet: flow runs but convergence is not asserted")

        current = sheet
        current_area = area(sheet)
        initial_area = current_area
        converged, reason = False, "max_steps"
        for k in range(cfg.max_steps):
            grad = h_gradient_area(current, cfg.difference_step)
            grad_norm = math.sqrt(max(metric_h(current, grad, grad), 0.0))
            record = FlowStep(k, current_area, grad_norm)
            if k % cfg.log_every == 0:
                if grad_norm > CONSISTENCY_MIN_NORM:
                    record.consistency = gradient_consistency(current, grad, grad * (1.0 / grad_norm),
                                                              cfg.difference_step)
                    if not record.consistency < CONSISTENCY_LIMIT:
                        self._log("WARNING", f"step {k}: gradient consistency {record.consistency:.3e}")
                self._log("INFO", f"step {k}: area {current_area:.10f}, |grad| {grad_norm:.3e}")
            self.steps.append(record)
            if grad_norm <= cfg.tolerance:
                converged, reason = True, "tolerance"
                break

            trial, trial_area, eta, backtracks = self._descend(current, grad, current_area, k)
            record.eta, record.backtracks = eta, backtracks
            if trial is None:
                reason = "stalled"
                self._log("WARNING", f"step {k}: no area decrease down to eta {eta:.3e}")
                break
            current, current_area = trial, trial_area
            self._notify_status()

        self._update_state(FlowState.CONVERGED if converged else FlowState.STOPPED)
        self._log("INFO", f"flow finished ({reason}) after {len(self.steps)} steps, area {current_area:.10f}")
        return FlowReport(initial_area, current_area, converged, reason, current, list(self.steps),
                          experimental, time.perf_counter() - started)

    def _descend(self, sheet: DiscreteSheet, grad: NormalField, current_area: float, k: int):
        cfg = self.config
        eta = cfg.step
        backtracks = 0
        while eta >= cfg.step * MIN_STEP_FRACTION:
            try:
                trial = perturb(sheet, grad, -eta)
            except WorldSheetError as exc:
                if not cfg.backtracking:
                    self._update_state(FlowState.ERROR)
                    raise FlowError(f"World-sheet violation at step {k}: {exc}", step=k,
                                    vertex=getattr(exc, "vertex", None)) from exc
                eta, backtracks = eta / 2.0, backtracks + 1
                continue
            trial_area = area(trial)
            if not cfg.backtracking or trial_area <= current_area:
                return trial, trial_area, eta, backtracks
            eta, backtracks = eta / 2.0, backtracks + 1
        return None, current_area, eta, backtracks

    def get_stats(self) -> dict:
        last = self.steps[-1] if self.steps else None
        return {"steps": len(self.steps), "area": last.area if last else None,
                "grad_norm": last.grad_norm if last else None}

    def _update_state(self, new_state: FlowState):
        """Update state and notify callback."""
        self.state = new_state
        self._notify_status()

    def _notify_status(self):
        if self.status_callback:
            self.status_callback(self.state, self.get_stats())

    def _log(self, level: str, message: str):
        if self.log_callback:
            self.log_callback(level, message)


def gradient_descent(sheet: DiscreteSheet, config: Optional[FlowConfig] = None,
                     log_callback: Optional[Callable] = None) -> FlowReport:
    flow = GradientFlow(config)
    flow.log_callback = log_callback
    return flow.run(sheet)
