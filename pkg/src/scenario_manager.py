"""
Scenario Manager - Load/Save/Validate verification scenarios

A scenario is a JSON file naming an ambient metric, a parametrized
world-sheet, the forms used by the potential and observable checks, the
list of checks to run and an optional gradient flow. Validation errors are
prefixed with the JSON-pointer path of the offending field.
"""

import sys
import json
import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple
from dataclasses import dataclass, asdict, field, fields

from ambient import MetricError, MetricSpace, build_metric
from expr import ExpressionError, parse
from sheet import ParamAxis, ParamDomain, WorldSheetError

SEED_ENV_VAR = "SHEETSPACE_SEED"
DEFAULT_SEED = 42

CHECK_NAMES = (
    "validate", "compatibility", "domega", "nijenhuis", "dlambda", "lift_theta",
    "legendrian", "levi", "observable", "flow", "complex_structure", "dimensions", "symmetry",
)
REPORT_FORMATS = ("csv", "json")


def get_app_base_dir() -> Path:
    """Get the application's base directory (where exe or main script is located)."""
    if getattr(sys, 'frozen', False):
        return Path(sys.executable).parent
    else:
        return Path(__file__).parent.parent


def get_scenarios_dir() -> Path:
    """Directory holding the bundled scenarios."""
    return get_app_base_dir() / "config" / "scenarios"


def resolve_scenario_path(name: str) -> Path:
    """
    Resolve a scenario argument: an existing path, or the name of a bundled
    scenario with or without the .json suffix.
    """
    path = Path(name)
    if path.exists():
        return path
    bundled = get_scenarios_dir() / (name if name.endswith(".json") else f"{name}.json")
    return bundled if bundled.exists() else path


@dataclass
class MetricConfig:
    """Ambient metric: builtin name + dim, conformal factor over a base, or explicit entries"""
    builtin: str = "minkowski"  # euclidean/minkowski/conformal, "" for explicit entries
    dim: int = 4
    factor: str = ""  # conformal only
    base: Dict = field(default_factory=dict)  # conformal only, a nested metric block
    entries: List[List[str]] = field(default_factory=list)
    signature: List[int] = field(default_factory=list)
    box: List[List[float]] = field(default_factory=list)

    def to_spec(self) -> dict:
        if self.entries:
            spec = {"entries": self.entries, "signature": self.signature or None}
        elif self.builtin == "conformal":
            spec = {"builtin": "conformal", "factor": self.factor, "base": self.base}
        else:
            spec = {"builtin": self.builtin, "dim": self.dim}
        if self.box:
            spec["box"] = self.box
        return spec


@dataclass
class ParamConfig:
    """One parameter axis of the sheet"""
    name: str = "s"
    range: List[float] = field(default_factory=lambda: [0.0, 1.0])
    samples: int = 64
    periodic: bool = False

    def to_axis(self, samples: Optional[int] = None) -> ParamAxis:
        return ParamAxis(self.name, float(self.range[0]), float(self.range[1]),
                         int(samples or self.samples), bool(self.periodic))


@dataclass
class SheetConfig:
    """Parameter grid and the n map expressions"""
    params: List[ParamConfig] = field(default_factory=list)
    map: List[str] = field(default_factory=list)


@dataclass
class FormConfig:
    """Forms on the chart: the potential of the volume form and the observable"""
    upsilon: Dict[str, str] = field(default_factory=dict)  # (n-1)-form, {"1,2,3": "x0"}
    gamma: Dict[str, str] = field(default_factory=dict)  # k-form on the twistor chart
    gamma_degree: int = 0  # 0 = sheet dimension n - 2


@dataclass
class CheckConfig:
    """One requested check with its sweep settings and check-specific options"""
    name: str = "validate"
    sweep: Dict = field(default_factory=dict)
    options: Dict = field(default_factory=dict)


@dataclass
class FlowSettings:
    """Optional gradient flow; grid overrides the sample counts of the sheet"""
    enabled: bool = False
    step: float = 5e-3
    max_steps: int = 500
    tolerance: float = 1e-6
    backtracking: bool = True
    log_every: int = 10
    grid: List[int] = field(default_factory=list)

    def flow_config_dict(self) -> dict:
        return {"step": self.step, "max_steps": self.max_steps, "tolerance": self.tolerance,
                "backtracking": self.backtracking, "log_every": self.log_every}


@dataclass
class OutputConfig:
    """Report destination"""
    directory: str = "reports"
    formats: List[str] = field(default_factory=lambda: list(REPORT_FORMATS))


class ScenarioManager:
    """
    Holds one scenario.

    Schema problems found while reading (unknown or missing blocks, wrong
    field types) are collected and reported by validate() together with the
    semantic checks.
    """

    REQUIRED_BLOCKS = ("metric", "sheet")

    def __init__(self):
        """Initialize with an empty scenario."""
        self.name = "scenario"
        self.description = ""
        self.seed = DEFAULT_SEED
        self.metric = MetricConfig()
        self.sheet = SheetConfig()
        self.forms = FormConfig()
        self.checks: List[CheckConfig] = []
        self.flow = FlowSettings()
        self.output = OutputConfig()
        self.source_path: Optional[str] = None
        self.seed_overridden = False
        self._schema_errors: List[str] = []

    def to_dict(self) -> dict:
        """
        Convert the scenario to a dictionary.

        Returns:
            Dictionary representation suitable for JSON serialization
        """
        return {
            "name": self.name,
            "description": self.description,
            "seed": self.seed,
            "metric": asdict(self.metric),
            "sheet": {"params": [asdict(p) for p in self.sheet.params], "map": list(self.sheet.map)},
            "forms": asdict(self.forms),
            "checks": [asdict(c) for c in self.checks],
            "flow": asdict(self.flow),
            "output": asdict(self.output),
        }

    def from_dict(self, data: dict):
        """
        Load the scenario from a dictionary.

        Args:
            data: Parsed scenario JSON
        """
        self._schema_errors = []
        if not isinstance(data, dict):
            self._schema_errors.append("/: scenario must be a JSON object")
            return
        for block in self.REQUIRED_BLOCKS:
            if block not in data:
                self._schema_errors.append(f"/{block}: missing required block")

        self.name = str(data.get("name", self.name))
        self.description = str(data.get("description", ""))
        self.seed = data.get("seed", DEFAULT_SEED)

        if "metric" in data:
            self.metric = self._section(MetricConfig, data["metric"], "/metric")
        if "sheet" in data:
            raw = data["sheet"]
            if isinstance(raw, dict):
                unknown = set(raw) - {"params", "map"}
                for key in sorted(unknown):
                    self._schema_errors.append(f"/sheet/{key}: unknown field")
                params = raw.get("params", [])
                if not isinstance(params, list):
                    self._schema_errors.append("/sheet/params: must be a list")
                    params = []
                self.sheet = SheetConfig(
                    params=[self._section(ParamConfig, p, f"/sheet/params/{i}") for i, p in enumerate(params)],
                    map=raw.get("map", []),
                )
            else:
                self._schema_errors.append("/sheet: must be an object")
        if "forms" in data:
            self.forms = self._section(FormConfig, data["forms"], "/forms")
        if "checks" in data:
            if isinstance(data["checks"], list):
                self.checks = [self._section(CheckConfig, c, f"/checks/{i}")
                               for i, c in enumerate(data["checks"])]
            else:
                self._schema_errors.append("/checks: must be a list")
        if "flow" in data:
            self.flow = self._section(FlowSettings, data["flow"], "/flow")
            if isinstance(data["flow"], dict):
                self.flow.enabled = bool(data["flow"].get("enabled", True))
        if "output" in data:
            self.output = self._section(OutputConfig, data["output"], "/output")

        for key in sorted(set(data) - {"name", "description", "seed", "metric", "sheet",
                                        "forms", "checks", "flow", "output"}):
            self._schema_errors.append(f"/{key}: unknown block")

    def _section(self, cls, raw, pointer: str):
        """Build a section dataclass, recording unknown fields instead of raising."""
        if not isinstance(raw, dict):
            self._schema_errors.append(f"{pointer}: must be an object")
            return cls()
        names = {f.name for f in fields(cls)}
        for key in sorted(set(raw) - names):
            self._schema_errors.append(f"{pointer}/{key}: unknown field")
        return cls(**{k: v for k, v in raw.items() if k in names})

    def apply_environment(self, environ: Optional[dict] = None):
        """Apply SHEETSPACE_SEED to the scenario seed and every sweep seed."""
        environ = os.environ if environ is None else environ
        value = environ.get(SEED_ENV_VAR)
        if value is None or value == "":
            return
        try:
            seed = int(value)
        except ValueError:
            self._schema_errors.append(f"/seed: {SEED_ENV_VAR}={value!r} is not an integer")
            return
        self.seed = seed
        self.seed_overridden = True
        for check in self.checks:
            if isinstance(check.sweep, dict):
                check.sweep["seed"] = seed

    def save_to_file(self, filepath: str) -> Tuple[bool, str]:
        """
        Save the scenario to a JSON file.

        Args:
            filepath: Destination path

        Returns:
            Tuple of (success: bool, message: str)
        """
        try:
            Path(filepath).parent.mkdir(parents=True, exist_ok=True)
            with open(filepath, 'w') as f:
                json.dump(self.to_dict(), f, indent=2)
            return True, f"Scenario saved to {filepath}"
        except OSError as e:
            return False, f"Failed to save scenario: {str(e)}"

    def load_from_file(self, filepath: str, environ: Optional[dict] = None) -> Tuple[bool, str]:
        """
        Load a scenario from a JSON file and apply the seed override.

        Args:
            filepath: Scenario path
            environ: Environment mapping (os.environ if None)

        Returns:
            Tuple of (success: bool, message: str)
        """
        if not os.path.exists(filepath):
            return False, f"Scenario file not found: {filepath}"
        try:
            with open(filepath, 'r') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            return False, f"/: invalid JSON in scenario file: {str(e)}"
        except OSError as e:
            return False, f"Failed to read scenario: {str(e)}"

        self.source_path = str(filepath)
        self.from_dict(data)
        self.apply_environment(environ)
        return True, f"Scenario loaded from {filepath}"

    # ------------------------------------------------------------------
    # Builders
    # ------------------------------------------------------------------

    def build_metric(self) -> MetricSpace:
        return build_metric(self.metric.to_spec())

    def build_domain(self, samples: Optional[List[int]] = None) -> ParamDomain:
        samples = samples or [None] * len(self.sheet.params)
        return ParamDomain(tuple(p.to_axis(s) for p, s in zip(self.sheet.params, samples)))

    def dimension(self) -> Optional[int]:
        """Ambient dimension, or None when the metric block does not build."""
        try:
            return self.build_metric().n
        except (MetricError, ExpressionError, KeyError, TypeError, ValueError):
            return None

    # ------------------------------------------------------------------
    # Validation
    # ------------------------------------------------------------------

    def validate(self) -> Tuple[bool, List[str]]:
        """
        Validate the scenario.

        Returns:
            Tuple of (is_valid: bool, errors: list[str]) with JSON-pointer prefixed messages
        """
        errors = list(self._schema_errors)

        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            errors.append(f"/seed: must be a non-negative integer, got {self.seed!r}")

        n = None
        try:
            n = self.build_metric().n
        except (MetricError, ExpressionError) as e:
            errors.append(f"/metric: {e}")
        except (KeyError, TypeError, ValueError) as e:
            errors.append(f"/metric: malformed metric block ({e})")

        errors.extend(self._validate_sheet(n))
        errors.extend(self._validate_forms(n))
        errors.extend(self._validate_checks())

        flow_errors = self._validate_flow()
        errors.extend(flow_errors)

        for i, fmt in enumerate(self.output.formats):
            if fmt not in REPORT_FORMATS:
                errors.append(f"/output/formats/{i}: must be one of {list(REPORT_FORMATS)}, got {fmt!r}")
        if not self.output.directory:
            errors.append("/output/directory: is required")

        return len(errors) == 0, errors

    def _validate_sheet(self, n: Optional[int]) -> List[str]:
        errors = []
        params = self.sheet.params
        if n is not None and len(params) != n - 2:
            errors.append(f"/sheet/params: expected {n - 2} parameters for dimension {n}, got {len(params)}")
        for i, p in enumerate(params):
            pointer = f"/sheet/params/{i}"
            if not isinstance(p.range, (list, tuple)) or len(p.range) != 2:
                errors.append(f"{pointer}/range: must be [start, stop]")
                continue
            try:
                p.to_axis()
            except WorldSheetError as e:
                errors.append(f"{pointer}: {e}")
            except (TypeError, ValueError) as e:
                errors.append(f"{pointer}: malformed parameter ({e})")
        if not isinstance(self.sheet.map, list):
            return errors + ["/sheet/map: must be a list of expressions"]
        if n is not None and len(self.sheet.map) != n:
            errors.append(f"/sheet/map: expected {n} components, got {len(self.sheet.map)}")
        names = {p.name for p in params}
        for i, text in enumerate(self.sheet.map):
            try:
                stray = parse(str(text)).variables - names
            except ExpressionError as e:
                errors.append(f"/sheet/map/{i}: {e}")
                continue
            if stray:
                errors.append(f"/sheet/map/{i}: unknown names {sorted(stray)}")
        return errors

    def _validate_forms(self, n: Optional[int]) -> List[str]:
        errors = []
        wanted = {c.name for c in self.checks}
        if "dlambda" in wanted and not self.forms.upsilon:
            errors.append("/forms/upsilon: required by the dlambda check")
        if "observable" in wanted and not self.forms.gamma:
            errors.append("/forms/gamma: required by the observable check")
        for key, form in (("upsilon", self.forms.upsilon), ("gamma", self.forms.gamma)):
            for index, text in (form or {}).items():
                try:
                    parse(str(text))
                except ExpressionError as e:
                    errors.append(f"/forms/{key}/{index}: {e}")
        if n is not None and self.forms.gamma_degree and not 0 < self.forms.gamma_degree <= 3 * n - 4:
            errors.append(f"/forms/gamma_degree: out of range for dimension {n}")
        return errors

    def _validate_checks(self) -> List[str]:
        # imported here so that scenario files can be read without the twistor machinery
        from kaehler import SweepSpec, SweepSpecError

        errors = []
        for i, check in enumerate(self.checks):
            if check.name not in CHECK_NAMES:
                errors.append(f"/checks/{i}/name: unknown check {check.name!r}")
            if not isinstance(check.sweep, dict):
                errors.append(f"/checks/{i}/sweep: must be an object")
                continue
            try:
                SweepSpec.from_dict(check.sweep)
            except SweepSpecError as e:
                errors.append(f"/checks/{i}/sweep: {e}")
            except (TypeError, ValueError) as e:
                errors.append(f"/checks/{i}/sweep: malformed sweep ({e})")
            if not isinstance(check.options, dict):
                errors.append(f"/checks/{i}/options: must be an object")
        if any(c.name == "flow" for c in self.checks) and not self.flow.enabled:
            errors.append("/flow: required by the flow check")
        return errors

    def _validate_flow(self) -> List[str]:
        if not self.flow.enabled:
            return []
        from flows import FlowConfig

        errors = []
        try:
            config = FlowConfig.from_dict(self.flow.flow_config_dict())
            errors.extend(f"/flow: {e}" for e in config.validate())
        except TypeError as e:
            errors.append(f"/flow: malformed flow block ({e})")
        if self.flow.grid and len(self.flow.grid) != len(self.sheet.params):
            errors.append(f"/flow/grid: expected {len(self.sheet.params)} sample counts, got {len(self.flow.grid)}")
        return errors

    def get_summary(self) -> str:
        """
        Get a human-readable summary of the scenario. No computation beyond
        building the metric.

        Returns:
            Multi-line string with the scenario summary
        """
        n = self.dimension()
        lines = [
            f"=== Scenario: {self.name} ===",
        ]
        if self.description:
            lines.append(self.description)
        lines.append("")
        if n is None:
            lines.append("Metric: invalid")
        else:
            metric = self.build_metric()
            lines.extend([
                "Ambient:",
                f"  Metric: {metric.name}",
                f"  n = {n}",
                "",
                "Twistor space:",
                f"  dim N = {3 * n - 4}, CR codim = {n - 2}",
                f"  rank H = {2 * n - 2}, dim_C D = {n - 1}",
            ])
        lines.extend([
            "",
            "Sheet:",
            f"  Grid: {' x '.join(str(p.samples) for p in self.sheet.params) or '(none)'}",
        ])
        for p in self.sheet.params:
            kind = "periodic" if p.periodic else "with boundary"
            lines.append(f"  {p.name} in [{p.range[0]}, {p.range[1]}], {p.samples} samples, {kind}")
        lines.append(f"  Map: ({', '.join(str(m) for m in self.sheet.map)})")
        lines.extend(["", f"Checks ({len(self.checks)}):"])
        for check in self.checks:
            lines.append(f"  - {check.name}")
        if self.flow.enabled:
            grid = " x ".join(str(s) for s in self.flow.grid) if self.flow.grid else "sheet grid"
            lines.extend(["", "Flow:",
                          f"  step {self.flow.step}, max {self.flow.max_steps} steps, grid {grid}"])
        seed_note = f" (from {SEED_ENV_VAR})" if self.seed_overridden else ""
        lines.extend(["", f"Seed: {self.seed}{seed_note}", f"Output: {self.output.directory}"])
        return "\n".join(lines)

    @classmethod
    def load(cls, filepath: str, environ: Optional[dict] = None) -> Tuple['ScenarioManager', bool, str]:
        """
        Load a scenario file.

        Returns:
            (manager, success, message)
        """
        manager = cls()
        success, message = manager.load_from_file(filepath, environ)
        return manager, success, message
