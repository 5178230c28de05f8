"""
Report Writer - persists verification results

Writes report.csv (one row per residual), report.json (full results) and,
when a flow ran, flow.csv (one row per descent step). Every file is written
to a temporary file in the target directory and moved into place.
"""

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from flows import FlowReport
from kaehler import SweepResult

CSV_COLUMNS = ("check", "param", "grid", "epsilon", "residual", "slope", "pass")
FLOW_COLUMNS = ("step", "area", "grad_norm", "eta", "backtracks", "consistency")


def _number(value: Optional[float]) -> str:
    if value is None:
        return ""
    return repr(float(value))


def _json_safe(value: Any) -> Any:
    """Replace non-finite floats by strings so the output stays strict JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if hasattr(value, "item") and callable(value.item):
        return _json_safe(value.item())
    return value


def result_rows(result: SweepResult) -> List[Dict[str, str]]:
    """CSV rows of one check; a check without residuals gets a single failing row."""
    verdict = "pass" if result.passed else "fail"
    slope = _number(result.slope)
    param = result.param if not result.error else f"{result.param} error={result.error}".strip()
    if not result.residuals:
        return [{"check": result.check, "param": param, "grid": "", "epsilon": "",
                 "residual": "nan", "slope": slope, "pass": verdict}]
    rows = []
    grids = result.grids or [""] * len(result.residuals)
    epsilons = result.epsilons or [None] * len(result.residuals)
    for grid, eps, residual in zip(grids, epsilons, result.residuals):
        rows.append({"check": result.check, "param": param, "grid": grid, "epsilon": _number(eps),
                     "residual": _number(residual), "slope": slope, "pass": verdict})
    return rows


class ReportWriter:
    """Writes the report files of one run into an output directory."""

    def __init__(self, out_dir: Path):
        """
        Args:
            out_dir: Target directory, created on first write
        """
        self.out_dir = Path(out_dir)

    def write(self, results: Sequence[SweepResult], scenario: Optional[Dict[str, Any]] = None,
              flow_report: Optional[FlowReport] = None,
              formats: Sequence[str] = ("csv", "json")) -> List[Path]:
        """
        Write all requested report files.

        Args:
            results: Check results in listed order
            scenario: Scenario identification stored in report.json
            flow_report: Steps of the gradient flow, if one ran
            formats: Subset of ("csv", "json")

        Returns:
            Paths of the files written
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        if "csv" in formats:
            written.append(self.write_csv(results))
        if "json" in formats:
            written.append(self.write_json(results, scenario or {}, flow_report))
        if flow_report is not None:
            written.append(self.write_flow_csv(flow_report))
        return written

    def write_csv(self, results: Sequence[SweepResult]) -> Path:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for result in results:
            writer.writerows(result_rows(result))
        return self._atomic_write("report.csv", buffer.getvalue())

    def write_json(self, results: Sequence[SweepResult], scenario: Dict[str, Any],
                   flow_report: Optional[FlowReport] = None) -> Path:
        checks, timing = [], []
        for result in results:
            data = result.to_dict()
            timing.append({"check": result.check, "wall_time": data.pop("wall_time")})
            checks.append(data)
        payload = {
            "scenario": scenario,
            "passed": all(r.passed for r in results),
            "checks": checks,
        }
        if flow_report is not None:
            payload["flow"] = {
                "initial_area": flow_report.initial_area,
                "final_area": flow_report.final_area,
                "converged": flow_report.converged,
                "stop_reason": flow_report.stop_reason,
                "experimental": flow_report.experimental,
                "steps": len(flow_report.steps),
            }
            timing.append({"check": "flow_loop", "wall_time": round(flow_report.wall_time, 4)})
        # wall times vary between runs; everything outside this block is reproducible
        payload["timing"] = timing
        text = json.dumps(_json_safe(payload), indent=2, allow_nan=False)
        return self._atomic_write("report.json", text + "\n")

    def write_flow_csv(self, flow_report: FlowReport) -> Path:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=FLOW_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for step in flow_report.steps:
            row = step.to_dict()
            writer.writerow({key: (_number(row[key]) if key not in ("step", "backtracks") else row[key])
                             for key in FLOW_COLUMNS})
        return self._atomic_write("flow.csv", buffer.getvalue())

    def _atomic_write(self, name: str, text: str) -> Path:
        """Write to a temporary file next to the target, then rename over it."""
        target = self.out_dir / name
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", suffix=".tmp", dir=self.out_dir)
        try:
            with os.fdopen(fd, "w", newline="") as f:
                f.write(text)
            os.replace(tmp, target)
        except OSError:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        return target
