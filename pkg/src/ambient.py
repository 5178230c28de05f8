"""
Ambient Space - Chart-based pseudo-Riemannian metrics and differential forms

A MetricSpace is a single chart on an open box of R^n carrying a metric
whose entries are expressions in the coordinates x0..x{n-1}. The chart
orientation dx0 ^ ... ^ dx{n-1} is the orientation of M, so the volume
n-form is

    Omega_x(v1, ..., vn) = sqrt|det g(x)| * det[v1 ... vn]

All derivatives of g that other modules need are central differences with
the step `h_amb` (default 1e-5).

ExpressionForm holds a k-form with expression coefficients on the same
chart (used for the potential of the volume form and for observables).
"""

from itertools import combinations
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from expr import Expression, coerce, parse

DEFAULT_H_AMB = 1e-5
DET_TOLERANCE = 1e-12


class MetricError(ValueError):
    """Base class for ambient metric failures."""


class NondegeneracyError(MetricError):
    """|det g| fell below tolerance at a sampled point."""

    def __init__(self, point: np.ndarray, det: float):
        self.point = np.asarray(point, dtype=float)
        self.det = det
        super().__init__(f"Metric degenerate at x={self.point.tolist()} (det g = {det:.3e})")


class SignatureError(MetricError):
    """Eigenvalue sign counts disagree with the declared signature."""

    def __init__(self, point: np.ndarray, found: Tuple[int, int], declared: Tuple[int, int]):
        self.point = np.asarray(point, dtype=float)
        self.found = found
        self.declared = declared
        super().__init__(
            f"Metric signature {found} at x={self.point.tolist()} differs from declared {declared}"
        )


def coordinate_names(n: int) -> List[str]:
    return [f"x{i}" for i in range(n)]


def _bindings(points: np.ndarray, names: Sequence[str]) -> Dict[str, np.ndarray]:
    return {name: points[..., i] for i, name in enumerate(names)}


class MetricSpace:
    """
    Pseudo-Riemannian metric on a single chart of R^n.

    Immutable after construction; every method is reentrant.
    """

    def __init__(self, entries: Sequence[Sequence[Union[str, float, Expression]]],
                 signature: Optional[Tuple[int, int]] = None, name: str = "custom",
                 box: Optional[Sequence[Tuple[float, float]]] = None,
                 h_amb: float = DEFAULT_H_AMB):
        n = len(entries)
        if n < 3:
            raise MetricError(f"Dimension must be at least 3, got {n}")
        if any(len(row) != n for row in entries):
            raise MetricError("Metric entries must form a square matrix")
        parsed = tuple(tuple(coerce(e) for e in row) for row in entries)
        for i in range(n):
            for j in range(i + 1, n):
                if parsed[i][j].root != parsed[j][i].root:
                    raise MetricError(
                        f"Metric entries [{i}][{j}] and [{j}][{i}] differ: "
                        f"{parsed[i][j].source!r} vs {parsed[j][i].source!r}"
                    )
        names = set(coordinate_names(n))
        for row in parsed:
            for entry in row:
                stray = entry.variables - names
                if stray:
                    raise MetricError(
                        f"Metric entry {entry.source!r} uses {sorted(stray)}; only x0..x{n - 1} are allowed"
                    )
        if signature is not None:
            signature = (int(signature[0]), int(signature[1]))
            if sum(signature) != n:
                raise MetricError(f"Signature {signature} does not sum to dimension {n}")

        self.n = n
        self.entries = parsed
        self.signature = signature
        self.name = name
        self.box = tuple((float(a), float(b)) for a, b in box) if box else ((-1.0, 1.0),) * n
        self.h_amb = float(h_amb)
        self._names = coordinate_names(n)
        self._constant: Optional[np.ndarray] = None
        if all(e.is_constant for row in parsed for e in row):
            self._constant = np.array([[e.evaluate({}) for e in row] for row in parsed])

    # ------------------------------------------------------------------
    # Builtins
    # ------------------------------------------------------------------

    @classmethod
    def euclidean(cls, n: int, **kwargs) -> "MetricSpace":
        entries = [["1" if i == j else "0" for j in range(n)] for i in range(n)]
        return cls(entries, signature=(0, n), name=f"euclidean({n})", **kwargs)

    @classmethod
    def minkowski(cls, n: int, **kwargs) -> "MetricSpace":
        """Signature (1, n-1) with time coordinate x0."""
        entries = [[("-1" if i == 0 else "1") if i == j else "0" for j in range(n)] for i in range(n)]
        return cls(entries, signature=(1, n - 1), name=f"minkowski({n})", **kwargs)

    @classmethod
    def conformal(cls, factor: Union[str, Expression], base: "MetricSpace", **kwargs) -> "MetricSpace":
        """factor * base, with factor assumed positive on the chart."""
        factor = coerce(factor)
        entries = []
        for row in base.entries:
            new_row = []
            for entry in row:
                if entry.is_constant and entry.evaluate({}) == 0.0:
                    new_row.append(parse("0"))
                else:
                    new_row.append(parse(f"({factor.source}) * ({entry.source})"))
            entries.append(new_row)
        kwargs.setdefault("box", base.box)
        kwargs.setdefault("h_amb", base.h_amb)
        return cls(entries, signature=base.signature,
                   name=f"conformal({factor.source}, {base.name})", **kwargs)

    # ------------------------------------------------------------------
    # Pointwise evaluation
    # ------------------------------------------------------------------

    @property
    def is_flat_constant(self) -> bool:
        return self._constant is not None

    def metric_field(self, points: np.ndarray, check: bool = True) -> np.ndarray:
        """
        Metric at every point of an array.

        Args:
            points: (..., n) chart points
            check: verify nondegeneracy and signature

        Returns:
            (..., n, n) symmetric matrices
        """
        points = np.asarray(points, dtype=float)
        shape = points.shape[:-1]
        if self._constant is not None:
            g = np.broadcast_to(self._constant, shape + (self.n, self.n)).copy()
        else:
            bindings = _bindings(points, self._names)
            g = np.empty(shape + (self.n, self.n))
            for i in range(self.n):
                for j in range(i, self.n):
                    value = self.entries[i][j].evaluate_array(bindings, shape)
                    g[..., i, j] = value
                    g[..., j, i] = value
        if check:
            self._check(points, g)
        return g

    def _check(self, points: np.ndarray, g: np.ndarray) -> None:
        det = np.linalg.det(g)
        bad = np.abs(det) <= DET_TOLERANCE
        if np.any(bad):
            idx = tuple(np.argwhere(bad)[0])
            raise NondegeneracyError(points[idx], float(det[idx]))
        if self.signature is None:
            return
        eig = np.linalg.eigvalsh(g)
        negatives = np.sum(eig < 0, axis=-1)
        wrong = negatives != self.signature[0]
        if np.any(wrong):
            idx = tuple(np.argwhere(wrong)[0])
            found = (int(negatives[idx]), self.n - int(negatives[idx]))
            raise SignatureError(points[idx], found, self.signature)

    def metric_at(self, x: Sequence[float]) -> np.ndarray:
        return self.metric_field(np.asarray(x, dtype=float)[None, :])[0]

    def inverse_metric_field(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.metric_field(points))

    def sqrt_abs_det_field(self, points: np.ndarray) -> np.ndarray:
        return np.sqrt(np.abs(np.linalg.det(self.metric_field(points))))

    def inner(self, x: Sequence[float], v: Sequence[float], w: Sequence[float]) -> float:
        return float(np.asarray(v, dtype=float) @ self.metric_at(x) @ np.asarray(w, dtype=float))

    def volume_form(self, x: Sequence[float], *vectors: Sequence[float]) -> float:
        if len(vectors) != self.n:
            raise MetricError(f"Volume form takes {self.n} vectors, got {len(vectors)}")
        g = self.metric_at(x)
        columns = np.column_stack([np.asarray(v, dtype=float) for v in vectors])
        return float(np.sqrt(abs(np.linalg.det(g))) * np.linalg.det(columns))

    def volume_form_field(self, points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        """Omega on (..., n, n) column-stacked vectors at (..., n) points."""
        return self.sqrt_abs_det_field(points) * np.linalg.det(vectors)

    def inverse_metric_derivative_field(self, points: np.ndarray) -> np.ndarray:
        """
        Central-difference derivatives of g^{-1}.

        Returns:
            (..., n, n, n) array d[..., k, i, j] = d(g^{ij})/dx^k
        """
        points = np.asarray(points, dtype=float)
        out = np.zeros(points.shape[:-1] + (self.n, self.n, self.n))
        if self._constant is not None:
            return out
        h = self.h_amb
        for k in range(self.n):
            step = np.zeros(self.n)
            step[k] = h
            plus = self.inverse_metric_field(points + step)
            minus = self.inverse_metric_field(points - step)
            out[..., k, :, :] = (plus - minus) / (2.0 * h)
        return out

    def random_points(self, count: int, rng: np.random.Generator, shrink: float = 0.8) -> np.ndarray:
        """Uniform points in the central part of the chart box."""
        lo = np.array([a for a, _ in self.box])
        hi = np.array([b for _, b in self.box])
        mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0 * shrink
        return mid + half * rng.uniform(-1.0, 1.0, size=(count, self.n))

    def describe(self) -> str:
        sig = f"signature {self.signature}" if self.signature else "signature unchecked"
        return f"{self.name}, n = {self.n}, {sig}"

    def __repr__(self) -> str:
        return f"MetricSpace({self.describe()})"


# Module-level wrappers

def metric_at(m: MetricSpace, x: Sequence[float]) -> np.ndarray:
    return m.metric_at(x)


def volume_form(m: MetricSpace, x: Sequence[float], *vectors: Sequence[float]) -> float:
    return m.volume_form(x, *vectors)


def inner(m: MetricSpace, x: Sequence[float], v: Sequence[float], w: Sequence[float]) -> float:
    return m.inner(x, v, w)


BUILTIN_METRICS = {
    "euclidean": MetricSpace.euclidean,
    "minkowski": MetricSpace.minkowski,
}


def build_metric(spec: Mapping) -> MetricSpace:
    """
    Build a metric from a scenario block.

    Accepted shapes:
        {"builtin": "minkowski", "dim": 4}
        {"builtin": "conformal", "factor": "exp(2*x1)", "base": {...}}
        {"entries": [[...], ...], "signature": [1, 3]}
    """
    extra = {}
    if spec.get("box"):
        extra["box"] = [tuple(b) for b in spec["box"]]
    if spec.get("h_amb"):
        extra["h_amb"] = float(spec["h_amb"])
    builtin = spec.get("builtin")
    if builtin == "conformal":
        return MetricSpace.conformal(spec["factor"], build_metric(spec["base"]), **extra)
    if builtin is not None:
        if builtin not in BUILTIN_METRICS:
            raise MetricError(f"Unknown builtin metric '{builtin}'")
        return BUILTIN_METRICS[builtin](int(spec["dim"]), **extra)
    signature = spec.get("signature")
    return MetricSpace(spec["entries"], signature=tuple(signature) if signature else None, **extra)


# ----------------------------------------------------------------------------
# Differential forms with expression coefficients
# ----------------------------------------------------------------------------

class ExpressionForm:
    """
    A k-form sum_I c_I(x) dx^I on the chart of an n-dimensional space.

    Components are keyed by strictly increasing index tuples; the JSON form
    uses comma-separated keys, e.g. {"1,2,3": "x0"}.
    """

    def __init__(self, n: int, degree: int, components: Mapping[Tuple[int, ...], Union[str, float, Expression]],
                 variables: Optional[Sequence[str]] = None, h: float = DEFAULT_H_AMB):
        if degree < 0 or degree > n:
            raise MetricError(f"Form degree {degree} out of range for dimension {n}")
        self.n = n
        self.degree = degree
        self.h = float(h)
        self.variables = list(variables) if variables is not None else coordinate_names(n)
        if len(self.variables) != n:
            raise MetricError(f"Expected {n} coordinate names, got {len(self.variables)}")
        cleaned: Dict[Tuple[int, ...], Expression] = {}
        for key, value in components.items():
            index = tuple(int(i) for i in key)
            if len(index) != degree or list(index) != sorted(set(index)):
                raise MetricError(f"Form component key {key} must be {degree} increasing indices")
            if any(i < 0 or i >= n for i in index):
                raise MetricError(f"Form component key {key} out of range 0..{n - 1}")
            expression = coerce(value)
            stray = expression.variables - set(self.variables)
            if stray:
                raise MetricError(f"Form coefficient {expression.source!r} uses unknown names {sorted(stray)}")
            cleaned[index] = expression
        self.components = cleaned

    @classmethod
    def from_dict(cls, n: int, degree: int, data: Mapping[str, Union[str, float]],
                  variables: Optional[Sequence[str]] = None, h: float = DEFAULT_H_AMB) -> "ExpressionForm":
        components = {}
        for key, value in data.items():
            index = tuple(int(part) for part in str(key).split(",") if part.strip() != "")
            components[index] = value
        return cls(n, degree, components, variables=variables, h=h)

    def to_dict(self) -> Dict[str, str]:
        return {",".join(str(i) for i in key): expr.source for key, expr in self.components.items()}

    def coefficients(self, points: np.ndarray) -> Dict[Tuple[int, ...], np.ndarray]:
        points = np.asarray(points, dtype=float)
        bindings = _bindings(points, self.variables)
        shape = points.shape[:-1]
        return {key: e.evaluate_array(bindings, shape) for key, e in self.components.items()}

    def evaluate_field(self, points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        """
        Evaluate on k column vectors at each point.

        Args:
            points: (..., n)
            vectors: (..., n, k)

        Returns:
            (...) values sum_I c_I(x) det(vectors[I, :])
        """
        vectors = np.asarray(vectors, dtype=float)
        points = np.asarray(points, dtype=float)
        total = np.zeros(points.shape[:-1])
        for key, coef in self.coefficients(points).items():
            if self.degree == 0:
                total = total + coef
            else:
                total = total + coef * np.linalg.det(vectors[..., list(key), :])
        return total

    def evaluate(self, x: Sequence[float], *vectors: Sequence[float]) -> float:
        columns = np.column_stack([np.asarray(v, dtype=float) for v in vectors]) if vectors \
            else np.zeros((self.n, 0))
        return float(self.evaluate_field(np.asarray(x, dtype=float)[None, :], columns[None, :, :])[0])

    def exterior_derivative_field(self, points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        """
        d(form) on k+1 constant vector fields, by central differences.

        d a(X0..Xk) = sum_i (-1)^i X_i( a(X0..^Xi..Xk) ) for constant X_i.

        Args:
            points: (..., n)
            vectors: (..., n, k+1)
        """
        points = np.asarray(points, dtype=float)
        vectors = np.asarray(vectors, dtype=float)
        k1 = self.degree + 1
        total = np.zeros(points.shape[:-1])
        for i in range(k1):
            rest = np.delete(vectors, i, axis=-1)
            step = self.h * vectors[..., :, i]
            plus = self.evaluate_field(points + step, rest)
            minus = self.evaluate_field(points - step, rest)
            total = total + (-1) ** i * (plus - minus) / (2.0 * self.h)
        return total

    def basis_components(self) -> Iterable[Tuple[int, ...]]:
        return combinations(range(self.n), self.degree)


def exterior_derivative_residual(m: MetricSpace, form: ExpressionForm, points: np.ndarray) -> float:
    """
    max |d(form) - Omega| on the standard basis at the given points.

    form must be an (n-1)-form on the chart of m.
    """
    if form.degree != m.n - 1 or form.n != m.n:
        raise MetricError(f"Potential must be an {m.n - 1}-form on R^{m.n}, got degree {form.degree}")
    points = np.asarray(points, dtype=float)
    basis = np.broadcast_to(np.eye(m.n), points.shape[:-1] + (m.n, m.n))
    d_form = form.exterior_derivative_field(points, basis)
    return float(np.max(np.abs(d_form - m.sqrt_abs_det_field(points))))
