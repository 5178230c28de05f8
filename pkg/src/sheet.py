"""
World Sheets - Sampled codimension-2 submanifolds with fixed boundary

A DiscreteSheet samples a parametrized (n-2)-dimensional submanifold of a
chart metric on a tensor-product parameter grid. Building one computes
tangents (central differences; one-sided second order at non-periodic
ends), the induced metric, the volume density, trapezoid weights and an
oriented normal frame, and rejects anything that is not a world-sheet
(normal plane not definite somewhere).

Conventions shared by every module:
    C1  (e_1, ..., e_k, f1, f2) is positively oriented in the chart
    C2  J f1 = f2, J f2 = -f1
    C3  the 2-form integrand is Omega(w, v, e_1, ..., e_k)

Normal fields are stored as ambient vectors, so in-plane rotations of the
frame never change any computed quantity. Flipping C1 flips both J and the
2-form, leaving every compatibility identity intact.
"""

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ambient import MetricSpace
from expr import Expression, coerce

MIN_SAMPLES = 8
RANK_TOLERANCE = 1e-10
INDUCED_DET_TOLERANCE = 1e-10
BOUNDARY_TOLERANCE = 1e-9
MAP_TANGENT_STEP = 1e-4


class WorldSheetError(ValueError):
    """Base class for sheet construction and validation failures."""


class DegenerateTangentError(WorldSheetError):
    """Parameter tangents do not span a k-plane at some vertex."""

    def __init__(self, vertex: Tuple[int, ...], detail: str):
        self.vertex = vertex
        super().__init__(f"Degenerate tangents at vertex {vertex}: {detail}")


class IndefiniteNormalError(WorldSheetError):
    """The normal plane metric is not definite at some vertex."""

    def __init__(self, vertex: Tuple[int, ...], signs: Tuple[int, int], eigenvalues: Sequence[float]):
        self.vertex = vertex
        self.signs = signs
        self.eigenvalues = tuple(float(e) for e in eigenvalues)
        super().__init__(
            f"Normal plane not definite at vertex {vertex}: eigenvalue signs {signs} "
            f"(eigenvalues {', '.join(f'{e:.3e}' for e in self.eigenvalues)})"
        )


class SheetMismatchError(WorldSheetError):
    """A field or sheet does not live on the expected grid."""


# ----------------------------------------------------------------------------
# Parameter grids
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamAxis:
    """One parameter direction. Periodic axes are angles with endpoint identified."""
    name: str
    start: float
    stop: float
    samples: int
    periodic: bool = False

    def __post_init__(self):
        if self.samples < MIN_SAMPLES:
            raise WorldSheetError(f"Parameter '{self.name}' needs at least {MIN_SAMPLES} samples, got {self.samples}")
        if not self.stop > self.start:
            raise WorldSheetError(f"Parameter '{self.name}' range [{self.start}, {self.stop}] is empty")

    @property
    def intervals(self) -> int:
        return self.samples if self.periodic else self.samples - 1

    @property
    def spacing(self) -> float:
        return (self.stop - self.start) / self.intervals

    def values(self) -> np.ndarray:
        if self.periodic:
            return self.start + (self.stop - self.start) * np.arange(self.samples) / self.samples
        return np.linspace(self.start, self.stop, self.samples)

    def weights(self) -> np.ndarray:
        w = np.full(self.samples, self.spacing)
        if not self.periodic:
            w[0] *= 0.5
            w[-1] *= 0.5
        return w

    def coarsened(self, levels: int) -> "ParamAxis":
        """Same range with the interval count divided by 2**levels."""
        factor = 2 ** levels
        if self.intervals % factor:
            raise WorldSheetError(
                f"Parameter '{self.name}' with {self.intervals} intervals cannot be coarsened {levels} level(s)"
            )
        intervals = self.intervals // factor
        samples = intervals if self.periodic else intervals + 1
        return ParamAxis(self.name, self.start, self.stop, samples, self.periodic)

    def to_dict(self) -> dict:
        return {"name": self.name, "range": [self.start, self.stop],
                "samples": self.samples, "periodic": self.periodic}


@dataclass(frozen=True)
class ParamDomain:
    axes: Tuple[ParamAxis, ...]

    def __post_init__(self):
        names = [a.name for a in self.axes]
        if len(set(names)) != len(names):
            raise WorldSheetError(f"Duplicate parameter names {names}")

    @property
    def k(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(a.samples for a in self.axes)

    @property
    def names(self) -> List[str]:
        return [a.name for a in self.axes]

    def mesh(self) -> List[np.ndarray]:
        return list(np.meshgrid(*[a.values() for a in self.axes], indexing="ij"))

    def weights(self) -> np.ndarray:
        """Tensor-product trapezoid weights (uniform closed rule on periodic axes)."""
        w = np.ones(())
        for axis in self.axes:
            w = np.multiply.outer(w, axis.weights())
        return w

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for a, axis in enumerate(self.axes):
            if axis.periodic:
                continue
            index = [slice(None)] * self.k
            index[a] = 0
            mask[tuple(index)] = True
            index[a] = -1
            mask[tuple(index)] = True
        return mask

    def bump(self) -> np.ndarray:
        """prod sin(pi * normalized parameter) over non-periodic axes; zero on the boundary."""
        out = np.ones(self.shape)
        for a, axis in enumerate(self.axes):
            if axis.periodic:
                continue
            tau = np.linspace(0.0, 1.0, axis.samples)
            tau_shape = [1] * self.k
            tau_shape[a] = axis.samples
            profile = np.sin(np.pi * tau)
            profile[0] = profile[-1] = 0.0
            out = out * profile.reshape(tau_shape)
        return out

    def normalized(self) -> List[np.ndarray]:
        """Per-axis parameter mesh rescaled to [0, 1)."""
        return [(m - axis.start) / (axis.stop - axis.start) for m, axis in zip(self.mesh(), self.axes)]

    def coarsened(self, levels: int) -> "ParamDomain":
        return ParamDomain(tuple(a.coarsened(levels) for a in self.axes))

    @property
    def has_boundary(self) -> bool:
        return any(not a.periodic for a in self.axes)

    def describe(self) -> str:
        return " x ".join(f"{a.name}[{a.samples}{'p' if a.periodic else ''}]" for a in self.axes)


# ----------------------------------------------------------------------------
# Frames and fields
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalFrame:
    """Per-vertex sigma-orthonormal, C1-positive normal pair."""
    f1: np.ndarray
    f2: np.ndarray
    sigma: np.ndarray

    def rotated(self, phi: Union[float, np.ndarray]) -> "NormalFrame":
        """In-plane rotation by phi (orientation preserving)."""
        c = np.cos(phi)[..., None] if np.ndim(phi) else np.cos(phi)
        s = np.sin(phi)[..., None] if np.ndim(phi) else np.sin(phi)
        return NormalFrame(c * self.f1 + s * self.f2, -s * self.f1 + c * self.f2, self.sigma)


@dataclass(frozen=True)
class NormalField:
    """
    Tangent vector to the space of sheets: per-vertex ambient vectors in
    the normal planes. boundary_zero fields vanish exactly on the boundary.
    """
    values: np.ndarray
    boundary_zero: bool = True

    def __add__(self, other: "NormalField") -> "NormalField":
        return NormalField(self.values + other.values, self.boundary_zero and other.boundary_zero)

    def __sub__(self, other: "NormalField") -> "NormalField":
        return NormalField(self.values - other.values, self.boundary_zero and other.boundary_zero)

    def __mul__(self, c: float) -> "NormalField":
        return NormalField(c * self.values, self.boundary_zero)

    __rmul__ = __mul__

    def __neg__(self) -> "NormalField":
        return NormalField(-self.values, self.boundary_zero)

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=-1))) if self.values.size else 0.0


# ----------------------------------------------------------------------------
# Sheet
# ----------------------------------------------------------------------------

def grid_tangents(domain: ParamDomain, vertices: np.ndarray) -> np.ndarray:
    """
    Parameter derivatives of vertex arrays with arbitrary leading batch axes.

    vertices: (..., *domain.shape, n) -> (..., *domain.shape, n, k)
    """
    k = domain.k
    out = []
    for a, axis in enumerate(domain.axes):
        ax = vertices.ndim - 1 - k + a
        h = axis.spacing
        if axis.periodic:
            d = (np.roll(vertices, -1, axis=ax) - np.roll(vertices, 1, axis=ax)) / (2.0 * h)
        else:
            d = np.gradient(vertices, h, axis=ax, edge_order=2)
        out.append(d)
    return np.stack(out, axis=-1)


def _gram(tangents: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.einsum("...ia,...ij,...jb->...ab", tangents, g, tangents)


def _corner(vertices: np.ndarray, domain: ParamDomain, offset: Sequence[int]) -> np.ndarray:
    """out[cell] = vertices[cell + offset] on the cell grid; leading batch axes allowed."""
    out = vertices
    for a, (axis, o) in enumerate(zip(domain.axes, offset)):
        ax = vertices.ndim - 1 - domain.k + a
        if axis.periodic:
            out = np.roll(out, -o, axis=ax)
        else:
            index = [slice(None)] * out.ndim
            index[ax] = slice(o, o + axis.samples - 1)
            out = out[tuple(index)]
    return out


def cell_areas(metric: MetricSpace, domain: ParamDomain, vertices: np.ndarray) -> np.ndarray:
    """
    Area of every grid cell from its corner vertices, without world-sheet
    validation. Cell i spans vertices i and i + 1 on each axis (wrapping on
    periodic axes).

    Each cell is split into the k! simplices of the monotone corner-to-corner
    paths, started from all 2^k corners and averaged; a simplex spans the edge
    vectors along its path. The metric is taken at the cell centre.
    """
    k = domain.k
    corners = {o: _corner(vertices, domain, o) for o in itertools.product((0, 1), repeat=k)}
    g = metric.metric_field(sum(corners.values()) / len(corners), check=False)
    spacing = [axis.spacing for axis in domain.axes]
    total, count = 0.0, 0
    for start in corners:
        for order in itertools.permutations(range(k)):
            columns: List[np.ndarray] = [np.empty(0)] * k
            current = start
            for a in order:
                step = tuple(1 - c if b == a else c for b, c in enumerate(current))
                columns[a] = (corners[step] - corners[current]) / spacing[a]
                current = step
            total = total + np.sqrt(np.abs(np.linalg.det(_gram(np.stack(columns, axis=-1), g))))
            count += 1
    return float(np.prod(spacing)) * total / count


def _vertex(index: np.ndarray) -> Tuple[int, ...]:
    return tuple(int(i) for i in index)


class DiscreteSheet:
    """
    Validated world-sheet on a parameter grid.

    Attributes (grid-shaped arrays, grid axes first):
        vertices (*, n), tangents (*, n, k), g (*, n, n), induced (*, k, k),
        dvol (*), weights (*), boundary_mask (*), frame (NormalFrame)
    """

    def __init__(self, metric: MetricSpace, domain: ParamDomain, vertices: np.ndarray,
                 map_exprs: Optional[Tuple[Expression, ...]] = None,
                 boundary_points: Optional[np.ndarray] = None):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.shape != domain.shape + (metric.n,):
            raise SheetMismatchError(
                f"Vertex array shape {vertices.shape} does not match grid {domain.shape} x n={metric.n}"
            )
        if domain.k != metric.n - 2:
            raise SheetMismatchError(f"Sheet needs n-2 = {metric.n - 2} parameters, got {domain.k}")
        self.metric = metric
        self.domain = domain
        self.vertices = vertices
        self.map_exprs = map_exprs
        self.boundary_mask = domain.boundary_mask()
        self.weights = domain.weights()
        self.tangents = grid_tangents(domain, vertices)
        self.g = metric.metric_field(vertices)
        self._validate()
        if boundary_points is None:
            boundary_points = vertices[self.boundary_mask]
        elif boundary_points.shape == vertices[self.boundary_mask].shape:
            moved = np.max(np.abs(vertices[self.boundary_mask] - boundary_points), initial=0.0)
            if moved > BOUNDARY_TOLERANCE:
                raise WorldSheetError(f"Boundary moved by {moved:.3e} (tolerance {BOUNDARY_TOLERANCE})")
        self.boundary_points = boundary_points

    @property
    def n(self) -> int:
        return self.metric.n

    @property
    def k(self) -> int:
        return self.domain.k

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.domain.shape

    @property
    def sign(self) -> int:
        """Common sign sigma of the normal planes."""
        return int(self.frame.sigma.flat[0])

    def _validate(self) -> None:
        k, n = self.k, self.n
        E = self.tangents
        sv = np.linalg.svd(E, compute_uv=False)
        scale = np.maximum(sv[..., 0], 1e-300)
        bad = sv[..., -1] <= RANK_TOLERANCE * scale
        if np.any(bad):
            idx = np.argwhere(bad)[0]
            raise DegenerateTangentError(_vertex(idx), f"tangent rank < {k} (singular values {sv[tuple(idx)]})")

        # Normal plane: null space of the covectors g(e_i, .)
        A = np.einsum("...ia,...ij->...aj", E, self.g)
        _, _, vh = np.linalg.svd(A, full_matrices=True)
        N = np.swapaxes(vh[..., k:, :], -1, -2)  # (*, n, 2)
        Q = _gram(N, self.g)
        eig = np.linalg.eigvalsh(Q)
        tol = 1e-10 * np.maximum(1.0, np.max(np.abs(self.g), axis=(-1, -2)))
        signs = np.where(eig > tol[..., None], 1, np.where(eig < -tol[..., None], -1, 0))
        definite = (signs[..., 0] == signs[..., 1]) & (signs[..., 0] != 0)
        if not np.all(definite):
            idx = tuple(np.argwhere(~definite)[0])
            raise IndefiniteNormalError(idx, (int(signs[idx][0]), int(signs[idx][1])), eig[idx])
        sigma = signs[..., 0].astype(float)
        if np.any(sigma != sigma.flat[0]):
            idx = tuple(np.argwhere(sigma != sigma.flat[0])[0])
            raise IndefiniteNormalError(idx, (int(signs[idx][0]), int(signs[idx][1])), eig[idx])

        self.induced = _gram(E, self.g)
        det = np.linalg.det(self.induced)
        if np.any(np.abs(det) <= INDUCED_DET_TOLERANCE):
            idx = np.argwhere(np.abs(det) <= INDUCED_DET_TOLERANCE)[0]
            raise DegenerateTangentError(_vertex(idx), f"induced metric determinant {det[tuple(idx)]:.3e}")
        self.dvol = np.sqrt(np.abs(det))
        self.frame = self._orthonormal_frame(N, sigma)

    def _orthonormal_frame(self, N: np.ndarray, sigma: np.ndarray) -> NormalFrame:
        n1, n2 = N[..., 0], N[..., 1]
        f1 = n1 / np.sqrt(sigma * self.inner(n1, n1))[..., None]
        f2 = n2 - (sigma * self.inner(n2, f1))[..., None] * f1
        f2 = f2 / np.sqrt(sigma * self.inner(f2, f2))[..., None]
        # C1: det[e_1..e_k, f1, f2] > 0 (sqrt|det g| > 0 does not change the sign)
        full = np.concatenate([self.tangents, f1[..., None], f2[..., None]], axis=-1)
        flip = np.linalg.det(full) < 0
        f2 = np.where(flip[..., None], -f2, f2)
        return NormalFrame(f1, f2, sigma)

    def inner(self, v: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Pointwise g(v, w)."""
        return np.einsum("...i,...ij,...j->...", v, self.g, w)

    def refined_to(self, domain: ParamDomain) -> "DiscreteSheet":
        """Rebuild the same parametrization on another grid."""
        if self.map_exprs is None:
            raise SheetMismatchError("Sheet was built from a vertex array and cannot be resampled")
        return build_sheet(self.metric, domain, self.map_exprs)

    def describe(self) -> str:
        kind = "closed" if not self.domain.has_boundary else "with boundary"
        return f"sheet {self.domain.describe()} in {self.metric.name}, sigma={self.sign:+d}, {kind}"


# ----------------------------------------------------------------------------
# Operations
# ----------------------------------------------------------------------------

def build_sheet(metric: MetricSpace, domain: ParamDomain,
                mapping: Union[Sequence[Union[str, float, Expression]], np.ndarray]) -> DiscreteSheet:
    """
    Sample and validate a world-sheet.

    Args:
        metric: ambient chart metric
        domain: parameter grid (k = n - 2 axes)
        mapping: n expressions in the parameter names, or a (*grid, n) vertex array

    Raises:
        DegenerateTangentError, IndefiniteNormalError, SheetMismatchError
    """
    if isinstance(mapping, np.ndarray):
        return DiscreteSheet(metric, domain, mapping)
    exprs = tuple(coerce(e) for e in mapping)
    if len(exprs) != metric.n:
        raise SheetMismatchError(f"Map has {len(exprs)} components, metric dimension is {metric.n}")
    names = set(domain.names)
    for e in exprs:
        stray = e.variables - names
        if stray:
            raise SheetMismatchError(f"Map component {e.source!r} uses unknown names {sorted(stray)}")
    vertices = _sample_map(exprs, domain, domain.mesh())
    return DiscreteSheet(metric, domain, vertices, map_exprs=exprs)


def _sample_map(exprs: Sequence[Expression], domain: ParamDomain, mesh: Sequence[np.ndarray]) -> np.ndarray:
    bindings = dict(zip(domain.names, mesh))
    return np.stack([e.evaluate_array(bindings, domain.shape) for e in exprs], axis=-1)


def map_tangents(sheet: DiscreteSheet, rel_step: float = MAP_TANGENT_STEP) -> np.ndarray:
    """
    Parameter derivatives (*grid, n, k) of the map expressions at every vertex,
    by central differences of step rel_step * (stop - start) in the parameter.
    Unlike grid_tangents these do not depend on the grid spacing.

    Raises:
        SheetMismatchError: the sheet was built from a vertex array
    """
    if sheet.map_exprs is None:
        raise SheetMismatchError("Sheet was built from a vertex array and has no map to differentiate")
    domain = sheet.domain
    mesh = domain.mesh()
    out = []
    for a, axis in enumerate(domain.axes):
        delta = rel_step * (axis.stop - axis.start)
        ahead, behind = list(mesh), list(mesh)
        ahead[a] = mesh[a] + delta
        behind[a] = mesh[a] - delta
        out.append((_sample_map(sheet.map_exprs, domain, ahead)
                    - _sample_map(sheet.map_exprs, domain, behind)) / (2.0 * delta))
    return np.stack(out, axis=-1)


def normal_frame(sheet: DiscreteSheet, align: bool = True) -> NormalFrame:
    """
    C1-positive sigma-orthonormal normal frame.

    With align=True frames are rotated in-plane so that each one is as close
    as possible to its predecessor along grid lines (axis by axis).
    """
    frame = sheet.frame
    if not align:
        return frame
    f1, f2, sigma = frame.f1.copy(), frame.f2.copy(), frame.sigma
    k = sheet.k
    for a in range(k):
        for i in range(1, sheet.shape[a]):
            cur = (slice(None),) * a + (i,) + (0,) * (k - a - 1)
            prev = (slice(None),) * a + (i - 1,) + (0,) * (k - a - 1)
            g = sheet.g[cur]
            s = sigma[cur]
            a1 = s * np.einsum("...i,...ij,...j->...", f1[prev], g, f1[cur])
            b1 = s * np.einsum("...i,...ij,...j->...", f1[prev], g, f2[cur])
            phi = np.arctan2(b1, a1)
            c, sn = np.cos(phi)[..., None], np.sin(phi)[..., None]
            new1 = c * f1[cur] + sn * f2[cur]
            new2 = -sn * f1[cur] + c * f2[cur]
            f1[cur], f2[cur] = new1, new2
    return NormalFrame(f1, f2, sigma)


def _check_field(sheet: DiscreteSheet, v: NormalField) -> None:
    if v.values.shape != sheet.vertices.shape:
        raise SheetMismatchError(
            f"Field shape {v.values.shape} does not match sheet vertices {sheet.vertices.shape}"
        )


def frame_components(sheet: DiscreteSheet, frame: NormalFrame, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(a, b) with the normal part of v = a f1 + b f2."""
    return frame.sigma * sheet.inner(v, frame.f1), frame.sigma * sheet.inner(v, frame.f2)


def rotate_J(sheet: DiscreteSheet, frame: Optional[NormalFrame], v: NormalField) -> NormalField:
    """J v = -b f1 + a f2 for v = a f1 + b f2 (convention C2)."""
    _check_field(sheet, v)
    frame = frame or sheet.frame
    a, b = frame_components(sheet, frame, v.values)
    values = a[..., None] * frame.f2 - b[..., None] * frame.f1
    if v.boundary_zero:
        values[sheet.boundary_mask] = 0.0
    return NormalField(values, v.boundary_zero)


def project_normal(sheet: DiscreteSheet, frame: Optional[NormalFrame], w: np.ndarray,
                   boundary_zero: bool = True) -> NormalField:
    """Pointwise g-orthogonal projection sigma [g(w,f1) f1 + g(w,f2) f2]."""
    w = np.asarray(w, dtype=float)
    if w.shape != sheet.vertices.shape:
        raise SheetMismatchError(f"Ambient field shape {w.shape} does not match sheet {sheet.vertices.shape}")
    frame = frame or sheet.frame
    a, b = frame_components(sheet, frame, w)
    values = a[..., None] * frame.f1 + b[..., None] * frame.f2
    if boundary_zero:
        values[sheet.boundary_mask] = 0.0
    return NormalField(values, boundary_zero)


def tangential_residual(sheet: DiscreteSheet, v: NormalField) -> float:
    """max_p,i |g(v, e_i)|."""
    _check_field(sheet, v)
    pairing = np.einsum("...i,...ij,...ja->...a", v.values, sheet.g, sheet.tangents)
    return float(np.max(np.abs(pairing))) if pairing.size else 0.0


def integrate(sheet: DiscreteSheet, values: Union[float, np.ndarray]) -> float:
    """sum_p W(p) dvol(p) f(p)."""
    f = np.broadcast_to(np.asarray(values, dtype=float), sheet.shape)
    return float(np.sum(sheet.weights * sheet.dvol * f))


def perturb(sheet: DiscreteSheet, v: NormalField, eps: float) -> DiscreteSheet:
    """
    Chart translation x(p) + eps v(p) on the same parameter grid.

    Boundary vertices are copied, not recomputed, when v is boundary-zero.

    Raises:
        WorldSheetError subclasses when the translated sheet is invalid
    """
    _check_field(sheet, v)
    if eps == 0.0:
        vertices = sheet.vertices.copy()
    else:
        vertices = sheet.vertices + eps * v.values
        if v.boundary_zero:
            vertices = np.where(sheet.boundary_mask[..., None], sheet.vertices, vertices)
    return DiscreteSheet(sheet.metric, sheet.domain, vertices,
                         boundary_points=sheet.boundary_points if v.boundary_zero else None)
