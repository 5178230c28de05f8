"""
Twistor Space - null covector lines, the CR structure and Gauss lifts

A point of the twistor space N over a chart point x is the line of a
complex null covector p = u + i v (g^{-1}(p, p) = 0, u and v real),
equivalently the oriented definite 2-plane span(u, v). N is handled on
the chart (x, u, v) in R^{3n} cut by four constraints:

    F1 = <u, v>          (orthogonal)
    F2 = <u, u> - <v, v> (equal length)
    F3 = <u, u> - sign   (scale)
    F4 = v_j             (phase: p_j real and positive)

where <,> is g^{-1} at x and j is a gauge index chosen where |p_j| is
largest. The slice has dimension 3n - 4.

The contact-like form theta = p_a dx^a and its differential carry the CR
structure: D is the radical of d(theta) restricted to ker(theta), of
complex rank n - 1, and H = Re D + Im D has real rank 2n - 2 with
J(Re d) = -Im d. The vertical tangent space of the fibration N -> M lies
inside H; TN / H has rank n - 2.

A world-sheet lifts to N through its normal planes (the Gauss lift); its
image is annihilated by theta, which is what the lift checks measure.
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from ambient import DEFAULT_H_AMB, ExpressionForm, MetricSpace
from sheet import DiscreteSheet, NormalField, ParamDomain, grid_tangents, map_tangents, perturb

RANK_RTOL = 1e-8
GAUGE_TOLERANCE = 1e-8
TRANSVERSALITY_TOLERANCE = 1e-6
LEVI_DEFAULT_STEP = 1e-4
LEVI_MAX_DRIFT = 0.5
LIFT_STEP = 1e-4


class TwistorError(ValueError):
    """Base class for twistor-space failures."""


class IndefinitePlaneError(TwistorError):
    """The 2-plane is not definite, so it has no non-real null covector line."""

    def __init__(self, index: Tuple[int, ...], gram: Sequence[float]):
        self.index = index
        self.gram = tuple(float(g) for g in gram)
        super().__init__(
            f"Plane at {index} is not definite (Gram entries aa={self.gram[0]:.3e}, "
            f"ab={self.gram[1]:.3e}, bb={self.gram[2]:.3e})"
        )


class GaugeDegeneracyError(TwistorError):
    """The gauge component p_j vanishes, so the phase slice is singular."""

    def __init__(self, index: Tuple[int, ...], gauge: int, modulus: float):
        self.index = index
        self.gauge = gauge
        self.modulus = modulus
        super().__init__(f"Gauge component p_{gauge} = {modulus:.3e} at {index} is too small")


class RankDeviationError(TwistorError):
    """A computed rank differs from the one the CR structure requires."""

    def __init__(self, what: str, computed: int, expected: int):
        self.what = what
        self.computed = computed
        self.expected = expected
        super().__init__(f"Rank of {what} is {computed}, expected {expected}")


class LeviFormError(TwistorError):
    """The local D frame could not be continued to neighbouring points."""


# ----------------------------------------------------------------------------
# Points of N
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TwistorPoint:
    """Gauge-fixed representative (x, u, v) of a null covector line."""
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    gauge: int
    sign: int

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def p(self) -> np.ndarray:
        return self.u + 1j * self.v

    @property
    def coords(self) -> np.ndarray:
        return np.concatenate([self.x, self.u, self.v])

    @classmethod
    def from_coords(cls, coords: np.ndarray, gauge: int, sign: int) -> "TwistorPoint":
        x, u, v = np.split(np.asarray(coords, dtype=float), 3)
        return cls(x, u, v, int(gauge), int(sign))


def _pair(ginv: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...ij,...j->...", a, ginv, b)


def _first_index(mask: np.ndarray) -> Tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(mask)[0])


def normalize_covectors(ginv: np.ndarray, a: np.ndarray, b: np.ndarray,
                        gauge: Optional[Union[int, np.ndarray]] = None):
    """
    Gauge-fixed orthonormal pair spanning the same oriented covector plane.

    sigma-Gram-Schmidt under g^{-1} gives <u, u> = <v, v> = sign and
    <u, v> = 0; the in-plane rotation then makes p_j real and positive.

    Args:
        ginv: (..., n, n) inverse metric at each point (leading axes >= 1)
        a, b: (..., n) covectors, oriented as (a, b)
        gauge: fixed gauge index, or None for argmax |p_j| per point

    Returns:
        (u, v, gauge, sign) with gauge and sign as integer arrays
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    gaa, gab, gbb = _pair(ginv, a, a), _pair(ginv, a, b), _pair(ginv, b, b)
    scale = np.abs(gaa) + np.abs(gbb)
    bad = ~(gaa * gbb - gab ** 2 > 1e-12 * scale ** 2)
    if np.any(bad):
        i = _first_index(bad)
        raise IndefinitePlaneError(i, (gaa[i], gab[i], gbb[i]))
    sign = np.sign(gaa)
    u = a / np.sqrt(sign * gaa)[..., None]
    v = b - (sign * _pair(ginv, b, u))[..., None] * u
    v = v / np.sqrt(sign * _pair(ginv, v, v))[..., None]

    p = u + 1j * v
    modulus = np.abs(p)
    if gauge is None:
        j = np.argmax(modulus, axis=-1)
    else:
        j = np.broadcast_to(np.asarray(gauge, dtype=int), modulus.shape[:-1])
    pj = np.take_along_axis(p, j[..., None], axis=-1)[..., 0]
    small = np.abs(pj) < GAUGE_TOLERANCE
    if np.any(small):
        i = _first_index(small)
        raise GaugeDegeneracyError(i, int(j[i]), float(np.abs(pj[i])))
    p = p * (np.conj(pj) / np.abs(pj))[..., None]
    u, v = p.real.copy(), p.imag.copy()
    np.put_along_axis(v, j[..., None], 0.0, axis=-1)
    return u, v, np.asarray(j), sign.astype(int)


def plane_to_null(metric: MetricSpace, x: Sequence[float], e1: Sequence[float], e2: Sequence[float],
                  gauge: Optional[int] = None) -> TwistorPoint:
    """Null covector line of the oriented definite plane span(e1, e2) at x."""
    x = np.asarray(x, dtype=float)
    g = metric.metric_at(x)
    a, b = g @ np.asarray(e1, dtype=float), g @ np.asarray(e2, dtype=float)
    u, v, j, sign = normalize_covectors(np.linalg.inv(g)[None], a[None], b[None], gauge)
    return TwistorPoint(x.copy(), u[0], v[0], int(j[0]), int(sign[0]))


def null_to_plane(metric: MetricSpace, point: TwistorPoint) -> np.ndarray:
    """Oriented spanning vectors (2, n) of the plane raised from (u, v)."""
    ginv = np.linalg.inv(metric.metric_at(point.x))
    return np.stack([ginv @ point.u, ginv @ point.v])


def principal_angle(plane_a: np.ndarray, plane_b: np.ndarray) -> float:
    """Largest principal angle between the row spans of two (2, n) arrays."""
    return float(np.max(linalg.subspace_angles(np.asarray(plane_a).T, np.asarray(plane_b).T)))


def random_twistor_point(metric: MetricSpace, rng: np.random.Generator,
                         x: Optional[Sequence[float]] = None, attempts: int = 200) -> TwistorPoint:
    """Random definite plane at a random (or given) chart point."""
    x = metric.random_points(1, rng)[0] if x is None else np.asarray(x, dtype=float)
    for _ in range(attempts):
        e1, e2 = rng.normal(size=(2, metric.n))
        try:
            return plane_to_null(metric, x, e1, e2)
        except (IndefinitePlaneError, GaugeDegeneracyError):
            continue
    raise TwistorError(f"No definite plane found at {x} after {attempts} attempts")


# ----------------------------------------------------------------------------
# CR structure
# ----------------------------------------------------------------------------

def constraint_jacobian(metric: MetricSpace, x: np.ndarray, u: np.ndarray, v: np.ndarray,
                        gauge: np.ndarray) -> np.ndarray:
    """(..., 4, 3n) derivatives of F1..F4 in the (x, u, v) chart."""
    n = x.shape[-1]
    ginv = metric.inverse_metric_field(x)
    dginv = metric.inverse_metric_derivative_field(x)
    gu = np.einsum("...ij,...j->...i", ginv, u)
    gv = np.einsum("...ij,...j->...i", ginv, v)
    d_uv = np.einsum("...i,...kij,...j->...k", u, dginv, v)
    d_uu = np.einsum("...i,...kij,...j->...k", u, dginv, u)
    d_vv = np.einsum("...i,...kij,...j->...k", v, dginv, v)

    C = np.zeros(x.shape[:-1] + (4, 3 * n))
    C[..., 0, :n], C[..., 0, n:2 * n], C[..., 0, 2 * n:] = d_uv, gv, gu
    C[..., 1, :n], C[..., 1, n:2 * n], C[..., 1, 2 * n:] = d_uu - d_vv, 2 * gu, -2 * gv
    C[..., 2, :n], C[..., 2, n:2 * n] = d_uu, 2 * gu
    row = C[..., 3, :]
    np.put_along_axis(row, (2 * n + np.broadcast_to(gauge, x.shape[:-1]))[..., None], 1.0, axis=-1)
    return C


def dtheta_matrix(n: int) -> np.ndarray:
    """W with d(theta)(X, Y) = X^T W Y on the chart, d(theta) = (du + i dv) ^ dx."""
    W = np.zeros((3 * n, 3 * n), dtype=complex)
    for j in range(n):
        W[n + j, j], W[j, n + j] = 1.0, -1.0
        W[2 * n + j, j], W[j, 2 * n + j] = 1j, -1j
    return W


def _singular_values(A: np.ndarray) -> np.ndarray:
    return np.linalg.svd(A, compute_uv=False)


def _numerical_rank(s: np.ndarray) -> np.ndarray:
    top = s[..., :1]
    return np.sum(s > RANK_RTOL * np.maximum(top, 1e-300), axis=-1)


def _check_rank(s: np.ndarray, expected: int, what: str) -> None:
    ranks = np.atleast_1d(_numerical_rank(s))
    wrong = ranks != expected
    if np.any(wrong):
        raise RankDeviationError(what, int(ranks[np.argmax(wrong)]), expected)


def _null_space(A: np.ndarray, rank: int, what: str) -> np.ndarray:
    """Batched orthonormal null space of (B, m, c) matrices of known rank."""
    _, s, vh = np.linalg.svd(A, full_matrices=True)
    _check_rank(s, rank, what)
    return vh[..., rank:, :].conj().swapaxes(-1, -2)


def _range(A: np.ndarray, rank: int, what: str) -> np.ndarray:
    u, s, _ = np.linalg.svd(A, full_matrices=False)
    _check_rank(s, rank, what)
    return u[..., :rank]


def _cr_arrays(metric: MetricSpace, x: np.ndarray, u: np.ndarray, v: np.ndarray,
               gauge: np.ndarray) -> Dict[str, np.ndarray]:
    """CR data at B points given as (B, n) arrays; every output has leading axis B."""
    n = x.shape[-1]
    batch = x.shape[0]
    C = constraint_jacobian(metric, x, u, v, gauge)
    T = _null_space(C, 4, "constraint Jacobian")

    theta = np.concatenate([u + 1j * v, np.zeros((batch, 2 * n))], axis=-1)
    theta_T = np.einsum("bi,bij->bj", theta, T)[:, None, :]
    K = _null_space(theta_T, 1, "theta on TN")
    W_T = np.einsum("bia,ij,bjc->bac", T, dtheta_matrix(n), T)
    M = np.einsum("bia,bij,bjc->bac", K, W_T, K)
    R = _null_space(M, 2 * n - 4, "d theta on ker theta")
    D = T @ K @ R

    A = np.concatenate([D.real, D.imag], axis=-1)
    H = _range(A, 2 * n - 2, "H")
    JA = np.concatenate([-D.imag, D.real], axis=-1)
    Ht = H.swapaxes(-1, -2)
    J = (Ht @ JA) @ np.linalg.inv(Ht @ A)

    fiber = np.zeros((batch, n, 3 * n))
    fiber[:, np.arange(n), np.arange(n)] = 1.0
    vertical = _null_space(np.concatenate([C, fiber], axis=1), n + 4, "vertical constraints")
    quotient = T @ _null_space(Ht @ T, 2 * n - 2, "H inside TN")
    return {"C": C, "T": T, "D": D, "H": H, "J": J, "vertical": vertical, "quotient": quotient}


@dataclass(eq=False)
class CRBasis:
    """
    CR data at one point of N.

    Attributes:
        tangent: (3n, 3n-4) orthonormal basis of TN in the chart
        d: (3n, n-1) complex basis of D
        h: (3n, 2n-2) orthonormal basis of H
        j: (2n-2, 2n-2) J in the h basis
        vertical: (3n, 2n-4) orthonormal basis of the fiber directions
        quotient: (3n, n-2) orthonormal complement of H in TN
    """
    tangent: np.ndarray
    d: np.ndarray
    h: np.ndarray
    j: np.ndarray
    vertical: np.ndarray
    quotient: np.ndarray

    def dims(self) -> Dict[str, int]:
        return {"dim_N": self.tangent.shape[1], "rank_D": self.d.shape[1],
                "rank_H": self.h.shape[1], "codim": self.quotient.shape[1]}


def cr_basis(metric: MetricSpace, point: TwistorPoint) -> CRBasis:
    """D, H and J at one point; raises RankDeviationError on unexpected ranks."""
    arrays = _cr_arrays(metric, point.x[None], point.u[None], point.v[None], np.array([point.gauge]))
    return CRBasis(arrays["T"][0], arrays["D"][0], arrays["H"][0], arrays["J"][0],
                   arrays["vertical"][0], arrays["quotient"][0])


def cr_dimensions(metric: MetricSpace, point: TwistorPoint) -> Dict[str, int]:
    """Numerical ranks at one point, computed without assuming the expected values."""
    n = point.n
    C = constraint_jacobian(metric, point.x, point.u, point.v, np.array(point.gauge))
    T = linalg.null_space(C, rcond=RANK_RTOL)
    theta = np.concatenate([point.p, np.zeros(2 * n)])
    K = linalg.null_space((theta @ T)[None, :], rcond=RANK_RTOL)
    M = K.T @ (T.T @ dtheta_matrix(n) @ T) @ K
    R = linalg.null_space(M, rcond=RANK_RTOL)
    D = T @ K @ R
    rank_h = int(_numerical_rank(_singular_values(np.hstack([D.real, D.imag])))) if D.size else 0
    return {"dim_N": T.shape[1], "rank_D": R.shape[1], "rank_H": rank_h, "codim": T.shape[1] - rank_h}


def expected_dimensions(n: int) -> Dict[str, int]:
    return {"dim_N": 3 * n - 4, "rank_D": n - 1, "rank_H": 2 * n - 2, "codim": n - 2}


def vertical_basis(metric: MetricSpace, point: TwistorPoint) -> np.ndarray:
    return cr_basis(metric, point).vertical


# ----------------------------------------------------------------------------
# Levi form
# ----------------------------------------------------------------------------

@dataclass
class LeviResult:
    sigma_min: float
    step: float
    matrix: np.ndarray


def _retract(metric: MetricSpace, coords: np.ndarray, gauge: int) -> np.ndarray:
    x, u, v = np.split(coords, 3, axis=-1)
    u, v, _, _ = normalize_covectors(metric.inverse_metric_field(x), u, v, gauge)
    return np.concatenate([x, u, v], axis=-1)


def _continued_frames(metric: MetricSpace, coords: np.ndarray, gauge: int, base: np.ndarray) -> np.ndarray:
    """The fixed vectors `base` projected onto D at each point of coords."""
    x, u, v = np.split(coords, 3, axis=-1)
    D = _cr_arrays(metric, x, u, v, np.full(x.shape[0], gauge))["D"]
    q, _ = np.linalg.qr(D)
    frames = q @ (q.conj().swapaxes(-1, -2) @ base)
    drift = np.linalg.norm(frames - base, axis=-2) / np.linalg.norm(base, axis=-2)
    if np.max(drift) > LEVI_MAX_DRIFT:
        raise LeviFormError(f"D frame moved by {np.max(drift):.3f} over the difference step")
    return frames


def _levi(metric: MetricSpace, point: TwistorPoint, step: float) -> LeviResult:
    m = point.n - 1
    base = _cr_arrays(metric, point.x[None], point.u[None], point.v[None], np.array([point.gauge]))
    D0, Q0 = base["D"][0], base["quotient"][0]
    directions = np.concatenate([D0.real, D0.imag], axis=1).T
    shifted = np.concatenate([point.coords + step * directions, point.coords - step * directions])
    frames = _continued_frames(metric, _retract(metric, shifted, point.gauge), point.gauge, D0)
    deriv = (frames[:2 * m] - frames[2 * m:]) / (2.0 * step)
    along_re, along_im = deriv[:m], deriv[m:]

    columns = []
    for i in range(m):
        for j in range(m):
            d_vi_vbarj = np.conj(along_re[i][:, j]) + 1j * np.conj(along_im[i][:, j])
            d_vbarj_vi = along_re[j][:, i] - 1j * along_im[j][:, i]
            c = Q0.T @ (d_vi_vbarj - d_vbarj_vi)
            columns.extend([c.real, c.imag])
    matrix = np.stack(columns, axis=1)
    return LeviResult(float(_singular_values(matrix)[-1]), step, matrix)


def levi_form(metric: MetricSpace, point: TwistorPoint, step: float = LEVI_DEFAULT_STEP) -> LeviResult:
    """
    Brackets [V_i, conj(V_j)] of a local D frame, modulo H.

    Columns of the result matrix are real and imaginary parts of the
    quotient coordinates; sigma_min > 0 means the Levi form is onto TN / H.
    A frame that cannot be continued over the step is retried once at half
    the step before the error propagates.
    """
    try:
        return _levi(metric, point, step)
    except LeviFormError:
        return _levi(metric, point, step / 2.0)


# ----------------------------------------------------------------------------
# Sheets in N
# ----------------------------------------------------------------------------

@dataclass(eq=False)
class TwistorSheet:
    """Grid of points of N in one gauge; `coords` is (*grid, 3n)."""
    metric: MetricSpace
    domain: ParamDomain
    coords: np.ndarray
    gauge: int
    sign: int
    provenance: str = "lifted"
    # (*grid, n, k) tangents of the base map, independent of the grid stencil
    base_tangents: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.coords.shape[-1] // 3

    @property
    def x(self) -> np.ndarray:
        return self.coords[..., :self.n]

    @property
    def u(self) -> np.ndarray:
        return self.coords[..., self.n:2 * self.n]

    @property
    def v(self) -> np.ndarray:
        return self.coords[..., 2 * self.n:]

    @property
    def p(self) -> np.ndarray:
        return self.u + 1j * self.v

    def tangents(self) -> np.ndarray:
        return grid_tangents(self.domain, self.coords)

    def cr_arrays(self) -> Dict[str, np.ndarray]:
        flat = self.coords.reshape(-1, 3 * self.n)
        x, u, v = np.split(flat, 3, axis=-1)
        return _cr_arrays(self.metric, x, u, v, np.full(flat.shape[0], self.gauge))

    def describe(self) -> str:
        return f"{self.provenance} sheet in N, grid {self.domain.shape}, gauge {self.gauge}, sign {self.sign:+d}"


def _lowered_frame(sheet: DiscreteSheet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.einsum("...ij,...j->...i", sheet.g, sheet.frame.f1)
    b = np.einsum("...ij,...j->...i", sheet.g, sheet.frame.f2)
    return np.linalg.inv(sheet.g), a, b


def _base_tangents(sheet: DiscreteSheet) -> Optional[np.ndarray]:
    return map_tangents(sheet) if sheet.map_exprs is not None else None


def lift_gauge(sheet: DiscreteSheet) -> int:
    """Gauge index whose smallest |p_j| over the sheet is largest."""
    ginv, a, b = _lowered_frame(sheet)
    u, v, _, _ = normalize_covectors(ginv, a, b)
    modulus = np.abs(u + 1j * v).reshape(-1, sheet.n)
    return int(np.argmax(np.min(modulus, axis=0)))


def gauss_lift(sheet: DiscreteSheet, gauge: Optional[int] = None,
               check_transversal: bool = True) -> TwistorSheet:
    """
    Lift each vertex to the null line of its oriented normal plane.

    Raises:
        GaugeDegeneracyError: the chosen p_j vanishes somewhere on the sheet
        TwistorError: the lift is not transversal to H
    """
    gauge = lift_gauge(sheet) if gauge is None else int(gauge)
    ginv, a, b = _lowered_frame(sheet)
    u, v, _, sign = normalize_covectors(ginv, a, b, gauge)
    lifted = TwistorSheet(sheet.metric, sheet.domain, np.concatenate([sheet.vertices, u, v], axis=-1),
                          gauge, int(sign.flat[0]), base_tangents=_base_tangents(sheet))
    if check_transversal:
        sigma = transversality(lifted)
        if not sigma > TRANSVERSALITY_TOLERANCE:
            raise TwistorError(f"Lift is not transversal to H (smallest singular value {sigma:.3e})")
    return lifted


def synthetic_sheet(sheet: DiscreteSheet, a: Sequence[float], b: Sequence[float]) -> TwistorSheet:
    """Sheet in N over the vertices of `sheet` carrying the constant covector plane span(a, b)."""
    ginv = sheet.metric.inverse_metric_field(sheet.vertices)
    shape = sheet.vertices.shape
    a = np.broadcast_to(np.asarray(a, dtype=float), shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), shape)
    u0, v0, _, _ = normalize_covectors(ginv, a, b)
    gauge = int(np.argmax(np.min(np.abs(u0 + 1j * v0).reshape(-1, sheet.n), axis=0)))
    u, v, _, sign = normalize_covectors(ginv, a, b, gauge)
    return TwistorSheet(sheet.metric, sheet.domain, np.concatenate([sheet.vertices, u, v], axis=-1),
                        gauge, int(sign.flat[0]), provenance="synthetic",
                        base_tangents=_base_tangents(sheet))


def transversality(ts: TwistorSheet) -> float:
    """Smallest singular value over vertices of [unit tangents | H] in TN coordinates."""
    n = ts.n
    arrays = ts.cr_arrays()
    Y = ts.tangents().reshape(-1, 3 * n, ts.domain.k)
    Y = Y / np.linalg.norm(Y, axis=-2, keepdims=True)
    stacked = np.concatenate([Y, arrays["H"]], axis=-1)
    proj = arrays["T"].swapaxes(-1, -2) @ stacked
    return float(np.min(_singular_values(proj)[..., -1]))


def theta_values(ts: TwistorSheet) -> np.ndarray:
    """
    (*grid, k) complex theta(Y_i) / (|p| |Y_i|).

    Y_i are the base map tangents when the sheet carries them, else the
    x-block of the grid tangents, which a Gauss lift annihilates exactly.
    """
    if ts.base_tangents is not None:
        Y = ts.base_tangents
    else:
        Y = ts.tangents()[..., :ts.n, :]
    theta = np.einsum("...i,...ik->...k", ts.p, Y)
    scale = np.linalg.norm(ts.p, axis=-1)[..., None] * np.linalg.norm(Y, axis=-2)
    return theta / scale


def theta_residual(ts: TwistorSheet) -> float:
    return float(np.max(np.abs(theta_values(ts))))


def lift_normal_field(sheet: DiscreteSheet, nu: NormalField, eps: float, gauge: int) -> np.ndarray:
    """Psi_* nu: central difference of the gauge-fixed lift along the perturbation chart."""
    plus = gauss_lift(perturb(sheet, nu, eps), gauge=gauge, check_transversal=False)
    minus = gauss_lift(perturb(sheet, nu, -eps), gauge=gauge, check_transversal=False)
    return (plus.coords - minus.coords) / (2.0 * eps)


def legendrian_residual(ts: TwistorSheet, w: np.ndarray) -> float:
    """
    Sup over vertices and tangent directions of
        d(theta)(w, Y_i) + Y_i(theta(w))
    i.e. the restriction of the Lie derivative of theta along w to the sheet.
    """
    n = ts.n
    Y = ts.tangents()
    w_p = w[..., n:2 * n] + 1j * w[..., 2 * n:]
    Y_p = Y[..., n:2 * n, :] + 1j * Y[..., 2 * n:, :]
    d_theta = (np.einsum("...i,...ik->...k", w_p, Y[..., :n, :])
               - np.einsum("...ik,...i->...k", Y_p, w[..., :n]))
    theta_w = np.einsum("...i,...i->...", ts.p, w[..., :n])
    along = grid_tangents(ts.domain, theta_w[..., None])[..., 0, :]
    return float(np.max(np.abs(d_theta + along)))


def vertical_field(ts: TwistorSheet) -> np.ndarray:
    """
    Fiber-direction field with no x component, chosen per vertex so that
    d(theta)(w, Y_1) is as large as the vertical directions allow.
    """
    n = ts.n
    V = ts.cr_arrays()["vertical"]
    Yx = ts.tangents()[..., :n, 0].reshape(-1, n)
    c = np.einsum("bia,bi->ba", V[:, n:2 * n] + 1j * V[:, 2 * n:], Yx)
    use_real = np.max(np.abs(c.real), axis=-1) >= np.max(np.abs(c.imag), axis=-1)
    coeff = np.where(use_real[:, None], c.real, c.imag)
    return np.einsum("bia,ba->bi", V, coeff).reshape(ts.coords.shape)


# ----------------------------------------------------------------------------
# Observables
# ----------------------------------------------------------------------------

def chart_names(n: int) -> Tuple[str, ...]:
    return tuple([f"x{i}" for i in range(n)] + [f"u{i}" for i in range(n)] + [f"v{i}" for i in range(n)])


def twistor_form(n: int, degree: int, components: Mapping[str, Union[str, float]],
                 h: float = DEFAULT_H_AMB) -> ExpressionForm:
    """Form on the (x, u, v) chart; coefficients may use x*, u* and v*."""
    return ExpressionForm.from_dict(3 * n, degree, components, variables=chart_names(n), h=h)


def observable_value(ts: TwistorSheet, gamma: ExpressionForm, coords: Optional[np.ndarray] = None) -> float:
    """f_gamma = quadrature of gamma over the grid (optionally moved to `coords`)."""
    coords = ts.coords if coords is None else coords
    Y = grid_tangents(ts.domain, coords)
    return float(np.sum(ts.domain.weights() * gamma.evaluate_field(coords, Y)))


def observable_derivative(ts: TwistorSheet, gamma: ExpressionForm, w: np.ndarray) -> float:
    """Integral of w _| d(gamma) over the sheet plus w _| gamma over its boundary."""
    Y = ts.tangents()
    interior = gamma.exterior_derivative_field(ts.coords, np.concatenate([w[..., None], Y], axis=-1))
    total = float(np.sum(ts.domain.weights() * interior))
    for a, axis in enumerate(ts.domain.axes):
        if axis.periodic:
            continue
        rest = np.delete(Y, a, axis=-1)
        beta = gamma.evaluate_field(ts.coords, np.concatenate([w[..., None], rest], axis=-1))
        weights = np.ones(())
        for b, other in enumerate(ts.domain.axes):
            if b != a:
                weights = np.multiply.outer(weights, other.weights())
        face = np.take(beta, -1, axis=a) - np.take(beta, 0, axis=a)
        total += (-1) ** a * float(np.sum(weights * face))
    return total


def observable_residual(ts: TwistorSheet, gamma: ExpressionForm, w: np.ndarray, eps: float) -> float:
    """|D_w f_gamma (central difference) - derivative formula|."""
    if gamma.degree != ts.domain.k or gamma.n != 3 * ts.n:
        raise TwistorError(f"Observable needs a {ts.domain.k}-form on R^{3 * ts.n}, "
                           f"got degree {gamma.degree} on R^{gamma.n}")
    fd = (observable_value(ts, gamma, ts.coords + eps * w)
          - observable_value(ts, gamma, ts.coords - eps * w)) / (2.0 * eps)
    return abs(fd - observable_derivative(ts, gamma, w))
