"""Macroscopic solvers on a periodic grid.

rho obeys a drift-diffusion continuity equation; the mean orientation theta0
obeys a quasilinear anisotropic equation whose diffusion matrix is
A(theta0) = alpha2 I - alpha3 P(theta0). theta0 is carried as the unit
vector (cos 2 theta0, sin 2 theta0), so its pi-periodicity never produces a
branch cut in the stencils. Arrays are indexed [ix, iy].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import (
    CFLViolation,
    DensityFloorViolated,
    InvalidParameter,
    MaxIterationsExceeded,
    NegativeConcentration,
    NotElliptic,
)
from .kinetic_ops import Coefficients, coefficients_from_r, theta_grid

RHO_MIN = 1e-8
N_THETA_AVERAGE = 128
INNER_TOL = 1e-10

PotentialLike = Union[None, np.ndarray, Callable]


# ------------------------------------------------------------------ state


@dataclass(frozen=True)
class MacroState:
    rho: np.ndarray
    c2: np.ndarray
    s2: np.ndarray
    time: float = 0.0
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float)
        c2 = np.array(self.c2, dtype=float)
        s2 = np.array(self.s2, dtype=float)
        if rho.ndim != 2 or rho.shape != c2.shape or rho.shape != s2.shape:
            raise InvalidParameter("rho, cos2theta and sin2theta must share one 2-D shape")
        if not np.all(np.isfinite(rho)) or np.any(rho < 0):
            raise NegativeConcentration("rho must be finite and nonnegative")
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise InvalidParameter("spacing must be two positive numbers")
        norm = np.hypot(c2, s2)
        if np.any(norm == 0) or not np.all(np.isfinite(norm)):
            raise InvalidParameter("orientation embedding has zero or non-finite modulus")
        for arr in (rho, c2 / norm, s2 / norm):
            arr.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "c2", c2 / norm)
        object.__setattr__(self, "s2", s2 / norm)
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))
        object.__setattr__(self, "time", float(self.time))

    @classmethod
    def from_theta(cls, rho, theta0, spacing=(1.0, 1.0), time: float = 0.0) -> "MacroState":
        theta0 = np.asarray(theta0, dtype=float)
        return cls(rho, np.cos(2 * theta0), np.sin(2 * theta0), time, tuple(spacing))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rho.shape

    @property
    def theta0(self) -> np.ndarray:
        th = 0.5 * np.arctan2(self.s2, self.c2)
        return np.where(th >= np.pi / 2, th - np.pi, th)

    @property
    def mass(self) -> float:
        return float(np.sum(self.rho) * self.spacing[0] * self.spacing[1])

    @property
    def mean_eta(self) -> float:
        """Modulus of the grid mean of exp(2i theta0)."""
        return float(np.hypot(np.mean(self.c2), np.mean(self.s2)))

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.shape
        hx, hy = self.spacing
        return np.meshgrid((np.arange(nx) + 0.5) * hx, (np.arange(ny) + 0.5) * hy, indexing="ij")


def potential_on_grid(U: PotentialLike, state: MacroState) -> np.ndarray:
    """Values of U at cell centers. U is None, a grid array, or a spatial
    potential callable returning (values, gradients)."""
    if U is None:
        return np.zeros(state.shape)
    if callable(U):
        X, Y = state.cell_centers()
        v, _ = U(np.stack([X.ravel(), Y.ravel()], axis=1))
        return np.asarray(v, dtype=float).reshape(state.shape)
    arr = np.asarray(U, dtype=float)
    if arr.shape != state.shape:
        raise InvalidParameter(f"potential grid shape {arr.shape} != {state.shape}")
    return arr


# ------------------------------------------------------------ stencils


def _shift(a, s, axis):
    """a at index i + s (periodic)."""
    return np.roll(a, -s, axis=axis)


def _d1(a, h, axis):
    return (_shift(a, 1, axis) - _shift(a, -1, axis)) / (2 * h)


def _d2(a, h, axis):
    return (_shift(a, 1, axis) - 2 * a + _shift(a, -1, axis)) / h**2


def _dxy(a, hx, hy):
    return _d1(_d1(a, hx, 0), hy, 1)


def _theta_derivatives(c, s, hx, hy):
    """Gradient and Hessian of theta0 from its double-angle embedding.

    With (c, s) = (cos 2t, sin 2t): grad t = (c grad s - s grad c) / 2 and
    the second derivatives follow the same pattern exactly.
    """
    tx = 0.5 * (c * _d1(s, hx, 0) - s * _d1(c, hx, 0))
    ty = 0.5 * (c * _d1(s, hy, 1) - s * _d1(c, hy, 1))
    txx = 0.5 * (c * _d2(s, hx, 0) - s * _d2(c, hx, 0))
    tyy = 0.5 * (c * _d2(s, hy, 1) - s * _d2(c, hy, 1))
    txy = 0.5 * (c * _dxy(s, hx, hy) - s * _dxy(c, hx, hy))
    return tx, ty, txx, tyy, txy


def _rotate(c, s, phi):
    """Rotate the embedding by phi (theta0 moves by phi/2) and renormalize."""
    cp, sp = np.cos(phi), np.sin(phi)
    c2 = c * cp - s * sp
    s2 = s * cp + c * sp
    n = np.hypot(c2, s2)
    return c2 / n, s2 / n


# ----------------------------------------------------------------- rho


def rho_stability_limit(state: MacroState, U0: PotentialLike, d: float) -> float:
    """Largest dt for which the explicit upwind scheme stays monotone."""
    U = potential_on_grid(U0, state)
    out = np.zeros(state.shape)
    for axis, h in ((0, state.spacing[0]), (1, state.spacing[1])):
        v = -(_shift(U, 1, axis) - U) / h  # velocity on the right face
        # a cell drains through its right face when v > 0 and its left when v < 0
        out += 2 * d / h**2 + (np.maximum(v, 0) + np.maximum(-_shift(v, -1, axis), 0)) / h
    rate = float(np.max(out))
    return np.inf if rate == 0 else 1.0 / rate


def rho_step(state: MacroState, U0: PotentialLike, d: float, dt: float) -> MacroState:
    """One explicit finite-volume step of d_t rho = div(rho grad U0) + d lap rho.

    Face fluxes use centered diffusion and upwinded drift velocity -grad U0,
    so the update is a sum of flux differences and conserves mass.
    """
    if d < 0 or dt <= 0:
        raise InvalidParameter("need d >= 0 and dt > 0")
    limit = rho_stability_limit(state, U0, d)
    if dt > limit:
        raise CFLViolation(f"dt={dt:.3g} exceeds the stability limit {limit:.3g}")
    U = potential_on_grid(U0, state)
    rho = state.rho
    out = rho.copy()
    for axis, h in ((0, state.spacing[0]), (1, state.spacing[1])):
        rho_r = _shift(rho, 1, axis)
        v = -(_shift(U, 1, axis) - U) / h
        flux = np.where(v > 0, v * rho, v * rho_r) - d * (rho_r - rho) / h
        out -= dt * (flux - _shift(flux, -1, axis)) / h
    # the monotone update can only go negative by rounding near rho = 0
    if np.min(out) < -1e-12 * max(np.max(rho), 1.0):
        raise NegativeConcentration("rho became negative")
    return MacroState(np.maximum(out, 0.0), state.c2, state.s2, state.time + dt, state.spacing)


# ---------------------------------------------------------------- theta


def matrix_A(theta0, alpha2: float, alpha3: float) -> np.ndarray:
    """A(theta0) with shape theta0.shape + (2, 2)."""
    t = np.asarray(theta0, dtype=float)
    c, s = np.cos(2 * t), np.sin(2 * t)
    out = np.empty(t.shape + (2, 2))
    out[..., 0, 0] = alpha2 - alpha3 * c
    out[..., 1, 1] = alpha2 + alpha3 * c
    out[..., 0, 1] = out[..., 1, 0] = -alpha3 * s
    return out


def angular_force_average(theta0, U1: Callable, r: float, n_theta: int = N_THETA_AVERAGE) -> np.ndarray:
    """<d_theta U1> against the von Mises law centered at each theta0.

    The weights are normalized on the grid itself, so a constant derivative
    averages to itself exactly.
    """
    t0 = np.asarray(theta0, dtype=float)
    phi = theta_grid(n_theta)
    w = np.exp(r * (np.cos(2 * phi) - 1.0))
    w /= w.sum()
    _, dU = U1(t0[..., None] + phi)
    return np.asarray(dU, dtype=float) @ w


def _theta_rate(state: MacroState, coeffs: Coefficients, U0: PotentialLike, U1: Optional[Callable]):
    hx, hy = state.spacing
    c, s, rho = state.c2, state.s2, state.rho
    a2, a3, a4, a5 = coeffs.alpha2, coeffs.alpha3, coeffs.alpha4, coeffs.alpha5
    tx, ty, txx, tyy, txy = _theta_derivatives(c, s, hx, hy)
    U = potential_on_grid(U0, state)
    ux, uy = _d1(U, hx, 0), _d1(U, hy, 1)
    rx, ry = _d1(rho, hx, 0), _d1(rho, hy, 1)
    rxx, ryy, rxy = _d2(rho, hx, 0), _d2(rho, hy, 1), _dxy(rho, hx, hy)

    # P = w w - wp wp and S = w wp + wp w in terms of (c, s) = (cos, sin) 2 theta0
    P_dd_theta = c * (txx - tyy) + 2 * s * txy
    P_grad = c * (tx * rx - ty * ry) + s * (tx * ry + ty * rx)
    S_tt = -s * (tx * tx - ty * ty) + 2 * c * tx * ty
    S_dd_rho = -s * (rxx - ryy) + 2 * c * rxy

    rhs = (
        rho * (ux * tx + uy * ty)
        + 2 * a2 * (rx * tx + ry * ty)
        + a2 * rho * (txx + tyy)
        - a3 * (rho * P_dd_theta + 2 * P_grad)
        - (2 * rho * a3 * S_tt - a4 * S_dd_rho)
    )
    if U1 is not None:
        rhs = rhs - a5 * rho * angular_force_average(state.theta0, U1, coeffs.r)
    return rhs / rho, (ux + 2 * a2 * rx / rho, uy + 2 * a2 * ry / rho)


def _theta_speed(state: MacroState, coeffs: Coefficients, bx, by) -> float:
    hx, hy = state.spacing
    lam = coeffs.alpha2 + abs(coeffs.alpha3)
    return 2 * lam * (1 / hx**2 + 1 / hy**2) + np.max(np.abs(bx)) / hx + np.max(np.abs(by)) / hy


def theta_stability_limit(state: MacroState, coeffs: Coefficients, U0: PotentialLike = None) -> float:
    """dt bound from the largest diffusion eigenvalue and the transport speed."""
    _, (bx, by) = _theta_rate(state, coeffs, U0, None)
    return 1.0 / _theta_speed(state, coeffs, bx, by)


def theta_step(state: MacroState, coeffs: Coefficients, U0: PotentialLike, U1: Optional[Callable],
               dt: float, rho_min: float = RHO_MIN) -> MacroState:
    """One explicit Euler step of the orientation equation.

    theta0 moves by dt * rate, applied as a rotation of the embedding.
    """
    if dt <= 0:
        raise InvalidParameter("dt must be > 0")
    if np.min(state.rho) < rho_min:
        raise DensityFloorViolated(f"min rho = {np.min(state.rho):.3g} < {rho_min:.3g}")
    rate, (bx, by) = _theta_rate(state, coeffs, U0, U1)
    speed = _theta_speed(state, coeffs, bx, by)
    if dt * speed > 1.0:
        raise CFLViolation(f"dt={dt:.3g} exceeds the stability limit {1 / speed:.3g}")
    c, s = _rotate(state.c2, state.s2, 2 * dt * rate)
    return MacroState(state.rho, c, s, state.time + dt, state.spacing)


# ----------------------------------------------------- stationary problem


def _face_difference(c, s, axis):
    """theta0[i+1] - theta0[i] along axis, taken in (-pi/2, pi/2]."""
    cr, sr = _shift(c, 1, axis), _shift(s, 1, axis)
    return 0.5 * np.arctan2(c * sr - s * cr, c * cr + s * sr)


class _FrozenOperator:
    """v -> div(A grad v) with A frozen at an embedding, on face stencils.

    Face values of A are cell averages; the transverse gradient at a face
    is the average of the centered gradients of its two cells.
    """

    def __init__(self, c, s, alpha2, alpha3, spacing):
        self.h = spacing
        self.faces = []
        for axis in (0, 1):
            cf = 0.5 * (c + _shift(c, 1, axis))
            sf = 0.5 * (s + _shift(s, 1, axis))
            normal = alpha2 - alpha3 * cf if axis == 0 else alpha2 + alpha3 * cf
            cross = -alpha3 * sf
            self.faces.append((normal, cross))

    def div_flux(self, dnormal, grad_other):
        """div of the face fluxes given normal face differences (already / h)
        and centered cell gradients along the other axis."""
        out = 0.0
        for axis in (0, 1):
            normal, cross = self.faces[axis]
            other = grad_other[axis]
            flux = normal * dnormal[axis] + cross * 0.5 * (other + _shift(other, 1, axis))
            out = out + (flux - _shift(flux, -1, axis)) / self.h[axis]
        return out

    def apply(self, v):
        hx, hy = self.h
        dn = ((_shift(v, 1, 0) - v) / hx, (_shift(v, 1, 1) - v) / hy)
        return self.div_flux(dn, (_d1(v, hy, 1), _d1(v, hx, 0)))


def stationary_residual(theta0, coeffs: Coefficients, U1: Optional[Callable], spacing=(1.0, 1.0)) -> np.ndarray:
    """div(A(theta0) grad theta0) - alpha5 <d_theta U1>, divergence form."""
    state = MacroState.from_theta(np.ones(np.shape(theta0)), theta0, spacing)
    return _residual_div(state.c2, state.s2, coeffs, U1, state.spacing)


def _residual_div(c, s, coeffs, U1, spacing):
    hx, hy = spacing
    op = _FrozenOperator(c, s, coeffs.alpha2, coeffs.alpha3, spacing)
    tx, ty, *_ = _theta_derivatives(c, s, hx, hy)
    dn = (_face_difference(c, s, 0) / hx, _face_difference(c, s, 1) / hy)
    out = op.div_flux(dn, (ty, tx))
    if U1 is not None:
        out = out - coeffs.alpha5 * angular_force_average(0.5 * np.arctan2(s, c), U1, coeffs.r)
    return out


def stationary_residual_nondiv(theta0, coeffs: Coefficients, U1: Optional[Callable],
                               spacing=(1.0, 1.0)) -> np.ndarray:
    """Same operator expanded as A : D2 theta0 - 2 alpha3 S : grad theta0 (x) grad theta0.

    Independent second discretization used to cross-check solver output.
    """
    state = MacroState.from_theta(np.ones(np.shape(theta0)), theta0, spacing)
    c, s = state.c2, state.s2
    a2, a3 = coeffs.alpha2, coeffs.alpha3
    tx, ty, txx, tyy, txy = _theta_derivatives(c, s, *state.spacing)
    A_dd = a2 * (txx + tyy) - a3 * (c * (txx - tyy) + 2 * s * txy)
    S_tt = -s * (tx * tx - ty * ty) + 2 * c * tx * ty
    out = A_dd - 2 * a3 * S_tt
    if U1 is not None:
        out = out - coeffs.alpha5 * angular_force_average(state.theta0, U1, coeffs.r)
    return out


def _laplacian_symbol(shape, spacing):
    kx = np.arange(shape[0])
    ky = np.arange(shape[1])
    sx = 4 * np.sin(np.pi * kx / shape[0]) ** 2 / spacing[0] ** 2
    sy = 4 * np.sin(np.pi * ky / shape[1]) ** 2 / spacing[1] ** 2
    return sx[:, None] + sy[None, :]


def _solve_frozen(op: _FrozenOperator, shift, b, alpha2, symbol, max_inner=2000):
    """Solve (shift - div A grad) v = b by Richardson iteration with the
    FFT inverse of (mean(shift) - alpha2 lap) as preconditioner."""
    pre = np.mean(shift) + alpha2 * symbol
    v = np.zeros_like(b)
    for _ in range(max_inner):
        res = b - (shift * v - op.apply(v))
        if np.max(np.abs(res)) < INNER_TOL:
            return v
        v = v + np.real(np.fft.ifft2(np.fft.fft2(res) / pre))
    raise MaxIterationsExceeded("inner linear solve did not reach tolerance")


@dataclass
class StationaryHistory:
    residuals: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    rejected: int = 0


def stationary_theta_solve(theta_init, coeffs: Coefficients, U1: Optional[Callable], tol: float,
                           spacing=(1.0, 1.0), tau0: float = 1.0, max_iter: int = 200,
                           return_history: bool = False):
    """Solve div(A(theta0) grad theta0) = alpha5 <d_theta U1> on a periodic grid.

    Damped fixed point: freeze A and the angular force at the current
    iterate and take a linearly implicit pseudo-time step of length tau,
        (1/tau + alpha5 h' - div A grad) delta = residual,
    then rotate theta0 by delta. A step that raises the residual is
    rejected and tau halved, so accepted residuals decrease monotonically.
    """
    if coeffs.alpha2 <= abs(coeffs.alpha3):
        raise NotElliptic(f"alpha2={coeffs.alpha2:.6g} <= |alpha3|={abs(coeffs.alpha3):.6g}")
    if tol <= 0:
        raise InvalidParameter("tol must be > 0")
    state = MacroState.from_theta(np.ones(np.shape(theta_init)), theta_init, spacing)
    c, s, h = state.c2, state.s2, state.spacing
    symbol = _laplacian_symbol(state.shape, h)
    hist = StationaryHistory()
    res = _residual_div(c, s, coeffs, U1, h)
    norm = float(np.max(np.abs(res)))
    hist.residuals.append(norm)
    tau = tau0
    iters = 0
    while norm >= tol:
        if iters >= max_iter or tau < 1e-12:
            raise MaxIterationsExceeded(f"residual {norm:.3g} after {iters} iterations")
        iters += 1
        op = _FrozenOperator(c, s, coeffs.alpha2, coeffs.alpha3, h)
        shift = np.full(state.shape, 1.0 / tau)
        if U1 is not None:
            t0 = 0.5 * np.arctan2(s, c)
            eps = 1e-5
            dh = (angular_force_average(t0 + eps, U1, coeffs.r)
                  - angular_force_average(t0 - eps, U1, coeffs.r)) / (2 * eps)
            shift = shift + coeffs.alpha5 * np.maximum(dh, 0.0)
        delta = _solve_frozen(op, shift, res, coeffs.alpha2, symbol)
        c_new, s_new = _rotate(c, s, 2 * delta)
        res_new = _residual_div(c_new, s_new, coeffs, U1, h)
        norm_new = float(np.max(np.abs(res_new)))
        if norm_new < norm:
            c, s, res, norm = c_new, s_new, res_new, norm_new
            hist.residuals.append(norm)
            hist.taus.append(tau)
            tau = min(2 * tau, 1e8)
        else:
            hist.rejected += 1
            tau *= 0.5
    th = 0.5 * np.arctan2(s, c)
    th = np.where(th >= np.pi / 2, th - np.pi, th)
    return (th, hist) if return_history else th


# ------------------------------------------------------------ ellipticity


@dataclass(frozen=True)
class EllipticityReport:
    r: float
    A_of_r: float
    c_of_r: float
    sum: float
    alpha2: float
    alpha3: float
    lambda_plus: float
    lambda_minus: float
    elliptic: bool

    def as_row(self) -> dict:
        return {
            "r": self.r,
            "scriptA": self.A_of_r,
            "c": self.c_of_r,
            "sum": self.sum,
            "alpha2": self.alpha2,
            "alpha3": self.alpha3,
            "lambda_plus": self.lambda_plus,
            "lambda_minus": self.lambda_minus,
            "elliptic": self.elliptic,
        }


ELLIPTICITY_COLUMNS = ("r", "scriptA", "c", "sum", "alpha2", "alpha3", "lambda_plus", "lambda_minus", "elliptic")


def ellipticity_sweep(r_grid, d: float, L: float) -> list[EllipticityReport]:
    out = []
    for r in np.asarray(r_grid, dtype=float).reshape(-1):
        if not r > 0:
            raise InvalidParameter(f"r must be > 0, got {r}")
        k = coefficients_from_r(float(r), d, L)
        lp = k.alpha2 + abs(k.alpha3)
        lm = k.alpha2 - abs(k.alpha3)
        out.append(EllipticityReport(
            r=float(r), A_of_r=k.script_A, c_of_r=k.c, sum=k.script_A + k.c,
            alpha2=k.alpha2, alpha3=k.alpha3, lambda_plus=lp, lambda_minus=lm,
            elliptic=bool(lm > 0),
        ))
    return out
