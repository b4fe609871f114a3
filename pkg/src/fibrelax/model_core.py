"""Fiber geometry, pair energies, the parameter set and the fiber state.

Angles are line angles: everything here is invariant under theta -> theta + pi
except the attachment point X + ell * omega(theta), which is why a wrap of a
fiber angle must be paired with a sign flip of its link offsets (see
``FiberState.set_angles``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._kernels import link_forces
from .errors import InvalidParameter, NonPositiveMobility, ParallelFibers

EPS_PARALLEL = 1e-12

# U0(positions[n, 2]) -> (values[n], gradients[n, 2])
SpatialPotential = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
# U1(theta[...]) -> (values[...], derivatives[...])
AngularPotential = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


# ---------------------------------------------------------------- geometry


def omega(theta):
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def omega_perp(theta):
    theta = np.asarray(theta, dtype=float)
    return np.stack([-np.sin(theta), np.cos(theta)], axis=-1)


def wrap_angle(theta):
    """Map angles onto [-pi/2, pi/2) modulo pi."""
    theta = np.asarray(theta, dtype=float)
    out = np.mod(theta + np.pi / 2, np.pi) - np.pi / 2
    # fmod rounding can land exactly on +pi/2
    out = np.where(out >= np.pi / 2, out - np.pi, out)
    # leave in-range values bit-identical
    out = np.where((theta >= -np.pi / 2) & (theta < np.pi / 2), theta, out)
    return out if out.ndim else float(out)


def minimum_image(dx: np.ndarray, box: Optional[np.ndarray]) -> np.ndarray:
    if box is None:
        return dx
    box = np.asarray(box, dtype=float)
    return dx - box * np.floor(dx / box + 0.5)


def intersection_offset(x1, theta1: float, x2, theta2: float) -> float:
    """Signed distance from the center of fiber 1 to the crossing point of
    the two carrier lines, measured along omega(theta1)."""
    s = np.sin(theta2 - theta1)
    if abs(s) < EPS_PARALLEL:
        raise ParallelFibers(f"|sin(theta2 - theta1)| = {abs(s):.3e}")
    dx = x2[0] - x1[0]
    dy = x2[1] - x1[1]
    return float((dx * np.sin(theta2) - dy * np.cos(theta2)) / s)


def intersection_offsets(dx: np.ndarray, theta1: np.ndarray, theta2: np.ndarray):
    """Vectorised pair version.

    ``dx`` is x2 - x1 (already minimum-imaged). Returns (ell_12, ell_21,
    parallel_mask); offsets of parallel pairs are set to +inf.
    """
    s = np.sin(theta2 - theta1)
    parallel = np.abs(s) < EPS_PARALLEL
    safe = np.where(parallel, 1.0, s)
    ell12 = (dx[:, 0] * np.sin(theta2) - dx[:, 1] * np.cos(theta2)) / safe
    # same formula with the roles swapped: dx -> -dx and sin -> -sin
    ell21 = (dx[:, 0] * np.sin(theta1) - dx[:, 1] * np.cos(theta1)) / safe
    ell12 = np.where(parallel, np.inf, ell12)
    ell21 = np.where(parallel, np.inf, ell21)
    return ell12, ell21, parallel


def fibers_intersect(x1, theta1: float, x2, theta2: float, L: float) -> bool:
    try:
        l12 = intersection_offset(x1, theta1, x2, theta2)
        l21 = intersection_offset(x2, theta2, x1, theta1)
    except ParallelFibers:
        return False
    return abs(l12) <= L / 2 and abs(l21) <= L / 2


# ---------------------------------------------------------- pair energies


def spring_energy_and_grads(x1, theta1, ell1, x2, theta2, ell2, kappa):
    """V = kappa/2 |x1 + ell1 w1 - x2 - ell2 w2|^2 and its (x1, theta1) gradient.

    Works elementwise on stacked inputs (x of shape [..., 2]).
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    ell1 = np.asarray(ell1, dtype=float)
    ell2 = np.asarray(ell2, dtype=float)
    # grouped so that swapping the two ends negates delta exactly
    delta = (x1 - x2) + (ell1[..., None] * omega(theta1) - ell2[..., None] * omega(theta2))
    V = 0.5 * kappa * np.sum(delta * delta, axis=-1)
    dV_dx1 = kappa * delta
    dV_dtheta1 = kappa * ell1 * np.sum(delta * omega_perp(theta1), axis=-1)
    return V, dV_dx1, dV_dtheta1


def alignment_potential_and_grad(theta1, theta2, alpha: float, beta: float = 1.0):
    """b = alpha |sin(theta1 - theta2)|^beta and db/dtheta1 (0 at alignment)."""
    diff = np.asarray(theta1, dtype=float) - np.asarray(theta2, dtype=float)
    s = np.sin(diff)
    a = np.abs(s)
    b = alpha * a**beta
    with np.errstate(divide="ignore", invalid="ignore"):
        db = alpha * beta * a ** (beta - 1.0) * np.sign(s) * np.cos(diff)
    db = np.where(s == 0.0, 0.0, db)
    if np.ndim(b) == 0:
        return float(b), float(db)
    return b, db


# ------------------------------------------------------------- potentials


@dataclass(frozen=True)
class ZeroSpatial:
    def __call__(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.zeros(len(x)), np.zeros_like(x)


@dataclass(frozen=True)
class ZeroAngular:
    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.zeros_like(theta), np.zeros_like(theta)


@dataclass(frozen=True)
class QuadraticWell:
    """k/2 |x - center|^2 with the minimum-image distance, so it is periodic
    on ``box`` (and has a ridge on the cell boundary)."""

    k: float
    center: tuple[float, float]
    box: Optional[tuple[float, float]] = None

    def __call__(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        box = None if self.box is None else np.asarray(self.box, dtype=float)
        dx = minimum_image(x - np.asarray(self.center, dtype=float), box)
        return 0.5 * self.k * np.sum(dx * dx, axis=-1), self.k * dx


@dataclass(frozen=True)
class Cos2Angular:
    """U1(theta) = -u cos 2(theta - theta_star); minimum at theta_star for u > 0."""

    u: float
    theta_star: float = 0.0

    def __call__(self, theta):
        t = 2.0 * (np.asarray(theta, dtype=float) - self.theta_star)
        return -self.u * np.cos(t), 2.0 * self.u * np.sin(t)


@dataclass(frozen=True)
class ScaledSpatial:
    """x -> energy_scale * U(length_scale * x), used by nondimensionalize."""

    base: SpatialPotential
    energy_scale: float
    length_scale: float

    def __call__(self, x: np.ndarray):
        v, g = self.base(np.asarray(x, dtype=float) * self.length_scale)
        return self.energy_scale * v, self.energy_scale * self.length_scale * g


@dataclass(frozen=True)
class ScaledAngular:
    base: AngularPotential
    energy_scale: float

    def __call__(self, theta):
        v, g = self.base(theta)
        return self.energy_scale * v, self.energy_scale * g


def check_pi_periodic(U1: AngularPotential, n_samples: int = 64, atol: float = 1e-10) -> bool:
    theta = np.linspace(-np.pi, np.pi, n_samples, endpoint=False) + 0.123
    v0, d0 = U1(theta)
    v1, d1 = U1(theta + np.pi)
    scale = 1.0 + np.max(np.abs(v0))
    return bool(np.allclose(v0, v1, atol=atol * scale) and np.allclose(d0, d1, atol=atol * scale))


# ----------------------------------------------------------------- params


@dataclass(frozen=True)
class ModelParams:
    mu: float = 1.0
    lam: float = 1.0
    kappa: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    d: float = 1.0
    nu_f: float = 1.0
    nu_d: float = 1.0
    L: float = 1.0
    xi: float = 1.0
    gamma: float = 1.0
    U0: SpatialPotential = field(default_factory=ZeroSpatial)
    U1: AngularPotential = field(default_factory=ZeroAngular)

    def __post_init__(self):
        for name in ("mu", "lam", "kappa", "alpha", "nu_f", "nu_d", "L", "xi", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidParameter(f"{name} must be > 0, got {v!r}")
        if not np.isfinite(self.d) or self.d < 0:
            raise InvalidParameter(f"d must be >= 0, got {self.d!r}")
        if not self.beta >= 1:
            raise InvalidParameter(f"beta must be >= 1, got {self.beta!r}")
        if not check_pi_periodic(self.U1):
            raise InvalidParameter("U1 is not pi-periodic")

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)


def nondimensionalize(params: ModelParams) -> ModelParams:
    """Rescale to units x0^2 = mu/lambda, t0 = mu, which sets mu' = lambda' = 1."""
    if params.mu <= 0 or params.lam <= 0:
        raise NonPositiveMobility("mu and lambda must be positive")
    x0 = np.sqrt(params.mu / params.lam)
    t0 = params.mu
    if x0 == 1.0 and t0 == 1.0:
        return params
    energy = t0**2 / x0**2
    return params.replace(
        mu=1.0,
        lam=1.0,
        kappa=params.kappa * t0**2,
        alpha=params.alpha * t0**2 / x0**2,
        d=params.d * t0**2 / x0**2,
        nu_f=params.nu_f * t0,
        nu_d=params.nu_d * t0,
        L=params.L / x0,
        U0=ScaledSpatial(params.U0, energy, x0),
        U1=ScaledAngular(params.U1, energy),
    )


# ------------------------------------------------------------------ state


@dataclass(frozen=True)
class Link:
    i: int
    j: int
    ell_i: float
    ell_j: float


@dataclass
class FiberState:
    """Fiber centers, line angles and the link table.

    Links are kept as four parallel arrays so that force assembly is
    vectorised; ``links`` gives the set-of-Link view. ``box`` is the periodic
    cell (None means the open plane).
    """

    positions: np.ndarray
    angles: np.ndarray
    link_i: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    link_j: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ell_i: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ell_j: np.ndarray = field(default_factory=lambda: np.zeros(0))
    box: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.angles = np.asarray(self.angles, dtype=float).reshape(-1)
        self.link_i = np.asarray(self.link_i, dtype=np.int64).reshape(-1)
        self.link_j = np.asarray(self.link_j, dtype=np.int64).reshape(-1)
        self.ell_i = np.asarray(self.ell_i, dtype=float).reshape(-1)
        self.ell_j = np.asarray(self.ell_j, dtype=float).reshape(-1)
        if self.box is not None:
            self.box = np.asarray(self.box, dtype=float).reshape(2)
        if len(self.positions) != len(self.angles):
            raise ValueError("positions and angles differ in length")

    @property
    def n_fibers(self) -> int:
        return len(self.angles)

    @property
    def n_links(self) -> int:
        return len(self.link_i)

    @property
    def links(self) -> set[Link]:
        return {
            Link(int(i), int(j), float(a), float(b))
            for i, j, a, b in zip(self.link_i, self.link_j, self.ell_i, self.ell_j)
        }

    def copy(self) -> "FiberState":
        return FiberState(
            self.positions.copy(),
            self.angles.copy(),
            self.link_i.copy(),
            self.link_j.copy(),
            self.ell_i.copy(),
            self.ell_j.copy(),
            None if self.box is None else self.box.copy(),
        )

    def add_links(self, i, j, ell_i, ell_j) -> None:
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        swap = i > j
        a = np.where(swap, ell_j, ell_i)
        b = np.where(swap, ell_i, ell_j)
        self.link_i = np.concatenate([self.link_i, lo])
        self.link_j = np.concatenate([self.link_j, hi])
        self.ell_i = np.concatenate([self.ell_i, a])
        self.ell_j = np.concatenate([self.ell_j, b])

    def keep_links(self, mask: np.ndarray) -> None:
        self.link_i = self.link_i[mask]
        self.link_j = self.link_j[mask]
        self.ell_i = self.ell_i[mask]
        self.ell_j = self.ell_j[mask]

    def set_angles(self, raw: np.ndarray) -> None:
        """Store ``raw`` wrapped to [-pi/2, pi/2).

        A shift by an odd multiple of pi reverses omega, so the offsets of the
        fiber's links change sign; the attachment points do not move.
        """
        wrapped = wrap_angle(raw)
        turns = np.rint((np.asarray(raw) - wrapped) / np.pi).astype(np.int64)
        odd = (turns % 2) == 1
        if np.any(odd) and self.n_links:
            self.ell_i = np.where(odd[self.link_i], -self.ell_i, self.ell_i)
            self.ell_j = np.where(odd[self.link_j], -self.ell_j, self.ell_j)
        self.angles = np.asarray(wrapped, dtype=float).reshape(-1)

    def set_positions(self, raw: np.ndarray) -> None:
        if self.box is None:
            self.positions = raw
        else:
            self.positions = np.mod(raw, self.box)
            # np.mod can return box itself for tiny negatives
            self.positions = np.where(self.positions >= self.box, 0.0, self.positions)

    def check_invariants(self, L: Optional[float] = None) -> None:
        a = self.angles
        assert np.all((a >= -np.pi / 2) & (a < np.pi / 2)), "angle out of range"
        assert np.all(self.link_i < self.link_j), "link must have i < j"
        keys = self.link_i * self.n_fibers + self.link_j
        assert len(np.unique(keys)) == len(keys), "duplicate link"
        if L is not None:
            tol = 1e-12 * L
            assert np.all(np.abs(self.ell_i) <= L / 2 + tol)
            assert np.all(np.abs(self.ell_j) <= L / 2 + tol)


# ------------------------------------------------------- energy assembly


def link_deltas(state: FiberState) -> np.ndarray:
    """Attachment-point separation X_i + l_i w_i - X_j - l_j w_j per link."""
    i, j = state.link_i, state.link_j
    dx = minimum_image(state.positions[i] - state.positions[j], state.box)
    return (
        dx
        + state.ell_i[:, None] * omega(state.angles[i])
        - state.ell_j[:, None] * omega(state.angles[j])
    )


def energy_and_gradients(state: FiberState, params: ModelParams):
    """Return (W, dW/dX [N, 2], dW/dtheta [N]) for W = W_links + W_ext + W_align."""
    u0, du0 = params.U0(state.positions)
    u1, du1 = params.U1(state.angles)
    box = np.zeros(2) if state.box is None else np.asarray(state.box, dtype=float)
    W, gx, gt = link_forces(
        state.positions, state.angles, state.link_i, state.link_j, state.ell_i, state.ell_j,
        box, float(params.kappa), float(params.alpha), float(params.beta),
    )
    return float(np.sum(u0) + np.sum(u1)) + W, gx + du0, gt + du1


def energy_and_gradients_reference(state: FiberState, params: ModelParams):
    """Numpy version of ``energy_and_gradients`` (kept as the test oracle)."""
    n = state.n_fibers
    gx = np.zeros((n, 2))
    gt = np.zeros(n)

    u0, du0 = params.U0(state.positions)
    u1, du1 = params.U1(state.angles)
    W = float(np.sum(u0) + np.sum(u1))
    gx += du0
    gt += du1

    if state.n_links:
        i, j = state.link_i, state.link_j
        ti, tj = state.angles[i], state.angles[j]
        delta = link_deltas(state)
        kappa = params.kappa
        V = 0.5 * kappa * np.sum(delta * delta, axis=1)
        # W_links = 1/2 sum V, so each endpoint gets half of the pair gradient
        fx = 0.5 * kappa * delta
        ti_grad = 0.5 * kappa * state.ell_i * np.sum(delta * omega_perp(ti), axis=1)
        tj_grad = -0.5 * kappa * state.ell_j * np.sum(delta * omega_perp(tj), axis=1)
        b, db = alignment_potential_and_grad(ti, tj, params.alpha, params.beta)
        W += 0.5 * float(np.sum(V)) + 0.5 * float(np.sum(b))
        for axis in (0, 1):
            gx[:, axis] += np.bincount(i, fx[:, axis], n) - np.bincount(j, fx[:, axis], n)
        gt += np.bincount(i, ti_grad + 0.5 * db, n) + np.bincount(j, tj_grad - 0.5 * db, n)
    return W, gx, gt


def total_energy(state: FiberState, params: ModelParams) -> float:
    return energy_and_gradients(state, params)[0]
