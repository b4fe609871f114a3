"""Angular-grid kinetic operators and the scalar functions of the closure.

All angular integrals use the d(theta)/pi measure on [-pi/2, pi/2), so the
integral of f is the plain mean of its grid values (periodic trapezoid rule).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import IsotropicSingular, NegativeConcentration, NonPositiveDensity

N_THETA_OPERATORS = 256
N_THETA_IDENTITIES = 1024


def theta_grid(n_theta: int) -> np.ndarray:
    if n_theta < 2 or n_theta % 2:
        raise ValueError(f"n_theta must be even, got {n_theta}")
    return -np.pi / 2 + np.pi * np.arange(n_theta) / n_theta


@dataclass(frozen=True)
class AngularField:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 16 or v.size % 2:
            raise ValueError("AngularField needs an even number (>= 16) of grid values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_theta(self) -> int:
        return self.values.size

    @property
    def dtheta(self) -> float:
        return np.pi / self.n_theta

    @property
    def theta(self) -> np.ndarray:
        return theta_grid(self.n_theta)

    def integral(self) -> float:
        """Integral against d(theta)/pi."""
        return float(np.mean(self.values))


# ------------------------------------------------------- special functions


def _check_r(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise NegativeConcentration(f"r must be >= 0, got {r}")
    return r


def partition_Z(r, p: int = 0, n_theta: int = N_THETA_OPERATORS):
    """Z^(p)(r) = int cos(2t)^p exp(r cos 2t) dt/pi by the periodic trapezoid rule.

    For p = 0 and p = 1 the exponential is split as 1 + expm1 so that small r
    does not lose digits to cancellation (the grid means of 1 and of cos 2t
    are 1 and 0 exactly).
    """
    if p not in (0, 1, 2, 3, 4):
        raise ValueError(f"p must be in 0..4, got {p}")
    r = _check_r(r)
    c2 = np.cos(2 * theta_grid(n_theta))
    rr = r[..., None]
    if p == 0:
        out = 1.0 + np.mean(np.expm1(rr * c2), axis=-1)
    elif p == 1:
        out = np.mean(c2 * np.expm1(rr * c2), axis=-1)
    else:
        out = np.mean(c2**p * np.exp(rr * c2), axis=-1)
    return float(out) if out.ndim == 0 else out


def _z_minus_one(r, n_theta: int = N_THETA_OPERATORS):
    c2 = np.cos(2 * theta_grid(n_theta))
    return np.mean(np.expm1(np.asarray(r, dtype=float)[..., None] * c2), axis=-1)


def c_of_r(r, n_theta: int = N_THETA_OPERATORS):
    """Order parameter of the equilibrium family, Z'(r)/Z(r)."""
    r = _check_r(r)
    out = partition_Z(r, 1, n_theta) / partition_Z(r, 0, n_theta)
    return out


def script_A(r, n_theta: int = N_THETA_OPERATORS):
    r = _check_r(r)
    if np.any(r == 0):
        raise IsotropicSingular("script_A is a 0/0 limit at r = 0")
    Z = partition_Z(r, 0, n_theta)
    c = c_of_r(r, n_theta)
    return 1.0 / (4 * Z**2) - 1.0 + 1.5 * c / r


def alpha1_of_r(r, n_theta: int = N_THETA_OPERATORS):
    """1 - 1/Z^2, written as (Z-1)(Z+1)/Z^2 to keep relative accuracy near r = 0."""
    zm1 = _z_minus_one(r, n_theta)
    Z = 1.0 + zm1
    return zm1 * (Z + 1.0) / Z**2


def invert_c(eta: float, r_max: float = 200.0, tol: float = 1e-10) -> float:
    """Solve c(r) = eta by bisection on [0, r_max]."""
    if not 0 <= eta:
        raise ValueError(f"eta must be >= 0, got {eta}")
    lo, hi = 0.0, r_max
    if eta >= c_of_r(hi):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if c_of_r(mid) < eta:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class Coefficients:
    r: float
    Z: float
    c: float
    script_A: float
    alpha1: float
    alpha2: float
    alpha3: float
    alpha4: float
    alpha5: float
    C1: float = float("nan")
    C2: float = float("nan")

    def as_row(self) -> dict[str, float]:
        """Row in the coeffs table layout."""
        return {
            "r": self.r,
            "Z": self.Z,
            "c": self.c,
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
            "alpha3": self.alpha3,
            "alpha4": self.alpha4,
            "alpha5": self.alpha5,
            "scriptA": self.script_A,
            "scriptA_plus_c": self.script_A + self.c,
        }


COEFF_COLUMNS = ("r", "Z", "c", "alpha1", "alpha2", "alpha3", "alpha4", "alpha5", "scriptA", "scriptA_plus_c")


def coefficients_from_r(r: float, d: float, L: float, C1: float = float("nan"),
                        C2: float = float("nan"), n_theta: int = N_THETA_OPERATORS) -> Coefficients:
    """Macroscopic coefficients for a given concentration.

    Uses xi*alpha*gamma*L^2 = 4 d r to write alpha4 in terms of r.
    """
    r = float(_check_r(r))
    if r == 0:
        raise IsotropicSingular("alpha1 = 0 at r = 0, alpha5 undefined")
    Z = float(partition_Z(r, 0, n_theta))
    c = float(c_of_r(r, n_theta))
    a1 = float(alpha1_of_r(r, n_theta))
    A = float(script_A(r, n_theta))
    return Coefficients(
        r=r,
        Z=Z,
        c=c,
        script_A=A,
        alpha1=a1,
        alpha2=d * (1 + L**2 * r * c / (6 * a1)),
        alpha3=d * L**2 * r * A / (6 * a1),
        alpha4=d * r * L**2 / (48 * Z**2 * a1),
        alpha5=1.0 / a1,
        C1=C1,
        C2=C2,
    )


def concentration(d: float, L: float, xi: float, alpha: float, gamma: float) -> float:
    if d <= 0:
        raise IsotropicSingular("d must be > 0 for a finite concentration")
    return xi * alpha * L**2 * gamma / (4 * d)


def coefficients(d: float, L: float, xi: float, alpha: float, gamma: float,
                 nu_f: float, nu_d: float, n_theta: int = N_THETA_OPERATORS) -> Coefficients:
    for name, v in (("d", d), ("L", L), ("xi", xi), ("alpha", alpha), ("gamma", gamma),
                    ("nu_f", nu_f), ("nu_d", nu_d)):
        if not v > 0:
            raise ValueError(f"{name} must be > 0, got {v}")
    r = concentration(d, L, xi, alpha, gamma)
    C1 = alpha * L**2 * nu_f / (2 * nu_d)
    C2 = alpha * L**4 * nu_f / (48 * nu_d)
    out = coefficients_from_r(r, d, L, C1, C2, n_theta)
    # direct form of alpha4, equal to the r form up to rounding
    return Coefficients(**{**out.__dict__, "alpha4": xi * alpha * L**4 * gamma / (192 * out.Z**2 * out.alpha1)})


# ------------------------------------------------------------- von Mises


def vm_pdf(theta, theta0: float, r: float, n_theta: int = N_THETA_OPERATORS):
    """exp(r cos 2(theta - theta0)) / Z(r), a density for d(theta)/pi."""
    r = float(_check_r(r))
    Z = partition_Z(r, 0, n_theta)
    return np.exp(r * np.cos(2 * (np.asarray(theta, dtype=float) - theta0))) / Z


def vm_sample(rng: np.random.Generator, theta0: float, r: float, n: int) -> np.ndarray:
    """Rejection sampling from the uniform law with envelope e^r / Z."""
    r = float(_check_r(r))
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = max(64, int(1.3 * (n - filled) * np.exp(r) / partition_Z(r)))
        t = rng.uniform(-np.pi / 2, np.pi / 2, m)
        u = rng.uniform(0.0, 1.0, m)
        keep = t[u < np.exp(r * (np.cos(2 * (t - theta0)) - 1.0))]
        take = min(len(keep), n - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out


def vm_bin_probabilities(edges: np.ndarray, theta0: float, r: float, n_sub: int = 32) -> np.ndarray:
    """Probability mass of each [edges[k], edges[k+1]) bin under M_theta0.

    Gauss-Legendre on each bin; the result is normalised by Z so it sums to 1
    over a full period up to quadrature error.
    """
    x, w = np.polynomial.legendre.leggauss(n_sub)
    a, b = edges[:-1, None], edges[1:, None]
    t = 0.5 * (b - a) * x + 0.5 * (a + b)
    vals = vm_pdf(t, theta0, r)
    return np.sum(w * vals, axis=1) * 0.5 * (edges[1:] - edges[:-1]) / np.pi


# ----------------------------------------------------------- operators


def angular_moments(f: AngularField) -> tuple[float, float, float]:
    """(rho, eta, theta_f): density and the nematic moment of f."""
    t = f.theta
    rho = float(np.mean(f.values))
    a = float(np.mean(f.values * np.cos(2 * t)))
    b = float(np.mean(f.values * np.sin(2 * t)))
    eta = float(np.hypot(a, b))
    theta_f = 0.5 * float(np.arctan2(b, a)) if eta > 0 else 0.0
    if theta_f >= np.pi / 2:
        theta_f -= np.pi
    return rho, eta, theta_f


def _phi_parts(f: AngularField):
    t = f.theta
    rho = np.mean(f.values)
    # the grid means of cos 2t and sin 2t vanish, so project f - f[0]; this
    # makes the moments of a constant field exactly zero
    v = f.values - f.values[0]
    a = np.mean(v * np.cos(2 * t))
    b = np.mean(v * np.sin(2 * t))
    return rho, a, b


def Phi_of_f(f: AngularField, C1: float) -> AngularField:
    """C1 * int sin^2(theta - theta') f(theta') dtheta'/pi, via the first
    nematic moment of f (exact on the grid)."""
    rho, a, b = _phi_parts(f)
    t = f.theta
    return AngularField(0.5 * C1 * (rho - a * np.cos(2 * t) - b * np.sin(2 * t)))


def dPhi_dtheta(f: AngularField, C1: float, theta) -> np.ndarray:
    _, a, b = _phi_parts(f)
    theta = np.asarray(theta, dtype=float)
    return C1 * (a * np.sin(2 * theta) - b * np.cos(2 * theta))


def Q_of_f(f: AngularField, d: float, xi: float, C1: float) -> AngularField:
    """d f'' + xi (Phi[f]' f)' in flux form on the periodic grid.

    Face fluxes use the exact derivative of Phi at the half points and the
    arithmetic mean of f, so the cell sums telescope.
    """
    v = f.values
    if np.any(v <= 0):
        raise NonPositiveDensity("Q requires f > 0")
    h = f.dtheta
    faces = f.theta + 0.5 * h
    v_next = np.roll(v, -1)
    flux = d * (v_next - v) / h + xi * dPhi_dtheta(f, C1, faces) * 0.5 * (v + v_next)
    return AngularField((flux - np.roll(flux, 1)) / h)


def B_matrix(theta1, theta2) -> np.ndarray:
    """sin 2(t1 - t2) [w1 w1^T + w2 w2^T]; broadcasts to shape [..., 2, 2]."""
    t1 = np.asarray(theta1, dtype=float)
    t2 = np.asarray(theta2, dtype=float)
    w1 = np.stack([np.cos(t1), np.sin(t1)], axis=-1)
    w2 = np.stack([np.cos(t2), np.sin(t2)], axis=-1)
    outer = w1[..., :, None] * w1[..., None, :] + w2[..., :, None] * w2[..., None, :]
    return np.sin(2 * (t1 - t2))[..., None, None] * outer


def G_of_f(f: np.ndarray, C2: float, spacing: tuple[float, float] = (1.0, 1.0)) -> np.ndarray:
    """C2 sum_ij d_i d_j int f(x, t2) B_ij(t1, t2) dt2/pi.

    ``f`` has shape [nx, ny, n_theta] on a periodic grid; second derivatives
    are centered differences (compact for ii, four-point for xy).
    """
    f = np.asarray(f, dtype=float)
    n_theta = f.shape[-1]
    t = theta_grid(n_theta)
    B = B_matrix(t[:, None], t[None, :])  # [t1, t2, 2, 2]
    m = np.einsum("xyk,jkab->xyjab", f, B) / n_theta
    hx, hy = spacing
    mxx, myy = m[..., 0, 0], m[..., 1, 1]
    mxy = m[..., 0, 1] + m[..., 1, 0]
    dxx = (np.roll(mxx, -1, 0) - 2 * mxx + np.roll(mxx, 1, 0)) / hx**2
    dyy = (np.roll(myy, -1, 1) - 2 * myy + np.roll(myy, 1, 1)) / hy**2
    dxy = (
        np.roll(np.roll(mxy, -1, 0), -1, 1)
        - np.roll(np.roll(mxy, -1, 0), 1, 1)
        - np.roll(np.roll(mxy, 1, 0), -1, 1)
        + np.roll(np.roll(mxy, 1, 0), 1, 1)
    ) / (4 * hx * hy)
    return C2 * (dxx + dyy + dxy)


# ------------------------------------------------------------------ GCI


def gci_g_grid(n_theta: int, r: float) -> AngularField:
    """g on the standard grid, from a cumulative trapezoid on [0, pi/2].

    The ratio of the cumulative integral to its last entry is exactly 1 at
    pi/2, which pins g(pi/2) = g(0) = 0 in floating point.
    """
    r = float(_check_r(r))
    if r == 0:
        raise IsotropicSingular("g is undefined at r = 0")
    half = n_theta // 2
    t = np.linspace(0.0, np.pi / 2, half + 1)
    e = np.exp(-r * np.cos(2 * t))
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (e[1:] + e[:-1]))])
    g_half = (t - (np.pi / 2) * (cum / cum[-1])) / (2 * r)
    g_half[0] = 0.0
    # grid index half is theta = 0; indices below are -g(|theta|)
    vals = np.empty(n_theta)
    vals[half:] = g_half[:half]
    vals[:half] = -g_half[half:0:-1]
    return AngularField(vals)


def gci_dg(theta, r: float) -> np.ndarray:
    r = float(_check_r(r))
    if r == 0:
        raise IsotropicSingular("g is undefined at r = 0")
    return (1.0 - np.exp(-r * np.cos(2 * np.asarray(theta, dtype=float))) / partition_Z(r)) / (2 * r)


def gci_g(theta, r: float, n_nodes: int = 64):
    """g at arbitrary angles (odd, pi-periodic), by Gauss-Legendre on [0, |theta|].

    Uses int_0^{pi/2} exp(-r cos 2t) dt = (pi/2) Z(r).
    """
    r = float(_check_r(r))
    if r == 0:
        raise IsotropicSingular("g is undefined at r = 0")
    th = np.mod(np.asarray(theta, dtype=float) + np.pi / 2, np.pi) - np.pi / 2
    a = np.abs(th)
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    nodes = 0.5 * a[..., None] * (x + 1.0)
    integral = 0.5 * a * np.sum(w * np.exp(-r * np.cos(2 * nodes)), axis=-1)
    g = (a - integral / partition_Z(r)) / (2 * r)
    out = np.sign(th) * g
    return float(out) if np.ndim(out) == 0 else out


def gci_residual(n_theta: int, r: float) -> float:
    """max |(M0 g')' + sin 2theta M0| with g from ``gci_g_grid``."""
    g = gci_g_grid(n_theta, r).values
    h = np.pi / n_theta
    t = theta_grid(n_theta)
    m_face = vm_pdf(t + 0.5 * h, 0.0, r)
    flux = m_face * (np.roll(g, -1) - g) / h
    res = (flux - np.roll(flux, 1)) / h + np.sin(2 * t) * vm_pdf(t, 0.0, r)
    return float(np.max(np.abs(res)))


def equilibrium_residual(n_theta: int, r: float, d: float = 1.0, xi: float = 1.0,
                         rho: float = 1.0, theta0: float = 0.3) -> float:
    """max |Q(rho M_theta0)| with C1 chosen so that r is self-consistent."""
    t = theta_grid(n_theta)
    f = AngularField(rho * vm_pdf(t, theta0, r))
    _, eta, _ = angular_moments(f)
    C1 = 2 * d * r / (xi * eta)
    return float(np.max(np.abs(Q_of_f(f, d, xi, C1).values)))


# ------------------------------------------------------ moment identities


@dataclass(frozen=True)
class IdentityReport:
    r: float
    n_theta: int
    entries: dict  # name -> (quadrature, closed_form)

    @property
    def mismatches(self) -> dict[str, float]:
        return {k: abs(a - b) for k, (a, b) in self.entries.items()}

    @property
    def max_mismatch(self) -> float:
        return max(self.mismatches.values())


def moment_identities_check(r: float, n_theta: int = N_THETA_IDENTITIES,
                            theta0: float = 0.0, psi: Optional[np.ndarray] = None) -> IdentityReport:
    """Quadrature against closed forms for averages under M_theta0.

    The combined entry r<s0^2 T2> - <c0 T2> is compared with (c/r) script_A(r);
    see ``combined_t2_unit_prefactor`` for the other normalisation.
    """
    r = float(_check_r(r))
    if r == 0:
        raise IsotropicSingular("identities divide by r")
    t = theta_grid(n_theta)
    M = vm_pdf(t, theta0, r, n_theta)
    c0 = np.cos(2 * (t - theta0))
    s0 = np.sin(2 * (t - theta0))

    def avg(h):
        return float(np.mean(h * M))

    Z = float(partition_Z(r, 0, n_theta))
    c = avg(c0)
    if psi is None:
        psi = gci_g(t - theta0, r)
    c2, s2 = avg(c0**2), avg(s0**2)
    T1 = s0 / (4 * Z**2) - (c0 * s0 * c + s0 * c2) / 2
    T2 = (c0 * s2 - s0**2 * c) / 2 - c0 / (4 * Z**2)
    a1 = 1 - 1 / Z**2
    A = 1 / (4 * Z**2) - 1 + 1.5 * c / r
    entries = {
        "s2": (s2, c / r),
        "c2": (c2, 1 - c / r),
        "c3": (avg(c0**3), c - 1 / r + 2 * c / r**2),
        "c4": (avg(c0**4), 1 - 2 * c / r + 3 / r**2 - 6 * c / r**3),
        "c_s2": (avg(c0 * s0**2), (1 - 2 * c / r) / r),
        "s4": (avg(s0**4), 3 / r**2 * (1 - 2 * c / r)),
        "s_psi": (avg(s0 * psi), a1 / (4 * r**2)),
        "T2": (avg(T2), -c / (4 * Z**2)),
        "c_T2": (avg(c0 * T2), c**2 / (2 * r**2) - (1 - c / r) / (4 * Z**2)),
        "s2_T2": (avg(s0**2 * T2), (-1 / r + 2 * c / r**2) / (4 * Z**2) + 2 * c**2 / r**3 - c / r**2),
        "s_T1": (avg(s0 * T1), -c / r + 3 * c**2 / (2 * r**2) + c / (4 * r * Z**2)),
        "r_s2_T2_minus_c_T2": (r * avg(s0**2 * T2) - avg(c0 * T2), (c / r) * A),
    }
    return IdentityReport(r, n_theta, entries)


def combined_t2_unit_prefactor(r: float, n_theta: int = N_THETA_IDENTITIES) -> tuple[float, float]:
    """(quadrature, (c/r)[1/Z^2 - 1 + 3c/(2r)]) for r<s0^2 T2> - <c0 T2>.

    This normalisation of the first bracket term (1/Z^2 instead of 1/(4Z^2))
    is not an identity; the pair is exposed so the mismatch can be reported.
    """
    rep = moment_identities_check(r, n_theta)
    quad = rep.entries["r_s2_T2_minus_c_T2"][0]
    Z = float(partition_Z(r, 0, n_theta))
    c = float(c_of_r(r, n_theta))
    return quad, (c / r) * (1 / Z**2 - 1 + 1.5 * c / r)
