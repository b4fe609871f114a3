"""Stochastic individual-based fiber simulation.

One step is: Euler-Maruyama move, then link deletion, then link creation
among pairs that were unlinked at the start of the event phase.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np

from ._kernels import cell_pairs, crossing_pairs, crossing_pairs_cells
from .errors import EmptySample, InvalidParameter, IoError, UnstableStep
from .model_core import (
    FiberState,
    ModelParams,
    energy_and_gradients,
    intersection_offsets,
    minimum_image,
    EPS_PARALLEL,
)

LINKING_POLICIES = ("constant", "density_adaptive")


@dataclass(frozen=True)
class SimConfig:
    """Run controls.

    ``linking='density_adaptive'`` recomputes nu_f every step so that the
    link occupancy of intersecting pairs follows the current nematic order;
    see ``adaptive_nu_f``.
    """

    dt: float
    t_end: float
    domain: tuple[float, float]
    seed: int = 0
    neighbor_cell_size: Optional[float] = None
    output_stride: int = 1
    n_bins: int = 32
    linking: str = "constant"
    max_link_ratio: float = 0.5

    def validate(self, L: float) -> None:
        if not self.dt > 0:
            raise InvalidParameter("dt must be > 0")
        if not self.t_end >= 0:
            raise InvalidParameter("t_end must be >= 0")
        if len(self.domain) != 2 or min(self.domain) <= 2 * L:
            raise InvalidParameter(f"domain extents must exceed 2L = {2 * L}")
        if self.output_stride < 1:
            raise InvalidParameter("output_stride must be >= 1")
        if self.n_bins < 8:
            raise InvalidParameter("n_bins must be >= 8")
        if self.linking not in LINKING_POLICIES:
            raise InvalidParameter(f"linking must be one of {LINKING_POLICIES}")
        if self.neighbor_cell_size is not None and self.neighbor_cell_size < L:
            raise InvalidParameter("neighbor_cell_size must be >= L")
        if not 0 < self.max_link_ratio < 1:
            raise InvalidParameter("max_link_ratio must be in (0, 1)")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; draws are consumed in a fixed order per step."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


def initial_state(n_fibers: int, domain, rng: np.random.Generator, angles: str = "uniform") -> FiberState:
    """Uniform positions; angles uniform on [-pi/2, pi/2) or all equal to 0."""
    box = np.asarray(domain, dtype=float)
    pos = rng.uniform(0.0, 1.0, (n_fibers, 2)) * box
    ang = rng.uniform(-np.pi / 2, np.pi / 2, n_fibers)
    if angles == "aligned":
        ang = np.zeros(n_fibers)
    elif angles != "uniform":
        raise InvalidParameter(f"unknown initial angle law {angles!r}")
    return FiberState(pos, ang, box=box)


# --------------------------------------------------------- neighbor search


def all_pairs(positions: np.ndarray, box, cutoff: float) -> np.ndarray:
    """Brute-force reference: pairs (i < j) with minimum-image distance <= cutoff."""
    n = len(positions)
    i, j = np.triu_indices(n, 1)
    dx = minimum_image(positions[j] - positions[i], box)
    keep = np.einsum("ij,ij->i", dx, dx) <= cutoff**2
    return np.stack([i[keep], j[keep]], axis=1)


def cell_list_pairs(positions: np.ndarray, box, cell_size: float, cutoff: Optional[float] = None) -> np.ndarray:
    """Pairs (i < j) within ``cutoff`` using a periodic cell list.

    Cells are at least ``cell_size`` wide, so only the 3x3 block around a
    particle's cell needs testing when cutoff <= cell_size. Output is sorted
    by (i, j) so it does not depend on the cell layout.
    """
    positions = np.asarray(positions, dtype=float)
    box = np.asarray(box, dtype=float)
    cutoff = cell_size if cutoff is None else cutoff
    if cutoff > cell_size:
        raise ValueError("cutoff must not exceed the cell size")
    n = len(positions)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    ncell = np.maximum(np.floor(box / cell_size).astype(np.int64), 1)
    cxy = np.floor(positions / box * ncell).astype(np.int64)
    cxy = np.minimum(np.maximum(cxy, 0), ncell - 1)
    cid = cxy[:, 0] * ncell[1] + cxy[:, 1]
    order = np.argsort(cid, kind="stable")
    counts = np.bincount(cid, minlength=ncell[0] * ncell[1])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    chunks_i, chunks_j = [], []
    for ox in (-1, 0, 1):
        for oy in (-1, 0, 1):
            nx = (cxy[:, 0] + ox) % ncell[0]
            ny = (cxy[:, 1] + oy) % ncell[1]
            nc = nx * ncell[1] + ny
            cnt = counts[nc]
            total = int(cnt.sum())
            if total == 0:
                continue
            owner = np.repeat(np.arange(n), cnt)
            offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            other = order[starts[nc][owner] + offs]
            keep = owner < other
            chunks_i.append(owner[keep])
            chunks_j.append(other[keep])
    if not chunks_i:
        return np.zeros((0, 2), dtype=np.int64)
    pi = np.concatenate(chunks_i)
    pj = np.concatenate(chunks_j)
    # with fewer than 3 cells along an axis the 3x3 block revisits cells
    keys = np.unique(pi * n + pj)
    pi, pj = keys // n, keys % n
    dx = minimum_image(positions[pj] - positions[pi], box)
    keep = np.einsum("ij,ij->i", dx, dx) <= cutoff**2
    return np.stack([pi[keep], pj[keep]], axis=1)


def neighbor_pairs(positions: np.ndarray, box, cell_size: float, cutoff: Optional[float] = None) -> np.ndarray:
    """Compiled twin of ``cell_list_pairs``: same pair set, unsorted.

    Falls back to the brute-force search when there is no periodic box.
    """
    cutoff = cell_size if cutoff is None else cutoff
    if box is None:
        return all_pairs(positions, None, cutoff)
    if cutoff > cell_size:
        raise ValueError("cutoff must not exceed the cell size")
    box = np.asarray(box, dtype=float)
    ncell = np.maximum(np.floor(box / cell_size).astype(np.int64), 1)
    return cell_pairs(np.ascontiguousarray(positions, dtype=float), box,
                      int(ncell[0]), int(ncell[1]), float(cutoff))


def intersecting_pairs_reference(state: FiberState, L: float, pairs: np.ndarray):
    """Numpy version of ``intersecting_pairs`` (kept as the test oracle)."""
    i, j = pairs[:, 0], pairs[:, 1]
    dx = minimum_image(state.positions[j] - state.positions[i], state.box)
    l12, l21, _ = intersection_offsets(dx, state.angles[i], state.angles[j])
    hit = (np.abs(l12) <= L / 2) & (np.abs(l21) <= L / 2)
    return i[hit], j[hit], l12[hit], l21[hit]


def intersecting_pairs(state: FiberState, L: float, pairs: Optional[np.ndarray] = None,
                       cell_size: Optional[float] = None):
    """Crossing pairs among ``pairs``, or among all pairs when omitted.

    Returns (i, j, ell_ij, ell_ji). With explicit candidates the output keeps
    candidate order; otherwise pairs come out grouped by the first fiber.
    """
    if pairs is None and state.box is not None:
        box = np.asarray(state.box, dtype=float)
        ncell = np.floor(box / max(L, cell_size or 0.0)).astype(np.int64)
        if ncell.min() < 3:
            return intersecting_pairs(state, L, neighbor_pairs(state.positions, box, max(L, cell_size or 0.0), L))
        cap = 16 * state.n_fibers + 64
        while True:
            k, ij, l12, l21 = crossing_pairs_cells(
                state.positions, np.cos(state.angles), np.sin(state.angles), box,
                int(ncell[0]), int(ncell[1]), float(L), EPS_PARALLEL, cap,
            )
            if k <= cap:
                return ij[:k, 0], ij[:k, 1], l12[:k], l21[:k]
            cap = 2 * k
    if pairs is None:
        pairs = all_pairs(state.positions, state.box, L)
    if len(pairs) == 0:
        e = np.zeros(0)
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), e, e
    box = np.zeros(2) if state.box is None else state.box
    hit, l12, l21 = crossing_pairs(
        state.positions, np.cos(state.angles), np.sin(state.angles),
        np.ascontiguousarray(pairs, dtype=np.int64), box, float(L), EPS_PARALLEL,
    )
    return pairs[hit, 0], pairs[hit, 1], l12[hit], l21[hit]


# -------------------------------------------------------------- dynamics


def step(state: FiberState, params: ModelParams, cfg: SimConfig, rng: np.random.Generator) -> FiberState:
    """One Euler-Maruyama move (links untouched except for wrap sign flips)."""
    dt = cfg.dt
    _, gx, gt = energy_and_gradients(state, params)
    drift_x = -params.mu * gx * dt
    drift_t = -params.lam * gt * dt
    # a rotation by dtheta moves the fiber tips by |dtheta| L / 2
    worst = max(
        float(np.sqrt(np.max(np.einsum("ij,ij->i", drift_x, drift_x)))) if len(gx) else 0.0,
        float(np.max(np.abs(drift_t))) * params.L / 2 if len(gt) else 0.0,
    )
    if worst > params.L / 4:
        raise UnstableStep(f"deterministic displacement {worst:.3g} exceeds L/4")
    noise = rng.standard_normal((state.n_fibers, 3))
    new = state.copy()
    new.set_positions(state.positions + drift_x + np.sqrt(2 * params.mu * params.d * dt) * noise[:, :2])
    new.set_angles(state.angles + drift_t + np.sqrt(2 * params.lam * params.d * dt) * noise[:, 2])
    return new


def link_events(state: FiberState, params: ModelParams, dt: float, rng: np.random.Generator,
                pairs: Optional[np.ndarray] = None, nu_f: Optional[float] = None,
                cell_size: Optional[float] = None) -> FiberState:
    """Poisson deletion then creation over one step of length dt.

    ``pairs`` optionally fixes the candidate pairs (i < j); by default every
    pair of fibers may link. ``nu_f`` overrides the parameter value (used by
    the adaptive linking policy).
    """
    nu_f = params.nu_f if nu_f is None else nu_f
    new = state.copy()
    n = state.n_fibers
    old_keys = state.link_i * n + state.link_j

    if new.n_links:
        u = rng.uniform(size=new.n_links)
        new.keep_links(u >= -np.expm1(-params.nu_d * dt))

    i, j, l12, l21 = intersecting_pairs(state, params.L, pairs, cell_size)
    free = ~np.isin(i * n + j, old_keys)
    i, j, l12, l21 = i[free], j[free], l12[free], l21[free]
    if len(i):
        born = rng.uniform(size=len(i)) < -np.expm1(-nu_f * dt)
        new.add_links(i[born], j[born], l12[born], l21[born])
    return new


def adaptive_nu_f(angles: np.ndarray, params: ModelParams, cfg: SimConfig) -> float:
    """Linking rate for the density-adaptive policy.

    The target link occupancy of an intersecting pair is
    q = min(2 xi gamma / (n eta), max_link_ratio), with n = N / |box| and eta
    the current nematic order. nu_f is chosen so that the stationary
    occupancy of the discrete-time two-state chain, p_f / (p_f + p_d), is q.
    """
    n = len(angles) / float(np.prod(cfg.domain))
    eta = order_parameters(angles).eta
    q = cfg.max_link_ratio
    if eta > 0:
        q = min(2 * params.xi * params.gamma / (n * eta), q)
    p_d = -np.expm1(-params.nu_d * cfg.dt)
    p_f = q * p_d / (1.0 - q)
    if p_f >= 1.0:
        raise InvalidParameter("target link occupancy not reachable at this dt")
    return float(-np.log1p(-p_f) / cfg.dt)


# ------------------------------------------------------------ observables


class OrderParameters(NamedTuple):
    eta: float
    theta_mean: float
    degenerate: bool


def order_parameters(angles, weights=None, tol: float = 1e-12) -> OrderParameters:
    a = np.asarray(angles, dtype=float).reshape(-1)
    if a.size == 0:
        raise EmptySample("no angles")
    w = np.ones_like(a) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    sw = np.sum(w)
    cx = float(np.sum(w * np.cos(2 * a)) / sw)
    sx = float(np.sum(w * np.sin(2 * a)) / sw)
    eta = float(np.hypot(cx, sx))
    if eta < tol:
        return OrderParameters(eta, 0.0, True)
    th = 0.5 * float(np.arctan2(sx, cx))
    if th >= np.pi / 2:
        th -= np.pi
    return OrderParameters(eta, th, False)


@dataclass(frozen=True)
class AngleHistogram:
    """Density per bin in the d(theta)/pi convention; sum(values) * dtheta / pi = 1."""

    edges: np.ndarray
    values: np.ndarray
    counts: np.ndarray

    @property
    def dtheta(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def angle_bin_edges(n_bins: int) -> np.ndarray:
    return np.linspace(-np.pi / 2, np.pi / 2, n_bins + 1)


def empirical_angle_density(angles, n_bins: int) -> AngleHistogram:
    a = np.asarray(angles, dtype=float).reshape(-1)
    if a.size == 0:
        raise EmptySample("no angles")
    if n_bins < 8:
        raise ValueError("n_bins must be >= 8")
    edges = angle_bin_edges(n_bins)
    idx = np.floor((a + np.pi / 2) / np.pi * n_bins).astype(np.int64) % n_bins
    counts = np.bincount(idx, minlength=n_bins)
    dtheta = np.pi / n_bins
    return AngleHistogram(edges, counts / a.size * np.pi / dtheta, counts)


@dataclass(frozen=True)
class ObservableRecord:
    time: float
    eta: float
    theta_mean: float
    link_count: int
    energy: float
    angle_histogram: np.ndarray = field(repr=False)

    def row(self) -> dict:
        return {"time": self.time, "eta": self.eta, "theta_mean": self.theta_mean,
                "link_count": self.link_count, "energy": self.energy}


OBSERVABLE_COLUMNS = ("time", "eta", "theta_mean", "link_count", "energy")


def observe(state: FiberState, params: ModelParams, t: float, n_bins: int) -> ObservableRecord:
    op = order_parameters(state.angles)
    hist = empirical_angle_density(state.angles, n_bins)
    return ObservableRecord(
        time=t,
        eta=op.eta,
        theta_mean=op.theta_mean,
        link_count=state.n_links,
        energy=energy_and_gradients(state, params)[0],
        angle_histogram=hist.counts.copy(),
    )


@dataclass
class RunResult:
    state: FiberState
    records: list[ObservableRecord]
    # angles relative to the instantaneous mean direction, one row per dump
    centered_angles: list[np.ndarray]


def simulate(state: FiberState, params: ModelParams, cfg: SimConfig,
             rng: Optional[np.random.Generator] = None, link: bool = True) -> Iterator[tuple[int, FiberState]]:
    """Yield (step index, state) after every full step."""
    cfg.validate(params.L)
    rng = make_rng(cfg.seed) if rng is None else rng
    for k in range(1, cfg.n_steps + 1):
        state = step(state, params, cfg, rng)
        if link:
            nu_f = adaptive_nu_f(state.angles, params, cfg) if cfg.linking == "density_adaptive" else None
            state = link_events(state, params, cfg.dt, rng, nu_f=nu_f, cell_size=cfg.neighbor_cell_size)
        yield k, state


def run(state: FiberState, params: ModelParams, cfg: SimConfig,
        rng: Optional[np.random.Generator] = None, link: bool = True) -> RunResult:
    records = [observe(state, params, 0.0, cfg.n_bins)]
    centered = [_centered(state.angles, records[0])]
    for k, state in simulate(state, params, cfg, rng, link):
        if k % cfg.output_stride == 0:
            rec = observe(state, params, k * cfg.dt, cfg.n_bins)
            records.append(rec)
            centered.append(_centered(state.angles, rec))
    return RunResult(state, records, centered)


def _centered(angles: np.ndarray, rec: ObservableRecord) -> np.ndarray:
    d = np.mod(angles - rec.theta_mean + np.pi / 2, np.pi) - np.pi / 2
    return d.astype(np.float32)


# --------------------------------------------------------------- snapshot

MAGIC = b"FIBS1"


def write_snapshot(path, state: FiberState) -> None:
    """Layout: b'FIBS1', <q N, <q K, <2d box, N x <3d (x, y, theta),
    K x <4d (i, j, ell_i, ell_j). A missing box is written as (0, 0)."""
    box = np.zeros(2) if state.box is None else state.box
    body = [
        MAGIC,
        struct.pack("<qq", state.n_fibers, state.n_links),
        np.asarray(box, dtype="<f8").tobytes(),
        np.column_stack([state.positions, state.angles]).astype("<f8").tobytes(),
        np.column_stack([state.link_i, state.link_j, state.ell_i, state.ell_j]).astype("<f8").tobytes(),
    ]
    try:
        Path(path).write_bytes(b"".join(body))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_snapshot(path) -> FiberState:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if raw[:5] != MAGIC:
        raise IoError("not a FIBS1 snapshot")
    n, k = struct.unpack_from("<qq", raw, 5)
    off = 5 + 16
    box = np.frombuffer(raw, "<f8", 2, off)
    off += 16
    fib = np.frombuffer(raw, "<f8", 3 * n, off).reshape(n, 3)
    off += 24 * n
    lk = np.frombuffer(raw, "<f8", 4 * k, off).reshape(k, 4)
    return FiberState(
        fib[:, :2].copy(),
        fib[:, 2].copy(),
        lk[:, 0].astype(np.int64),
        lk[:, 1].astype(np.int64),
        lk[:, 2].copy(),
        lk[:, 3].copy(),
        None if not np.any(box) else box.copy(),
    )
