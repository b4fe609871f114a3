import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fibrelax.errors import InvalidParameter, ParallelFibers
from fibrelax.model_core import (
    Cos2Angular,
    FiberState,
    ModelParams,
    QuadraticWell,
    ZeroAngular,
    alignment_potential_and_grad,
    check_pi_periodic,
    energy_and_gradients,
    energy_and_gradients_reference,
    fibers_intersect,
    intersection_offset,
    intersection_offsets,
    link_deltas,
    nondimensionalize,
    omega,
    total_energy,
    spring_energy_and_grads,
    wrap_angle,
)
from oracles import central_gradient, line_crossing

angles = st.floats(-math.pi / 2, math.pi / 2 - 1e-9)
coords = st.floats(-2.0, 2.0)


def random_linked_state(rng, n=6, n_links=8, box=(4.0, 4.0)):
    pos = rng.uniform(0, 1, (n, 2)) * np.asarray(box)
    ang = rng.uniform(-np.pi / 2, np.pi / 2, n)
    pairs = set()
    while len(pairs) < n_links:
        i, j = sorted(rng.choice(n, 2, replace=False))
        pairs.add((int(i), int(j)))
    i, j = np.array(sorted(pairs)).T
    ell = rng.uniform(-0.5, 0.5, (2, n_links))
    return FiberState(pos, ang, i, j, ell[0], ell[1], box)


# ------------------------------------------------------------- geometry


@given(angles, angles, coords, coords)
def test_intersection_offsets_match_direct_solve(t1, t2, dx, dy):
    if abs(math.sin(t2 - t1)) < 1e-3:
        return
    a, b = line_crossing((0.0, 0.0), t1, (dx, dy), t2)
    assert intersection_offset((0.0, 0.0), t1, (dx, dy), t2) == pytest.approx(a, abs=1e-9)
    assert intersection_offset((dx, dy), t2, (0.0, 0.0), t1) == pytest.approx(b, abs=1e-9)
    l12, l21, par = intersection_offsets(np.array([[dx, dy]]), np.array([t1]), np.array([t2]))
    assert not par[0]
    assert l12[0] == pytest.approx(a, abs=1e-9) and l21[0] == pytest.approx(b, abs=1e-9)


@given(angles, coords, coords)
def test_offsets_change_sign_when_angle_shifts_by_pi(t, dx, dy):
    t2 = t + 0.7
    l = intersection_offset((0, 0), t, (dx, dy), t2)
    assert intersection_offset((0, 0), t + math.pi, (dx, dy), t2) == pytest.approx(-l, abs=1e-9)


def test_omega_axis_cases():
    assert np.allclose(omega(0.0), [1, 0]) and np.allclose(omega(np.pi / 2), [0, 1], atol=1e-16)
    assert np.allclose(omega(np.pi / 4), [np.sqrt(0.5)] * 2)


def test_offset_example():
    assert intersection_offset((0, 0), 0.0, (0.3, 0.2), np.pi / 2) == pytest.approx(0.3, abs=1e-15)
    assert intersection_offset((0, 0), 0.0, (0, 0), np.pi / 2) == 0.0
    assert not fibers_intersect((0, 0), 0.0, (10, 0.1), np.pi / 2, 1.0)


@given(angles, angles, coords, coords, coords, coords)
def test_offsets_reconstruct_the_same_point(t1, t2, x1, y1, x2, y2):
    if abs(math.sin(t2 - t1)) < 1e-6:
        return
    a = intersection_offset((x1, y1), t1, (x2, y2), t2)
    b = intersection_offset((x2, y2), t2, (x1, y1), t1)
    p1 = np.array([x1, y1]) + a * omega(t1)
    p2 = np.array([x2, y2]) + b * omega(t2)
    scale = 1.0 + abs(a) + abs(b)
    assert np.allclose(p1, p2, atol=1e-9 * scale)


@given(angles, angles, coords, coords)
def test_offsets_at_the_crossing_zero_the_spring(t1, t2, dx, dy):
    if abs(math.sin(t2 - t1)) < 1e-3:
        return
    a = intersection_offset((0, 0), t1, (dx, dy), t2)
    b = intersection_offset((dx, dy), t2, (0, 0), t1)
    V, gx, gt = spring_energy_and_grads((0, 0), t1, a, (dx, dy), t2, b, 1.0)
    scale = 1.0 + abs(a) + abs(b)
    assert V < 1e-18 * scale**2 and np.all(np.abs(gx) < 1e-9 * scale) and abs(gt) < 1e-9 * scale**2


def test_parallel_fibers_raise_and_do_not_intersect():
    with pytest.raises(ParallelFibers):
        intersection_offset((0, 0), 0.3, (1, 1), 0.3)
    assert not fibers_intersect((0, 0), 0.3, (0, 0), 0.3, 1.0)
    _, _, par = intersection_offsets(np.zeros((1, 2)), np.array([0.1]), np.array([0.1]))
    assert par[0]


def test_crossing_at_centers():
    assert fibers_intersect((0, 0), 0.0, (0, 0), 1.0, 1.0)
    assert not fibers_intersect((0, 0), 0.0, (2, 0), 1.0, 1.0)


@given(st.floats(-50, 50))
def test_wrap_angle_range_and_congruence(t):
    w = wrap_angle(t)
    assert -math.pi / 2 <= w < math.pi / 2
    k = (t - w) / math.pi
    assert abs(k - round(k)) < 1e-9


# ------------------------------------------------------------- energies


@given(angles, angles)
def test_alignment_potential_is_nematic(t1, t2):
    b, db = alignment_potential_and_grad(t1, t2, 1.3, 2.0)
    b2, db2 = alignment_potential_and_grad(t1 + math.pi, t2, 1.3, 2.0)
    assert b == pytest.approx(b2, abs=1e-12) and db == pytest.approx(db2, abs=1e-12)


def test_alignment_gradient_is_zero_at_alignment():
    assert alignment_potential_and_grad(0.4, 0.4, 1.0, 1.0) == (0.0, 0.0)


def test_spring_example():
    V, gx, gt = spring_energy_and_grads((0, 0), 0.0, 0.5, (1, 1), 0.0, -0.5, 1.0)
    assert V == pytest.approx(0.5) and np.allclose(gx, [0, -1]) and gt == pytest.approx(-0.5)
    V2, gx2, gt2 = spring_energy_and_grads((0, 0), 0.0, 0.5, (1, 1), 0.0, -0.5, 2.0)
    assert (V2, gt2) == (2 * V, 2 * gt) and np.array_equal(gx2, 2 * gx)
    assert spring_energy_and_grads((0, 0), 0.3, 0.0, (0, 0), 1.1, 0.0, 1.0)[0] == 0.0


@given(angles, angles, coords, coords, st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_pair_energies_are_symmetric(t1, t2, dx, dy, l1, l2):
    a = spring_energy_and_grads((0, 0), t1, l1, (dx, dy), t2, l2, 1.3)[0]
    b = spring_energy_and_grads((dx, dy), t2, l2, (0, 0), t1, l1, 1.3)[0]
    assert a == b
    assert alignment_potential_and_grad(t1, t2, 1.0, 1.0)[0] == alignment_potential_and_grad(t2, t1, 1.0, 1.0)[0]


def test_alignment_examples():
    b, db = alignment_potential_and_grad(np.pi / 4, 0.0, 1.0, 1.0)
    assert b == pytest.approx(np.sqrt(0.5)) and db == pytest.approx(np.sqrt(0.5))
    b, db = alignment_potential_and_grad(np.pi / 2, 0.0, 2.5, 1.0)
    assert b == pytest.approx(2.5) and db == pytest.approx(0.0, abs=1e-15)


def test_spring_gradient_matches_finite_difference_on_random_configurations():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        x1, x2 = rng.normal(size=2), rng.normal(size=2)
        t1, t2 = rng.uniform(-np.pi / 2, np.pi / 2, 2)
        l1, l2 = rng.uniform(-0.5, 0.5, 2)
        _, gx, gt = spring_energy_and_grads(x1, t1, l1, x2, t2, l2, 1.0)
        fx = central_gradient(lambda x: spring_energy_and_grads(x, t1, l1, x2, t2, l2, 1.0)[0], x1, 1e-6)
        ft = central_gradient(lambda t: spring_energy_and_grads(x1, t[0], l1, x2, t2, l2, 1.0)[0], np.array([t1]), 1e-6)
        exact = np.append(gx, gt)
        fd = np.append(fx, ft)
        worst = max(worst, np.max(np.abs(exact - fd)) / max(np.max(np.abs(exact)), 1e-3))
    assert worst < 1e-6


def test_total_energy_trivial_cases():
    s = FiberState(np.zeros((2, 2)), np.zeros(2), box=(4.0, 4.0))
    assert total_energy(s, ModelParams()) == 0.0
    s.add_links([0], [1], [0.2], [0.2])
    assert total_energy(s, ModelParams()) == 0.0


def test_spring_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    x1, x2 = rng.normal(size=2), rng.normal(size=2)
    t1, t2, l1, l2 = 0.3, -0.8, 0.2, -0.4
    _, gx, gt = spring_energy_and_grads(x1, t1, l1, x2, t2, l2, 2.0)
    fx = central_gradient(lambda x: spring_energy_and_grads(x, t1, l1, x2, t2, l2, 2.0)[0], x1, 1e-6)
    ft = central_gradient(lambda t: spring_energy_and_grads(x1, t[0], l1, x2, t2, l2, 2.0)[0], np.array([t1]), 1e-6)
    assert np.allclose(gx, fx, atol=1e-8) and gt == pytest.approx(ft[0], abs=1e-8)


def test_compiled_energy_matches_numpy_twin():
    rng = np.random.default_rng(7)
    p = ModelParams(kappa=1.7, alpha=0.6, beta=1.4,
                    U0=QuadraticWell(2.0, (1.0, 2.0), (4.0, 4.0)), U1=Cos2Angular(0.5, 0.2))
    for _ in range(20):
        s = random_linked_state(rng, n=12, n_links=20)
        a = energy_and_gradients(s, p)
        b = energy_and_gradients_reference(s, p)
        assert a[0] == pytest.approx(b[0], rel=1e-13, abs=1e-13)
        assert np.allclose(a[1], b[1], rtol=1e-13, atol=1e-13)
        assert np.allclose(a[2], b[2], rtol=1e-13, atol=1e-13)


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_energy_invariant_under_periodic_translation(seed, sx, sy):
    s = random_linked_state(np.random.default_rng(seed))
    p = ModelParams(kappa=1.2, alpha=0.8)
    moved = s.copy()
    moved.set_positions(s.positions + np.array([sx, sy]))
    assert energy_and_gradients(moved, p)[0] == pytest.approx(energy_and_gradients(s, p)[0], rel=1e-10, abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(0, 5), st.sampled_from([-3, -1, 1, 2]))
def test_wrapping_keeps_attachment_points(seed, k, turns):
    s = random_linked_state(np.random.default_rng(seed))
    p = ModelParams(kappa=1.2, alpha=0.8, beta=1.5)
    raw = s.angles.copy()
    raw[k] += turns * math.pi
    unwrapped = s.copy()
    unwrapped.angles = raw
    wrapped = s.copy()
    wrapped.set_angles(raw)
    wrapped.check_invariants()
    assert np.allclose(link_deltas(wrapped), link_deltas(unwrapped), atol=1e-12)
    e0, _, g0 = energy_and_gradients(unwrapped, p)
    e1, _, g1 = energy_and_gradients(wrapped, p)
    assert e1 == pytest.approx(e0, rel=1e-12, abs=1e-12)
    assert np.allclose(g1, g0, atol=1e-10)


@given(st.integers(0, 2**32 - 1))
def test_forces_sum_to_zero_without_external_potential(seed):
    s = random_linked_state(np.random.default_rng(seed))
    _, gx, _ = energy_and_gradients(s, ModelParams(kappa=2.0, alpha=1.0))
    assert np.allclose(gx.sum(axis=0), 0.0, atol=1e-12)


def test_energy_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    p = ModelParams(kappa=1.5, alpha=0.7, beta=2.0,
                    U0=QuadraticWell(1.0, (2.0, 2.0), (4.0, 4.0)), U1=Cos2Angular(0.3, -0.1))
    s = random_linked_state(rng)
    _, gx, gt = energy_and_gradients(s, p)

    def e_pos(x):
        t = s.copy()
        t.positions = x.reshape(-1, 2)
        return energy_and_gradients(t, p)[0]

    def e_ang(a):
        t = s.copy()
        t.angles = a
        return energy_and_gradients(t, p)[0]

    assert np.allclose(gx.ravel(), central_gradient(e_pos, s.positions.ravel().copy(), 1e-6), atol=1e-7)
    assert np.allclose(gt, central_gradient(e_ang, s.angles.copy(), 1e-6), atol=1e-7)


# ------------------------------------------------------------- params


def test_params_reject_bad_values():
    with pytest.raises(InvalidParameter):
        ModelParams(kappa=0.0)
    with pytest.raises(InvalidParameter):
        ModelParams(beta=0.5)
    with pytest.raises(InvalidParameter):
        ModelParams(d=-1.0)
    with pytest.raises(InvalidParameter):
        ModelParams(U1=lambda t: (np.cos(np.asarray(t)), -np.sin(np.asarray(t))))


def test_pi_periodicity_check():
    assert check_pi_periodic(Cos2Angular(1.0, 0.3))
    assert check_pi_periodic(ZeroAngular())


def test_nondimensionalize_sets_unit_mobilities():
    p = ModelParams(mu=4.0, lam=1.0, kappa=2.0, L=2.0, d=0.5)
    q = nondimensionalize(p)
    assert (q.mu, q.lam) == (1.0, 1.0)
    assert q.L == pytest.approx(1.0)
    assert q.kappa == pytest.approx(32.0)
    assert nondimensionalize(ModelParams()) == ModelParams()
    assert nondimensionalize(q) == q
