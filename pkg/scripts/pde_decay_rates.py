"""Measure decay of small orientation waves against the principal diffusivities.

For theta0 = 0 the diffusion matrix is diag(alpha2 - alpha3, alpha2 + alpha3),
so an x-wave decays at the larger and a y-wave at the smaller eigenvalue.

    python3 scripts/pde_decay_rates.py [--n 32] [--r 0.5 1 2 5]
"""

import argparse
import math

import numpy as np

from fibrelax.kinetic_ops import coefficients_from_r
from fibrelax.macro_pde import MacroState, theta_step


def rate(k, axis, n, steps):
    h = 1.0 / n
    shell = MacroState.from_theta(np.ones((n, n)), np.zeros((n, n)), (h, h))
    mode = np.sin(2 * np.pi * shell.cell_centers()[axis])
    state = MacroState.from_theta(np.ones((n, n)), 1e-4 * mode, (h, h))
    a0 = np.sum(state.theta0 * mode)
    dt = 0.2 * h * h / (k.alpha2 + abs(k.alpha3))
    for _ in range(steps):
        state = theta_step(state, k, None, None, dt)
    symbol = 4 * np.sin(np.pi * h) ** 2 / h**2
    return -math.log(np.sum(state.theta0 * mode) / a0) / (steps * dt) / symbol


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--r", type=float, nargs="+", default=[0.5, 1.0, 2.0, 5.0])
    args = p.parse_args()

    print(f"{'r':>6} {'x-rate':>9} {'l_plus':>9} {'y-rate':>9} {'l_minus':>9}")
    for r in args.r:
        k = coefficients_from_r(r, 1.0, 1.0)
        rx, ry = (rate(k, a, args.n, args.steps) for a in (0, 1))
        print(f"{r:6.2f} {rx:9.4f} {k.alpha2 + abs(k.alpha3):9.4f} "
              f"{ry:9.4f} {k.alpha2 - abs(k.alpha3):9.4f}")


if __name__ == "__main__":
    main()
