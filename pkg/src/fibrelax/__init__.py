"""Fiber networks with alignment: particle model, kinetic closure and
macroscopic solvers."""

__version__ = "0.1.0"
