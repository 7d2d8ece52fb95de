"""Homogenization and convergence experiments for multiscale stochastic optimal control."""
