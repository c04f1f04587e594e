"""Particle solver for mean-field stochastic control through the adjoint FBSDE."""
