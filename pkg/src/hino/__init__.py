"""Hybrid nonlinear inertial navigation observers."""
