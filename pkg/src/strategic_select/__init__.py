"""Simulation and estimation toolkit for strategic agents facing competing selective decision makers."""

__version__ = "0.1.0"
