"""Discrete-time simulator and benchmark suite for entanglement-swapping
scheduling policies over memory-equipped quantum networks, plus an
analytical model of satellite free-space entanglement links."""

__version__ = "0.1.0"
