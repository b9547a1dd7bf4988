"""
TTSA Bilevel Toolkit

Continuous-time two-timescale stochastic approximation for stochastic
bilevel optimisation, with a central-limit predictor and a Monte Carlo
harness that checks it.
"""

__version__ = "1.0.0"
