"""
TTSA Bilevel Toolkit - Core Modules Package

This package contains the numerical engines:
- problem_model: Bilevel problems, learning-rate schedules, assumption checks
- hypergradient: Corrected outer gradient, hyper-Hessian, inner solves
- sde_engine: Euler-Maruyama integration of the coupled recursions
- clt_predictor: Linearization and limit covariances
- mc_verifier: Replicated runs against the CLT prediction
- problems: Built-in problems with closed-form solutions
"""
