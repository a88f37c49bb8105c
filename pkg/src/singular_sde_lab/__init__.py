"""Numerical laboratory for diffusions with critical-order singular drift.

Modules: ``drift_catalog`` (drift fields, mollification, form-bound
certificates), ``kolmogorov`` (finite-difference Cauchy solver),
``energy`` (energy inequality, De Giorgi iteration, sup bounds), ``sde``
(Euler-Maruyama ensembles and path statistics) and ``runner``/``cli``
(config-driven experiments and the acceptance suite).
"""

__version__ = "0.1.0"
