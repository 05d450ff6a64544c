"""Longitudinal disease-progression modelling with missing-aware recurrent imputation.

Modules: ``numerics`` (dense ops and gradient checks), ``cohort`` (data, masks,
delays, folds, synthetic cohorts), ``imputation``, ``encoder``, ``heads``,
``model``, ``training``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
