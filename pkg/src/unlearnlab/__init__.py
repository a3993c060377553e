"""Desk-scale laboratory for studying bias removal via machine unlearning.

The package is organized around a small dependency chain:

- ``autodiff``: reverse-mode differentiation with exact Hessian-vector
  products and a damped conjugate-gradient solver.
- ``model``: dense classifiers (softmax or sigmoid head), Adam training,
  low-rank adapters, and a binary checkpoint format.
- ``biasgen``: synthetic dataset generators that plant controllable shortcut
  signals (patch marker, group-label correlation, pose-bin skew).
- ``unlearn``: five unlearning strategies (retrain-from-scratch gold,
  gradient ascent, low-rank adapter unlearning, teacher-student distillation,
  one-step Newton on counterfactuals) plus influence scores.
- ``fairness_eval``: accuracy, demographic parity, equalized odds,
  membership-inference AUC, input-gradient diagnostics.
- ``cobum``: the Co-BUM composite score over utility, fairness, forgetting
  quality, privacy, and efficiency.
- ``harness``: experiment configs, the end-to-end pipeline, report emission.
"""

__version__ = "0.1.0"
