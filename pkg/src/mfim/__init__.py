"""Perception-aware examination-bias estimation for unbiased learning to rank.

Subpackages mirror the pipeline: ``nn_core`` (layers, Adam, gradient
checking), ``data_model`` (session logs, annotations, group selection),
``simulator`` (synthetic click logs with known truth), ``estimator``
(position-only and multi-factor examination models), ``evaluation``
(DCG, rank correlation, ensembling) and ``cli``.
"""

__version__ = "0.1.0"
