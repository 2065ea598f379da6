"""Attention-based maintenance scheduling for leased manufacturing machines.

Submodules: ``core_model`` (instances and cost parameters), ``embedding``
(feature tensors), ``evaluator`` (schedules and costs), ``oracle`` (exact
solvers), ``policy`` (attention network), ``training`` (REINFORCE) and
``cli`` (command line).
"""

__version__ = "0.1.0"
