"""Trajectory-based deep generative replay for continual imitation learning.

Subpackages: ``nn`` (float64 MLP toolkit), ``diffusion`` (DDPM generator),
``pathworld`` (2-D waypoint benchmark), ``methods`` (continual-learning
methods and runner), ``metrics`` (success/transfer/forgetting statistics),
``coverage`` (sample-complexity verifications), ``harness``/``cli``
(experiment driver).
"""

__version__ = "0.1.0"
