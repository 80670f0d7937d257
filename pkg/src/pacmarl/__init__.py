"""Cooperative multi-agent RL with counterfactual-prediction-assisted value
factorization, plus monotonic value-decomposition baselines, implemented on
NumPy with a reverse-mode autodiff tape.

Programmatic entry points: build a :class:`~pacmarl.config.TrainConfig` with
:func:`build_config` and hand it to :func:`train`; everything the ``pacmarl``
command line does routes through those two calls.
"""

from .config import TrainConfig, build_config
from .trainer import train

__version__ = "0.1.0"

__all__ = ["TrainConfig", "build_config", "train", "__version__"]
