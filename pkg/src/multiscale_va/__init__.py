"""Multi-scale Transformer + random-feature regression of valence and arousal
from 8-channel physiological signals, on a small numpy autograd engine."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402,F401
    ContractError,
    DimensionError,
    InputError,
    ParameterError,
    ParseError,
    RangeError,
    TrainingError,
)
from .model import ModelConfig, ModelParams, Prediction, forward, init_params, predict  # noqa: E402,F401
