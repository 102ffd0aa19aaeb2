"""Recurrent voxel-to-region correlation registration on 3-D volumes.

Modules: ``volume`` (grids, warping, Jacobians), ``autodiff`` (reverse-mode
engine), ``encoder``, ``search``, ``updater``, ``pyramid`` (the coarse-to-fine
driver), ``losses``, ``metrics``, ``synth`` (phantoms and pairs), ``trainer``
and ``cli``.
"""
from .config import RunConfig, load_config, parse_config
from .errors import ConfigError, ContractError, DataError, NumericalError
from .pyramid import IterationSchedule, RegistrationTrace, build_params, exp_field, register
from .volume import Volume, compose, fold_fraction, jacobian_det, upsample_field, warp

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "IterationSchedule", "NumericalError", "RegistrationTrace",
    "RunConfig", "Volume", "build_params", "compose", "exp_field", "fold_fraction", "jacobian_det",
    "load_config", "parse_config", "register", "upsample_field", "warp",
]
