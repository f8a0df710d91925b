"""Z-domain neural operator: stable pole-residue sequence layers in NumPy."""

from .network import ZnoConfig, ZnoModel, count_params
from .seqcore import ConfigError, ParamStore, RngStream, TrajectoryBatch, UsageError
from .zlayer import BackwardMode, PoleMode

__all__ = ["BackwardMode", "ConfigError", "ParamStore", "PoleMode", "RngStream", "TrajectoryBatch",
           "UsageError", "ZnoConfig", "ZnoModel", "count_params"]
__version__ = "0.1.0"
