"""Travel-time interval estimation for origin-destination-time queries.

Subpackages and modules
-----------------------
roadnet    road network, trip and query types plus their text formats
synthgen   synthetic grid networks, congestion and trip simulation
gradcore   small reverse-mode autodiff engine, Adam, checkpoints
align      LCS / DTW path alignment and the path reward
pathpolicy reinforcement-learned next-hop policy (``PathPolicy``)
uqmoe      mixture-of-experts interval regressor (``MoEIntervalRegressor``)
calib      Hoeffding-bound interval calibration (``HoeffdingCalibrator``)
metrics    point / interval metrics and the run report
pipeline   file-backed stages behind the ``odtq`` command
"""

from .calib import CalibrationResult, HoeffdingCalibrator, fit_lambda, hoeffding_ucb
from .exceptions import (ConfigError, ContractError, DependencyError, InfeasibleError,
                         OdtqError, ParseError, TrainingDivergenceError)
from .pathpolicy import PathPolicy, PolicyConfig
from .roadnet import OdtQuery, RoadNetwork, Trip
from .synthgen import DataConfig, Dataset, build_dataset
from .uqmoe import IntervalEstimate, MoEIntervalRegressor, MoeConfig

__version__ = "0.1.0"

__all__ = [
    "CalibrationResult", "ConfigError", "ContractError", "DataConfig", "Dataset",
    "DependencyError", "HoeffdingCalibrator", "InfeasibleError", "IntervalEstimate",
    "MoEIntervalRegressor", "MoeConfig", "OdtQuery", "OdtqError", "ParseError", "PathPolicy",
    "PolicyConfig", "RoadNetwork", "TrainingDivergenceError", "Trip", "build_dataset",
    "fit_lambda", "hoeffding_ucb",
]
