"""Full-order and dynamical low-rank ensemble Kalman filters for joint state and parameter estimation."""

from .dlr import DlrEnsemble, bug_forecast, dlr_analyze, dlr_step, reconstruct, truncate
from .enkf import (FilterVariant, FullEnsemble, NoiseStream, ObservationModel, analyze,
                   forecast, kalman_gain, sample_stats, step)
from .errors import (ConfigError, DlrEnkfError, NonFinite, NotSPD, NumericalError,
                     RankDeficient)
from .lowrank import RankPolicy, TruncatedFactors, adaptive_rank, orthonormalize, reduced_gain, truncated_svd

__version__ = "0.1.0"
