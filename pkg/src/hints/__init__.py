"""Human Factor extraction under FJ-style dynamics and attention-modulated DLinear forecasting."""

from .config import RunConfig
from .decomposition import Decomposition, decompose, decompose_array
from .errors import DataError, HintsError, NumericalError, UsageError
from .extractor import ExtractorModel, Stage1Config, extract, train_stage1
from .fj import FjConfig, build_influence_matrix, expected_human_factor, generate_planted_series
from .forecaster import ForecastModel, Stage2Config, train_stage2
from .harness import ExperimentRecord, run_ablation, run_comparison, run_experiment, run_gamma_sweep
from .timeseries import MultivariateSeries, load_csv

__version__ = "0.1.0"
