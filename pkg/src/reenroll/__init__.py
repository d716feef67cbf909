"""Estimation and inference for master protocol trials with re-enrollment."""

from .errors import ConfigError, EstimationError, ParseError, ReenrollError, SchemeError, ValidationError
from .estimators import (ContrastEstimate, arm_mean, comparison_frame, estimate_aipw, estimate_aps,
                         estimate_contrast, estimate_ipw, estimate_ps, estimate_sipw, substudy_comparator)
from .inference import (cluster_robust_variance, confidence_interval, influence_values,
                        noninferiority_test)
from .scheme import (AssignmentScheme, derive_strata, ece_population, load_scheme, parse_scheme)
from .trial_data import RecordSet, Schema, load_records, parse_records
from .working_models import fit_ols, fit_working_model

__version__ = "0.1.0"
