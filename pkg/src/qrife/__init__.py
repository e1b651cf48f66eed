"""Two-step estimation of heterogeneous group-level policy effects.

Cell-by-cell quantile regressions are followed by a panel regression with
interactive fixed effects on the resulting coefficients.
"""
from .inference import EffectEstimate, build_components, estimate_effect
from .io import RunConfig, ingest_group_csv, ingest_micro_csv
from .panel_ife import FactorModelFit, GroupDesign, fit_ife, select_num_factors
from .pipeline import run_pipeline
from .policy_effects import DeltaProfile, EffectQuery
from .quantile_regression import MicroPanel, fit_first_step, fit_qr
from .simulation import DgpConfig, generate, run_monte_carlo

__version__ = "0.1.0"
