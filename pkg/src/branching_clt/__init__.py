"""Spectral moments, exact simulation and CLT checks for branching Ornstein-Uhlenbeck systems."""

__version__ = "0.1.0"

from .moments import (
    ModelSpec,
    MomentReport,
    RegimeError,
    beta2_large,
    beta2_proxy,
    eta2_large,
    mean_Tt,
    predicted_variance,
    regime,
    remark_phi1_variance,
    rho2_critical,
    second_moment,
    sigma2_small,
)
from .particle import (
    Configuration,
    SimConfig,
    Trajectory,
    functional,
    martingale_H,
    martingale_W,
    ou_transition,
    run_ensemble,
    simulate,
    survival_indicator,
)
from .spectral import (
    FunctionExpansion,
    OUParams,
    SpectralBasis,
    SpectralError,
    classify,
    closed_form_spectrum,
    expand,
    galerkin_spectrum,
    split,
)
from .verify import (
    EnsembleReport,
    Scenario,
    Thresholds,
    limit_law_tests,
    run_scenario,
    stat_critical,
    stat_large,
    stat_large_critical,
    stat_small,
    theorem12_l2_check,
)
