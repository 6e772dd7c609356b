"""Asymptotic e-processes on finite filtered probability trees.

Exact certification by stopping-time enumeration, the standard
constructions (cumulative products, time mixtures, calibrated p-values),
and a seeded Monte Carlo check of the asymptotic Ville bound.
"""
__version__ = "0.1.0"

from .prob_core import (  # noqa: E402
    BiProcess,
    Bundle,
    DriftSequence,
    HorizonSequence,
    MeasureFamily,
    OutcomeTree,
    StoppingTime,
    TreeProcess,
    build_tree,
    conditional_expectation,
    enumerate_stopping_times,
    expectation,
    read_bundle,
    stopped_expectation,
    write_bundle,
)
from .verifier import (  # noqa: E402
    Certificate,
    TrendReport,
    certify_asymptotic,
    certify_row,
    doob_decompose,
    optional_sampling_check,
    snell_envelope_bounded,
    ville_bound_exact,
)
from .constructions import (  # noqa: E402
    CalibratorSpec,
    PArray,
    calibrate,
    cumulative_product,
    diagonal_biprocess,
    horizon_from_drift,
    time_mixture,
)
from .montecarlo import SimConfig, experiment_grid, trunc_normal_params  # noqa: E402

__all__ = [name for name in dir() if not name.startswith("_")]
