"""Random billiards on the torus driven by disk thermostats.

A particle flies freely on a torus dotted with periodic disk obstacles; at
each collision the normal velocity flips and the tangential one is redrawn
from a Gaussian at the disk's temperature.  This package simulates the
resulting boundary Markov chain exactly and verifies its theory numerically:
the closed-form equal-temperature equilibrium, the Lyapunov drift inequality
behind geometric ergodicity, and the determinant/derivative structure of the
enhanced collision map.
"""

__version__ = "0.1.0"

from .geometry import (
    BoundaryPoint,
    BoundaryState,
    DiskSpec,
    FlightResult,
    HorizonProbe,
    JacobianMatrix,
    TableConfig,
    ValidatedTable,
    enhanced_jacobian,
    enhanced_step,
    flight,
    two_step_jacobian,
    validate_table,
)
from .chain import (
    AngleDensityParams,
    ChainTrajectory,
    InitialDistribution,
    RecordingOptions,
    chain_rng,
    chain_step,
    run_chain,
    run_ensemble,
    sample_angle,
)
from .potential import (
    AsymptoticInput,
    CoeffInput,
    DriftGridSpec,
    DriftReport,
    PotentialParams,
    QuadratureSpec,
    asymptotic_drop,
    cos_ratio_coeffs,
    potential_value,
    pv_monte_carlo,
    pv_quadrature,
    verify_drift,
)
from .stats import (
    Histogram1D,
    MixingEstimate,
    autocorrelation_time,
    check_equilibrium,
    equilibrium_cdf,
    estimate_mixing_tv,
    fit_tv_decay,
    ks_statistic,
    tv_distance,
)
from .harness import ExperimentConfig, parse_config

__all__ = [name for name in dir() if not name.startswith("_")]
