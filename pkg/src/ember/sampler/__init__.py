"""Conditional simulation from an envelope and the Gaussian baseline."""

from .conditioning import (
    ConditioningInterval,
    SamplingSpec,
    conditioning_intervals,
    gibbs_truncated_gaussian,
    interval_for_value,
    precision_matrix,
)
from .correlation import (
    CorrelationSeries,
    correlation_from_moments,
    envelope_moments,
    fit_sampling_variogram,
    residual_correlation,
)
from .field import clear_cache, conditional_gaussian_field, generator_kind, unconditional_field
from .simulate import (
    DataCells,
    RealizationDiagnostics,
    gaussian_baseline_simulate,
    posterior_mean,
    realization_rng,
    sample_envelope,
    simulate,
    write_realizations,
)

__all__ = [
    "ConditioningInterval",
    "CorrelationSeries",
    "DataCells",
    "RealizationDiagnostics",
    "SamplingSpec",
    "clear_cache",
    "conditional_gaussian_field",
    "conditioning_intervals",
    "correlation_from_moments",
    "envelope_moments",
    "fit_sampling_variogram",
    "gaussian_baseline_simulate",
    "generator_kind",
    "gibbs_truncated_gaussian",
    "interval_for_value",
    "posterior_mean",
    "precision_matrix",
    "realization_rng",
    "residual_correlation",
    "sample_envelope",
    "simulate",
    "unconditional_field",
    "write_realizations",
]
