"""Supervised classification of time series with HMMs, HSMMs and AR variants."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    Family,
    Geometric,
    LabeledSeries,
    ModelError,
    ModelSpec,
    NegBinomial,
    Params,
    Priors,
    SojournFamily,
    complete_data_loglik,
    emission_logpdf,
    log_posterior,
    sojourn_pmf,
)

__all__ = [
    "Family",
    "Geometric",
    "LabeledSeries",
    "ModelError",
    "ModelSpec",
    "NegBinomial",
    "Params",
    "Priors",
    "SojournFamily",
    "complete_data_loglik",
    "emission_logpdf",
    "log_posterior",
    "sojourn_pmf",
]
