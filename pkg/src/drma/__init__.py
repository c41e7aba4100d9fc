"""Bayesian dose-response meta-analysis with binomial and normal likelihoods."""

from .data import Arm, Dataset, EffectTable, StudyRecord, compute_effects, load_dataset, validate_dataset
from .diagnostics import diagnose, effective_sample_size, gelman_rubin, geweke
from .model import DoseResponseModel, ModelSpec, ParameterState, PriorSpec
from .onestage import OneStageFit, confint_wald, fit_onestage
from .sampler import PosteriorDraws, SamplerConfig, run, summarize
from .splines import Transform, basis, contrast, place_knots

__version__ = "0.1.0"

__all__ = [
    "Arm", "Dataset", "EffectTable", "StudyRecord", "compute_effects", "load_dataset", "validate_dataset",
    "diagnose", "effective_sample_size", "gelman_rubin", "geweke",
    "DoseResponseModel", "ModelSpec", "ParameterState", "PriorSpec",
    "OneStageFit", "confint_wald", "fit_onestage",
    "PosteriorDraws", "SamplerConfig", "run", "summarize",
    "Transform", "basis", "contrast", "place_knots",
]
