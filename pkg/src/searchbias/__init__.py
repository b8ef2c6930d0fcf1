"""Causal return-on-ad-spend estimation for paid search from observational
media-mix panels, with a structural simulator for ground truth."""

__version__ = "0.1.0"

from .causal_graph import Dag, DiscreteScm, backdoor_adjust, builtin_diagrams, is_d_separated, satisfies_backdoor
from .dataset import MmmPanel, PanelSummary, aggregate_weekly, load_panel, save_panel, summarize
from .estimators import (compare_estimators, estimate_demand_adjusted, estimate_full_mmm, estimate_naive,
                         estimate_sbc, estimate_sbc_monotone_marginal, estimate_sbc_tensor, marginal_roas)
from .gam import FitResult, ModelSpec, Smooth, build_design, fit_reml
from .query_summarizer import (QueryLogRecord, Thresholds, UrlTaxonomy, build_volume_panel, classify_queries,
                               emit_classification_scatter)
from .simulator import ScenarioConfig, replicate_study, simulate

__all__ = [
    "Dag", "DiscreteScm", "backdoor_adjust", "builtin_diagrams", "is_d_separated", "satisfies_backdoor",
    "MmmPanel", "PanelSummary", "aggregate_weekly", "load_panel", "save_panel", "summarize",
    "compare_estimators", "estimate_demand_adjusted", "estimate_full_mmm", "estimate_naive",
    "estimate_sbc", "estimate_sbc_monotone_marginal", "estimate_sbc_tensor", "marginal_roas",
    "FitResult", "ModelSpec", "Smooth", "build_design", "fit_reml",
    "QueryLogRecord", "Thresholds", "UrlTaxonomy", "build_volume_panel", "classify_queries",
    "emit_classification_scatter", "ScenarioConfig", "replicate_study", "simulate",
]
