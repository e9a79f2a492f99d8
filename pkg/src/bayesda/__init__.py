"""Bayesian differential abundance analysis for multivariate count data.

Bottom-level Dirichlet-multinomial or zero-inflated negative binomial
count models, model-based or plug-in size factors, a Gaussian-mixture
selection layer with optional tree-structured priors, MCMC inference and
Bayesian false discovery rate control.
"""

from .data import (CountTable, GroupLabels, QcReport, TaxonomyTree, aggregate_counts,
                   load_count_table, load_group_labels, load_taxonomy, qc_features, qc_samples)
from .engine import RunConfig, Trace, convergence_report, run_chain, run_multi
from .errors import BayesDAError
from .inference import (PosteriorReport, build_report, compute_ppi, fdr_select,
                        fold_change_summary, size_factor_summary)
from .likelihoods import TopLevelHyper
from .normalization import SizeFactors, estimate_size_factors
from .samplers import BottomPriors, DppHyper, ProposalScales, SelectionPrior
from .simgen import GeneratorConfig, LabeledDataset, auc, generate, mcc

__version__ = "0.1.0"

__all__ = [
    "BayesDAError", "BottomPriors", "CountTable", "DppHyper", "GeneratorConfig", "GroupLabels",
    "LabeledDataset", "PosteriorReport", "ProposalScales", "QcReport", "RunConfig",
    "SelectionPrior", "SizeFactors", "TaxonomyTree", "TopLevelHyper", "Trace",
    "aggregate_counts", "auc", "build_report", "compute_ppi", "convergence_report",
    "estimate_size_factors", "fdr_select", "fold_change_summary", "generate",
    "load_count_table", "load_group_labels", "load_taxonomy", "mcc", "qc_features",
    "qc_samples", "run_chain", "run_multi", "size_factor_summary",
]
