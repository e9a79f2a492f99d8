"""Fit the bundled toy dataset through the Python API.

Loads counts, labels and taxonomy, runs two short ZINB-DPP chains with the
tree-coupled selection prior, and prints the selected taxa with their log
fold changes and the chain-agreement diagnostic.
"""
from importlib import resources

import numpy as np

from bayesda import engine, inference
from bayesda.data import load_count_table, load_group_labels, load_taxonomy

root = resources.files("bayesda").joinpath("data")
table = load_count_table(root / "toy_counts.tsv")
labels = load_group_labels(root / "toy_labels.tsv", table.sample_ids)
tree = load_taxonomy(root / "toy_taxonomy.tsv")

cfg = engine.RunConfig(model="ZINB", normalization="DPP", iterations=3000, chains=2, seed=7)
traces, conv = engine.run_multi((table, labels), tree, cfg)

report = inference.build_report(traces, labels, target_fdr=0.05)
print(f"selected {len(report.selected)} taxa, Bayesian FDR {report.fdr:.3f}")
for row in report.taxa:
    if row["selected"]:
        print(f"  level {row['level']}  {row['taxon_id']:>4}  PPI {row['ppi']:.3f}  "
              f"log FC {row['lfc_2v1_median']:+.2f} [{row['lfc_2v1_lower']:+.2f}, {row['lfc_2v1_upper']:+.2f}]")
print(f"min pairwise PPI correlation across chains: {conv.min_correlation:.3f} "
      "(short demo run; use the default 20000 iterations for real analyses)")

s_mean, s_lo, s_hi = inference.size_factor_summary(traces)
print("size factors (posterior mean):", np.round(s_mean, 2))
