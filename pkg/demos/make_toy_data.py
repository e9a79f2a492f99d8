"""Regenerate the toy dataset bundled under ``src/bayesda/data``.

The toy data are a small draw from the ZINB simulation scheme (24 samples,
30 taxa, 4 of them discriminating) with a three-level taxonomy of 10 genera
in 3 families. Run from the repository root::

    python demos/make_toy_data.py [out_dir]
"""
import sys
from pathlib import Path

from bayesda import simgen as G
from bayesda.data import write_count_table, write_group_labels

CONFIG = G.GeneratorConfig("ZINB", n=24, p=30, p_gamma=4, K=2, sigma=3.0, seed=7)
FAMILY_OF_GENUS = {g: f"F{min(3, 1 + (g - 1) // 3)}" for g in range(1, 11)}


def main(out_dir="src/bayesda/data"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = G.generate(CONFIG)
    write_count_table(ds.table, out / "toy_counts.tsv")
    write_group_labels(ds.labels, out / "toy_labels.tsv")
    with open(out / "toy_truth.tsv", "w") as fh:
        fh.write("taxon_id\tdiscriminating\n")
        for t, g in zip(ds.table.taxon_ids, ds.truth):
            fh.write(f"{t}\t{int(g)}\n")
    with open(out / "toy_taxonomy.tsv", "w") as fh:
        fh.write("taxon_id\tlineage\n")
        for j, t in enumerate(ds.table.taxon_ids):
            genus = 1 + j // 3
            fh.write(f"{t}\tf__{FAMILY_OF_GENUS[genus]}|g__G{genus}|s__{t}\n")
    print(f"wrote {ds.table.n} samples x {ds.table.p} taxa to {out}; "
          f"discriminating: {[t for t, g in zip(ds.table.taxon_ids, ds.truth) if g]}")


if __name__ == "__main__":
    main(*sys.argv[1:])
