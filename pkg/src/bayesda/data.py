"""Count tables, group labels, taxonomy trees, quality control and aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateDataset,
    DuplicateId,
    MalformedTable,
    NegativeCount,
    TreeMismatch,
)

LINEAGE_DELIMITER = "|"


def quantile(x, q):
    """Linear-interpolation (type 7) quantile used throughout the package."""
    return np.quantile(np.asarray(x, dtype=float), q, method="linear")


def _check_unique(ids, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise DuplicateId(f"duplicate {what} identifier {i!r}")
        seen.add(i)


@dataclass(frozen=True)
class CountTable:
    """Integer count matrix with samples in rows and taxa in columns."""

    counts: np.ndarray
    sample_ids: tuple
    taxon_ids: tuple
    level: int = 1

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise MalformedTable("counts must be a 2-d matrix")
        if counts.dtype.kind == "f":
            if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
                raise MalformedTable("counts must be integers")
        elif counts.dtype.kind not in "iub":
            raise MalformedTable(f"unsupported count dtype {counts.dtype}")
        if np.any(counts < 0):
            raise NegativeCount("counts must be non-negative")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        sample_ids = tuple(str(s) for s in self.sample_ids)
        taxon_ids = tuple(str(t) for t in self.taxon_ids)
        if counts.shape != (len(sample_ids), len(taxon_ids)):
            raise MalformedTable(
                f"counts shape {counts.shape} does not match "
                f"{len(sample_ids)} samples x {len(taxon_ids)} taxa"
            )
        _check_unique(sample_ids, "sample")
        _check_unique(taxon_ids, "taxon")
        if len(sample_ids) < 2 or len(taxon_ids) < 1:
            raise MalformedTable("need at least 2 samples and 1 taxon")
        if self.level < 1:
            raise MalformedTable("level must be >= 1")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "sample_ids", sample_ids)
        object.__setattr__(self, "taxon_ids", taxon_ids)

    @property
    def n(self):
        return self.counts.shape[0]

    @property
    def p(self):
        return self.counts.shape[1]

    @property
    def row_totals(self):
        return self.counts.sum(axis=1)

    def select_samples(self, keep):
        keep = np.asarray(keep, dtype=bool)
        return CountTable(
            self.counts[keep],
            [s for s, k in zip(self.sample_ids, keep) if k],
            self.taxon_ids,
            self.level,
        )

    def select_taxa(self, keep):
        keep = np.asarray(keep, dtype=bool)
        return CountTable(
            self.counts[:, keep],
            self.sample_ids,
            [t for t, k in zip(self.taxon_ids, keep) if k],
            self.level,
        )


@dataclass(frozen=True)
class GroupLabels:
    """Group membership ``z_i`` in ``1..K`` for each sample."""

    z: np.ndarray
    sample_ids: tuple = ()

    def __post_init__(self):
        z = np.asarray(self.z)
        if z.ndim != 1 or z.size == 0:
            raise MalformedTable("group labels must be a non-empty vector")
        if z.dtype.kind == "f" and np.any(z != np.round(z)):
            raise MalformedTable("group labels must be integers")
        z = z.astype(np.int64)
        if z.min() < 1:
            raise MalformedTable("group labels must be in 1..K")
        K = int(z.max())
        if K < 2:
            raise MalformedTable("need at least two groups")
        counts = np.bincount(z, minlength=K + 1)[1:]
        if np.any(counts == 0):
            missing = [k + 1 for k in np.flatnonzero(counts == 0)]
            raise MalformedTable(f"groups {missing} have no samples")
        ids = tuple(str(s) for s in self.sample_ids)
        if ids and len(ids) != z.size:
            raise MalformedTable("sample_ids length does not match labels")
        if ids:
            _check_unique(ids, "sample")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def K(self):
        return int(self.z.max())

    @property
    def n(self):
        return self.z.size

    @property
    def codes(self):
        """Zero-based group index per sample."""
        return self.z - 1

    @property
    def n_k(self):
        return np.bincount(self.z, minlength=self.K + 1)[1:]

    def align(self, sample_ids):
        """Reorder (and subset) labels to follow ``sample_ids``."""
        if not self.sample_ids:
            if len(sample_ids) != self.n:
                raise MalformedTable("unlabelled GroupLabels cannot be realigned")
            return GroupLabels(self.z, tuple(sample_ids))
        lookup = {s: i for i, s in enumerate(self.sample_ids)}
        missing = [s for s in sample_ids if s not in lookup]
        if missing:
            raise MalformedTable(f"no group label for samples {missing[:5]}")
        idx = [lookup[s] for s in sample_ids]
        return GroupLabels(self.z[idx], tuple(sample_ids))


class TaxonomyTree:
    """Multi-level taxon hierarchy.

    ``nodes[l]`` lists the identifiers at level ``l + 1`` (level 1 is the
    bottom) and ``parents[l][j]`` is the index at level ``l + 2`` of the
    parent of node ``j`` at level ``l + 1``.
    """

    def __init__(self, nodes: Sequence[Sequence[str]], parents: Sequence[Sequence[int]]):
        self.nodes = [tuple(str(x) for x in level) for level in nodes]
        self.parents = [np.asarray(p, dtype=np.int64) for p in parents]
        if len(self.nodes) < 1:
            raise TreeMismatch("tree needs at least one level")
        if len(self.parents) != len(self.nodes) - 1:
            raise TreeMismatch("need one parent vector per non-top level")
        for lvl, (ids, par) in enumerate(zip(self.nodes[:-1], self.parents)):
            if par.shape != (len(ids),):
                raise TreeMismatch(f"parent vector at level {lvl + 1} has wrong length")
            upper = len(self.nodes[lvl + 1])
            if par.size and (par.min() < 0 or par.max() >= upper):
                raise TreeMismatch(f"parent index out of range at level {lvl + 1}")
        for ids in self.nodes:
            _check_unique(ids, "tree node")
        self._index = [{t: j for j, t in enumerate(ids)} for ids in self.nodes]

    @property
    def L(self):
        return len(self.nodes)

    def size(self, level):
        return len(self.nodes[level - 1])

    def index(self, level, taxon_id):
        try:
            return self._index[level - 1][taxon_id]
        except KeyError:
            raise TreeMismatch(f"taxon {taxon_id!r} not in tree at level {level}") from None

    @classmethod
    def from_lineages(cls, lineages: Mapping[str, str], delimiter=LINEAGE_DELIMITER, max_level=None):
        """Build the tree from one lineage string per bottom-level taxon.

        Lineages are ordered from the root rank down to the taxon's own rank,
        e.g. ``"k__Bacteria|p__Firmicutes|...|s__X"``. All lineages must have
        the same depth. Upper-level nodes are named by their lineage prefix so
        that equal rank names under different parents stay distinct.
        """
        if not lineages:
            raise TreeMismatch("empty taxonomy")
        split = {}
        depth = None
        for taxon, lineage in lineages.items():
            parts = [x.strip() for x in str(lineage).split(delimiter)]
            if any(not x for x in parts):
                raise TreeMismatch(f"empty rank in lineage of {taxon!r}")
            if depth is None:
                depth = len(parts)
            elif len(parts) != depth:
                raise TreeMismatch(
                    f"lineage of {taxon!r} has {len(parts)} ranks, expected {depth}"
                )
            split[str(taxon)] = parts
        L = depth if max_level is None else min(depth, int(max_level))
        bottom = list(split)
        nodes = [bottom]
        parents = []
        prev_keys = bottom
        prev_paths = {t: split[t] for t in bottom}
        for level in range(2, L + 1):
            keep = depth - level + 1
            ids = []
            index = {}
            par = []
            paths = {}
            for key in prev_keys:
                path = prev_paths[key][:keep]
                name = delimiter.join(path)
                if name not in index:
                    index[name] = len(ids)
                    ids.append(name)
                    paths[name] = path
                par.append(index[name])
            nodes.append(ids)
            parents.append(par)
            prev_keys = ids
            prev_paths = paths
        return cls(nodes, parents)

    def indicator(self, level):
        """0/1 matrix mapping level ``level`` nodes onto their parents."""
        par = self.parents[level - 1]
        G = np.zeros((par.size, self.size(level + 1)))
        G[np.arange(par.size), par] = 1.0
        return G

    def restrict(self, taxon_ids):
        """Sub-tree spanned by the given bottom-level taxa, in that order.

        Upper-level nodes are ordered by first appearance.
        """
        current = [self.index(1, t) for t in taxon_ids]
        nodes = [list(taxon_ids)]
        parents = []
        for lvl in range(1, self.L):
            order = {}
            up = [int(self.parents[lvl - 1][c]) for c in current]
            for u in up:
                order.setdefault(u, len(order))
            parents.append([order[u] for u in up])
            current = list(order)
            nodes.append([self.nodes[lvl][u] for u in current])
        return TaxonomyTree(nodes, parents)

    def neighbor_lists(self, level):
        """Indices of the direct neighbours of each node at ``level``.

        Returns ``(children, parent)`` where ``children[j]`` indexes level
        ``level - 1`` (empty at the bottom) and ``parent[j]`` indexes level
        ``level + 1`` (``-1`` at the top).
        """
        p = self.size(level)
        children = [[] for _ in range(p)]
        if level > 1:
            for c, par in enumerate(self.parents[level - 2]):
                children[par].append(c)
        if level < self.L:
            parent = self.parents[level - 1].copy()
        else:
            parent = np.full(p, -1, dtype=np.int64)
        return [np.asarray(c, dtype=np.int64) for c in children], parent


@dataclass
class QcEntry:
    id: str
    kind: str
    reason: str
    statistic: float
    threshold: float


@dataclass
class QcReport:
    removed_samples: list = field(default_factory=list)
    removed_taxa: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)

    @property
    def entries(self):
        return list(self.removed_samples) + list(self.removed_taxa)

    def merge(self, other: "QcReport"):
        return QcReport(
            self.removed_samples + other.removed_samples,
            self.removed_taxa + other.removed_taxa,
            {**self.thresholds, **other.thresholds},
        )

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["id", "kind", "reason", "statistic", "threshold"])
            for e in self.entries:
                w.writerow([e.id, e.kind, e.reason, repr(float(e.statistic)), repr(float(e.threshold))])

    @classmethod
    def read(cls, path):
        report = cls()
        with open(path, newline="") as fh:
            r = csv.reader(fh, delimiter="\t")
            next(r)
            for row in r:
                e = QcEntry(row[0], row[1], row[2], float(row[3]), float(row[4]))
                (report.removed_samples if e.kind == "sample" else report.removed_taxa).append(e)
        return report


# --------------------------------------------------------------------------- io


def _sniff_delimiter(first_line):
    return "\t" if first_line.count("\t") >= first_line.count(",") else ","


def _read_rows(path):
    path = Path(path)
    with open(path, newline="") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise MalformedTable(f"{path} is empty")
    delim = _sniff_delimiter(lines[0])
    return list(csv.reader(lines, delimiter=delim))


def _parse_count(cell, where):
    try:
        value = float(cell)
    except ValueError:
        raise MalformedTable(f"non-numeric count {cell!r} at {where}") from None
    if not math.isfinite(value) or value != round(value):
        raise MalformedTable(f"non-integer count {cell!r} at {where}")
    if value < 0:
        raise NegativeCount(f"negative count {cell!r} at {where}")
    return int(value)


def load_count_table(path, orientation="samples-in-rows", level=1) -> CountTable:
    """Read a delimited count table with a header row and an ID column.

    With ``orientation="taxa-in-rows"`` the file is transposed on read.
    """
    if orientation not in ("samples-in-rows", "taxa-in-rows"):
        raise ValueError(f"unknown orientation {orientation!r}")
    rows = _read_rows(path)
    header = [h.strip() for h in rows[0][1:]]
    row_ids = []
    values = []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header) + 1:
            raise MalformedTable(f"line {r}: expected {len(header) + 1} fields, got {len(row)}")
        row_ids.append(row[0].strip())
        values.append([_parse_count(c, f"line {r}, column {c_i + 2}") for c_i, c in enumerate(row[1:])])
    counts = np.array(values, dtype=np.int64).reshape(len(row_ids), len(header))
    if orientation == "samples-in-rows":
        return CountTable(counts, row_ids, header, level)
    return CountTable(counts.T, header, row_ids, level)


def write_count_table(table: CountTable, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", *table.taxon_ids])
        for sid, row in zip(table.sample_ids, table.counts):
            w.writerow([sid, *(int(v) for v in row)])


def load_group_labels(path, sample_ids=None) -> GroupLabels:
    """Two-column file ``sample_id, group``; a non-numeric first row is a header."""
    rows = _read_rows(path)
    try:
        int(rows[0][1])
    except (ValueError, IndexError):
        rows = rows[1:]
    ids, z = [], []
    for r in rows:
        if len(r) < 2:
            raise MalformedTable(f"label row {r!r} needs two fields")
        ids.append(r[0].strip())
        try:
            z.append(int(r[1]))
        except ValueError:
            raise MalformedTable(f"group {r[1]!r} for sample {r[0]!r} is not an integer") from None
    labels = GroupLabels(np.array(z), tuple(ids))
    return labels.align(sample_ids) if sample_ids is not None else labels


def write_group_labels(labels: GroupLabels, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", "group"])
        for sid, k in zip(labels.sample_ids, labels.z):
            w.writerow([sid, int(k)])


def load_taxonomy(path, max_level=None) -> TaxonomyTree:
    """Two-column file ``taxon_id, lineage`` with ``|``-delimited ranks."""
    rows = _read_rows(path)
    if rows and LINEAGE_DELIMITER not in rows[0][1] and rows[0][0].lower() in ("taxon_id", "taxon", "id"):
        rows = rows[1:]
    lineages = {}
    for r in rows:
        if len(r) < 2:
            raise MalformedTable(f"taxonomy row {r!r} needs two fields")
        if r[0].strip() in lineages:
            raise DuplicateId(f"duplicate taxon {r[0]!r} in taxonomy")
        lineages[r[0].strip()] = r[1].strip()
    return TaxonomyTree.from_lineages(lineages, max_level=max_level)


# ---------------------------------------------------------------- quality control


def _cooks_distance(x, y):
    X = np.column_stack([np.ones_like(x), x])
    pinv = np.linalg.pinv(X)
    rank = np.linalg.matrix_rank(X)
    H = X @ pinv
    h = np.clip(np.diag(H), 0.0, 1.0)
    resid = y - H @ y
    dof = x.size - rank
    sse = float(resid @ resid)
    if dof <= 0 or sse <= 1e-12 * max(1.0, float(y @ y)):
        return np.zeros_like(x)
    mse = sse / dof
    with np.errstate(divide="ignore", invalid="ignore"):
        d = resid**2 / (rank * mse) * h / (1.0 - h) ** 2
    return np.where(np.isfinite(d), d, np.inf)


def qc_samples(table: CountTable, labels: GroupLabels | None = None):
    """Remove sequencing-depth outliers, then influential points.

    The first pass drops samples whose total reads fall strictly outside
    ``[Q1 - 3 IQR, Q3 + 3 IQR]``. The second regresses the log number of
    observed taxa on total reads by least squares and drops samples whose
    Cook's distance exceeds ``4 / (n - 2)``. Each pass runs once.
    """
    if table.n < 4:
        raise DegenerateDataset(f"sample QC needs at least 4 samples, got {table.n}")
    totals = table.row_totals.astype(float)
    q1, q3 = quantile(totals, [0.25, 0.75])
    iqr = q3 - q1
    lo, hi = q1 - 3 * iqr, q3 + 3 * iqr
    report = QcReport(thresholds={"depth_lower": lo, "depth_upper": hi})
    depth_out = (totals < lo) | (totals > hi)
    for i in np.flatnonzero(depth_out):
        threshold = lo if totals[i] < lo else hi
        report.removed_samples.append(
            QcEntry(table.sample_ids[i], "sample", "depth-outlier", totals[i], threshold)
        )
    keep = ~depth_out
    idx = np.flatnonzero(keep)
    n_kept = idx.size
    if n_kept >= 3:
        sub = table.counts[idx]
        observed = (sub > 0).sum(axis=1)
        if np.any(observed == 0):
            raise DegenerateDataset("a retained sample has no observed taxa")
        cooks = _cooks_distance(totals[idx], np.log(observed.astype(float)))
        cutoff = 4.0 / (n_kept - 2)
        report.thresholds["cooks_cutoff"] = cutoff
        for pos in np.flatnonzero(cooks > cutoff):
            i = idx[pos]
            keep[i] = False
            report.removed_samples.append(
                QcEntry(table.sample_ids[i], "sample", "cooks-distance", cooks[pos], cutoff)
            )
    if keep.sum() < 2:
        raise DegenerateDataset("fewer than 2 samples survive sample QC")
    out = table.select_samples(keep)
    if labels is not None:
        counts = labels.align(table.sample_ids).z[keep]
        per_group = np.bincount(counts, minlength=labels.K + 1)[1:]
        if np.any(per_group < 2):
            raise DegenerateDataset(f"samples per group after QC: {per_group.tolist()}")
    return out, report


def qc_features(table: CountTable, labels: GroupLabels, min_nonzero: int = 3):
    """Drop taxa with fewer than ``min_nonzero`` nonzero counts in any group."""
    if min_nonzero < 1:
        raise ValueError("min_nonzero must be >= 1")
    labels = labels.align(table.sample_ids) if labels.sample_ids else labels
    nz = table.counts > 0
    per_group = np.stack([nz[labels.z == k].sum(axis=0) for k in range(1, labels.K + 1)])
    keep = per_group.min(axis=0) >= min_nonzero
    report = QcReport(thresholds={"min_nonzero": float(min_nonzero)})
    for j in np.flatnonzero(~keep):
        detail = ",".join(str(int(c)) for c in per_group[:, j])
        report.removed_taxa.append(
            QcEntry(table.taxon_ids[j], "taxon", f"low-prevalence[{detail}]",
                    float(per_group[:, j].min()), float(min_nonzero))
        )
    if not keep.any():
        raise DegenerateDataset("feature QC removed every taxon")
    return table.select_taxa(keep), report


# ------------------------------------------------------------------ aggregation


def aggregate_counts(table: CountTable, tree: TaxonomyTree, target_level: int) -> CountTable:
    """Sum counts up the tree from ``table.level`` to ``target_level``.

    Only upper-level nodes with at least one descendant in ``table`` appear
    in the output.
    """
    if not table.level < target_level <= tree.L:
        raise TreeMismatch(
            f"cannot aggregate level {table.level} to {target_level} in a {tree.L}-level tree"
        )
    idx = np.array([tree.index(table.level, t) for t in table.taxon_ids], dtype=np.int64)
    counts = table.counts
    for lvl in range(table.level, target_level):
        up = tree.parents[lvl - 1][idx]
        uniq, inverse = np.unique(up, return_inverse=True)
        agg = np.zeros((counts.shape[0], uniq.size), dtype=np.int64)
        np.add.at(agg.T, inverse, counts.T)
        counts, idx = agg, uniq
    ids = [tree.nodes[target_level - 1][u] for u in idx]
    return CountTable(counts, table.sample_ids, ids, target_level)


def level_tables(table: CountTable, tree: TaxonomyTree | None):
    """Count tables for every tree level plus the tree restricted to ``table``.

    Column order at each level follows the restricted tree. Without a tree
    this is ``([table], None)``.
    """
    if tree is None:
        return [table], None
    if table.level != 1:
        raise TreeMismatch("multi-level analysis starts from a bottom-level table")
    sub = tree.restrict(table.taxon_ids)
    tables = [table]
    counts = table.counts
    for lvl in range(1, sub.L):
        counts = counts @ sub.indicator(lvl).astype(np.int64)
        tables.append(CountTable(counts, table.sample_ids, sub.nodes[lvl], lvl + 1))
    return tables, sub


def as_counts(x) -> np.ndarray:
    return np.asarray(x.counts if isinstance(x, CountTable) else x)


def make_table(counts, sample_ids: Iterable[str] | None = None, taxon_ids: Iterable[str] | None = None):
    counts = np.asarray(counts)
    n, p = counts.shape
    return CountTable(
        counts,
        list(sample_ids) if sample_ids is not None else [f"S{i + 1}" for i in range(n)],
        list(taxon_ids) if taxon_ids is not None else [f"T{j + 1}" for j in range(p)],
    )
