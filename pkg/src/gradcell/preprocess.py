"""Count normalisation, sparsification, expression binning and file ingestion."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import EmptyCellError, ParseError, SchemaError, UsageError

TARGET_SUM = 10000.0
PRETRAIN_LABELS = ("normal", "cancer", "unknown")


@dataclass
class CountMatrix:
    """Cells x genes matrix of raw non-negative integer counts."""

    counts: sp.csr_matrix
    gene_ids: list = field(default_factory=list)
    cell_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.counts = sp.csr_matrix(self.counts, dtype=np.int64)
        if not self.gene_ids:
            self.gene_ids = [f"gene{j}" for j in range(self.n_genes)]
        if not self.cell_ids:
            self.cell_ids = [f"cell{i}" for i in range(self.n_cells)]
        if len(self.gene_ids) != self.n_genes:
            raise SchemaError(f"{len(self.gene_ids)} gene ids for {self.n_genes} genes")
        if len(self.cell_ids) != self.n_cells:
            raise SchemaError(f"{len(self.cell_ids)} cell ids for {self.n_cells} cells")
        if self.counts.nnz and self.counts.data.min() < 0:
            raise SchemaError("counts must be non-negative")
        totals = np.asarray(self.counts.sum(axis=1)).ravel()
        empty = np.flatnonzero(totals == 0)
        if empty.size:
            raise EmptyCellError(f"cell {self.cell_ids[empty[0]]} has no non-zero counts")

    @property
    def n_cells(self):
        return self.counts.shape[0]

    @property
    def n_genes(self):
        return self.counts.shape[1]

    def cell(self, i):
        return self.counts[i].toarray().ravel()

    def __eq__(self, other):
        if not isinstance(other, CountMatrix):
            return NotImplemented
        return (self.counts.shape == other.counts.shape
                and (self.counts != other.counts).nnz == 0
                and self.gene_ids == other.gene_ids
                and self.cell_ids == other.cell_ids)


@dataclass
class SparseProfile:
    positions: np.ndarray
    values: np.ndarray
    label: str | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.positions.shape != self.values.shape or self.positions.ndim != 1:
            raise SchemaError("positions and values must be 1-D and equally long")
        if self.positions.size and np.any(np.diff(self.positions) <= 0):
            raise SchemaError("positions must be strictly increasing")
        if np.any(self.values <= 0):
            raise SchemaError("profile values must be positive")

    def __len__(self):
        return len(self.positions)

    def densify(self, n_genes):
        x = np.zeros(n_genes)
        x[self.positions] = self.values
        return x


@dataclass(frozen=True)
class BinSpec:
    """Expression-bin edges plus the special token ids that follow the bins."""

    edges: tuple = (1.0, 2.0, 4.0, 6.0)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e.ndim != 1 or e.size == 0 or np.any(np.diff(e) <= 0):
            raise SchemaError("bin edges must be non-empty and strictly increasing")
        object.__setattr__(self, "edges", tuple(float(v) for v in e))

    @property
    def n_bins(self):
        return len(self.edges) + 1

    @property
    def mask_token(self):
        return self.n_bins

    @property
    def cls_token(self):
        return self.n_bins + 1

    @property
    def pad_token(self):
        return self.n_bins + 2

    @property
    def n_tokens(self):
        return self.n_bins + 3

    def to_dict(self):
        return {"edges": list(self.edges), "n_tokens": self.n_tokens,
                "mask_token": self.mask_token, "cls_token": self.cls_token,
                "pad_token": self.pad_token}

    @classmethod
    def from_dict(cls, d):
        spec = cls(tuple(d["edges"]))
        if "n_tokens" in d and d["n_tokens"] != spec.n_tokens:
            raise SchemaError("BinSpec n_tokens inconsistent with edges")
        return spec


def normalize(counts):
    """``ln(1 + 10000 * n_k / sum(n))``; zero counts stay exactly zero."""
    n = np.asarray(counts, dtype=np.float64)
    total = n.sum()
    if total <= 0:
        raise EmptyCellError("cell has no non-zero counts")
    return np.log1p(n / total * TARGET_SUM)


def sparsify(x, label=None):
    x = np.asarray(x, dtype=np.float64)
    pos = np.flatnonzero(x)
    if pos.size == 0:
        raise EmptyCellError("cell has no non-zero expression")
    return SparseProfile(pos, x[pos], label)


def bin_values(values, spec):
    """Vectorised :func:`bin_value`."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(v <= 0):
        raise UsageError("only positive normalised expression can be binned")
    return np.searchsorted(np.asarray(spec.edges), v, side="right").astype(np.int64)


def bin_value(value, spec):
    return int(bin_values(np.array([value]), spec)[0])


def truncate(profile, max_len):
    """Keep the ``max_len`` most highly expressed genes (ties go to the lower index)."""
    if len(profile) <= max_len:
        return profile
    order = np.lexsort((profile.positions, -profile.values))[:max_len]
    keep = np.sort(order)
    return SparseProfile(profile.positions[keep], profile.values[keep], profile.label)


def profiles_from_counts(matrix, labels=None, max_len=None):
    out = []
    for i in range(matrix.n_cells):
        label = None if labels is None else labels[i]
        prof = sparsify(normalize(matrix.cell(i)), label)
        if max_len is not None:
            prof = truncate(prof, max_len)
        out.append(prof)
    return out


# count matrices ---------------------------------------------------------------

def _read_gene_ids(path, n_genes):
    side = Path(str(path) + ".genes")
    if not side.exists():
        return []
    ids = [ln.strip() for ln in side.read_text().splitlines() if ln.strip()]
    if len(ids) != n_genes:
        raise SchemaError(f"{side}: {len(ids)} gene ids but matrix has {n_genes} genes")
    return ids


def _parse_int(tok, path, lineno, what):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"{what} {tok!r} is not an integer", path, lineno) from None


def _read_mtx(path):
    rows, cols, vals = [], [], []
    dims = None
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            toks = s.split()
            if dims is None:
                if len(toks) != 3:
                    raise ParseError("header must be 'n_cells n_genes nnz'", path, lineno)
                dims = [_parse_int(t, path, lineno, "dimension") for t in toks]
                if min(dims) < 0 or dims[0] == 0 or dims[1] == 0:
                    raise ParseError("dimensions must be positive", path, lineno)
                continue
            if len(toks) != 3:
                raise ParseError(f"expected 'cell gene count', got {s!r}", path, lineno)
            c = _parse_int(toks[0], path, lineno, "cell index")
            g = _parse_int(toks[1], path, lineno, "gene index")
            v = _parse_int(toks[2], path, lineno, "count")
            if not (1 <= c <= dims[0]) or not (1 <= g <= dims[1]):
                raise ParseError(f"index ({c}, {g}) outside {dims[0]}x{dims[1]}", path, lineno)
            if v < 0:
                raise ParseError("negative count", path, lineno)
            if (c, g) in seen:
                raise ParseError(f"duplicate entry ({c}, {g})", path, lineno)
            seen.add((c, g))
            rows.append(c - 1)
            cols.append(g - 1)
            vals.append(v)
    if dims is None:
        raise ParseError("missing header line", path)
    if len(vals) != dims[2]:
        raise ParseError(f"header declares {dims[2]} entries, found {len(vals)}", path)
    m = sp.csr_matrix((vals, (rows, cols)), shape=(dims[0], dims[1]), dtype=np.int64)
    m.eliminate_zeros()
    return CountMatrix(m, _read_gene_ids(path, dims[1]))


def _read_dense(path):
    with open(path) as fh:
        lines = [(i, ln.rstrip("\n")) for i, ln in enumerate(fh, 1) if ln.strip()]
    if not lines:
        raise ParseError("empty file", path)
    header = lines[0][1].split("\t")
    gene_ids = header[1:]
    if not gene_ids:
        raise ParseError("header lists no genes", path, lines[0][0])
    cell_ids, data = [], []
    for lineno, ln in lines[1:]:
        toks = ln.split("\t")
        if len(toks) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(toks)}", path, lineno)
        row = [_parse_int(t, path, lineno, "count") for t in toks[1:]]
        if min(row) < 0:
            raise ParseError("negative count", path, lineno)
        cell_ids.append(toks[0])
        data.append(row)
    if not data:
        raise ParseError("no cells", path)
    return CountMatrix(sp.csr_matrix(np.array(data, dtype=np.int64)), gene_ids, cell_ids)


def ingest_count_matrix(path, format="mtx"):
    """Read raw counts: ``mtx`` (1-indexed ``cell gene count`` triplets) or ``dense`` TSV."""
    if format == "mtx":
        return _read_mtx(path)
    if format == "dense":
        return _read_dense(path)
    raise UsageError(f"unknown count-matrix format {format!r}")


def write_count_matrix(matrix, path):
    coo = matrix.counts.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate integer general\n")
        fh.write(f"{matrix.n_cells} {matrix.n_genes} {coo.nnz}\n")
        for k in order:
            fh.write(f"{coo.row[k] + 1} {coo.col[k] + 1} {coo.data[k]}\n")
    Path(str(path) + ".genes").write_text("\n".join(matrix.gene_ids) + "\n")


# binary float tables (gene embeddings, drug features) ---------------------------

TABLE_MAGIC = b"GCTB"
TABLE_VERSION = 1
_TABLE_HEADER = struct.Struct("<4sIII")


def write_table(path, table):
    table = np.ascontiguousarray(table, dtype="<f4")
    if table.ndim != 2:
        raise SchemaError("table must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_TABLE_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, *table.shape))
        fh.write(table.tobytes())


def read_table(path, rows=None, cols=None):
    raw = Path(path).read_bytes()
    if len(raw) < _TABLE_HEADER.size:
        raise ParseError("truncated header", path)
    magic, version, n_rows, n_cols = _TABLE_HEADER.unpack_from(raw)
    if magic != TABLE_MAGIC:
        raise ParseError(f"bad magic {magic!r}", path)
    if version != TABLE_VERSION:
        raise ParseError(f"unsupported version {version}", path)
    payload = raw[_TABLE_HEADER.size:]
    if len(payload) != 4 * n_rows * n_cols:
        raise ParseError(f"payload holds {len(payload)} bytes, header implies {4 * n_rows * n_cols}", path)
    if rows is not None and n_rows != rows:
        raise SchemaError(f"table has {n_rows} rows, expected {rows}")
    if cols is not None and n_cols != cols:
        raise SchemaError(f"table has {n_cols} columns, expected {cols}")
    return np.frombuffer(payload, dtype="<f4").reshape(n_rows, n_cols).astype(np.float32)


def ingest_gene_embeddings(path, n_genes, feature_size):
    return read_table(path, n_genes, feature_size)


# labels and profile corpora -------------------------------------------------

def read_labels(path, n_cells=None):
    """Sidecar label file: ``cell_index<TAB>label`` per line (0-indexed cells)."""
    labels = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            toks = s.split("\t") if "\t" in s else s.split(None, 1)
            if len(toks) != 2:
                raise ParseError("expected 'cell_index label'", path, lineno)
            idx = _parse_int(toks[0], path, lineno, "cell index")
            if idx in labels:
                raise ParseError(f"duplicate cell index {idx}", path, lineno)
            labels[idx] = toks[1].strip()
    n = n_cells if n_cells is not None else (max(labels) + 1 if labels else 0)
    missing = [i for i in range(n) if i not in labels]
    if missing:
        raise SchemaError(f"{path}: no label for cell {missing[0]}")
    extra = [i for i in labels if i < 0 or i >= n]
    if extra:
        raise SchemaError(f"{path}: label for unknown cell {extra[0]}")
    return [labels[i] for i in range(n)]


def write_labels(path, labels):
    with open(path, "w") as fh:
        for i, lab in enumerate(labels):
            fh.write(f"{i}\t{lab}\n")


def save_profiles(path, profiles, n_genes, spec):
    """JSON-lines corpus plus a ``.bins.json`` sidecar holding the BinSpec."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"n_genes": n_genes, "n_cells": len(profiles)}) + "\n")
        for prof in profiles:
            fh.write(json.dumps({"positions": prof.positions.tolist(),
                                 "values": prof.values.tolist(),
                                 "label": prof.label}) + "\n")
    Path(str(path) + ".bins.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")


def load_profiles(path):
    """Return ``(profiles, n_genes, bin_spec)``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty corpus", path)
    try:
        head = json.loads(lines[0])
        n_genes = int(head["n_genes"])
    except (ValueError, KeyError, TypeError):
        raise ParseError("bad corpus header", path, 1) from None
    profiles = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            prof = SparseProfile(rec["positions"], rec["values"], rec.get("label"))
        except (ValueError, KeyError, TypeError, SchemaError) as exc:
            raise ParseError(f"bad profile record ({exc})", path, lineno) from None
        if len(prof) and prof.positions[-1] >= n_genes:
            raise ParseError("gene position beyond n_genes", path, lineno)
        profiles.append(prof)
    side = Path(str(path) + ".bins.json")
    spec = BinSpec.from_dict(json.loads(side.read_text())) if side.exists() else BinSpec()
    return profiles, n_genes, spec


def synthetic_counts(n_cells, n_genes, density=0.2, seed=0, n_programs=2):
    """Random count matrix with ``n_programs`` distinct expression programs.

    Returns ``(CountMatrix, program_index_per_cell)``; cells of one program
    share a preferred gene subset, which gives the training losses something
    learnable.
    """
    rng = np.random.default_rng(seed)
    programs = rng.integers(0, n_programs, size=n_cells)
    prefs = [rng.choice(n_genes, size=max(1, n_genes // n_programs), replace=False)
             for _ in range(n_programs)]
    dense = np.zeros((n_cells, n_genes), dtype=np.int64)
    for i in range(n_cells):
        p = np.full(n_genes, density * 0.5)
        p[prefs[programs[i]]] = min(0.95, density * 2.0)
        mask = rng.random(n_genes) < p
        if not mask.any():
            mask[rng.integers(n_genes)] = True
        rate = np.where(np.isin(np.arange(n_genes), prefs[programs[i]]), 8.0, 2.0)
        dense[i, mask] = 1 + rng.poisson(rate[mask])
    return CountMatrix(sp.csr_matrix(dense)), programs
