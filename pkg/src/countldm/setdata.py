"""Exchangeable count sets: data model, tokenization, synthetic data and file I/O.

A cell is an unordered set of ``(gene id, count)`` pairs plus categorical
attributes. The sparse text format used on disk looks like::

    #gene 0 Gene0
    #gene 1 Gene1
    #attr cell_type A,B
    cell0\tcell_type=A\t0:3 1:12
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class DatasetFormatError(ValueError):
    """Raised when a dataset file violates the sparse text format."""

    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        self.reason = message
        super().__init__(f"line {lineno}: {message}")


@dataclass(frozen=True)
class GeneVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError("gene names must be unique")
        for name in self.names:
            if not name or any(c.isspace() for c in name):
                raise ValueError(f"invalid gene name {name!r}")

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def pad_id(self) -> int:
        # one past the last gene so it never collides with a real id
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def numbered(cls, n_genes: int, prefix: str = "Gene") -> "GeneVocabulary":
        return cls(tuple(f"{prefix}{i}" for i in range(n_genes)))


@dataclass(frozen=True)
class CellRecord:
    gene_ids: tuple[int, ...]
    counts: tuple[int, ...]
    attributes: Mapping[str, str] = field(default_factory=dict)
    cell_id: str = ""

    def __post_init__(self):
        ids = tuple(int(g) for g in self.gene_ids)
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "gene_ids", ids)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "attributes", dict(self.attributes))
        if len(ids) != len(counts):
            raise ValueError("gene_ids and counts must have the same length")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate gene id in cell")
        if any(c < 0 for c in counts):
            raise ValueError("negative count")

    @property
    def library_size(self) -> int:
        return sum(self.counts)

    def expressed(self) -> tuple[list[int], list[int]]:
        pairs = [(g, c) for g, c in zip(self.gene_ids, self.counts) if c > 0]
        return [g for g, _ in pairs], [c for _, c in pairs]

    def dense(self, n_genes: int) -> np.ndarray:
        out = np.zeros(n_genes, dtype=np.int64)
        out[list(self.gene_ids)] = self.counts
        return out


@dataclass(frozen=True)
class TokenizedCell:
    token_ids: np.ndarray
    token_counts: np.ndarray
    pad_mask: np.ndarray  # True marks a real token

    @property
    def n_tokens(self) -> int:
        return int(self.pad_mask.sum())


def tokenize(record: CellRecord, d: int, pad_id: int) -> TokenizedCell:
    """Keep expressed genes and pad (or truncate) to exactly ``d`` tokens.

    Expressed genes keep their input order. When more than ``d`` genes are
    expressed the ``d`` smallest gene ids are kept, in ascending order.
    """
    if d < 1:
        raise ValueError("context length must be >= 1")
    ids, counts = record.expressed()
    if len(ids) > d:
        order = np.argsort(ids, kind="stable")[:d]
        ids = [ids[i] for i in order]
        counts = [counts[i] for i in order]
    n = len(ids)
    token_ids = np.full(d, pad_id, dtype=np.int64)
    token_counts = np.zeros(d, dtype=np.int64)
    token_ids[:n] = ids
    token_counts[:n] = counts
    pad_mask = np.zeros(d, dtype=bool)
    pad_mask[:n] = True
    return TokenizedCell(token_ids, token_counts, pad_mask)


def tokenize_batch(records: Sequence[CellRecord], d: int, pad_id: int):
    """Stack tokenized cells into ``(ids, counts, mask)`` arrays of shape [B, d]."""
    cells = [tokenize(r, d, pad_id) for r in records]
    ids = np.stack([c.token_ids for c in cells]) if cells else np.zeros((0, d), np.int64)
    counts = np.stack([c.token_counts for c in cells]) if cells else np.zeros((0, d), np.int64)
    mask = np.stack([c.pad_mask for c in cells]) if cells else np.zeros((0, d), bool)
    return ids, counts, mask


@dataclass
class CountDataset:
    vocabulary: GeneVocabulary
    records: list[CellRecord]
    attribute_schema: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.records = list(self.records)
        self.attribute_schema = {k: list(v) for k, v in self.attribute_schema.items()}
        for name, cats in self.attribute_schema.items():
            if len(set(cats)) != len(cats):
                raise ValueError(f"duplicate category in attribute {name!r}")
        for i, rec in enumerate(self.records):
            self._check_record(rec, i)

    def _check_record(self, rec: CellRecord, i: int):
        for g in rec.gene_ids:
            if not 0 <= g < self.vocabulary.size:
                raise ValueError(f"record {i}: unknown gene id {g}")
        for name, label in rec.attributes.items():
            if name not in self.attribute_schema:
                raise ValueError(f"record {i}: unknown attribute {name!r}")
            if label not in self.attribute_schema[name]:
                raise ValueError(f"record {i}: unknown label {label!r} for {name!r}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_genes(self) -> int:
        return self.vocabulary.size

    def dense_counts(self) -> np.ndarray:
        out = np.zeros((len(self.records), self.n_genes), dtype=np.int64)
        for i, rec in enumerate(self.records):
            out[i, list(rec.gene_ids)] = rec.counts
        return out

    def library_sizes(self) -> np.ndarray:
        return np.array([r.library_size for r in self.records], dtype=np.int64)

    def labels(self, attribute: str) -> np.ndarray:
        return np.array([r.attributes.get(attribute, "") for r in self.records], dtype=object)

    def condition_keys(self) -> list[tuple[str, ...]]:
        names = list(self.attribute_schema)
        return [tuple(r.attributes.get(a, "") for a in names) for r in self.records]

    def subset(self, indices) -> "CountDataset":
        return CountDataset(self.vocabulary, [self.records[i] for i in indices], self.attribute_schema)

    def split(self, test_fraction: float, seed: int) -> tuple["CountDataset", "CountDataset"]:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self.records))
        n_test = int(round(test_fraction * len(self.records)))
        test_idx = np.sort(perm[:n_test])
        train_idx = np.sort(perm[n_test:])
        return self.subset(train_idx), self.subset(test_idx)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticClass:
    attributes: Mapping[str, str]
    profile: np.ndarray  # mean count per gene
    dispersion: float | np.ndarray


@dataclass(frozen=True)
class SyntheticSpec:
    n_genes: int
    n_cells: int  # per class
    classes: tuple[SyntheticClass, ...]
    seed: int = 0
    # sd of a per-cell log-normal size factor; 0 disables it
    size_factor_sd: float = 0.0

    def validate(self):
        if self.n_genes < 1 or self.n_cells < 0:
            raise ValueError("n_genes must be positive and n_cells non-negative")
        if not self.classes:
            raise ValueError("at least one class is required")
        for c in self.classes:
            profile = np.asarray(c.profile, dtype=float)
            if profile.shape != (self.n_genes,):
                raise ValueError("class profile must have length n_genes")
            if np.any(profile < 0) or not np.all(np.isfinite(profile)):
                raise ValueError("class profile must be non-negative and finite")
            disp = np.asarray(c.dispersion, dtype=float)
            if np.any(~(disp > 0)):
                raise ValueError("dispersion must be strictly positive")
        if self.size_factor_sd < 0:
            raise ValueError("size_factor_sd must be non-negative")


def sample_nb(rng: np.random.Generator, mean, dispersion, size=None) -> np.ndarray:
    """Draw Negative-Binomial counts with variance ``mean + dispersion * mean**2``.

    Uses the gamma-Poisson mixture; a zero mean yields zero counts.
    """
    mean = np.asarray(mean, dtype=float)
    dispersion = np.asarray(dispersion, dtype=float)
    if size is None:
        size = np.broadcast_shapes(mean.shape, dispersion.shape)
    shape = 1.0 / dispersion
    lam = rng.gamma(shape, np.broadcast_to(mean * dispersion, size), size=size)
    return rng.poisson(lam)


def generate_synthetic(spec: SyntheticSpec) -> CountDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    vocab = GeneVocabulary.numbered(spec.n_genes)
    schema: dict[str, list[str]] = {}
    for c in spec.classes:
        for k, v in c.attributes.items():
            cats = schema.setdefault(k, [])
            if v not in cats:
                cats.append(v)
    records = []
    for ci, c in enumerate(spec.classes):
        profile = np.asarray(c.profile, dtype=float)
        if spec.size_factor_sd > 0:
            sf = rng.lognormal(-0.5 * spec.size_factor_sd**2, spec.size_factor_sd, size=spec.n_cells)
        else:
            sf = np.ones(spec.n_cells)
        means = sf[:, None] * profile[None, :]
        counts = sample_nb(rng, means, c.dispersion, size=means.shape)
        for j in range(spec.n_cells):
            nz = np.flatnonzero(counts[j])
            records.append(
                CellRecord(
                    gene_ids=tuple(nz.tolist()),
                    counts=tuple(counts[j, nz].tolist()),
                    attributes=dict(c.attributes),
                    cell_id=f"c{ci}_{j}",
                )
            )
    return CountDataset(vocab, records, schema)


def factorial_spec(
    n_genes: int = 100,
    axes: Mapping[str, Sequence[str]] | None = None,
    cells_per_class: int = 1000,
    dispersion: float = 0.2,
    effect_genes: int = 15,
    effect_size: float = 4.0,
    mean_log_expr: float = 0.5,
    sd_log_expr: float = 1.2,
    size_factor_sd: float = 0.25,
    seed: int = 0,
) -> SyntheticSpec:
    """Build a full-factorial spec where every non-reference category of every
    attribute rescales its own random subset of genes.

    Each affected gene is multiplied by ``effect_size`` or divided by it with
    equal probability, so classes differ in both directions.
    """
    if axes is None:
        axes = {"cell_type": ["A", "B"], "perturbation": ["ctrl", "stim"]}
    rng = np.random.default_rng(seed)
    base = np.exp(rng.normal(mean_log_expr, sd_log_expr, size=n_genes))
    effects: dict[tuple[str, str], np.ndarray] = {}
    for name, cats in axes.items():
        for cat in list(cats)[1:]:
            genes = rng.choice(n_genes, size=min(effect_genes, n_genes), replace=False)
            fold = np.ones(n_genes)
            signs = rng.choice([-1.0, 1.0], size=len(genes))
            fold[genes] = effect_size**signs
            effects[(name, cat)] = fold
    names = list(axes)
    classes = []
    for combo in _product([list(axes[a]) for a in names]):
        profile = base.copy()
        for name, cat in zip(names, combo):
            if (name, cat) in effects:
                profile = profile * effects[(name, cat)]
        classes.append(SyntheticClass(dict(zip(names, combo)), profile, dispersion))
    return SyntheticSpec(n_genes, cells_per_class, tuple(classes), seed=seed, size_factor_sd=size_factor_sd)


def _product(lists):
    if not lists:
        yield ()
        return
    for head in lists[0]:
        for tail in _product(lists[1:]):
            yield (head,) + tail


# ---------------------------------------------------------------------------
# file format


def write_dataset(dataset: CountDataset, path) -> None:
    """Write the sparse text format. Zero counts are not written."""
    lines = []
    for gid, name in enumerate(dataset.vocabulary.names):
        lines.append(f"#gene {gid} {name}")
    for name, cats in dataset.attribute_schema.items():
        lines.append(f"#attr {name} {','.join(cats)}")
    attr_order = list(dataset.attribute_schema)
    for i, rec in enumerate(dataset.records):
        cell_id = rec.cell_id or f"cell{i}"
        attrs = ";".join(f"{a}={rec.attributes[a]}" for a in attr_order if a in rec.attributes)
        entries = " ".join(f"{g}:{c}" for g, c in zip(rec.gene_ids, rec.counts) if c > 0)
        lines.append(f"{cell_id}\t{attrs}\t{entries}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> CountDataset:
    text = Path(path).read_text(encoding="utf-8")
    gene_names: dict[int, str] = {}
    schema: dict[str, list[str]] = {}
    raw_records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#gene"):
            parts = line.split()
            if len(parts) != 3:
                raise DatasetFormatError(lineno, "malformed gene header")
            try:
                gid = int(parts[1])
            except ValueError:
                raise DatasetFormatError(lineno, "malformed gene id") from None
            if gid in gene_names:
                raise DatasetFormatError(lineno, f"duplicate gene id {gid}")
            gene_names[gid] = parts[2]
        elif line.startswith("#attr"):
            parts = line.split()
            if len(parts) != 3:
                raise DatasetFormatError(lineno, "malformed attribute header")
            schema[parts[1]] = parts[2].split(",")
        elif line.startswith("#"):
            continue
        else:
            raw_records.append((lineno, line))

    n_genes = len(gene_names)
    if sorted(gene_names) != list(range(n_genes)):
        raise DatasetFormatError(0, "gene ids must be contiguous from 0")
    try:
        vocab = GeneVocabulary(tuple(gene_names[i] for i in range(n_genes)))
    except ValueError as e:
        raise DatasetFormatError(0, str(e)) from None

    records = []
    for lineno, line in raw_records:
        fields = line.split("\t")
        if len(fields) == 1:
            # whitespace-separated shorthand: cell id, optional a=b;... field, entries
            parts = line.split()
            attr_part = [p for p in parts[1:] if "=" in p]
            if len(attr_part) > 1:
                raise DatasetFormatError(lineno, "more than one attribute field")
            fields = [parts[0], "".join(attr_part), " ".join(p for p in parts[1:] if "=" not in p)]
        if len(fields) != 3:
            raise DatasetFormatError(lineno, "expected 3 tab-separated fields")
        cell_id, attr_field, entry_field = fields
        attrs = {}
        if attr_field:
            for item in attr_field.split(";"):
                key, sep, val = item.partition("=")
                if not sep:
                    raise DatasetFormatError(lineno, f"malformed attribute {item!r}")
                if key not in schema or val not in schema[key]:
                    raise DatasetFormatError(lineno, f"unknown attribute label {item!r}")
                attrs[key] = val
        ids, counts = [], []
        for item in entry_field.split():
            g, sep, c = item.partition(":")
            if not sep:
                raise DatasetFormatError(lineno, f"malformed entry {item!r}")
            try:
                gi, ci = int(g), int(c)
            except ValueError:
                raise DatasetFormatError(lineno, f"malformed entry {item!r}") from None
            if ci < 0:
                raise DatasetFormatError(lineno, "negative count")
            if not 0 <= gi < n_genes:
                raise DatasetFormatError(lineno, f"unknown gene id {gi}")
            ids.append(gi)
            counts.append(ci)
        if len(set(ids)) != len(ids):
            raise DatasetFormatError(lineno, "duplicate gene within cell")
        records.append(CellRecord(tuple(ids), tuple(counts), attrs, cell_id))
    return CountDataset(vocab, records, schema)


__all__ = [
    "DatasetFormatError",
    "GeneVocabulary",
    "CellRecord",
    "TokenizedCell",
    "CountDataset",
    "SyntheticClass",
    "SyntheticSpec",
    "tokenize",
    "tokenize_batch",
    "generate_synthetic",
    "factorial_spec",
    "sample_nb",
    "read_dataset",
    "write_dataset",
]
