"""CSV ingestion, schema inference, splitting, preprocessing and batching.

The pipeline is deliberately staged so nothing fitted can leak across
splits:

    load_csv -> (DatasetSchema, Table)        types inferred, nothing fitted
    split    -> {"train","val","test"}        deterministic, stratified
    fit_preprocessing(train only)             vocabularies, bins, normalizer
    encode   -> EncodedSplit                  numpy matrices per split
    make_batches                              per-epoch deterministic shuffle

Conventions: UTF-8, comma delimiter, first row is the header, empty string
means missing. A column is numerical iff every non-empty cell parses as a
float; otherwise categorical. Cells that parse to NaN or infinity are kept
numerical but flagged missing (the model's masking channel handles them).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, FitError, IngestionError, SchemaError

KIND_NUMERICAL = "numerical"
KIND_CATEGORICAL = "categorical"
KIND_TARGET = "target"

TASK_REGRESSION = "regression"
TASK_CLASSIFICATION = "classification"

NORMALIZER_EPS = 1e-8


@dataclass
class ColumnSpec:
    """One column: its name, inferred kind, and (once fitted) its vocabulary.

    For categorical feature columns `vocab` lists the categories seen in the
    train split, in first-appearance order; ids beyond it are reserved:
    UNK = len(vocab), MASKED = len(vocab) + 1. For a classification target
    `vocab` holds the class labels (contiguous ids by first appearance).
    """

    name: str
    kind: str
    numeric_like: bool = False  # raw cells parse as floats (task inference)
    vocab: Optional[list[str]] = None

    @property
    def unk_id(self) -> int:
        return len(self.vocab)

    @property
    def masked_id(self) -> int:
        return len(self.vocab) + 1

    @property
    def table_size(self) -> int:
        """Rows the embedding table must cover: vocab + UNK + MASKED."""
        return len(self.vocab) + 2


@dataclass
class DatasetSchema:
    columns: list[ColumnSpec]
    task: Optional[str] = None
    n_classes: Optional[int] = None

    @property
    def target(self) -> ColumnSpec:
        for c in self.columns:
            if c.kind == KIND_TARGET:
                return c
        raise SchemaError("schema has no target column")

    @property
    def features(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind != KIND_TARGET]

    @property
    def numerical_features(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind == KIND_NUMERICAL]

    @property
    def categorical_features(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind == KIND_CATEGORICAL]

    @property
    def n_features(self) -> int:
        return len(self.features)

    def validate(self) -> None:
        targets = [c for c in self.columns if c.kind == KIND_TARGET]
        if len(targets) != 1:
            raise SchemaError(f"expected exactly one target column, found {len(targets)}")
        if self.n_features < 1:
            raise SchemaError("schema needs at least one feature column")
        if self.task == TASK_CLASSIFICATION and self.n_classes is not None and self.n_classes < 2:
            raise SchemaError(f"classification needs >= 2 classes, got {self.n_classes}")

    def to_json(self) -> dict:
        return {
            "columns": [
                {"name": c.name, "kind": c.kind, "numeric_like": c.numeric_like, "vocab": c.vocab}
                for c in self.columns
            ],
            "task": self.task,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSchema":
        cols = [
            ColumnSpec(d["name"], d["kind"], d.get("numeric_like", False), d.get("vocab"))
            for d in obj["columns"]
        ]
        return cls(cols, obj.get("task"), obj.get("n_classes"))

    def fingerprint(self) -> str:
        """Stable digest of everything the model's shapes depend on."""
        canon = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class QuantileBins:
    feature: str
    boundaries: np.ndarray  # float64, non-decreasing, len == n_quantiles
    n_quantiles: int

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        object.__setattr__(self, "boundaries", b)
        if self.n_quantiles < 2:
            raise ConfigError(f"need n_quantiles >= 2, got {self.n_quantiles}")
        if len(b) != self.n_quantiles:
            raise ConfigError(
                f"{self.feature}: {len(b)} boundaries for n_quantiles={self.n_quantiles}"
            )
        if np.any(np.diff(b) < 0):
            raise ConfigError(f"{self.feature}: boundaries must be non-decreasing")


@dataclass(frozen=True)
class TargetNormalizer:
    mean: float
    std: float  # population std of the train targets
    eps: float = NORMALIZER_EPS

    def normalize(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.mean) / (self.std + self.eps)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * (self.std + self.eps) + self.mean


class Table:
    """Column-major raw table; cells are strings, missing cells are None."""

    def __init__(self, order: list[str], columns: dict[str, list]):
        self.order = list(order)
        self.columns = columns
        lengths = {len(v) for v in columns.values()}
        if len(lengths) > 1:
            raise IngestionError(f"column lengths differ: {sorted(lengths)}")
        self.n_rows = lengths.pop() if lengths else 0

    @classmethod
    def from_rows(cls, header: Sequence[str], rows: Sequence[Sequence]) -> "Table":
        cols = {name: [] for name in header}
        for row in rows:
            for name, cell in zip(header, row):
                cell = None if cell is None or cell == "" else str(cell)
                cols[name].append(cell)
        return cls(list(header), cols)

    def select(self, indices: np.ndarray) -> "Table":
        return Table(
            self.order,
            {name: [col[i] for i in indices] for name, col in self.columns.items()},
        )

    def column(self, name: str) -> list:
        return self.columns[name]


def _parses_as_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def read_table(path) -> Table:
    """Read a CSV into a raw Table; no schema inference.

    Used directly when the schema is already known (prediction against a
    fitted model, where the target column may legitimately be absent).
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise IngestionError(f"{path}: empty file") from None
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise IngestionError(
                        f"{path}: line {lineno} has {len(row)} fields, header has {len(header)}"
                    )
                rows.append(row)
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise IngestionError(f"{path} is not valid UTF-8: {e}") from e

    if not rows:
        raise IngestionError(f"{path}: no data rows")
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise IngestionError(f"{path}: duplicate column names {dupes}")

    return Table.from_rows(header, rows)


def load_csv(
    path,
    schema_hint: Optional[dict] = None,
    task: Optional[str] = None,
) -> tuple[DatasetSchema, Table]:
    """Read a CSV into a raw Table and infer its schema.

    schema_hint maps column names to "numerical" / "categorical" / "target",
    overriding inference for those columns. Without a "target" hint the last
    column is the target. `task` forces regression/classification; left out,
    it is inferred from whether the target values parse as floats.
    """
    table = read_table(path)
    schema = infer_schema(table, schema_hint=schema_hint, task=task)
    return schema, table


def infer_schema(
    table: Table,
    schema_hint: Optional[dict] = None,
    task: Optional[str] = None,
) -> DatasetSchema:
    hint = dict(schema_hint or {})
    for name, kind in hint.items():
        if name not in table.columns:
            raise SchemaError(f"schema hint names unknown column {name!r}")
        if kind not in (KIND_NUMERICAL, KIND_CATEGORICAL, KIND_TARGET):
            raise SchemaError(f"schema hint for {name!r}: unknown kind {kind!r}")

    hinted_targets = [n for n, k in hint.items() if k == KIND_TARGET]
    if len(hinted_targets) > 1:
        raise SchemaError(f"schema hint names multiple targets: {hinted_targets}")
    target_name = hinted_targets[0] if hinted_targets else table.order[-1]

    columns = []
    for name in table.order:
        cells = [c for c in table.column(name) if c is not None]
        numeric_like = bool(cells) and all(_parses_as_float(c) for c in cells)
        if name == target_name:
            kind = KIND_TARGET
        elif name in hint:
            kind = hint[name]
        else:
            kind = KIND_NUMERICAL if numeric_like else KIND_CATEGORICAL
        columns.append(ColumnSpec(name, kind, numeric_like=numeric_like))

    target = next(c for c in columns if c.kind == KIND_TARGET)
    if task is None:
        task = TASK_REGRESSION if target.numeric_like else TASK_CLASSIFICATION
    elif task not in (TASK_REGRESSION, TASK_CLASSIFICATION):
        raise ConfigError(f"unknown task {task!r}")
    if task == TASK_REGRESSION and not target.numeric_like:
        raise SchemaError(
            f"target column {target.name!r} does not parse as numbers; regression impossible"
        )

    schema = DatasetSchema(columns, task=task)
    schema.validate()
    return schema


# ---------------------------------------------------------------------------
# splitting


def split(
    table: Table,
    schema: DatasetSchema,
    fractions: Sequence[float],
    seed: int,
) -> dict[str, Table]:
    """Deterministic shuffled partition into train/val/test.

    Classification tables are stratified: each class is shuffled and cut
    separately, so split class ratios track the global ratio. Sizes follow
    cumulative floor cuts: 10 rows at (0.6, 0.2, 0.2) -> 6/2/2.
    """
    if len(fractions) != 3:
        raise ConfigError(f"expected 3 fractions (train, val, test), got {len(fractions)}")
    if any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be positive, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got sum {sum(fractions)}")

    rng = np.random.default_rng(seed)
    n = table.n_rows

    def cut(indices: np.ndarray) -> tuple[list, list, list]:
        k = len(indices)
        c1 = math.floor(k * fractions[0])
        c2 = math.floor(k * (fractions[0] + fractions[1]))
        return list(indices[:c1]), list(indices[c1:c2]), list(indices[c2:])

    if schema.task == TASK_CLASSIFICATION:
        labels = table.column(schema.target.name)
        groups: dict = {}
        for i, lab in enumerate(labels):
            groups.setdefault(lab, []).append(i)
        parts: tuple[list, list, list] = ([], [], [])
        for lab in groups:  # first-appearance order (dict is ordered)
            idx = np.asarray(groups[lab])
            idx = idx[rng.permutation(len(idx))]
            for bucket, piece in zip(parts, cut(idx)):
                bucket.extend(piece)
    else:
        parts = cut(rng.permutation(n))

    names = ("train", "val", "test")
    for name, part in zip(names, parts):
        if not part:
            raise ConfigError(f"split produced an empty {name} set ({n} rows, {tuple(fractions)})")
    return {name: table.select(np.asarray(part)) for name, part in zip(names, parts)}


# ---------------------------------------------------------------------------
# fitting (train split only)


def fit_quantiles(values: np.ndarray, n_quantiles: int, feature: str = "") -> QuantileBins:
    """Empirical quantiles at levels i/(n_quantiles-1), linear interpolation."""
    if n_quantiles < 2:
        raise ConfigError(f"need n_quantiles >= 2, got {n_quantiles}")
    vals = np.asarray(values, dtype=np.float64)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise FitError(f"column {feature!r}: no non-missing values to fit quantiles on")
    levels = np.linspace(0.0, 1.0, n_quantiles)
    return QuantileBins(feature, np.quantile(vals, levels), n_quantiles)


def fit_target_normalizer(targets: np.ndarray) -> TargetNormalizer:
    y = np.asarray(targets, dtype=np.float64)
    return TargetNormalizer(mean=float(y.mean()), std=float(y.std()))


@dataclass(frozen=True)
class Preprocessing:
    """Everything fitted on the train split; immutable afterwards."""

    schema: DatasetSchema
    bins: dict[str, QuantileBins]
    normalizer: Optional[TargetNormalizer]


def _numeric_cell(cell) -> tuple[float, bool]:
    """Parse one numerical cell -> (value, missing)."""
    if cell is None:
        return 0.0, True
    v = float(cell)
    if not math.isfinite(v):
        return 0.0, True
    return v, False


def fit_preprocessing(schema: DatasetSchema, train: Table, n_quantiles: int) -> Preprocessing:
    """Fit vocabularies, quantile bins and the target normalizer on train."""
    fitted_cols = []
    bins: dict[str, QuantileBins] = {}
    n_classes = schema.n_classes
    for col in schema.columns:
        cells = train.column(col.name)
        if col.kind == KIND_NUMERICAL:
            parsed = [_numeric_cell(c) for c in cells]
            vals = np.array([v for v, miss in parsed if not miss], dtype=np.float64)
            bins[col.name] = fit_quantiles(vals, n_quantiles, feature=col.name)
            fitted_cols.append(ColumnSpec(col.name, col.kind, col.numeric_like, None))
        elif col.kind == KIND_CATEGORICAL:
            vocab: list[str] = []
            seen = set()
            for c in cells:
                if c is not None and c not in seen:
                    seen.add(c)
                    vocab.append(c)
            fitted_cols.append(ColumnSpec(col.name, col.kind, col.numeric_like, vocab))
        else:  # target
            if schema.task == TASK_CLASSIFICATION:
                vocab = []
                seen = set()
                for c in cells:
                    if c is None:
                        raise SchemaError(f"target column {col.name!r} has missing values")
                    if c not in seen:
                        seen.add(c)
                        vocab.append(c)
                n_classes = len(vocab)
                if n_classes < 2:
                    raise SchemaError(
                        f"classification target {col.name!r} has {n_classes} class(es) in train"
                    )
                fitted_cols.append(ColumnSpec(col.name, col.kind, col.numeric_like, vocab))
            else:
                fitted_cols.append(ColumnSpec(col.name, col.kind, col.numeric_like, None))

    normalizer = None
    if schema.task == TASK_REGRESSION:
        tcol = schema.target.name
        raw = []
        for c in train.column(tcol):
            v, missing = _numeric_cell(c)
            if missing:
                raise SchemaError(f"target column {tcol!r} has missing values")
            raw.append(v)
        normalizer = fit_target_normalizer(np.asarray(raw))

    fitted = DatasetSchema(fitted_cols, task=schema.task, n_classes=n_classes)
    fitted.validate()
    return Preprocessing(schema=fitted, bins=bins, normalizer=normalizer)


# ---------------------------------------------------------------------------
# encoding


@dataclass
class EncodedSplit:
    """One split as dense matrices, feature-aligned with the schema."""

    numeric: np.ndarray  # [rows, n_numerical] float64, 0 where missing
    numeric_missing: np.ndarray  # [rows, n_numerical] bool
    categorical: np.ndarray  # [rows, n_categorical] int64
    target: Optional[np.ndarray]  # float64 (regression) / int64 class ids
    n_rows: int


def encode(prep: Preprocessing, table: Table) -> EncodedSplit:
    """Map raw cells to matrices using the fitted preprocessing."""
    schema = prep.schema
    n = table.n_rows
    num_cols = schema.numerical_features
    cat_cols = schema.categorical_features

    numeric = np.zeros((n, len(num_cols)), dtype=np.float64)
    missing = np.zeros((n, len(num_cols)), dtype=bool)
    for j, col in enumerate(num_cols):
        if col.name not in table.columns:
            raise SchemaError(f"table lacks expected column {col.name!r}")
        for i, cell in enumerate(table.column(col.name)):
            if cell is not None and not _parses_as_float(cell):
                raise SchemaError(
                    f"column {col.name!r}, row {i}: {cell!r} is not numeric"
                )
            numeric[i, j], missing[i, j] = _numeric_cell(cell)

    categorical = np.zeros((n, len(cat_cols)), dtype=np.int64)
    for j, col in enumerate(cat_cols):
        if col.name not in table.columns:
            raise SchemaError(f"table lacks expected column {col.name!r}")
        lookup = {cat: i for i, cat in enumerate(col.vocab)}
        unk, masked = col.unk_id, col.masked_id
        for i, cell in enumerate(table.column(col.name)):
            categorical[i, j] = masked if cell is None else lookup.get(cell, unk)

    target = None
    tname = schema.target.name
    if tname in table.columns:
        cells = table.column(tname)
        if schema.task == TASK_REGRESSION:
            target = np.empty(n, dtype=np.float64)
            for i, cell in enumerate(cells):
                v, miss = _numeric_cell(cell)
                if miss:
                    raise SchemaError(f"target column {tname!r}, row {i}: missing value")
                target[i] = v
        else:
            lookup = {lab: i for i, lab in enumerate(schema.target.vocab)}
            target = np.empty(n, dtype=np.int64)
            for i, cell in enumerate(cells):
                if cell is None:
                    raise SchemaError(f"target column {tname!r}, row {i}: missing value")
                if cell not in lookup:
                    raise SchemaError(
                        f"target column {tname!r}, row {i}: label {cell!r} unseen in train"
                    )
                target[i] = lookup[cell]

    return EncodedSplit(numeric, missing, categorical, target, n)


def take_rows(split_: EncodedSplit, idx: np.ndarray) -> EncodedSplit:
    return EncodedSplit(
        split_.numeric[idx],
        split_.numeric_missing[idx],
        split_.categorical[idx],
        None if split_.target is None else split_.target[idx],
        len(idx),
    )


Batch = EncodedSplit  # a batch is just a small split


def make_batches(
    split_: EncodedSplit,
    batch_size: int,
    seed: int,
    epoch: int,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Deterministic per-(seed, epoch) shuffle; last partial batch kept."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(split_.n_rows)
    else:
        order = np.arange(split_.n_rows)
    for start in range(0, split_.n_rows, batch_size):
        yield take_rows(split_, order[start : start + batch_size])


# ---------------------------------------------------------------------------
# one-call convenience used by training, the CLI and the demos


@dataclass
class PreparedData:
    prep: Preprocessing
    splits: dict[str, EncodedSplit]


def prepare(
    path,
    n_quantiles: int,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    schema_hint: Optional[dict] = None,
    task: Optional[str] = None,
) -> PreparedData:
    schema, table = load_csv(path, schema_hint=schema_hint, task=task)
    parts = split(table, schema, fractions, seed)
    prep = fit_preprocessing(schema, parts["train"], n_quantiles)
    return PreparedData(
        prep=prep,
        splits={name: encode(prep, part) for name, part in parts.items()},
    )
