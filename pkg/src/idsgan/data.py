"""Flow-record ingestion and preprocessing.

The preparation order is: load, drop exact duplicate rows, map labels to
class indices, encode categorical columns, split (stratified), fit min-max
scaling on the training rows, then keep the highest-variance training
features.  Everything fitted here is fitted on training rows only, apart from
the categorical vocabularies, which need every row so that test rows never
hit an unseen category.
"""

import csv
import logging
import math
import sys
import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataError, ShapeError, UsageError

log = logging.getLogger(__name__)

KDD_COLUMNS = [
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes", "land",
    "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in", "num_compromised",
    "root_shell", "su_attempted", "num_root", "num_file_creations", "num_shells",
    "num_access_files", "num_outbound_cmds", "is_host_login", "is_guest_login", "count",
    "srv_count", "serror_rate", "srv_serror_rate", "rerror_rate", "srv_rerror_rate",
    "same_srv_rate", "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate", "dst_host_serror_rate",
    "dst_host_srv_serror_rate", "dst_host_rerror_rate", "dst_host_srv_rerror_rate", "label",
]
KDD_CATEGORICAL = ["protocol_type", "service", "flag"]
KDD_CLASSES = ["normal", "DoS", "U2R", "Probe", "R2L"]
_KDD_CATEGORY_INDEX = {"normal": 0, "dos": 1, "u2r": 2, "probe": 3, "r2l": 4}

CICIDS_CLASSES = ["BENIGN", "ATTACK"]

REAL, SYNTHETIC = 0, 1


# ---------------------------------------------------------------- raw tables


@dataclass
class RawTable:
    columns: list
    rows: list

    def __post_init__(self):
        n = len(self.columns)
        for i, row in enumerate(self.rows):
            if len(row) != n:
                raise DataError(f"row {i} has {len(row)} cells, header has {n}")

    @property
    def n_rows(self):
        return len(self.rows)

    def index(self, column):
        try:
            return self.columns.index(column)
        except ValueError:
            raise DataError(f"no column named {column!r}; have {self.columns}") from None

    def column(self, name):
        j = self.index(name)
        return [r[j] for r in self.rows]

    def take(self, indices):
        return RawTable(list(self.columns), [self.rows[i] for i in indices])


def _unique_names(names):
    """Suffix repeated header names with ``.1``, ``.2`` ... so every column is addressable."""
    seen, out = {}, []
    for n in names:
        k = seen.get(n, 0)
        seen[n] = k + 1
        out.append(n if k == 0 else f"{n}.{k}")
    return out


def load_csv(path, has_header=True, columns=None):
    """Read a comma-separated file into a :class:`RawTable`.

    Cells are kept verbatim (KDD's trailing-period labels included).  Header
    names are whitespace-stripped and repeated names get a ``.1`` suffix.  Blank lines are skipped; a row whose
    arity differs from the header raises :class:`DataError` naming its line.
    """
    intern = sys.intern
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = None
        for line_no, cells in enumerate(reader, start=1):
            if not cells or (len(cells) == 1 and not cells[0].strip()):
                continue
            if header is None:
                if has_header:
                    header = _unique_names([c.strip() for c in cells])
                    continue
                header = list(columns) if columns else [f"c{i}" for i in range(len(cells))]
            if len(cells) != len(header):
                raise DataError(f"{path}: line {line_no} has {len(cells)} fields, expected {len(header)}")
            rows.append(tuple(intern(c) for c in cells))
    if header is None:
        raise DataError(f"{path}: file is empty")
    return RawTable(header, rows)


def dedupe(table):
    """Drop exact duplicate rows, keeping first occurrences in order."""
    seen = set()
    rows = []
    for r in table.rows:
        key = tuple(r)
        if key not in seen:
            seen.add(key)
            rows.append(r)
    return RawTable(list(table.columns), rows)


# ---------------------------------------------------------------- label encoding


@dataclass
class EncoderState:
    vocab: dict = field(default_factory=dict)  # column -> sorted categories

    def code(self, column, value):
        try:
            return self._lookup[column][value]
        except KeyError:
            if column not in self.vocab:
                raise DataError(f"column {column!r} has no fitted encoder") from None
            raise DataError(f"unseen category {value!r} in column {column!r}") from None

    @property
    def _lookup(self):
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {c: {v: i for i, v in enumerate(cats)} for c, cats in self.vocab.items()}
            self.__dict__["_cache"] = cache
        return cache

    def invert(self, column, codes):
        cats = self.vocab[column]
        return [cats[int(c)] for c in codes]

    def to_dict(self):
        return {c: list(v) for c, v in self.vocab.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({c: list(v) for c, v in d.items()})


def fit_label_encoders(table, categorical_cols):
    """Codes 0..n-1 assigned in lexicographic order of each column's categories."""
    return EncoderState({c: sorted(set(table.column(c))) for c in categorical_cols})


def apply_label_encoders(table, state):
    """Replace categorical cells with their integer codes."""
    idx = [(table.index(c), c) for c in state.vocab]
    rows = []
    for r in table.rows:
        r = list(r)
        for j, c in idx:
            r[j] = state.code(c, r[j])
        rows.append(r)
    return RawTable(list(table.columns), rows)


def numeric_matrix(table, columns):
    """Parse ``columns`` as floats.

    Rows with a non-numeric or non-finite cell are dropped.  Returns
    ``(X, kept_row_indices)``.
    """
    idx = [table.index(c) for c in columns]
    out = np.empty((table.n_rows, len(idx)))
    keep = np.ones(table.n_rows, dtype=bool)
    for i, r in enumerate(table.rows):
        try:
            vals = [float(r[j]) for j in idx]
        except (TypeError, ValueError):
            keep[i] = False
            continue
        if not all(math.isfinite(v) for v in vals):
            keep[i] = False
            continue
        out[i] = vals
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"dropped {dropped} rows with non-numeric or non-finite feature cells")
    kept = np.flatnonzero(keep)
    return out[kept], kept


# ---------------------------------------------------------------- scaling


@dataclass
class ScalerState:
    mins: np.ndarray
    maxs: np.ndarray

    def to_dict(self):
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mins"], dtype=np.float64), np.asarray(d["maxs"], dtype=np.float64))


def fit_minmax(train_X):
    train_X = np.asarray(train_X, dtype=np.float64)
    if len(train_X) == 0:
        raise UsageError("cannot fit a scaler on zero rows")
    return ScalerState(train_X.min(axis=0), train_X.max(axis=0))


def apply_minmax(X, state):
    """(x - min) / (max - min); constant features map to 0.  No clipping."""
    X = np.asarray(X, dtype=np.float64)
    span = state.maxs - state.mins
    safe = np.where(span > 0, span, 1.0)
    out = (X - state.mins) / safe
    return np.where(span > 0, out, 0.0)


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_names: list
    provenance: np.ndarray = None
    feature_names: list = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise ShapeError(f"X must be [N, L], got {self.X.shape}")
        if len(self.y) != len(self.X):
            raise ShapeError(f"{len(self.X)} rows but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise DataError("labels out of range for the class list")
        if self.provenance is None:
            self.provenance = np.full(len(self.y), REAL, dtype=np.int8)

    def __len__(self):
        return len(self.y)

    @property
    def width(self):
        return self.X.shape[1]

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], list(self.class_names),
                       self.provenance[idx], self.feature_names)

    def class_counts(self):
        return np.bincount(self.y, minlength=len(self.class_names))

    def composition(self):
        return {"real": int(np.sum(self.provenance == REAL)),
                "synthetic": int(np.sum(self.provenance == SYNTHETIC))}


def stratified_indices(y, ratio=0.8, seed=0):
    """Per class, round(ratio * n_c) shuffled rows go to train.

    Returns sorted ``(train_idx, test_idx)``.  Classes with fewer than two
    rows go entirely to train, with a warning.
    """
    if not 0.0 < ratio < 1.0:
        raise UsageError("split ratio must be strictly between 0 and 1")
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        if len(members) < 2:
            warnings.warn(f"class {c} has {len(members)} row(s); assigned to train")
            train.append(members)
            continue
        members = rng.permutation(members)
        k = int(math.floor(ratio * len(members) + 0.5))
        train.append(members[:k])
        test.append(members[k:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)  # noqa: E731
    return cat(train), cat(test)


def split(dataset, ratio=0.8, seed=0):
    tr, te = stratified_indices(dataset.y, ratio, seed)
    return dataset.subset(tr), dataset.subset(te)


def stratified_subsample(y, max_rows, seed=0):
    """Indices of a class-proportional sample of at most ``max_rows`` rows."""
    y = np.asarray(y)
    if max_rows is None or len(y) <= max_rows:
        return np.arange(len(y))
    tr, _ = stratified_indices(y, max_rows / len(y), seed)
    return tr[:max_rows]


# ---------------------------------------------------------------- labels


def kdd_category_table():
    """Attack name -> category name, from the shipped mapping file."""
    text = resources.files("idsgan").joinpath("assets/kdd_categories.txt").read_text()
    table = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, category = line.split()
        table[name] = category
    return table


_KDD_TABLE = None


def map_kdd_labels(raw_label):
    """normal -> 0, DoS -> 1, U2R -> 2, Probe -> 3, R2L -> 4."""
    global _KDD_TABLE
    if _KDD_TABLE is None:
        _KDD_TABLE = kdd_category_table()
    name = raw_label.strip().rstrip(".").strip()
    try:
        return _KDD_CATEGORY_INDEX[_KDD_TABLE[name]]
    except KeyError:
        raise DataError(f"unknown KDD attack name {name!r}") from None


def binarize_cicids_labels(raw_label):
    return 0 if raw_label.strip().upper() == "BENIGN" else 1


def map_label_column(values, mapper):
    """Vectorised ``mapper`` that reports every unknown label at once."""
    cache, unknown = {}, set()
    out = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        if v not in cache:
            try:
                cache[v] = mapper(v)
            except DataError:
                unknown.add(v)
                cache[v] = -1
        out[i] = cache[v]
    if unknown:
        raise DataError(f"unknown labels: {sorted(unknown)}")
    return out


# ---------------------------------------------------------------- selection


@dataclass
class FeatureSelection:
    indices: list
    variances: list
    names: list = None

    def apply(self, X):
        return np.asarray(X)[:, self.indices]

    def to_dict(self):
        return {"method": "train_variance", "indices": list(map(int, self.indices)),
                "variances": list(map(float, self.variances)), "names": self.names}

    @classmethod
    def from_dict(cls, d):
        return cls(d["indices"], d["variances"], d.get("names"))


def select_features(train_X, target_dim, names=None):
    """Keep the ``target_dim`` highest-variance columns of ``train_X``.

    Ties go to the lower column index; kept columns stay in their original
    order so the convolution still sees neighbouring features side by side.
    """
    train_X = np.asarray(train_X, dtype=np.float64)
    available = train_X.shape[1]
    if target_dim > available:
        raise UsageError(f"cannot select {target_dim} features from {available}")
    if target_dim < 1:
        raise UsageError("target_dim must be positive")
    var = train_X.var(axis=0)
    order = sorted(range(available), key=lambda j: (-var[j], j))
    keep = sorted(order[:target_dim])
    return FeatureSelection(keep, [float(var[j]) for j in keep],
                            [names[j] for j in keep] if names else None)


# ---------------------------------------------------------------- augmentation


def augment(train, synthetic_per_class):
    """Append generated rows, labelled by the class of the GAN that made them."""
    X, y, prov = [train.X], [train.y], [train.provenance]
    for c in sorted(synthetic_per_class):
        rows = np.asarray(synthetic_per_class[c], dtype=np.float64)
        if rows.ndim == 3:
            rows = rows[..., 0]
        if len(rows) == 0:
            continue
        if rows.ndim != 2 or rows.shape[1] != train.width:
            raise ShapeError(f"synthetic rows for class {c} have shape {rows.shape}, "
                             f"expected (n, {train.width})")
        if not 0 <= int(c) < len(train.class_names):
            raise DataError(f"synthetic class {c} is not a known class")
        X.append(rows)
        y.append(np.full(len(rows), int(c), dtype=np.int64))
        prov.append(np.full(len(rows), SYNTHETIC, dtype=np.int8))
    return Dataset(np.concatenate(X), np.concatenate(y), list(train.class_names),
                   np.concatenate(prov), train.feature_names)


# ---------------------------------------------------------------- preparation


@dataclass
class Prepared:
    train: Dataset
    test: Dataset
    encoder: EncoderState
    scaler: ScalerState
    selection: FeatureSelection
    audit: list = field(default_factory=list)


SCHEMAS = {
    "kdd": {"has_header": False, "label": "label", "categorical": KDD_CATEGORICAL,
            "feature_width": 30, "classes": KDD_CLASSES},
    "cicids": {"has_header": True, "label": "Label", "categorical": [],
               "feature_width": 78, "classes": CICIDS_CLASSES},
    "csv": {"has_header": True, "label": "label", "categorical": [],
            "feature_width": None, "classes": None},
}


def load_dataset_table(kind, paths):
    schema = SCHEMAS[kind]
    tables = []
    for p in paths:
        cols = None
        if kind == "kdd":
            with open(p) as fh:
                first = fh.readline()
            n = len(next(csv.reader([first]))) if first.strip() else len(KDD_COLUMNS)
            # NSL-KDD carries a trailing difficulty column
            cols = KDD_COLUMNS + (["difficulty"] if n == len(KDD_COLUMNS) + 1 else [])
        tables.append(load_csv(p, has_header=schema["has_header"], columns=cols))
    if not tables:
        raise UsageError("no input files given")
    first = tables[0]
    for t in tables[1:]:
        if t.columns != first.columns:
            raise DataError("input files have different columns")
    return RawTable(first.columns, [r for t in tables for r in t.rows])


def prepare_dataset(kind, paths, feature_width=None, ratio=0.8, seed=0, max_rows=None,
                    drop_columns=(), label_column=None, categorical=None, subsample_seed=None):
    """Turn raw files into scaled, feature-selected train/test datasets.

    ``seed`` drives the split; the optional ``max_rows`` cap uses
    ``subsample_seed`` (default ``seed + 7919``).
    """
    if kind not in SCHEMAS:
        raise UsageError(f"unknown dataset kind {kind!r}")
    schema = SCHEMAS[kind]
    label_col = label_column or schema["label"]
    cat_cols = list(schema["categorical"] if categorical is None else categorical)
    audit = []

    table = load_dataset_table(kind, paths)
    audit.append({"stage": "load", "rows": table.n_rows})
    table = dedupe(table)
    audit.append({"stage": "dedupe", "rows": table.n_rows})

    raw_labels = table.column(label_col)
    if kind == "kdd":
        y = map_label_column(raw_labels, map_kdd_labels)
        class_names = list(KDD_CLASSES)
    elif kind == "cicids":
        y = map_label_column(raw_labels, binarize_cicids_labels)
        class_names = list(CICIDS_CLASSES)
    else:
        class_names = sorted(set(v.strip() for v in raw_labels))
        lookup = {c: i for i, c in enumerate(class_names)}
        y = np.array([lookup[v.strip()] for v in raw_labels], dtype=np.int64)

    drop = set(drop_columns) | {label_col, "difficulty"}
    features = [c for c in table.columns if c not in drop]
    encoder = fit_label_encoders(table, cat_cols)
    audit.append({"stage": "fit_label_encoders", "rows": "all", "columns": cat_cols})
    table = apply_label_encoders(table, encoder)
    X, kept = numeric_matrix(table, features)
    y = y[kept]
    audit.append({"stage": "numeric", "rows": int(len(kept)), "dropped": int(table.n_rows - len(kept))})

    if max_rows is not None:
        sub_seed = seed + 7919 if subsample_seed is None else subsample_seed
        sub = stratified_subsample(y, max_rows, sub_seed)
        X, y = X[sub], y[sub]
        audit.append({"stage": "subsample", "rows": int(len(sub))})

    tr, te = stratified_indices(y, ratio, seed)
    audit.append({"stage": "split", "train": int(len(tr)), "test": int(len(te)), "ratio": ratio})
    scaler = fit_minmax(X[tr])
    audit.append({"stage": "fit_minmax", "rows": "train", "n": int(len(tr))})
    Xs = apply_minmax(X, scaler)

    width = feature_width or schema["feature_width"] or len(features)
    selection = select_features(Xs[tr], width, features)
    audit.append({"stage": "select_features", "rows": "train", "n": int(len(tr)),
                  "kept": selection.names})
    Xs = selection.apply(Xs)
    names = selection.names
    train = Dataset(Xs[tr], y[tr], class_names, feature_names=names)
    test = Dataset(Xs[te], y[te], class_names, feature_names=names)
    log.info("prepared %s: %d train / %d test rows, width %d", kind, len(train), len(test), width)
    return Prepared(train, test, encoder, scaler, selection, audit)
