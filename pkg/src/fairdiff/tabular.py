"""Schema-driven encoding of mixed-type tables into the diffusion space.

Continuous features are standardized (population std), categorical
features are one-hot encoded. The label, sensitive and domain columns are
routed to ``y``, ``z`` and ``d`` and never appear in ``X``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import FitError, LoadError, SchemaError, UsageError

logger = logging.getLogger(__name__)

KINDS = ("continuous", "categorical")
ROLES = ("feature", "label", "sensitive", "domain")
MISSING = "?"


@dataclass
class FeatureSpec:
    name: str
    kind: str
    role: str = "feature"
    categories: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.role != "feature" and self.kind != "categorical":
            raise SchemaError(f"column {self.name!r}: {self.role} columns must be categorical")
        self.categories = [str(c) for c in (self.categories or [])]
        if len(set(self.categories)) != len(self.categories):
            raise SchemaError(f"column {self.name!r}: duplicate categories")
        if self.kind == "continuous" and self.categories:
            raise SchemaError(f"column {self.name!r}: continuous columns take no categories")

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.kind == "categorical":
            d["categories"] = list(self.categories)
        return d


@dataclass
class TabularSchema:
    columns: list
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        for role in ("label", "sensitive", "domain"):
            count = sum(c.role == role for c in self.columns)
            if count != 1:
                raise SchemaError(f"schema needs exactly one {role} column, found {count}")

    @classmethod
    def from_dict(cls, data):
        try:
            cols = [FeatureSpec(**c) for c in data["columns"]]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc
        return cls(cols, dict(data.get("stats", {})))

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise SchemaError(f"schema file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{exc.lineno}: invalid schema file: {exc.msg}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        d = {"columns": [c.to_dict() for c in self.columns]}
        if self.stats:
            d["stats"] = {k: self.stats[k] for k in sorted(self.stats)}
        return d

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def column(self, role):
        return next(c for c in self.columns if c.role == role)

    @property
    def label(self):
        return self.column("label")

    @property
    def sensitive(self):
        return self.column("sensitive")

    @property
    def domain(self):
        return self.column("domain")

    @property
    def features(self):
        return [c for c in self.columns if c.role == "feature"]

    def blocks(self):
        """``(spec, slice)`` for every feature in encoded order."""
        out, start = [], 0
        for c in self.features:
            width = 1 if c.kind == "continuous" else len(c.categories)
            out.append((c, slice(start, start + width)))
            start += width
        return out

    @property
    def encoded_width(self):
        blocks = self.blocks()
        return blocks[-1][1].stop if blocks else 0


@dataclass
class EncodedDataset:
    X: np.ndarray
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    d: np.ndarray | None = None

    def __post_init__(self):
        n = self.X.shape[0]
        for name in ("y", "z", "d"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise UsageError(f"{name} has {len(v)} rows, X has {n}")

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return EncodedDataset(self.X[idx], pick(self.y), pick(self.z), pick(self.d))

    def save(self, directory):
        """One ``.npy`` file per array; rewriting unchanged data is byte-identical."""
        os.makedirs(directory, exist_ok=True)
        for name in ("X", "y", "z", "d"):
            path = os.path.join(directory, f"{name}.npy")
            v = getattr(self, name)
            if v is not None:
                np.save(path, np.ascontiguousarray(v))
            elif os.path.exists(path):
                os.remove(path)

    @classmethod
    def load(cls, directory):
        def read(name):
            path = os.path.join(directory, f"{name}.npy")
            return np.load(path) if os.path.exists(path) else None

        X = read("X")
        if X is None:
            raise LoadError(f"no encoded dataset in {directory}")
        return cls(X, read("y"), read("z"), read("d"))


def load_csv(path, schema, roles=ROLES):
    """Read a CSV and validate it against ``schema``.

    Only columns whose role is in ``roles`` are required and kept (synthetic
    files carry features and the label only). Rows holding ``?`` in any kept
    column are dropped. Returns ``(table, n_dropped)``; categoricals stay
    strings, continuous columns become floats.
    """
    try:
        df = pd.read_csv(
            path, dtype=str, keep_default_na=False, skipinitialspace=True, encoding="utf-8"
        )
    except FileNotFoundError as exc:
        raise LoadError(f"data file not found: {path}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise LoadError(f"{path}: cannot parse CSV: {exc}") from exc
    df.columns = [c.strip() for c in df.columns]
    cols = [c for c in schema.columns if c.role in roles]
    names = [c.name for c in cols]
    missing = [n for n in names if n not in df.columns]
    if missing:
        raise SchemaError(f"{path}: columns missing from header: {missing}")
    extra = [c for c in df.columns if c not in names]
    if extra:
        logger.info("ignoring columns not in schema: %s", extra)
    df = df[names].apply(lambda s: s.str.strip())

    bad = (df == MISSING).any(axis=1)
    dropped = int(bad.sum())
    df = df.loc[~bad].reset_index(drop=True)
    if dropped:
        logger.info("dropped %d rows with missing values", dropped)

    for c in cols:
        col = df[c.name]
        if c.kind == "continuous":
            values = pd.to_numeric(col, errors="coerce")
            if values.isna().any():
                row = int(np.flatnonzero(values.isna().to_numpy())[0])
                raise LoadError(f"column {c.name!r}: non-numeric value {col.iloc[row]!r}")
            df[c.name] = values.astype(np.float64)
        elif c.categories:
            unknown = sorted(set(col) - set(c.categories))
            if unknown:
                raise LoadError(f"column {c.name!r}: unknown categorical value {unknown[0]!r}")
    return df, dropped


def _codes(values, categories, name):
    lookup = {c: i for i, c in enumerate(categories)}
    try:
        return np.array([lookup[str(v)] for v in values], dtype=np.int64)
    except KeyError as exc:
        raise LoadError(f"column {name!r}: unknown categorical value {exc.args[0]!r}") from None


class TabularEncoder(TransformerMixin, BaseEstimator):
    """Fit/transform wrapper around a :class:`TabularSchema`.

    ``fit`` fills in missing category lists (sorted) and the continuous
    statistics; ``transform`` returns an :class:`EncodedDataset`;
    ``inverse_transform`` maps encoded rows back to a table.
    """

    def __init__(self, schema=None):
        self.schema = schema

    def fit(self, rows, y=None):
        if len(rows) < 2:
            raise FitError("need at least 2 rows to fit the encoder")
        cols = []
        for c in self.schema.columns:
            cats = c.categories
            if c.kind == "categorical" and not cats:
                cats = sorted(set(map(str, rows[c.name])))
            cols.append(FeatureSpec(c.name, c.kind, c.role, list(cats)))
        stats = {}
        for c in cols:
            if c.kind != "continuous":
                continue
            v = np.asarray(rows[c.name], dtype=np.float64)
            std = float(v.std())
            if not std > 0:
                raise FitError(f"column {c.name!r} is constant")
            stats[c.name] = {
                "mean": float(v.mean()),
                "std": std,
                "integer": bool(np.all(v == np.round(v))),
            }
        self.schema_ = TabularSchema(cols, stats)
        return self

    def transform(self, rows):
        check_is_fitted(self, "schema_")
        return encode(rows, self.schema_)

    def inverse_transform(self, X, labels=None):
        check_is_fitted(self, "schema_")
        return decode(X, labels, self.schema_)


def encode(rows, schema):
    """Encode with an already fitted schema. Missing y/z/d columns give ``None``."""
    n = len(rows)
    parts = []
    for c, sl in schema.blocks():
        if c.name not in rows:
            raise SchemaError(f"feature column {c.name!r} missing")
        if c.kind == "continuous":
            st = schema.stats[c.name]
            v = np.asarray(rows[c.name], dtype=np.float64)
            parts.append(((v - st["mean"]) / st["std"])[:, None])
        else:
            onehot = np.zeros((n, len(c.categories)))
            onehot[np.arange(n), _codes(rows[c.name], c.categories, c.name)] = 1.0
            parts.append(onehot)
    X = np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))
    routed = {}
    for role, key in (("label", "y"), ("sensitive", "z"), ("domain", "d")):
        c = schema.column(role)
        routed[key] = _codes(rows[c.name], c.categories, c.name) if c.name in rows else None
    return EncodedDataset(X, **routed)


def fit_encode(rows, schema):
    enc = TabularEncoder(schema).fit(rows)
    return enc.schema_, enc.transform(rows)


def decode(samples, labels, schema):
    """Map encoded rows back to feature columns plus the label column.

    One-hot blocks decode by argmax, ties going to the lowest index.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != schema.encoded_width:
        raise UsageError(
            f"samples have shape {X.shape}, schema expects width {schema.encoded_width}"
        )
    out = {}
    for c, sl in schema.blocks():
        if c.kind == "continuous":
            st = schema.stats[c.name]
            v = X[:, sl.start] * st["std"] + st["mean"]
            out[c.name] = np.round(v).astype(np.int64) if st.get("integer") else v
        else:
            idx = np.argmax(X[:, sl], axis=1)
            out[c.name] = np.asarray(c.categories, dtype=object)[idx]
    df = pd.DataFrame(out)
    if labels is not None:
        cats = np.asarray(schema.label.categories, dtype=object)
        df[schema.label.name] = cats[np.asarray(labels, dtype=np.int64)]
    return df


def split_domains(ds):
    """Map each present domain index to its row indices (ascending)."""
    if len(ds) == 0:
        raise UsageError("empty dataset")
    d = np.asarray(ds.d)
    return {int(k): np.flatnonzero(d == k) for k in np.unique(d)}
