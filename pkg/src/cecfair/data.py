"""Tabular data: feature roles, CSV ingestion, standardisation, synthetic benchmark."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

ROLES = ("financial", "proxy_excluded", "protected", "label", "other")


class IngestionError(ValueError):
    """Bad input data or schema configuration."""


@dataclass(frozen=True)
class FeatureSchema:
    """Column roles over the model-input feature columns.

    ``protected_col`` indexes ``feature_names`` (the model sees the protected
    attribute); the label is held separately under ``label_name``.
    """

    feature_names: tuple[str, ...]
    financial_idx: tuple[int, ...]
    protected_col: int
    label_name: str = "y"
    excluded_proxies: tuple[int, ...] = ()

    def __post_init__(self):
        d = len(self.feature_names)
        fin = set(self.financial_idx)
        if not fin:
            raise IngestionError("financial feature set must be nonempty")
        bad = [i for i in (*fin, *self.excluded_proxies, self.protected_col) if not 0 <= i < d]
        if bad:
            raise IngestionError(f"schema indices out of range: {bad}")
        if self.protected_col in fin:
            raise IngestionError("protected attribute cannot be a financial feature")
        if fin & set(self.excluded_proxies):
            raise IngestionError("excluded proxies cannot be financial features")

    @property
    def d(self) -> int:
        return len(self.feature_names)

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "financial_idx": list(self.financial_idx),
            "protected_col": self.protected_col,
            "label_name": self.label_name,
            "excluded_proxies": list(self.excluded_proxies),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> FeatureSchema:
        return cls(
            tuple(d["feature_names"]),
            tuple(int(i) for i in d["financial_idx"]),
            int(d["protected_col"]),
            d.get("label_name", "y"),
            tuple(int(i) for i in d.get("excluded_proxies", ())),
        )


@dataclass(frozen=True)
class Standardization:
    """Per-column (mean, std) for the columns in ``columns``."""

    columns: tuple[int, ...]
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        out = np.array(X, dtype=np.float64, copy=True)
        cols = list(self.columns)
        out[:, cols] = (out[:, cols] - self.mean) / self.std
        return out

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> Standardization:
        return cls(tuple(d["columns"]), np.asarray(d["mean"], float), np.asarray(d["std"], float))


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    schema: FeatureSchema
    row_ids: np.ndarray = None
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    standardization: Standardization | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y)
        if X.ndim != 2 or X.shape[1] != self.schema.d:
            raise IngestionError(f"X has shape {X.shape} but the schema declares {self.schema.d} features")
        if y.shape != (X.shape[0],):
            raise IngestionError("label vector length does not match X")
        if not np.isfinite(X).all():
            raise IngestionError("non-finite feature values")
        if not np.isin(y, (0, 1)).all():
            raise IngestionError("labels must be binary 0/1")
        a = X[:, self.schema.protected_col]
        if not np.isin(a, (0.0, 1.0)).all():
            raise IngestionError("protected attribute must be binary 0/1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y.astype(np.int64))
        rid = np.arange(X.shape[0]) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64)
        object.__setattr__(self, "row_ids", rid)
        if self.train_idx is not None and self.test_idx is not None:
            if np.intersect1d(self.train_idx, self.test_idx).size:
                raise IngestionError("train and test splits overlap")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def a(self) -> np.ndarray:
        return self.X[:, self.schema.protected_col].astype(np.int64)

    @property
    def financial(self) -> np.ndarray:
        return self.X[:, list(self.schema.financial_idx)]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.X[idx], self.y[idx], self.schema, self.row_ids[idx],
            standardization=self.standardization, meta=self.meta,
        )

    def train(self) -> Dataset:
        if self.train_idx is None:
            raise IngestionError("dataset has no train split")
        return self.subset(self.train_idx)

    def test(self) -> Dataset:
        if self.test_idx is None:
            raise IngestionError("dataset has no test split")
        return self.subset(self.test_idx)

    def with_split(self, train_idx, test_idx) -> Dataset:
        return replace(self, train_idx=np.asarray(train_idx, np.int64), test_idx=np.asarray(test_idx, np.int64))


def train_test_split(dataset: Dataset, test_fraction: float = 0.2, seed=0) -> Dataset:
    """Random disjoint split; indices are positions into ``dataset``."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    n_test = max(1, int(round(test_fraction * dataset.n)))
    return dataset.with_split(np.sort(perm[n_test:]), np.sort(perm[:n_test]))


# ---------------------------------------------------------------- standardise


def default_standardize_columns(schema: FeatureSchema) -> tuple[int, ...]:
    return tuple(i for i in range(schema.d) if i != schema.protected_col)


def standardize(dataset: Dataset, fit_split=None, columns: Sequence[int] | None = None) -> Dataset:
    """Z-score ``columns`` using statistics from the rows in ``fit_split``.

    ``fit_split`` defaults to the dataset's train split, or all rows when no
    split exists.  Every row (train and test) is transformed with the same
    (mean, std).  Zero-variance columns are rejected.
    """
    if fit_split is None:
        fit_split = dataset.train_idx if dataset.train_idx is not None else np.arange(dataset.n)
    fit_split = np.asarray(fit_split, dtype=np.int64)
    if fit_split.size == 0:
        raise ValueError("fit split is empty")
    cols = tuple(default_standardize_columns(dataset.schema) if columns is None else columns)
    fit = dataset.X[np.ix_(fit_split, cols)]
    mu = fit.mean(axis=0)
    sd = fit.std(axis=0)
    zero = [dataset.schema.feature_names[c] for c, s in zip(cols, sd) if not s > 0]
    if zero:
        raise IngestionError(f"zero variance on the fit split for columns {zero}")
    st = Standardization(cols, mu, sd)
    return replace(dataset, X=st.apply(dataset.X), standardization=st)


# ---------------------------------------------------------------- CSV ingest


@dataclass
class ColumnSpec:
    role: str
    categorical: bool = False
    mapping: dict[str, float] | None = None


def load_schema_config(source) -> dict[str, ColumnSpec]:
    """Read a schema config (YAML or JSON path, or an already-parsed mapping).

    Expected layout::

        columns:
          income: {role: financial}
          gender: {role: protected, mapping: {male: 0, female: 1}}
          approved: {role: label}
          zip: {role: proxy_excluded, categorical: true}
    """
    if isinstance(source, Mapping):
        raw = source
    else:
        path = Path(source)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() in (".yaml", ".yml"):
            import yaml

            raw = yaml.safe_load(text)
        else:
            raw = json.loads(text)
    cols = raw.get("columns")
    if not isinstance(cols, Mapping) or not cols:
        raise IngestionError("schema config needs a nonempty 'columns' mapping")
    out = {}
    for name, spec in cols.items():
        if isinstance(spec, str):
            spec = {"role": spec}
        role = spec.get("role")
        if role not in ROLES:
            raise IngestionError(f"column {name!r}: unknown role {role!r}")
        mapping = spec.get("mapping")
        if mapping is not None:
            mapping = {str(k): float(v) for k, v in mapping.items()}
        out[str(name)] = ColumnSpec(role, bool(spec.get("categorical", False)), mapping)
    roles = [c.role for c in out.values()]
    if roles.count("protected") != 1 or roles.count("label") != 1:
        raise IngestionError("schema config needs exactly one protected and one label column")
    if "financial" not in roles:
        raise IngestionError("schema config declares no financial columns")
    return out


def _parse_binary(value: str, spec: ColumnSpec, row: int, col: str) -> int:
    if spec.mapping is not None:
        if value not in spec.mapping:
            raise IngestionError(f"row {row}, column {col!r}: value {value!r} missing from mapping")
        v = spec.mapping[value]
    else:
        try:
            v = float(value)
        except ValueError:
            raise IngestionError(f"row {row}, column {col!r}: cannot parse {value!r}") from None
    if v not in (0.0, 1.0):
        raise IngestionError(f"row {row}, column {col!r}: value {value!r} is not binary")
    return int(v)


def load_csv(path, schema_config) -> Dataset:
    """Load a headered CSV into a :class:`Dataset` using a schema config.

    Categorical columns are one-hot expanded (every level kept, named
    ``col=level``, levels sorted); schema index sets refer to the expanded
    columns.  Columns not named in the config are ignored.  Missing values
    are rejected, as are constant feature columns.
    """
    specs = schema_config if isinstance(schema_config, dict) and all(
        isinstance(v, ColumnSpec) for v in schema_config.values()
    ) else load_schema_config(schema_config)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    missing = [c for c in specs if c not in header]
    if missing:
        raise IngestionError(f"{path}: declared columns not in header: {missing}")
    pos = {c: header.index(c) for c in specs}
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise IngestionError(f"row {r}: expected {len(header)} fields, got {len(row)}")
        for c, p in pos.items():
            if row[p].strip() == "":
                raise IngestionError(f"row {r}, column {c!r}: missing value")
    if not rows:
        raise IngestionError(f"{path}: no data rows")

    names: list[str] = []
    blocks: list[np.ndarray] = []
    roles: list[str] = []
    label = None
    label_name = None
    for col, spec in specs.items():
        values = [row[pos[col]].strip() for row in rows]
        if spec.role == "label":
            label = np.array([_parse_binary(v, spec, r, col) for r, v in enumerate(values, start=2)])
            label_name = col
            continue
        if spec.role == "protected":
            block = np.array([[_parse_binary(v, spec, r, col)] for r, v in enumerate(values, start=2)], float)
            names.append(col)
        elif spec.categorical:
            levels = sorted(set(values))
            block = np.array([[float(v == lv) for lv in levels] for v in values])
            names += [f"{col}={lv}" for lv in levels]
        else:
            block = np.empty((len(values), 1))
            for r, v in enumerate(values):
                key = v
                try:
                    block[r, 0] = spec.mapping[key] if spec.mapping is not None else float(key)
                except (KeyError, ValueError):
                    raise IngestionError(f"row {r + 2}, column {col!r}: cannot parse {v!r}") from None
            names.append(col)
        blocks.append(block)
        roles += [spec.role] * block.shape[1]

    X = np.hstack(blocks)
    if not np.isfinite(X).all():
        bad_r, bad_c = np.argwhere(~np.isfinite(X))[0]
        raise IngestionError(f"row {bad_r + 2}, column {names[bad_c]!r}: non-finite value")
    for j, (name, role) in enumerate(zip(names, roles)):
        if role != "protected" and np.all(X[:, j] == X[0, j]):
            raise IngestionError(f"column {name!r} is constant (zero variance)")
    schema = FeatureSchema(
        feature_names=tuple(names),
        financial_idx=tuple(i for i, r in enumerate(roles) if r == "financial"),
        protected_col=roles.index("protected"),
        label_name=label_name,
        excluded_proxies=tuple(i for i, r in enumerate(roles) if r == "proxy_excluded"),
    )
    return Dataset(X, label, schema, meta={"source": str(path)})


def write_csv(dataset: Dataset, path) -> None:
    """Canonical CSV: feature columns then the label, floats at 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*dataset.schema.feature_names, dataset.schema.label_name])
        for xr, yr in zip(dataset.X, dataset.y):
            w.writerow([*(f"{v:.17g}" for v in xr), int(yr)])


def schema_config_for(schema: FeatureSchema) -> dict:
    """A schema config that reloads a canonical CSV written by :func:`write_csv`."""
    cols: dict[str, Any] = {}
    for i, name in enumerate(schema.feature_names):
        if i == schema.protected_col:
            role = "protected"
        elif i in schema.financial_idx:
            role = "financial"
        elif i in schema.excluded_proxies:
            role = "proxy_excluded"
        else:
            role = "other"
        cols[name] = {"role": role}
    cols[schema.label_name] = {"role": "label"}
    return {"columns": cols}


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 10_000
    d_financial: int = 10
    d_proxy: int = 5
    d_noise: int = 5
    proxy_shift: float = 0.5
    label_weights: tuple[float, ...] | None = None
    label_threshold: float | None = None
    noise_std: float = 0.3
    group_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("need n >= 4 so every (label, group) cell can be populated")
        if self.d_financial < 1 or self.d_proxy < 0 or self.d_noise < 0:
            raise ValueError("feature counts must be nonnegative with at least one financial feature")
        if self.label_weights is not None and len(self.label_weights) != self.d_financial:
            raise ValueError("label_weights must have one entry per financial feature")
        if not 0.0 < self.group_rate < 1.0:
            raise ValueError("group_rate must lie in (0, 1)")

    @property
    def d(self) -> int:
        return self.d_financial + self.d_proxy + self.d_noise

    @classmethod
    def from_dict(cls, d: Mapping) -> SyntheticConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        if d.get("label_weights") is not None:
            d["label_weights"] = tuple(d["label_weights"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        if out["label_weights"] is not None:
            out["label_weights"] = list(out["label_weights"])
        return out


def generate_synthetic(config: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Financial, proxy and noise features plus a binary group column.

    Financial and noise features are N(0, 1) independent of the group; proxy
    features are N(proxy_shift * a, 1).  Labels are
    ``1[sum_j w_j x_j + eps > tau]`` over financial features, with ``tau`` the
    median of the noiseless score unless fixed in the config.  The weights,
    threshold and per-row noise draws are kept in ``meta``.
    """
    c = config
    rng = np.random.default_rng(c.seed)
    w = rng.standard_normal(c.d_financial) if c.label_weights is None else np.asarray(c.label_weights, float)
    a = (rng.random(c.n) < c.group_rate).astype(np.float64)
    # make sure both groups exist even for tiny n
    a[0], a[1] = 0.0, 1.0
    fin = rng.standard_normal((c.n, c.d_financial))
    proxy = rng.standard_normal((c.n, c.d_proxy)) + c.proxy_shift * a[:, None]
    noise = rng.standard_normal((c.n, c.d_noise))
    eps = c.noise_std * rng.standard_normal(c.n)
    score = fin @ w
    tau = float(np.median(score)) if c.label_threshold is None else float(c.label_threshold)
    y = (score + eps > tau).astype(np.int64)
    if c.n >= 4 and len({(int(yy), int(aa)) for yy, aa in zip(y, a)}) < 4:
        log.warning("synthetic draw left a (label, group) cell empty")

    names = (
        [f"fin_{j}" for j in range(c.d_financial)]
        + [f"proxy_{j}" for j in range(c.d_proxy)]
        + [f"noise_{j}" for j in range(c.d_noise)]
        + ["a"]
    )
    X = np.hstack([fin, proxy, noise, a[:, None]])
    schema = FeatureSchema(
        feature_names=tuple(names),
        financial_idx=tuple(range(c.d_financial)),
        protected_col=c.d,
        label_name="y",
        excluded_proxies=tuple(range(c.d_financial, c.d_financial + c.d_proxy)),
    )
    meta = {
        "generator": "synthetic",
        "config": c.to_dict(),
        "seed": c.seed,
        "label_weights": w.tolist(),
        "label_threshold": tau,
        "label_noise": eps.tolist(),
    }
    return Dataset(X, y, schema, meta=meta)


def synthetic_labels(X_financial: np.ndarray, weights, noise, threshold: float) -> np.ndarray:
    return (X_financial @ np.asarray(weights) + np.asarray(noise) > threshold).astype(np.int64)


def write_synthetic(dataset: Dataset, csv_path, meta_path, standardization: Standardization | None = None) -> None:
    """Emit the canonical CSV plus a JSON sidecar with seed, weights, tau, mu, sigma."""
    write_csv(dataset, csv_path)
    side = {k: v for k, v in dataset.meta.items()}
    if standardization is not None:
        side["standardization"] = standardization.to_dict()
    side["schema"] = dataset.schema.to_dict()
    Path(meta_path).write_text(json.dumps(side, indent=1, sort_keys=True))
