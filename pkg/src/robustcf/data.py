"""Dataset ingestion, feature encoding and neighborhood sampling.

Continuous features are min-max scaled to [0, 1]; categorical features are
one-hot encoded. The encoder keeps the scaling bounds so counterfactuals can
be decoded back to raw units.
"""

import copy
import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .rng import derive_seed


class DataError(Exception):
    """Base class for dataset/schema contract violations."""


class MissingColumn(DataError):
    pass


class UnknownCategory(DataError):
    pass


class UnparseableValue(DataError):
    pass


class OutOfRangeValue(DataError):
    pass


@dataclass
class Feature:
    name: str
    kind: str  # "continuous" | "categorical"
    min: float | None = None
    max: float | None = None
    categories: list[str] | None = None
    actionable: bool = True

    @property
    def width(self):
        return 1 if self.kind == "continuous" else len(self.categories)


@dataclass
class FeatureSchema:
    """Ordered feature declarations plus the name of the label column."""

    features: list[Feature]
    label: str = "label"

    def validate(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")
        if not any(f.actionable for f in self.features):
            raise DataError("at least one feature must be actionable")
        for f in self.features:
            if f.kind == "continuous":
                if f.min is not None and f.max is not None and not f.min < f.max:
                    raise DataError(f"feature {f.name}: min must be < max")
            elif f.kind == "categorical":
                if not f.categories or len(set(f.categories)) < 2:
                    raise DataError(f"feature {f.name}: needs >= 2 distinct categories")
            else:
                raise DataError(f"feature {f.name}: unknown kind {f.kind!r}")
        return self

    @classmethod
    def from_dict(cls, obj):
        feats = []
        for fo in obj["features"]:
            feats.append(Feature(
                name=fo["name"],
                kind=fo["kind"],
                min=fo.get("min"),
                max=fo.get("max"),
                categories=list(fo["categories"]) if fo.get("categories") else None,
                actionable=bool(fo.get("actionable", True)),
            ))
        return cls(features=feats, label=obj.get("label", "label")).validate()

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        feats = []
        for f in self.features:
            fo = {"name": f.name, "kind": f.kind, "actionable": f.actionable}
            if f.kind == "continuous":
                if f.min is not None:
                    fo["min"] = f.min
                if f.max is not None:
                    fo["max"] = f.max
            else:
                fo["categories"] = list(f.categories)
            feats.append(fo)
        return {"label": self.label, "features": feats}


@dataclass
class Encoder:
    """Maps raw feature values to the encoded [0,1]^d representation.

    Holds the layout (one slice per original feature) and the min/max bounds
    actually used for scaling, whether declared in the schema or fitted from
    the data.
    """

    schema: FeatureSchema
    slices: list[slice] = field(init=False)
    width: int = field(init=False)

    def __post_init__(self):
        # own a copy: fit_bounds must not mutate the caller's schema
        self.schema = copy.deepcopy(self.schema.validate())
        self.slices = []
        start = 0
        for f in self.schema.features:
            self.slices.append(slice(start, start + f.width))
            start += f.width
        self.width = start

    @property
    def features(self):
        return self.schema.features

    def continuous_columns(self):
        """(feature index, encoded column) pairs for continuous features."""
        return [(i, self.slices[i].start)
                for i, f in enumerate(self.features) if f.kind == "continuous"]

    def actionable_mask(self):
        mask = np.zeros(self.width, dtype=bool)
        for f, sl in zip(self.features, self.slices):
            if f.actionable:
                mask[sl] = True
        return mask

    def categorical_blocks(self):
        """(feature index, slice) pairs for categorical features."""
        return [(i, self.slices[i])
                for i, f in enumerate(self.features) if f.kind == "categorical"]

    def fit_bounds(self, raw_columns):
        """Fill missing continuous min/max from raw value columns."""
        for f, col in zip(self.features, raw_columns):
            if f.kind != "continuous":
                continue
            if f.min is None:
                f.min = float(min(col))
            if f.max is None:
                f.max = float(max(col))
            if not f.min < f.max:
                raise DataError(f"feature {f.name}: degenerate range [{f.min}, {f.max}]")
        return self

    def encode_value(self, f, value):
        if f.kind == "continuous":
            return (float(value) - f.min) / (f.max - f.min)
        onehot = np.zeros(len(f.categories))
        try:
            onehot[f.categories.index(value)] = 1.0
        except ValueError:
            raise UnknownCategory(f"feature {f.name}: unknown category {value!r}") from None
        return onehot

    def encode_row(self, raw):
        """Encode one raw row given as a dict or a schema-ordered sequence."""
        if isinstance(raw, dict):
            raw = [raw[f.name] for f in self.features]
        out = np.empty(self.width)
        for f, sl, v in zip(self.features, self.slices, raw):
            out[sl] = self.encode_value(f, v)
        return out

    def decode_row(self, vec):
        """Map an encoded row back to raw units (dict keyed by feature name)."""
        out = {}
        for f, sl in zip(self.features, self.slices):
            if f.kind == "continuous":
                out[f.name] = float(vec[sl.start]) * (f.max - f.min) + f.min
            else:
                out[f.name] = f.categories[int(np.argmax(vec[sl]))]
        return out

    def project_onehot(self, rows):
        """Snap every categorical block to exact one-hot by argmax.

        Ties resolve to the lowest category index. Returns a new array.
        """
        rows = np.array(rows, dtype=float, copy=True)
        single = rows.ndim == 1
        if single:
            rows = rows[None, :]
        for _, sl in self.categorical_blocks():
            block = rows[:, sl]
            hot = np.argmax(block, axis=1)
            block[:] = 0.0
            block[np.arange(len(rows)), hot] = 1.0
        return rows[0] if single else rows

    def is_valid_row(self, vec, tol=1e-9):
        if np.any(vec < -tol) or np.any(vec > 1 + tol):
            return False
        for _, sl in self.categorical_blocks():
            block = vec[sl]
            if abs(block.sum() - 1.0) > tol or not np.all(np.isin(block, (0.0, 1.0))):
                return False
        return True


@dataclass
class Dataset:
    """Encoded rows plus binary labels; immutable after construction."""

    encoder: Encoder
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 2 or self.X.shape[1] != self.encoder.width:
            raise DataError("row width does not match encoder layout")
        if len(self.X) != len(self.y):
            raise DataError("row/label count mismatch")
        if np.any(self.X < 0) or np.any(self.X > 1):
            raise DataError("encoded values must lie in [0, 1]")
        for _, sl in self.encoder.categorical_blocks():
            if not np.allclose(self.X[:, sl].sum(axis=1), 1.0):
                raise DataError("one-hot block must sum to 1 per row")
        if set(np.unique(self.y)) != {0, 1}:
            raise DataError("labels must contain both classes 0 and 1")

    @property
    def n(self):
        return len(self.X)

    @property
    def d(self):
        return self.X.shape[1]


def load_csv(path, schema):
    """Load a headered CSV against a schema; returns an encoded Dataset.

    Continuous bounds declared in the schema are hard: out-of-range values
    raise OutOfRangeValue. Missing bounds are fitted from the file and stored
    on the encoder for decoding.
    """
    schema.validate()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for f in schema.features:
            if f.name not in header:
                raise MissingColumn(f"column {f.name!r} not in CSV header")
        if schema.label not in header:
            raise MissingColumn(f"label column {schema.label!r} not in CSV header")
        raw_rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            row = []
            for f in schema.features:
                v = rec[f.name]
                if f.kind == "continuous":
                    try:
                        x = float(v)
                    except (TypeError, ValueError):
                        raise UnparseableValue(
                            f"line {lineno}, {f.name}: cannot parse {v!r} as number") from None
                    if f.min is not None and x < f.min or f.max is not None and x > f.max:
                        raise OutOfRangeValue(
                            f"line {lineno}, {f.name}: {x} outside [{f.min}, {f.max}]")
                    row.append(x)
                else:
                    if v not in f.categories:
                        raise UnknownCategory(
                            f"line {lineno}, {f.name}: unknown category {v!r}")
                    row.append(v)
            lab = rec[schema.label].strip()
            if lab not in ("0", "1"):
                raise UnparseableValue(f"line {lineno}: label must be 0 or 1, got {lab!r}")
            raw_rows.append(row)
            labels.append(int(lab))
    if not raw_rows:
        raise DataError("CSV contains no data rows")
    enc = Encoder(schema)
    enc.fit_bounds([[r[i] for r in raw_rows] for i in range(len(schema.features))])
    X = np.stack([enc.encode_row(r) for r in raw_rows])
    return Dataset(enc, X, np.array(labels))


def train_test_split(ds, ratio, seed):
    """Stratified split preserving class proportions within one row per class.

    Each side keeps at least one row of each class; deterministic per seed.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    rng = np.random.default_rng(derive_seed(seed, 0x5011))
    train_idx, test_idx = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(ds.y == cls)
        if len(idx) < 2:
            raise DataError(f"class {cls} has fewer than 2 rows; cannot split")
        idx = rng.permutation(idx)
        n_train = int(np.clip(round(ratio * len(idx)), 1, len(idx) - 1))
        train_idx.extend(idx[:n_train])
        test_idx.extend(idx[n_train:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))
    return (Dataset(ds.encoder, ds.X[train_idx], ds.y[train_idx]),
            Dataset(ds.encoder, ds.X[test_idx], ds.y[test_idx]))


def mad(column):
    """Mean absolute deviation about the mean: (1/n) sum |x_i - mean(x)|."""
    col = np.asarray(column, dtype=float)
    if col.size == 0:
        raise ValueError("mad of empty vector")
    return float(np.mean(np.abs(col - col.mean())))


def raw_mads(ds):
    """Per-feature MAD on the raw scale; zero entries for categoricals.

    MAD is scale-equivariant, so the raw value equals the encoded-column MAD
    times the feature's min-max span.
    """
    out = np.zeros(len(ds.encoder.features))
    for i, col in ds.encoder.continuous_columns():
        f = ds.encoder.features[i]
        out[i] = mad(ds.X[:, col]) * (f.max - f.min)
    return out


def synthetic_neighbors(encoder, x, radii, count, seed, cat_resample_prob=0.0):
    """Sample `count` perturbed copies of the encoded row x.

    Continuous features get uniform noise in [-radius, +radius] (radius in
    encoded units, one entry per original feature), then clamp to [0, 1].
    Each categorical block is replaced by a uniformly random valid category
    with probability `cat_resample_prob`, otherwise kept.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.shape != (len(encoder.features),):
        raise ValueError("radii must have one entry per original feature")
    if np.any(radii < 0):
        raise ValueError("negative radius")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    out = np.tile(np.asarray(x, dtype=float), (count, 1))
    for i, col in encoder.continuous_columns():
        r = radii[i]
        if r > 0:
            out[:, col] = np.clip(out[:, col] + rng.uniform(-r, r, size=count), 0.0, 1.0)
    if cat_resample_prob > 0:
        for i, sl in encoder.categorical_blocks():
            ncat = sl.stop - sl.start
            flip = rng.random(count) < min(cat_resample_prob, 1.0)
            cats = rng.integers(0, ncat, size=count)
            block = out[:, sl]
            block[flip] = 0.0
            block[flip, cats[flip]] = 1.0
    return out


SYNTHETIC_SEED = 20231  # fixed so the bundled dataset is one artifact


def synthetic_schema():
    """Schema of the bundled desk-scale dataset: 2 continuous + 1 categorical."""
    return FeatureSchema(
        features=[
            Feature("income", "continuous", min=0.0, max=10.0),
            Feature("balance", "continuous", min=-5.0, max=5.0),
            Feature("grade", "categorical", categories=["low", "mid", "high"]),
        ],
        label="approved",
    ).validate()


def synthetic_raw(n_rows=1000, seed=SYNTHETIC_SEED):
    """Raw rows + labels for the bundled dataset.

    The label follows a smooth additive score of both continuous features and
    the grade, thresholded near its median so classes stay balanced.
    """
    rng = np.random.default_rng(seed)
    schema = synthetic_schema()
    income = rng.uniform(0.0, 10.0, n_rows)
    balance = rng.uniform(-5.0, 5.0, n_rows)
    grade_idx = rng.integers(0, 3, n_rows)
    grades = np.array(["low", "mid", "high"])[grade_idx]
    bonus = np.array([-0.15, 0.0, 0.25])[grade_idx]
    score = income / 10.0 + (balance + 5.0) / 10.0 + bonus + rng.normal(0, 0.08, n_rows)
    labels = (score > np.median(score)).astype(int)
    rows = [[float(income[i]), float(balance[i]), str(grades[i])] for i in range(n_rows)]
    return schema, rows, labels


def synthetic_dataset(n_rows=1000, seed=SYNTHETIC_SEED):
    schema, rows, labels = synthetic_raw(n_rows, seed)
    enc = Encoder(schema)
    X = np.stack([enc.encode_row(r) for r in rows])
    return Dataset(enc, X, labels)


def write_synthetic_csv(csv_path, schema_path, n_rows=1000, seed=SYNTHETIC_SEED):
    """Write the bundled dataset as CSV + schema JSON (for the CLI)."""
    schema, rows, labels = synthetic_raw(n_rows, seed)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f.name for f in schema.features] + [schema.label])
        for row, lab in zip(rows, labels):
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in row]
                       + [int(lab)])
    with open(schema_path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")
