"""Dataset model, schema-driven CSV ingestion, splitting, standardization,
and a synthetic observational benchmark with known counterfactuals."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import stream


class DataError(ValueError):
    """Structured ingestion/validation error with optional row/column context."""

    def __init__(self, message: str, row: int | None = None,
                 column: str | None = None):
        self.row = row
        self.column = column
        where = ""
        if row is not None:
            where += f" (data row {row}"
            where += f", column {column})" if column is not None else ")"
        elif column is not None:
            where += f" (column {column})"
        super().__init__(message + where)


@dataclass
class ObservationalDataset:
    """Covariates, treatments, factual outcomes, and optional ground truth.

    ``y_cf`` holds the counterfactual outcome, ``mu0``/``mu1`` the noiseless
    potential outcomes, and ``e`` flags membership in a randomized subset.
    """

    x: np.ndarray
    t: np.ndarray
    y_f: np.ndarray
    y_cf: np.ndarray | None = None
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None
    e: np.ndarray | None = None
    outcome_kind: str = "continuous"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.t = np.asarray(self.t)
        self.y_f = np.asarray(self.y_f, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError(f"x must be 2-d, got shape {self.x.shape}")
        n = self.x.shape[0]
        for name in ("t", "y_f", "y_cf", "mu0", "mu1", "e"):
            col = getattr(self, name)
            if col is None:
                continue
            col = np.asarray(col)
            if col.shape != (n,):
                raise DataError(f"{name} must have length {n}, got shape {col.shape}")
        self.t = self.t.astype(np.int64)
        if not np.isin(self.t, (0, 1)).all():
            bad = int(np.flatnonzero(~np.isin(self.t, (0, 1)))[0])
            raise DataError("treatment values must be 0 or 1", row=bad, column="t")
        if not ((self.t == 0).any() and (self.t == 1).any()):
            raise DataError("both treatment groups must be nonempty")
        for name in ("y_cf", "mu0", "mu1"):
            col = getattr(self, name)
            if col is not None:
                setattr(self, name, np.asarray(col, dtype=np.float64))
        if self.e is not None:
            self.e = np.asarray(self.e).astype(np.int64)
            if not np.isin(self.e, (0, 1)).all():
                raise DataError("randomized-subset flags must be 0 or 1", column="e")
        if self.outcome_kind not in ("continuous", "binary"):
            raise DataError(f"unknown outcome kind {self.outcome_kind!r}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def true_ite(self) -> np.ndarray | None:
        """Ground-truth effect per row: noiseless when mu0/mu1 exist, else
        reconstructed from factual plus counterfactual outcomes."""
        if self.mu0 is not None and self.mu1 is not None:
            return self.mu1 - self.mu0
        if self.y_cf is not None:
            y1 = np.where(self.t == 1, self.y_f, self.y_cf)
            y0 = np.where(self.t == 0, self.y_f, self.y_cf)
            return y1 - y0
        return None

    def subset(self, idx: np.ndarray) -> "ObservationalDataset":
        pick = lambda col: None if col is None else col[idx]
        return ObservationalDataset(
            x=self.x[idx], t=self.t[idx], y_f=self.y_f[idx],
            y_cf=pick(self.y_cf), mu0=pick(self.mu0), mu1=pick(self.mu1),
            e=pick(self.e), outcome_kind=self.outcome_kind,
        )

    def concat(self, other: "ObservationalDataset") -> "ObservationalDataset":
        joint = lambda a, b: None if a is None or b is None else np.concatenate([a, b])
        return ObservationalDataset(
            x=np.concatenate([self.x, other.x]),
            t=np.concatenate([self.t, other.t]),
            y_f=np.concatenate([self.y_f, other.y_f]),
            y_cf=joint(self.y_cf, other.y_cf),
            mu0=joint(self.mu0, other.mu0), mu1=joint(self.mu1, other.mu1),
            e=joint(self.e, other.e), outcome_kind=self.outcome_kind,
        )


OPTIONAL_ROLES = ("ycf", "mu0", "mu1", "e")


@dataclass
class CsvSchema:
    """Column layout of a dataset CSV; saved alongside it as JSON."""

    d_x: int
    outcome_kind: str = "continuous"
    column_map: dict = field(default_factory=dict)

    def columns(self) -> dict:
        cols = {f"x{i}": f"x{i}" for i in range(self.d_x)}
        cols.update({"t": "t", "yf": "yf"})
        cols.update(self.column_map)
        return cols

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"d_x": self.d_x, "outcomeKind": self.outcome_kind,
                       "columnMap": self.column_map}, fh, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path) -> "CsvSchema":
        with open(path) as fh:
            doc = json.load(fh)
        return CsvSchema(d_x=int(doc["d_x"]), outcome_kind=doc["outcomeKind"],
                         column_map=dict(doc.get("columnMap", {})))


def _parse_cell(raw: str, row: int, column: str) -> float:
    try:
        val = float(raw)
    except ValueError:
        raise DataError(f"cannot parse {raw!r} as a number", row=row, column=column)
    if math.isnan(val) or math.isinf(val):
        raise DataError("non-finite cell", row=row, column=column)
    return val


def load_csv(path, schema: CsvSchema) -> ObservationalDataset:
    """Read a dataset CSV against its schema; errors carry row/column context."""
    cols = schema.columns()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("no data rows")
        pos = {name: i for i, name in enumerate(header)}
        required = [cols[f"x{i}"] for i in range(schema.d_x)]
        required += [cols["t"], cols["yf"]]
        for name in required:
            if name not in pos:
                raise DataError("missing column", column=name)
        present_optional = [r for r in OPTIONAL_ROLES
                            if cols.get(r, r) in pos]
        rows = []
        for r, rec in enumerate(reader):
            if len(rec) != len(header):
                raise DataError(f"expected {len(header)} cells, got {len(rec)}",
                                row=r)
            rows.append(rec)
    if not rows:
        raise DataError("no data rows")

    n = len(rows)
    x = np.empty((n, schema.d_x))
    t = np.empty(n, dtype=np.int64)
    y_f = np.empty(n)
    optional = {role: np.empty(n) for role in present_optional}
    for r, rec in enumerate(rows):
        for j in range(schema.d_x):
            name = cols[f"x{j}"]
            x[r, j] = _parse_cell(rec[pos[name]], r, name)
        t_name = cols["t"]
        t_val = _parse_cell(rec[pos[t_name]], r, t_name)
        if t_val not in (0.0, 1.0):
            raise DataError(f"treatment value {t_val} is not 0 or 1",
                            row=r, column=t_name)
        t[r] = int(t_val)
        y_name = cols["yf"]
        y_f[r] = _parse_cell(rec[pos[y_name]], r, y_name)
        for role in present_optional:
            name = cols.get(role, role)
            optional[role][r] = _parse_cell(rec[pos[name]], r, name)

    return ObservationalDataset(
        x=x, t=t, y_f=y_f,
        y_cf=optional.get("ycf"), mu0=optional.get("mu0"),
        mu1=optional.get("mu1"), e=optional.get("e"),
        outcome_kind=schema.outcome_kind,
    )


def write_csv(ds: ObservationalDataset, path) -> CsvSchema:
    """Write the canonical column layout; floats keep full round-trip precision."""
    header = [f"x{i}" for i in range(ds.d_x)] + ["t", "yf"]
    extras = [(name, getattr(ds, attr)) for name, attr in
              (("ycf", "y_cf"), ("mu0", "mu0"), ("mu1", "mu1"), ("e", "e"))
              if getattr(ds, attr) is not None]
    header += [name for name, _ in extras]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.x[i]]
            row.append(str(int(ds.t[i])))
            row.append(repr(float(ds.y_f[i])))
            for name, col in extras:
                row.append(str(int(col[i])) if name == "e"
                           else repr(float(col[i])))
            writer.writerow(row)
    return CsvSchema(d_x=ds.d_x, outcome_kind=ds.outcome_kind)


@dataclass(frozen=True)
class SplitSpec:
    """Train/valid/test ratios plus the shuffle seed."""

    ratios: tuple[float, float, float] = (0.63, 0.27, 0.10)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise DataError(f"ratios must be three positive reals, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"ratios must sum to 1, got {sum(self.ratios)}")


def split_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor each ratio, then hand leftover rows to train, then valid, then test."""
    base = [int(math.floor(n * r)) for r in ratios]
    leftover = n - sum(base)
    for i in range(leftover):
        base[i % 3] += 1
    return tuple(base)


def split(ds: ObservationalDataset, spec: SplitSpec):
    """Disjoint train/valid/test cover, deterministic in the spec seed."""
    sizes = split_sizes(ds.n, spec.ratios)
    if any(s == 0 for s in sizes):
        raise DataError(f"split sizes {sizes} include an empty split")
    perm = stream(spec.seed, "split").permutation(ds.n)
    bounds = np.cumsum(sizes)
    parts = (np.sort(perm[:bounds[0]]),
             np.sort(perm[bounds[0]:bounds[1]]),
             np.sort(perm[bounds[1]:bounds[2]]))
    out = []
    for name, idx in zip(("train", "valid", "test"), parts):
        t_sub = ds.t[idx]
        if not ((t_sub == 0).any() and (t_sub == 1).any()):
            raise DataError(f"{name} split lacks one treatment group")
        out.append(ds.subset(idx))
    return tuple(out)


@dataclass
class StandardizeTransform:
    """Column-wise affine transform fitted on train covariates.

    Binary {0,1} columns and zero-variance columns are passed through; the
    latter are listed in ``warnings``.
    """

    mean: np.ndarray
    scale: np.ndarray
    applied: np.ndarray  # bool per column
    warnings: list[str] = field(default_factory=list)

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=np.float64, copy=True)
        cols = np.flatnonzero(self.applied)
        out[:, cols] = (out[:, cols] - self.mean[cols]) / self.scale[cols]
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"mean": self.mean.tolist(), "scale": self.scale.tolist(),
                       "applied": self.applied.astype(int).tolist(),
                       "warnings": self.warnings}, fh, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path) -> "StandardizeTransform":
        with open(path) as fh:
            doc = json.load(fh)
        return StandardizeTransform(
            mean=np.asarray(doc["mean"], dtype=np.float64),
            scale=np.asarray(doc["scale"], dtype=np.float64),
            applied=np.asarray(doc["applied"], dtype=bool),
            warnings=list(doc["warnings"]),
        )


def _with_x(ds: ObservationalDataset, x: np.ndarray) -> ObservationalDataset:
    return ObservationalDataset(x=x, t=ds.t, y_f=ds.y_f, y_cf=ds.y_cf,
                                mu0=ds.mu0, mu1=ds.mu1, e=ds.e,
                                outcome_kind=ds.outcome_kind)


def standardize(train: ObservationalDataset, *others: ObservationalDataset):
    """Fit mean/sd on train continuous covariate columns, apply everywhere.

    Returns (train', others'..., transform).
    """
    x = train.x
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    applied = np.ones(train.d_x, dtype=bool)
    warnings: list[str] = []
    for j in range(train.d_x):
        values = np.unique(x[:, j])
        if np.isin(values, (0.0, 1.0)).all():
            applied[j] = False  # binary column, leave untouched
        elif sd[j] == 0.0:
            applied[j] = False
            warnings.append(f"column x{j} has zero variance; left unscaled")
    transform = StandardizeTransform(mean=mean, scale=sd, applied=applied,
                                     warnings=warnings)
    out = [_with_x(train, transform.apply(train.x))]
    out.extend(_with_x(ds, transform.apply(ds.x)) for ds in others)
    out.append(transform)
    return tuple(out)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


@dataclass(frozen=True)
class SyntheticTruth:
    """The response surfaces and treatment mechanism behind a generated benchmark."""

    w0: np.ndarray
    w1: np.ndarray
    bias_strength: float
    noise_sd: float

    def mu0(self, x: np.ndarray) -> np.ndarray:
        return np.sin(x @ self.w0)

    def mu1(self, x: np.ndarray) -> np.ndarray:
        return self.mu0(x) + 1.0 + np.tanh(x @ self.w1)

    def tau(self, x: np.ndarray) -> np.ndarray:
        return self.mu1(x) - self.mu0(x)

    def propensity(self, x: np.ndarray) -> np.ndarray:
        return np.clip(_sigmoid(self.bias_strength * (x @ self.w1)), 0.05, 0.95)


def synthesize_benchmark_detailed(n: int, d_x: int, bias_strength: float,
                                  noise_sd: float, seed: int
                                  ) -> tuple[ObservationalDataset, SyntheticTruth]:
    """Benchmark generator returning the dataset plus its generating truth.

    Covariates are standard normal. The control surface is a smooth ridge
    sine, the treated surface adds a shifted tanh ridge, and treatment
    assignment follows a clipped logistic in the treated ridge, so overlap
    holds by construction and selection bias scales with ``bias_strength``.
    """
    if n < 50:
        raise DataError(f"need n >= 50, got {n}")
    if d_x < 2:
        raise DataError(f"need d_x >= 2, got {d_x}")
    rng = stream(seed, "benchmark")
    w0 = rng.standard_normal(d_x)
    w0 /= np.linalg.norm(w0)
    w1 = rng.standard_normal(d_x)
    w1 /= np.linalg.norm(w1)
    truth = SyntheticTruth(w0=w0, w1=w1, bias_strength=float(bias_strength),
                           noise_sd=float(noise_sd))
    x = rng.standard_normal((n, d_x))
    mu0 = truth.mu0(x)
    mu1 = truth.mu1(x)
    p = truth.propensity(x)
    t = (rng.uniform(size=n) < p).astype(np.int64)
    y0 = mu0 + noise_sd * rng.standard_normal(n)
    y1 = mu1 + noise_sd * rng.standard_normal(n)
    y_f = np.where(t == 1, y1, y0)
    y_cf = np.where(t == 1, y0, y1)
    ds = ObservationalDataset(x=x, t=t, y_f=y_f, y_cf=y_cf, mu0=mu0, mu1=mu1,
                              outcome_kind="continuous")
    return ds, truth


def synthesize_benchmark(n: int, d_x: int, bias_strength: float,
                         noise_sd: float, seed: int) -> ObservationalDataset:
    """Benchmark generator; see synthesize_benchmark_detailed."""
    ds, _ = synthesize_benchmark_detailed(n, d_x, bias_strength, noise_sd, seed)
    return ds
