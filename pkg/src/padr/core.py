"""Shared domain types: datasets, rule parameters, configuration, seeded randomness.

Parameter layout
----------------
A rule with ``n_outputs`` decision coordinates is parameterized per output by
two stacks of affine pieces: ``k_convex`` pieces whose maximum forms the convex
part and ``k_concave`` pieces whose maximum is subtracted.  All parameters live
in one array of shape ``(n_outputs, k_convex + k_concave, n_features + 1)``;
the last column is the intercept.  The flat vector raveled from that array (C
order) is the canonical serialization order, and the feasible set is the box
``[-bound, bound]`` applied entrywise.

Randomness
----------
Every stochastic ingredient draws from a named sub-stream of one 64-bit seed so
that runs are reproducible and the streams are independently reseedable.
Sequential draws use numpy's Philox counter generator keyed by
``(seed, stream, path)``.  Per-sample draws that must not depend on batch
composition use a splitmix64 hash of ``(seed, stream, path, tags, id)``;
both schemes are platform independent.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

STREAMS = {"data": 1, "minibatch": 2, "index": 3, "init": 4, "output": 5, "sweep": 6}

_U64 = np.uint64
_MASK64 = _U64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def _mix64(h):
    # splitmix64 finalizer; h is a uint64 scalar or array
    with np.errstate(over="ignore"):
        h = (h ^ (h >> _U64(30))) * _MIX1
        h = (h ^ (h >> _U64(27))) * _MIX2
        return h ^ (h >> _U64(31))


@dataclass(frozen=True)
class RngHandle:
    """Immutable handle naming one reproducible random stream.

    A handle never holds generator state: every call derives a fresh
    generator, so repeated identical calls yield identical draws.
    """

    seed: int
    stream: str
    path: tuple = ()

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}; use one of {sorted(STREAMS)}")

    def child(self, *keys: int) -> "RngHandle":
        return RngHandle(self.seed, self.stream, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.seed & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(STREAMS[self.stream],) + self.path,
        )
        return np.random.Generator(np.random.Philox(ss))

    def keyed_units(self, ids, *tags: int) -> np.ndarray:
        """Uniform [0,1) variates keyed by integer ids, independent of batch order."""
        with np.errstate(over="ignore"):
            h = _mix64(_U64(self.seed & 0xFFFFFFFFFFFFFFFF))
            for k in (STREAMS[self.stream],) + self.path + tags:
                h = _mix64(h + _GOLDEN + _U64(int(k) & 0xFFFFFFFFFFFFFFFF))
            ids = np.asarray(ids, dtype=np.uint64)
            hv = _mix64(h + _GOLDEN * (ids + _U64(1)))
        return (hv >> _U64(11)).astype(np.float64) * (2.0 ** -53)


@dataclass(frozen=True)
class HypothesisConfig:
    """Shape of the piecewise-affine rule class and its parameter box."""

    n_outputs: int
    k_convex: int
    k_concave: int
    n_features: int
    bound: float

    def __post_init__(self):
        if self.n_outputs < 1:
            raise ValueError("n_outputs must be >= 1")
        if self.k_convex < 1:
            raise ValueError("k_convex must be >= 1")
        if self.k_concave < 0:
            raise ValueError("k_concave must be >= 0")
        if self.n_features < 0:
            raise ValueError("n_features must be >= 0")
        if not self.bound > 0:
            raise ValueError("bound must be > 0")

    @property
    def k_total(self) -> int:
        return self.k_convex + self.k_concave

    @property
    def n_params(self) -> int:
        return self.n_outputs * self.k_total * (self.n_features + 1)

    def to_dict(self) -> dict:
        return {
            "n_outputs": self.n_outputs,
            "k_convex": self.k_convex,
            "k_concave": self.k_concave,
            "n_features": self.n_features,
            "bound": self.bound,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HypothesisConfig":
        return cls(
            n_outputs=int(d["n_outputs"]),
            k_convex=int(d["k_convex"]),
            k_concave=int(d["k_concave"]),
            n_features=int(d["n_features"]),
            bound=float(d["bound"]),
        )


class Theta:
    """Rule parameters: one weight array of shape (n_outputs, k_total, n_features+1).

    Rows ``[:k_convex]`` of the middle axis are the convex-part pieces, the
    rest the concave-part pieces; the last column is the intercept.
    """

    __slots__ = ("cfg", "weights")

    def __init__(self, cfg: HypothesisConfig, weights: np.ndarray, validate: bool = True):
        weights = np.asarray(weights, dtype=np.float64)
        expected = (cfg.n_outputs, cfg.k_total, cfg.n_features + 1)
        if weights.shape != expected:
            raise ValueError(f"weights shape {weights.shape} != {expected}")
        if validate:
            if not np.all(np.isfinite(weights)):
                raise ValueError("non-finite parameter entries")
            if np.max(np.abs(weights), initial=0.0) > cfg.bound * (1 + 1e-9) + 1e-12:
                raise ValueError("parameters outside the box [-bound, bound]")
        self.cfg = cfg
        self.weights = weights

    @property
    def convex(self) -> np.ndarray:
        return self.weights[:, : self.cfg.k_convex, :]

    @property
    def concave(self) -> np.ndarray:
        return self.weights[:, self.cfg.k_convex :, :]

    def flatten(self) -> np.ndarray:
        return self.weights.ravel().copy()

    @classmethod
    def from_flat(cls, cfg: HypothesisConfig, flat, validate: bool = True) -> "Theta":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != cfg.n_params:
            raise ValueError(f"flat length {flat.size} != n_params {cfg.n_params}")
        shape = (cfg.n_outputs, cfg.k_total, cfg.n_features + 1)
        return cls(cfg, flat.reshape(shape), validate=validate)

    def clipped(self) -> "Theta":
        b = self.cfg.bound
        return Theta(self.cfg, np.clip(self.weights, -b, b), validate=False)

    def __eq__(self, other):
        return (
            isinstance(other, Theta)
            and self.cfg == other.cfg
            and np.array_equal(self.weights, other.weights)
        )

    def __repr__(self):
        return f"Theta(cfg={self.cfg!r}, max_abs={np.max(np.abs(self.weights)):.4g})"


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, p) paired with an outcome matrix (n, m)."""

    features: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        o = np.asarray(self.outcomes, dtype=np.float64)
        if f.ndim != 2 or o.ndim != 2:
            raise ValueError("features and outcomes must be 2-D")
        if f.shape[0] != o.shape[0]:
            raise ValueError("row count mismatch between features and outcomes")
        if f.shape[0] < 1:
            raise ValueError("n >= 1 violated: dataset is empty")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(o))):
            raise ValueError("non-finite entries in dataset")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "outcomes", o)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def m(self) -> int:
        return self.outcomes.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.outcomes[idx])


def random_init(cfg: HypothesisConfig, rng: RngHandle) -> Theta:
    """Parameters drawn i.i.d. uniform on [-bound, bound]."""
    gen = rng.generator()
    shape = (cfg.n_outputs, cfg.k_total, cfg.n_features + 1)
    return Theta(cfg, gen.uniform(-cfg.bound, cfg.bound, size=shape), validate=False)


def derive_seed(seed: int, key: int) -> int:
    """Stable sub-seed for independent runs (rounds, sweep candidates)."""
    with np.errstate(over="ignore"):
        h = _mix64(_U64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN * _U64((key + 1) & 0xFFFFFFFFFFFFFFFF))
    return int(h)


# ---------------------------------------------------------------------------
# dataset CSV interchange

def _fmt(v: float) -> str:
    # shortest round-trip decimal form; deterministic across platforms
    return repr(float(v))


def dataset_header(p: int, m: int) -> list:
    return [f"x{j + 1}" for j in range(p)] + [f"y{j + 1}" for j in range(m)]


def load_dataset(path) -> Dataset:
    """Read a CSV dataset whose header is x1..xp,y1..ym."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n").rstrip("\r") for ln in fh]
    lines = [ln for ln in lines if ln.strip() != ""]
    if not lines:
        raise ValueError(f"{path}: empty file, header row required")
    header = [c.strip() for c in lines[0].split(",")]
    p = 0
    while p < len(header) and header[p] == f"x{p + 1}":
        p += 1
    m = len(header) - p
    if m < 1 or header[p:] != [f"y{j + 1}" for j in range(m)]:
        raise ValueError(f"{path}: malformed header {header}; expected x1..xp,y1..ym")
    if len(lines) == 1:
        raise ValueError(f"{path}: n >= 1 violated, no data rows")
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        cells = ln.split(",")
        if len(cells) != p + m:
            raise ValueError(f"{path}:{i}: expected {p + m} columns, found {len(cells)}")
        try:
            vals = [float(c) for c in cells]
        except ValueError as exc:
            raise ValueError(f"{path}:{i}: non-numeric cell ({exc})") from None
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"{path}:{i}: non-finite value")
        rows.append(vals)
    arr = np.asarray(rows, dtype=np.float64)
    return Dataset(arr[:, :p], arr[:, p:])


def save_dataset(path, data: Dataset) -> None:
    lines = [",".join(dataset_header(data.p, data.m))]
    both = np.hstack([data.features, data.outcomes])
    for row in both:
        lines.append(",".join(_fmt(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# model serialization

MODEL_VERSION = 1


def save_model(path, theta: Theta, scaler: dict | None = None) -> None:
    doc = {
        "version": MODEL_VERSION,
        "cfg": theta.cfg.to_dict(),
        "theta_flat": [float(v) for v in theta.flatten()],
    }
    if scaler is not None:
        doc["scaler"] = {
            "center": [float(v) for v in scaler["center"]],
            "scale": [float(v) for v in scaler["scale"]],
        }
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def load_model(path):
    """Returns (Theta, scaler-or-None)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {doc.get('version')!r}")
    cfg = HypothesisConfig.from_dict(doc["cfg"])
    theta = Theta.from_flat(cfg, np.asarray(doc["theta_flat"], dtype=np.float64))
    scaler = doc.get("scaler")
    if scaler is not None:
        scaler = {
            "center": np.asarray(scaler["center"], dtype=np.float64),
            "scale": np.asarray(scaler["scale"], dtype=np.float64),
        }
    return theta, scaler


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------

def erm_cost(theta: Theta, data: Dataset, cost) -> float:
    """Average cost of the rule's decisions over the dataset."""
    from . import costs, rules

    if theta.cfg.n_features != data.p:
        raise ValueError(f"rule expects p={theta.cfg.n_features}, dataset has p={data.p}")
    z = rules.decisions(theta, data.features)
    vals = costs.cost_values(cost, z, data.outcomes)
    return float(np.mean(vals))
