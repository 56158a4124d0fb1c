"""Click-style datasets with planted heterogeneous pairwise interactions.

Labels follow

    logit = b + sum_{(i,j) in Z} w_ij * u[i][x_i]^T M_ij u[j][x_j]
    y ~ Bernoulli(sigmoid(logit))

where ``u[i][v]`` is a latent vector drawn once per vocabulary entry and
every planted pair has its own (non-diagonal) mixing matrix ``M_ij``.
Dense features are distractors with deliberately different marginals.

Random numbers come from a counter-based generator so that any value is a
pure function of ``(seed, stream, counter)``:

    GAMMA = 0x9E3779B97F4A7C15
    mix(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
             z = (z ^ (z >> 27)) * 0x94D049BB133111EB
             return z ^ (z >> 31)                       (all mod 2^64)
    key(seed, stream) = mix(mix(seed + GAMMA) ^ (stream * 0xD1B54A32D192ED03))
    draw(seed, stream, i) = mix(key + (i + 1) * GAMMA)
    uniform = (draw >> 11) * 2^-53                      in [0, 1)
    normal  = sqrt(-2 ln(1 - u1)) * cos(2 pi u2), u1 = uniform(2i), u2 = uniform(2i + 1)

Example ``i`` only reads counters derived from ``i``, so row ranges can be
generated independently and concatenated.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .metrics import auc, logloss
from .preprocessing import Dataset, FeatureSchema

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STREAM_MULT = np.uint64(0xD1B54A32D192ED03)

# stream ids; append only
S_LATENT, S_MIXING, S_WEIGHT, S_PAIRS, S_CALIBRATION, S_CATEGORICAL, S_DENSE, S_LABEL = range(8)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def draw_u64(seed: int, stream: int, counters) -> np.ndarray:
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = _mix(np.array([seed], dtype=np.uint64) + GAMMA)
        key = _mix(base ^ (np.uint64(stream) * _STREAM_MULT))
        return _mix(key + (counters + np.uint64(1)) * GAMMA)


def uniform(seed: int, stream: int, counters) -> np.ndarray:
    return (draw_u64(seed, stream, counters) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def normal(seed: int, stream: int, counters) -> np.ndarray:
    c = np.asarray(counters, dtype=np.uint64)
    u1 = uniform(seed, stream, c * np.uint64(2))
    u2 = uniform(seed, stream, c * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * math.pi * u2)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class SynthSpec:
    vocab_sizes: tuple[int, ...]
    dense_count: int
    latent_dim: int
    pairs: list[tuple[int, int]]
    mixing: list[np.ndarray]
    weights: list[float]
    bias: float
    seed: int
    latents: list[np.ndarray] = field(repr=False)

    def __post_init__(self):
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        self.pairs = [(int(i), int(j)) for i, j in self.pairs]
        self.mixing = [np.asarray(m, dtype=np.float64) for m in self.mixing]
        self.latents = [np.asarray(u, dtype=np.float64) for u in self.latents]
        if not self.pairs:
            raise ConfigError("at least one interacting pair is required")
        if not (len(self.pairs) == len(self.mixing) == len(self.weights)):
            raise ConfigError("pairs, mixing matrices and weights must align")
        C = len(self.vocab_sizes)
        for i, j in self.pairs:
            if not (0 <= i < C and 0 <= j < C) or i == j:
                raise ConfigError(f"pair ({i}, {j}) is not a pair of distinct categorical features")
        for m in self.mixing:
            if m.shape != (self.latent_dim, self.latent_dim):
                raise ConfigError("mixing matrices must be latent_dim x latent_dim")
        for u, v in zip(self.latents, self.vocab_sizes):
            if u.shape != (v, self.latent_dim):
                raise ConfigError("latent table shape does not match vocabulary")

    def schema(self, dense_groups: int = 4, tasks: int = 1, model_dim: int = 32) -> FeatureSchema:
        groups = min(dense_groups, self.dense_count) if self.dense_count else 0
        return FeatureSchema(self.vocab_sizes, self.dense_count, groups, tasks, model_dim)

    def to_dict(self) -> dict:
        return {
            "vocab_sizes": list(self.vocab_sizes),
            "dense_count": self.dense_count,
            "latent_dim": self.latent_dim,
            "pairs": [list(p) for p in self.pairs],
            "mixing": [m.tolist() for m in self.mixing],
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "seed": int(self.seed),
            "latents": [u.tolist() for u in self.latents],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        return cls(tuple(d["vocab_sizes"]), int(d["dense_count"]), int(d["latent_dim"]),
                   [tuple(p) for p in d["pairs"]], d["mixing"], list(d["weights"]),
                   float(d["bias"]), int(d["seed"]), d["latents"])

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> SynthSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def swapped(self, k: int) -> SynthSpec:
        """Same spec with pair k written as (j, i) and M transposed."""
        pairs = list(self.pairs)
        mixing = list(self.mixing)
        i, j = pairs[k]
        pairs[k] = (j, i)
        mixing[k] = mixing[k].T.copy()
        return SynthSpec(self.vocab_sizes, self.dense_count, self.latent_dim, pairs, mixing,
                         list(self.weights), self.bias, self.seed, self.latents)


def make_spec(seed: int = 0, num_categorical: int = 8, vocab_size: int | Sequence[int] = 100,
              dense_count: int = 4, latent_dim: int = 8, num_pairs: int = 6,
              signal: float = 1.0, base_rate: float = 0.3) -> SynthSpec:
    """Draw a spec: latent tables, planted pairs, mixing matrices, weights,
    and a bias calibrated by bisection so the expected positive rate is
    ``base_rate``."""
    C = num_categorical
    vocab = [vocab_size] * C if isinstance(vocab_size, int) else list(vocab_size)
    if len(vocab) != C:
        raise ConfigError("vocab_size list must have one entry per categorical feature")
    all_pairs = [(i, j) for i in range(C) for j in range(i + 1, C)]
    if num_pairs < 1:
        raise ConfigError("num_pairs must be >= 1 (labels would not depend on the features)")
    if num_pairs > len(all_pairs):
        raise ConfigError(f"num_pairs={num_pairs} exceeds the {len(all_pairs)} available pairs")
    u = latent_dim
    latents, offset = [], 0
    for v in vocab:
        latents.append(normal(seed, S_LATENT, np.arange(offset, offset + v * u)).reshape(v, u))
        offset += v * u
    order = np.argsort(uniform(seed, S_PAIRS, np.arange(len(all_pairs))), kind="stable")
    pairs = sorted(all_pairs[k] for k in order[:num_pairs])
    mixing = [normal(seed, S_MIXING, np.arange(k * u * u, (k + 1) * u * u)).reshape(u, u) / math.sqrt(u)
              for k in range(num_pairs)]
    # each term has std ~ sqrt(u) before weighting
    weights = list(signal * (0.5 + uniform(seed, S_WEIGHT, np.arange(num_pairs))) / math.sqrt(u))
    spec = SynthSpec(tuple(vocab), dense_count, u, pairs, mixing, weights, 0.0, seed, latents)
    spec.bias = calibrate_bias(spec, base_rate)
    return spec


def _categorical(spec: SynthSpec, start: int, n: int) -> np.ndarray:
    C = len(spec.vocab_sizes)
    idx = np.arange(start * C, (start + n) * C, dtype=np.uint64)
    u = uniform(spec.seed, S_CATEGORICAL, idx).reshape(n, C)
    return np.minimum((u * np.array(spec.vocab_sizes)).astype(np.int64), np.array(spec.vocab_sizes) - 1)


def _dense(spec: SynthSpec, start: int, n: int) -> np.ndarray:
    D = spec.dense_count
    if D == 0:
        return np.zeros((n, 0))
    idx = np.arange(start * D, (start + n) * D, dtype=np.uint64)
    z = normal(spec.seed, S_DENSE, idx).reshape(n, D)
    out = np.empty_like(z)
    for k in range(D):
        kind = k % 3
        if kind == 0:
            out[:, k] = np.exp(z[:, k])                 # heavy right tail
        elif kind == 1:
            out[:, k] = 100.0 * (0.5 + 0.5 * np.tanh(z[:, k]))
        else:
            out[:, k] = np.round(3.0 * z[:, k])         # many ties
    return out


def interaction_logits(spec: SynthSpec, ids: np.ndarray) -> np.ndarray:
    """True logits for categorical ids ``(n, |C|)`` (bias included)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.full(len(ids), spec.bias)
    for (i, j), m, w in zip(spec.pairs, spec.mixing, spec.weights):
        ui = spec.latents[i][ids[:, i]]
        uj = spec.latents[j][ids[:, j]]
        out += w * np.einsum("na,ab,nb->n", ui, m, uj)
    return out


def calibrate_bias(spec: SynthSpec, base_rate: float, samples: int = 20000, tol: float = 1e-10) -> float:
    """Bisection for b with mean sigmoid(b + s) = base_rate over a fixed
    calibration sample of interaction scores s."""
    C = len(spec.vocab_sizes)
    idx = np.arange(samples * C, dtype=np.uint64)
    u = uniform(spec.seed, S_CALIBRATION, idx).reshape(samples, C)
    ids = np.minimum((u * np.array(spec.vocab_sizes)).astype(np.int64), np.array(spec.vocab_sizes) - 1)
    saved = spec.bias
    spec.bias = 0.0
    s = interaction_logits(spec, ids)
    spec.bias = saved
    lo, hi = -50.0, 50.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _sigmoid(mid + s).mean() < base_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate(spec: SynthSpec, n: int, start: int = 0, split: str = "") -> Dataset:
    """Rows ``start .. start+n-1`` of the infinite example stream."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    ids = _categorical(spec, start, n)
    dense = _dense(spec, start, n)
    p = _sigmoid(interaction_logits(spec, ids))
    labels = (uniform(spec.seed, S_LABEL, np.arange(start, start + n)) < p).astype(np.int64)
    data = Dataset(ids, dense, labels, split)
    data.source = spec.fingerprint()
    return data


def generate_splits(spec: SynthSpec, n_train: int, n_valid: int, n_test: int) -> dict[str, Dataset]:
    """Disjoint index ranges of the same stream."""
    return {
        "train": generate(spec, n_train, 0, "train"),
        "valid": generate(spec, n_valid, n_train, "valid"),
        "test": generate(spec, n_test, n_train + n_valid, "test"),
    }


def true_probabilities(spec: SynthSpec, data: Dataset) -> np.ndarray:
    _check_matches(spec, data)
    return _sigmoid(interaction_logits(spec, data.categorical))


def _check_matches(spec: SynthSpec, data: Dataset) -> None:
    source = getattr(data, "source", None)
    if source is not None and source != spec.fingerprint():
        raise DataError("dataset was generated from a different spec")
    if data.categorical.shape[1] != len(spec.vocab_sizes) or data.dense.shape[1] != spec.dense_count:
        raise DataError("dataset columns do not match the generator config")
    if len(data) and (data.categorical.min() < 0 or (data.categorical >= np.array(spec.vocab_sizes)).any()):
        raise DataError("dataset ids fall outside the generator vocabularies")


def oracle_metrics(spec: SynthSpec, data: Dataset) -> dict[str, float]:
    """Logloss and AUC of the true-probability (Bayes) predictor."""
    p = true_probabilities(spec, data)
    return {"logloss": logloss(p, data.labels), "auc": auc(p, data.labels)}
