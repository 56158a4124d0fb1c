"""Turn raw categorical/dense features plus task tokens into an embedding list.

Activations are laid out position-major, ``(L, B, d)``: position ``i`` of
every example in the batch is one contiguous ``(B, d)`` slab. Per-position
parameters then act through a single batched matmul.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, VocabularyError


@dataclass(frozen=True)
class FeatureSchema:
    categorical_vocab_sizes: tuple[int, ...]
    dense_count: int
    dense_group_count: int
    task_count: int = 1
    model_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "categorical_vocab_sizes", tuple(int(v) for v in self.categorical_vocab_sizes))
        if any(v < 1 for v in self.categorical_vocab_sizes):
            raise ConfigError("every vocabulary size must be >= 1")
        if self.dense_count < 0:
            raise ConfigError("dense_count must be >= 0")
        if self.dense_count == 0 and self.dense_group_count != 0:
            raise ConfigError("dense_group_count must be 0 when there are no dense features")
        if self.dense_count > 0 and not 1 <= self.dense_group_count <= self.dense_count:
            raise ConfigError("dense_group_count must be in [1, dense_count]")
        if self.task_count < 1:
            raise ConfigError("task_count must be >= 1")
        if self.model_dim < 1:
            raise ConfigError("model_dim must be >= 1")

    @property
    def num_categorical(self) -> int:
        return len(self.categorical_vocab_sizes)

    @property
    def length(self) -> int:
        """L = |C| + n^D + t."""
        return self.num_categorical + self.dense_group_count + self.task_count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categorical_vocab_sizes"] = list(self.categorical_vocab_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FeatureSchema:
        try:
            return cls(
                categorical_vocab_sizes=tuple(d["categorical_vocab_sizes"]),
                dense_count=int(d["dense_count"]),
                dense_group_count=int(d["dense_group_count"]),
                task_count=int(d.get("task_count", 1)),
                model_dim=int(d.get("model_dim", 32)),
            )
        except KeyError as exc:
            raise ConfigError(f"schema missing field {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> FeatureSchema:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Example:
    categorical: tuple[int, ...]
    dense: tuple[float, ...]
    label: int


@dataclass
class Dataset:
    """Column-oriented examples: ids ``(n, |C|)``, dense ``(n, |D|)``, labels ``(n,)``."""

    categorical: np.ndarray
    dense: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        self.categorical = np.asarray(self.categorical, dtype=np.int64)
        self.dense = np.asarray(self.dense, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.categorical.ndim != 2 or self.dense.ndim != 2:
            raise DataError("categorical and dense must be 2-D")
        if self.categorical.shape[0] != n or self.dense.shape[0] != n:
            raise DataError("column lengths differ")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx) -> Dataset:
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return Dataset(self.categorical[idx], self.dense[idx], self.labels[idx], self.split)

    def example(self, i: int) -> Example:
        return Example(tuple(int(v) for v in self.categorical[i]),
                       tuple(float(v) for v in self.dense[i]), int(self.labels[i]))

    def concat(self, other: Dataset) -> Dataset:
        return Dataset(np.concatenate([self.categorical, other.categorical]),
                       np.concatenate([self.dense, other.dense]),
                       np.concatenate([self.labels, other.labels]), self.split)

    def validate(self, schema: FeatureSchema) -> None:
        if self.categorical.shape[1] != schema.num_categorical or self.dense.shape[1] != schema.dense_count:
            raise DataError(
                f"dataset has {self.categorical.shape[1]} categorical / {self.dense.shape[1]} dense columns, "
                f"schema expects {schema.num_categorical} / {schema.dense_count}"
            )
        check_vocab(self.categorical, schema.categorical_vocab_sizes)
        if not np.isfinite(self.dense).all():
            raise DataError("dense values must be finite")


def check_vocab(ids: np.ndarray, vocab_sizes: Sequence[int]) -> None:
    ids = np.asarray(ids)
    for i, v in enumerate(vocab_sizes):
        col = ids[..., i]
        if col.size and (col.min() < 0 or col.max() >= v):
            bad = col[(col < 0) | (col >= v)][0]
            raise VocabularyError(f"categorical feature {i}: id {int(bad)} outside [0, {v})")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def csv_header(num_categorical: int, dense_count: int) -> list[str]:
    return ([f"cat_{i}" for i in range(num_categorical)]
            + [f"dense_{i}" for i in range(dense_count)] + ["label"])


def write_csv(path, data: Dataset) -> None:
    nc, nd = data.categorical.shape[1], data.dense.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(nc, nd))
        for c, x, y in zip(data.categorical.tolist(), data.dense.tolist(), data.labels.tolist()):
            w.writerow(c + [repr(v) for v in x] + [y])


def read_csv(path, split: str = "") -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    cat_cols = [i for i, h in enumerate(header) if h.startswith("cat_")]
    dense_cols = [i for i, h in enumerate(header) if h.startswith("dense_")]
    if "label" not in header:
        raise DataError(f"{path}: missing label column")
    if header != csv_header(len(cat_cols), len(dense_cols)):
        raise DataError(f"{path}: unexpected header {header}")
    n = len(rows)
    try:
        arr = np.array(rows, dtype=object).reshape(n, len(header))
        cat = arr[:, cat_cols].astype(np.int64) if n else np.zeros((0, len(cat_cols)), np.int64)
        dense = arr[:, dense_cols].astype(np.float64) if n else np.zeros((0, len(dense_cols)))
        labels = arr[:, -1].astype(np.int64) if n else np.zeros(0, np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: malformed row ({exc})") from exc
    return Dataset(cat, dense, labels, split)


# ---------------------------------------------------------------------------
# dense normalization
# ---------------------------------------------------------------------------


@dataclass
class CdfNormalizer:
    """Empirical-CDF map of each dense feature onto [0, 1].

    ``quantiles[k]`` holds the sorted unique training values of feature k
    and ``levels[k]`` their mid-rank CDF positions; queries are linearly
    interpolated between them and clipped outside the fitted range. A
    feature that is constant in training maps every query to 0.5.
    """

    quantiles: list[np.ndarray] = field(default_factory=list)
    levels: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def fit(cls, x: np.ndarray, max_knots: int = 1024) -> CdfNormalizer:
        x = np.asarray(x, dtype=np.float64)
        qs, ls = [], []
        for k in range(x.shape[1]):
            col = np.sort(x[:, k])
            uniq, first, counts = np.unique(col, return_index=True, return_counts=True)
            if len(uniq) <= 1:
                qs.append(uniq[:1] if len(uniq) else np.zeros(1))
                ls.append(np.array([0.5]))
                continue
            # rank of each unique value, averaged over ties, scaled to [0, 1]
            mid = first + (counts - 1) / 2.0
            lev = mid / (len(col) - 1)
            if len(uniq) > max_knots:
                keep = np.unique(np.linspace(0, len(uniq) - 1, max_knots).round().astype(int))
                uniq, lev = uniq[keep], lev[keep]
                lev = (lev - lev[0]) / (lev[-1] - lev[0])
            qs.append(uniq)
            ls.append(lev)
        return cls(qs, ls)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != len(self.quantiles):
            raise ConfigError(f"normalizer fitted for {len(self.quantiles)} features, got {x.shape[1]}")
        out = np.empty_like(x)
        for k, (q, lev) in enumerate(zip(self.quantiles, self.levels)):
            if len(q) == 1:
                out[:, k] = 0.5
            else:
                out[:, k] = np.interp(x[:, k], q, lev, left=0.0, right=1.0)
        return out

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (q, lev) in enumerate(zip(self.quantiles, self.levels)):
            out[f"normalizer.{k}.quantiles"] = q
            out[f"normalizer.{k}.levels"] = lev
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], count: int) -> CdfNormalizer:
        try:
            return cls([np.asarray(state[f"normalizer.{k}.quantiles"], np.float64) for k in range(count)],
                       [np.asarray(state[f"normalizer.{k}.levels"], np.float64) for k in range(count)])
        except KeyError as exc:
            raise ConfigError(f"normalization stats missing for {exc}") from exc


def normalize_dense(x: np.ndarray, stats: CdfNormalizer | None) -> np.ndarray:
    if stats is None:
        raise ConfigError("dense normalization stats are missing; fit on the training split first")
    return stats(x)


# ---------------------------------------------------------------------------
# learned preprocessing
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class EmbeddingTables:
    """One ``V_i x d`` lookup table per categorical feature."""

    def __init__(self, vocab_sizes: Sequence[int], d: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / math.sqrt(d)
        self.vocab_sizes = tuple(vocab_sizes)
        self.tables = [nx.parameter(_uniform(rng, (v, d), bound, dtype), f"embedding.{i}")
                       for i, v in enumerate(vocab_sizes)]

    def parameters(self) -> list[nx.Tensor]:
        return list(self.tables)


def embed_categorical(ids: np.ndarray, tables: EmbeddingTables) -> list[nx.Tensor]:
    """Row lookup per feature: one ``(B, d)`` tensor per categorical feature."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    if ids.shape[1] != len(tables.tables):
        raise DataError(f"expected {len(tables.tables)} categorical ids, got {ids.shape[1]}")
    check_vocab(ids, tables.vocab_sizes)
    return [nx.take_rows(t, ids[:, i]) for i, t in enumerate(tables.tables)]


class DensePreprocessor:
    """Two-layer GELU MLP ``|D| -> 4 n^D d -> n^D d``, split into n^D vectors."""

    def __init__(self, dense_count: int, groups: int, d: int, rng: np.random.Generator, dtype=np.float32):
        if dense_count <= 0 or groups <= 0:
            raise ConfigError("dense preprocessor needs at least one dense feature and group")
        self.groups, self.d = groups, d
        hidden = 4 * groups * d
        self.w1 = nx.parameter(_uniform(rng, (dense_count, hidden), 1 / math.sqrt(dense_count), dtype), "dense.w1")
        self.b1 = nx.parameter(np.zeros(hidden, dtype), "dense.b1")
        self.w2 = nx.parameter(_uniform(rng, (hidden, groups * d), 1 / math.sqrt(hidden), dtype), "dense.w2")
        self.b2 = nx.parameter(np.zeros(groups * d, dtype), "dense.b2")
        self.normalizer: CdfNormalizer | None = None

    def parameters(self) -> list[nx.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def mlp(self, xn: nx.Tensor) -> nx.Tensor:
        h = nx.gelu(nx.add_bias(nx.matmul(xn, self.w1), self.b1))
        return nx.add_bias(nx.matmul(h, self.w2), self.b2)


def split_chunks(v: nx.Tensor, size: int) -> nx.Tensor:
    """``(B, n*size)`` -> ``(n, B, size)``: chunk i is embedding i."""
    b, total = v.shape
    if total % size:
        raise ConfigError(f"projection length {total} is not a multiple of {size}")
    return nx.transpose(nx.reshape(v, (b, total // size, size)), (1, 0, 2))


def project_dense(xn: np.ndarray | nx.Tensor, pre: DensePreprocessor) -> nx.Tensor:
    """Normalized dense values ``(B, |D|)`` -> ``(n^D, B, d)``."""
    if not isinstance(xn, nx.Tensor):
        xn = nx.Tensor(np.atleast_2d(xn), dtype=pre.w1.dtype)
    return split_chunks(pre.mlp(xn), pre.d)


class TaskTokens:
    def __init__(self, t: int, d: int, rng: np.random.Generator, dtype=np.float32):
        self.tokens = nx.parameter(_uniform(rng, (t, d), 1 / math.sqrt(d), dtype), "task_tokens")

    def parameters(self) -> list[nx.Tensor]:
        return [self.tokens]


def assemble_embedding_list(cat: Sequence[nx.Tensor], dense: nx.Tensor | None,
                            tasks: TaskTokens, batch: int) -> nx.Tensor:
    """Stack categorical, dense-group, then task rows into ``(L, B, d)``."""
    d = tasks.tokens.shape[1]
    parts = []
    for i, e in enumerate(cat):
        if e.shape != (batch, d):
            raise ConfigError(f"categorical embedding {i} has shape {e.shape}, expected {(batch, d)}")
        parts.append(nx.reshape(e, (1, batch, d)))
    if dense is not None:
        parts.append(dense)
    parts.append(nx.expand(tasks.tokens, 1, batch))
    return nx.concat(parts, axis=0) if len(parts) > 1 else parts[0]
