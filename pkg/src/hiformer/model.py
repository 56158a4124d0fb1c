"""End-to-end ranking model: preprocessing, interaction stack, MLP tower."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import checkpoint
from . import numerics as nx
from .errors import ConfigError, DataError, NumericError, VersionError
from .interaction import LAYER_TYPES, LayerConfig, build_layer, stack_layers
from .metrics import auc, logloss
from .preprocessing import (CdfNormalizer, Dataset, DensePreprocessor, EmbeddingTables, FeatureSchema,
                            TaskTokens, assemble_embedding_list, embed_categorical, normalize_dense,
                            project_dense)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    layer: str = "hetero"
    num_layers: int = 1
    shuffle: bool = True
    restore_best: bool = True
    eval_batch: int = 4096

    def __post_init__(self):
        if self.layer not in LAYER_TYPES:
            raise ConfigError(f"unknown layer type {self.layer!r}; choose from {LAYER_TYPES}")
        if self.batch_size < 1 or self.epochs < 0 or self.num_layers < 0 or self.lr < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0, num_layers >= 0, lr >= 0 required")


class RankingModel:
    """Embedding list -> interaction layers -> task rows -> tower -> p.

    Parameters
    ----------
    schema : FeatureSchema
        Fixes |C|, |D|, n^D, t and d (and therefore L).
    kind : str
        One of ``homo``, ``homo-pe``, ``hetero``, ``hiformer``.
    layer_cfg : LayerConfig
        Head/width settings; ``d``, ``length`` and ``tasks`` are taken from
        the schema.
    """

    def __init__(self, schema: FeatureSchema, kind: str = "hetero", layer_cfg: LayerConfig | None = None,
                 num_layers: int = 1, seed: int = 0, dtype=np.float32):
        if kind not in LAYER_TYPES:
            raise ConfigError(f"unknown layer type {kind!r}")
        self.schema = schema
        self.kind = kind
        self.num_layers = num_layers
        self.seed = seed
        self.dtype = np.dtype(dtype)
        cfg = layer_cfg or LayerConfig()
        cfg = replace(cfg, d=schema.model_dim, length=schema.length, tasks=schema.task_count)
        if kind == "hiformer" and cfg.composite == "lowrank":
            cfg = cfg.clamp_ranks()
        self.cfg = cfg
        d, t = schema.model_dim, schema.task_count
        rng = np.random.default_rng(seed)
        self.embeddings = EmbeddingTables(schema.categorical_vocab_sizes, d, rng, dtype)
        self.dense = (DensePreprocessor(schema.dense_count, schema.dense_group_count, d, rng, dtype)
                      if schema.dense_count else None)
        self.tasks = TaskTokens(t, d, rng, dtype)
        self.layers = [build_layer(kind, cfg, rng, prefix=f"layer{k}", dtype=dtype) for k in range(num_layers)]
        hidden = 2 * d
        if cfg.residual_norm and num_layers:
            self.final_g = nx.parameter(np.ones(d, dtype), "final_norm.gain")
            self.final_b = nx.parameter(np.zeros(d, dtype), "final_norm.bias")
        else:
            self.final_g = self.final_b = None
        self.tower_w1 = nx.parameter(rng.normal(0, 1 / math.sqrt(t * d), (t * d, hidden)).astype(dtype),
                                     "tower.w1")
        self.tower_b1 = nx.parameter(np.zeros(hidden, dtype), "tower.b1")
        self.tower_w2 = nx.parameter(rng.normal(0, 1 / math.sqrt(hidden), (hidden, t)).astype(dtype), "tower.w2")
        self.tower_b2 = nx.parameter(np.zeros(t, dtype), "tower.b2")

    # ------------------------------------------------------------------
    def parameters(self) -> list[nx.Tensor]:
        params = self.embeddings.parameters()
        if self.dense is not None:
            params += self.dense.parameters()
        params += self.tasks.parameters()
        for layer in self.layers:
            params += layer.parameters()
        if self.final_g is not None:
            params += [self.final_g, self.final_b]
        params += [self.tower_w1, self.tower_b1, self.tower_w2, self.tower_b2]
        return params

    def fit_normalizer(self, train: Dataset) -> None:
        if self.dense is not None:
            self.dense.normalizer = CdfNormalizer.fit(train.dense)

    def encode(self, batch: Dataset) -> nx.Tensor:
        """Embedding list ``(L, B, d)`` for a batch."""
        if len(batch) == 0:
            raise DataError("empty batch")
        batch.validate(self.schema)
        B = len(batch)
        cat = embed_categorical(batch.categorical, self.embeddings)
        dense = None
        if self.dense is not None:
            xn = normalize_dense(batch.dense, self.dense.normalizer).astype(self.dtype)
            dense = project_dense(xn, self.dense)
        return assemble_embedding_list(cat, dense, self.tasks, B)

    def logits(self, batch: Dataset) -> nx.Tensor:
        E = self.encode(batch)
        T = stack_layers(E, self.layers, self.cfg)                  # (t, B, d)
        if self.final_g is not None:
            T = nx.layer_norm(T, self.final_g, self.final_b)
        t, B, d = T.shape
        x = nx.reshape(nx.transpose(T, (1, 0, 2)), (B, t * d))
        h = nx.gelu(nx.add_bias(nx.matmul(x, self.tower_w1), self.tower_b1))
        return nx.add_bias(nx.matmul(h, self.tower_w2), self.tower_b2)  # (B, t)

    def forward(self, batch: Dataset) -> nx.Tensor:
        """Probabilities ``(B, t)``."""
        return nx.sigmoid(self.logits(batch))

    __call__ = forward

    def predict(self, data: Dataset, batch_size: int = 4096) -> np.ndarray:
        """Probabilities ``(n, t)`` without recording a graph."""
        out = []
        with nx.no_grad():
            for s in range(0, len(data), batch_size):
                out.append(self.forward(data[np.arange(s, min(s + batch_size, len(data)))]).data)
        if not out:
            raise DataError("cannot predict on an empty dataset")
        return np.concatenate(out).astype(np.float64)

    def loss(self, batch: Dataset) -> nx.Tensor:
        y = np.repeat(batch.labels[:, None], self.schema.task_count, axis=1)
        return nx.bce_with_logits(self.logits(batch), y)

    # ------------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.parameters()}
        if self.dense is not None and self.dense.normalizer is not None:
            out.update(self.dense.normalizer.state())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise VersionError(f"checkpoint lacks parameter {p.name}")
            if tuple(state[p.name].shape) != p.shape:
                raise VersionError(f"parameter {p.name}: shape {state[p.name].shape} != {p.shape}")
            p.data = np.ascontiguousarray(state[p.name], dtype=self.dtype)
        if self.dense is not None and "normalizer.0.quantiles" in state:
            self.dense.normalizer = CdfNormalizer.from_state(state, self.schema.dense_count)

    def config(self) -> dict:
        return {"schema": self.schema.to_dict(), "kind": self.kind, "num_layers": self.num_layers,
                "layer": self.cfg.to_dict(), "seed": self.seed, "dtype": self.dtype.name}

    def save(self, path) -> None:
        checkpoint.save(path, self.state(), self.config())

    @classmethod
    def from_config(cls, config: dict) -> RankingModel:
        try:
            schema = FeatureSchema.from_dict(config["schema"])
            cfg = LayerConfig(**config["layer"])
            return cls(schema, config["kind"], cfg, config["num_layers"], config["seed"], config["dtype"])
        except (KeyError, TypeError) as exc:
            raise VersionError(f"incompatible checkpoint config: {exc}") from exc

    @classmethod
    def load(cls, path) -> RankingModel:
        state, config = checkpoint.load(path)
        model = cls.from_config(config)
        model.load_state(state)
        return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - update.astype(p.dtype, copy=False)
            if not np.isfinite(p.data).all():
                raise NumericError(f"parameter {p.name} became non-finite after update")

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def train_step(model: RankingModel, batch: Dataset, opt: Adam) -> float:
    """One Adam update on ``batch``; returns the pre-update loss."""
    opt.zero_grad()
    loss = model.loss(batch)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError("non-finite training loss")
    nx.backward(loss)
    opt.step()
    return value


def evaluate(model: RankingModel, data: Dataset, batch_size: int = 4096) -> dict[str, float]:
    if len(data) == 0:
        raise DataError("evaluation split is empty")
    p = model.predict(data, batch_size)[:, 0]
    return {"auc": auc(p, data.labels), "logloss": logloss(p, data.labels)}


@dataclass
class FitResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_auc: float = float("-inf")
    best_state: dict[str, np.ndarray] = field(default_factory=dict)
    timings_ms: list[float] = field(default_factory=list)


def fit(model: RankingModel, train: Dataset, valid: Dataset, cfg: TrainConfig,
        checkpoint_path=None, on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, validating after each.

    The parameters with the best validation AUC are kept (epoch 0 = the
    initial parameters) and written to ``checkpoint_path`` when given.
    History records exclude wall time so that they are reproducible; the
    per-epoch wall time is returned separately and passed to ``on_epoch``.
    """
    if len(train) == 0 or len(valid) == 0:
        raise DataError("train and valid splits must be non-empty")
    if model.dense is not None and model.dense.normalizer is None:
        model.fit_normalizer(train)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    result = FitResult(best_state=_snapshot(model))
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n) if cfg.shuffle else np.arange(n)
        total, count = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            total += train_step(model, train[idx], opt) * len(idx)
            count += len(idx)
        metrics = evaluate(model, valid, cfg.eval_batch)
        wall_ms = (time.perf_counter() - t0) * 1e3
        record = {"epoch": epoch, "train_loss": total / count,
                  "valid_auc": metrics["auc"], "valid_logloss": metrics["logloss"]}
        result.history.append(record)
        result.timings_ms.append(wall_ms)
        log.info("epoch %d train_loss=%.5f valid_auc=%.5f", epoch, record["train_loss"], record["valid_auc"])
        if on_epoch is not None:
            on_epoch({**record, "wall_ms": wall_ms})
        if metrics["auc"] > result.best_auc:
            result.best_auc = metrics["auc"]
            result.best_epoch = epoch
            result.best_state = _snapshot(model)
            if checkpoint_path is not None:
                model.save(checkpoint_path)
    if cfg.restore_best and result.best_epoch:
        model.load_state(result.best_state)
    return result


def _snapshot(model: RankingModel) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in model.state().items()}


def build_model(schema: FeatureSchema, cfg: TrainConfig, layer_cfg: LayerConfig | None = None,
                dtype=np.float32) -> RankingModel:
    return RankingModel(schema, cfg.layer, layer_cfg, cfg.num_layers, cfg.seed, dtype)
