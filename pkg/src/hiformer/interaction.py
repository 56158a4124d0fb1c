"""Feature-interaction layers over an ``(L, B, d)`` embedding list.

Three parameterizations share one attention/FFN skeleton:

* :class:`HomoLayer` - vanilla multi-head self-attention, projections shared
  by every position (optionally with a learned per-position encoding).
* :class:`HeteroLayer` - every position owns its query/key/value, output and
  FFN weights.
* :class:`HiformerLayer` - queries/keys/values come from composite
  projections of the flattened ``L*d`` list, stored as low-rank factors
  (or as the dense ``Ld x L d_k`` matrix for cost comparisons).

Any layer can run with ``prune=True``: only the last ``t`` (task) rows are
used as queries, and only those rows are returned.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError

LAYER_TYPES = ("homo", "homo-pe", "hetero", "hiformer")


@dataclass(frozen=True)
class LayerConfig:
    d: int = 128
    heads: int = 4
    d_k: int = 16
    d_v: int = 64
    d_f: int | None = None
    length: int = 1
    tasks: int = 1
    r_k: int = 128
    r_v: int = 1024
    prune_last: bool = False
    residual_norm: bool = True
    tie_output: bool = False
    tie_ffn: bool = False
    composite: str = "lowrank"

    def __post_init__(self):
        if self.d_f is None:
            object.__setattr__(self, "d_f", 4 * self.d)
        for name in ("d", "heads", "d_k", "d_v", "d_f", "length", "tasks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.tasks > self.length:
            raise ConfigError(f"task count {self.tasks} exceeds list length {self.length}")
        if self.composite not in ("lowrank", "dense"):
            raise ConfigError(f"composite must be 'lowrank' or 'dense', got {self.composite!r}")

    @property
    def max_rank_k(self) -> int:
        return min(self.length * self.d, self.length * self.d_k)

    @property
    def max_rank_v(self) -> int:
        return min(self.length * self.d, self.length * self.d_v)

    def clamp_ranks(self) -> LayerConfig:
        """Cap r_k / r_v at the full rank of the composite matrices."""
        return replace(self, r_k=min(self.r_k, self.max_rank_k), r_v=min(self.r_v, self.max_rank_v))

    def validate_ranks(self) -> None:
        if not 1 <= self.r_k <= self.max_rank_k:
            raise ConfigError(f"r_k={self.r_k} outside [1, {self.max_rank_k}]")
        if not 1 <= self.r_v <= self.max_rank_v:
            raise ConfigError(f"r_v={self.r_v} outside [1, {self.max_rank_v}]")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def positionwise(x: nx.Tensor, w: nx.Tensor) -> nx.Tensor:
    """Apply ``w`` to every row of ``x`` ``(P, B, k)``.

    A 2-D ``w`` ``(k, n)`` is shared by all positions; a 3-D ``w``
    ``(P, k, n)`` gives position p its own matrix.
    """
    p, b, k = x.shape
    if w.ndim == 2:
        return nx.reshape(nx.matmul(nx.reshape(x, (p * b, k)), w), (p, b, w.shape[1]))
    if w.shape[0] != p:
        raise DimensionError(f"per-position weight has {w.shape[0]} slots for {p} positions")
    return nx.matmul(x, w)


def positionwise_bias(x: nx.Tensor, b: nx.Tensor) -> nx.Tensor:
    if b.ndim == 1:
        return nx.add_bias(x, b)
    return nx.add(x, nx.expand(b, 1, x.shape[1]))


def attend(q: nx.Tensor, k: nx.Tensor, v: nx.Tensor, heads: int, d_k: int, d_v: int):
    """Scaled dot-product attention.

    ``q`` is ``(Lq, B, H*d_k)``, ``k`` ``(L, B, H*d_k)``, ``v`` ``(L, B, H*d_v)``.
    Returns the head-concatenated mix ``(Lq, B, H*d_v)`` and the attention
    probabilities ``(B, H, Lq, L)``.
    """
    lq, b, _ = q.shape
    lk = k.shape[0]
    qh = nx.reshape(nx.transpose(nx.reshape(q, (lq, b, heads, d_k)), (1, 2, 0, 3)), (b * heads, lq, d_k))
    kh = nx.reshape(nx.transpose(nx.reshape(k, (lk, b, heads, d_k)), (1, 2, 3, 0)), (b * heads, d_k, lk))
    vh = nx.reshape(nx.transpose(nx.reshape(v, (lk, b, heads, d_v)), (1, 2, 0, 3)), (b * heads, lk, d_v))
    probs = nx.softmax_rows(nx.scale(nx.matmul(qh, kh), 1.0 / math.sqrt(d_k)))
    mix = nx.matmul(probs, vh)
    mix = nx.reshape(nx.transpose(nx.reshape(mix, (b, heads, lq, d_v)), (2, 0, 1, 3)), (lq, b, heads * d_v))
    return mix, probs


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(size=shape) * std).astype(dtype)


def prune_queries(E: nx.Tensor, cfg: LayerConfig) -> tuple[nx.Tensor, int]:
    """Last ``t`` rows of ``E`` (the task rows) and their start index."""
    L = E.shape[0]
    if cfg.tasks > L:
        raise ConfigError(f"task count {cfg.tasks} exceeds list length {L}")
    start = L - cfg.tasks
    return nx.slice_axis(E, 0, start, L), start


class _Layer:
    """Attention + FFN block; subclasses define the projections."""

    kind = ""

    def __init__(self, cfg: LayerConfig, prefix: str, dtype):
        self.cfg = cfg
        self.prefix = prefix
        self.dtype = np.dtype(dtype)
        self.record_attention = False
        self.last_attention: np.ndarray | None = None
        d = cfg.d
        if cfg.residual_norm:
            self.ln1_g = self._param(np.ones(d), "ln1.gain")
            self.ln1_b = self._param(np.zeros(d), "ln1.bias")
            self.ln2_g = self._param(np.ones(d), "ln2.gain")
            self.ln2_b = self._param(np.zeros(d), "ln2.bias")

    def _param(self, value, name: str) -> nx.Tensor:
        return nx.parameter(np.asarray(value, dtype=self.dtype), f"{self.prefix}.{name}")

    def parameters(self) -> list[nx.Tensor]:
        return [v for v in vars(self).values() if isinstance(v, nx.Tensor)]

    # hooks -----------------------------------------------------------------
    def prepare(self, E: nx.Tensor) -> nx.Tensor:
        return E

    def queries(self, X: nx.Tensor, start: int) -> nx.Tensor:
        raise NotImplementedError

    def keys(self, X: nx.Tensor) -> nx.Tensor:
        raise NotImplementedError

    def values(self, X: nx.Tensor) -> nx.Tensor:
        raise NotImplementedError

    def output(self, mix: nx.Tensor, start: int) -> nx.Tensor:
        return positionwise(mix, self._slice(self.o, start, start + mix.shape[0]))

    def ffn(self, x: nx.Tensor, start: int) -> nx.Tensor:
        stop = start + x.shape[0]
        h = nx.gelu(positionwise_bias(positionwise(x, self._slice(self.w1, start, stop)),
                                      self._slice_bias(self.b1, start, stop)))
        return positionwise_bias(positionwise(h, self._slice(self.w2, start, stop)),
                                 self._slice_bias(self.b2, start, stop))

    @staticmethod
    def _slice(w: nx.Tensor, start: int, stop: int) -> nx.Tensor:
        if w.ndim == 3 and (start, stop) != (0, w.shape[0]):
            return nx.slice_axis(w, 0, start, stop)
        return w

    @staticmethod
    def _slice_bias(b: nx.Tensor, start: int, stop: int) -> nx.Tensor:
        if b.ndim == 2 and (start, stop) != (0, b.shape[0]):
            return nx.slice_axis(b, 0, start, stop)
        return b

    # forward ---------------------------------------------------------------
    def _check_input(self, E: nx.Tensor) -> None:
        if E.ndim != 3 or E.shape[0] != self.cfg.length or E.shape[2] != self.cfg.d:
            raise DimensionError(
                f"{self.kind} layer expects (L={self.cfg.length}, B, d={self.cfg.d}), got {E.shape}")

    def forward(self, E: nx.Tensor, prune: bool = False) -> nx.Tensor:
        """``(L, B, d)`` -> ``(L, B, d)``, or ``(t, B, d)`` when pruned."""
        self._check_input(E)
        cfg = self.cfg
        L = E.shape[0]
        E = self.prepare(E)
        X = nx.layer_norm(E, self.ln1_g, self.ln1_b) if cfg.residual_norm else E
        if prune:
            Xq, start = prune_queries(X, cfg)
        else:
            Xq, start = X, 0
        q = self.queries(X, start)
        mix, probs = attend(q, self.keys(X), self.values(X), cfg.heads, cfg.d_k, cfg.d_v)
        if self.record_attention:
            self.last_attention = probs.data.reshape(E.shape[1], cfg.heads, Xq.shape[0], L).copy()
        attn = self.output(mix, start)
        if cfg.residual_norm:
            Eq = nx.slice_axis(E, 0, start, L) if prune else E
            h = nx.add(Eq, attn)
            return nx.add(h, self.ffn(nx.layer_norm(h, self.ln2_g, self.ln2_b), start))
        return self.ffn(attn, start)

    __call__ = forward

    def attention(self, E: nx.Tensor) -> np.ndarray:
        """Attention probabilities ``(B, H, L, L)`` for an unpruned pass."""
        prev = self.record_attention
        self.record_attention = True
        try:
            with nx.no_grad():
                self.forward(E)
            return self.last_attention
        finally:
            self.record_attention = prev


# ---------------------------------------------------------------------------
# homogeneous
# ---------------------------------------------------------------------------


class HomoLayer(_Layer):
    kind = "homo"

    def __init__(self, cfg: LayerConfig, rng: np.random.Generator, prefix: str = "layer0",
                 position_encoding: bool = False, dtype=np.float32):
        super().__init__(cfg, prefix, dtype)
        d, H = cfg.d, cfg.heads
        s = 1.0 / math.sqrt(d)
        self.wq = self._param(_normal(rng, (d, H * cfg.d_k), s, dtype), "wq")
        self.wk = self._param(_normal(rng, (d, H * cfg.d_k), s, dtype), "wk")
        self.wv = self._param(_normal(rng, (d, H * cfg.d_v), s, dtype), "wv")
        self.o = self._param(_normal(rng, (H * cfg.d_v, d), 1 / math.sqrt(H * cfg.d_v), dtype), "o")
        self.w1 = self._param(_normal(rng, (d, cfg.d_f), s, dtype), "ffn.w1")
        self.b1 = self._param(np.zeros(cfg.d_f), "ffn.b1")
        self.w2 = self._param(_normal(rng, (cfg.d_f, d), 1 / math.sqrt(cfg.d_f), dtype), "ffn.w2")
        self.b2 = self._param(np.zeros(d), "ffn.b2")
        self.pos = None
        if position_encoding:
            self.kind = "homo-pe"
            self.pos = self._param(_normal(rng, (cfg.length, d), s, dtype), "pos")

    def prepare(self, E):
        if self.pos is None:
            return E
        return nx.add(E, nx.expand(self.pos, 1, E.shape[1]))

    def queries(self, X, start):
        if start:
            X = nx.slice_axis(X, 0, start, X.shape[0])
        return positionwise(X, self.wq)

    def keys(self, X):
        return positionwise(X, self.wk)

    def values(self, X):
        return positionwise(X, self.wv)


# ---------------------------------------------------------------------------
# heterogeneous
# ---------------------------------------------------------------------------


class HeteroLayer(_Layer):
    """Per-position Q_i, K_i, V_i (stacked as ``(L, d, H*d_k)``), O_i and FFN_i."""

    kind = "hetero"

    def __init__(self, cfg: LayerConfig, rng: np.random.Generator, prefix: str = "layer0", dtype=np.float32):
        super().__init__(cfg, prefix, dtype)
        L, d, H = cfg.length, cfg.d, cfg.heads
        s = 1.0 / math.sqrt(d)
        self.wq = self._param(_normal(rng, (L, d, H * cfg.d_k), s, dtype), "wq")
        self.wk = self._param(_normal(rng, (L, d, H * cfg.d_k), s, dtype), "wk")
        self.wv = self._param(_normal(rng, (L, d, H * cfg.d_v), s, dtype), "wv")
        _init_output_ffn(self, rng, dtype)

    def queries(self, X, start):
        if start:
            X = nx.slice_axis(X, 0, start, X.shape[0])
        return positionwise(X, self._slice(self.wq, start, X.shape[0] + start))

    def keys(self, X):
        return positionwise(X, self.wk)

    def values(self, X):
        return positionwise(X, self.wv)

    @classmethod
    def tied_from(cls, homo: HomoLayer) -> HeteroLayer:
        """Hetero layer whose every per-position matrix copies the shared one."""
        cfg = replace(homo.cfg, tie_output=False, tie_ffn=False)
        layer = cls.__new__(cls)
        _Layer.__init__(layer, cfg, homo.prefix, homo.dtype)
        L = cfg.length
        for name in ("wq", "wk", "wv", "o", "w1", "w2"):
            w = getattr(homo, name).data
            setattr(layer, name, layer._param(np.repeat(w[None], L, axis=0), _PARAM_NAMES[name]))
        for name in ("b1", "b2"):
            b = getattr(homo, name).data
            setattr(layer, name, layer._param(np.repeat(b[None], L, axis=0), _PARAM_NAMES[name]))
        if cfg.residual_norm:
            for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                getattr(layer, name).data[...] = getattr(homo, name).data
        return layer


_PARAM_NAMES = {"wq": "wq", "wk": "wk", "wv": "wv", "o": "o",
                "w1": "ffn.w1", "b1": "ffn.b1", "w2": "ffn.w2", "b2": "ffn.b2"}


def _init_output_ffn(layer: _Layer, rng, dtype) -> None:
    cfg = layer.cfg
    L, d, H = cfg.length, cfg.d, cfg.heads
    o_shape = (H * cfg.d_v, d) if cfg.tie_output else (L, H * cfg.d_v, d)
    layer.o = layer._param(_normal(rng, o_shape, 1 / math.sqrt(H * cfg.d_v), dtype), "o")
    lead = () if cfg.tie_ffn else (L,)
    layer.w1 = layer._param(_normal(rng, lead + (d, cfg.d_f), 1 / math.sqrt(d), dtype), "ffn.w1")
    layer.b1 = layer._param(np.zeros(lead + (cfg.d_f,)), "ffn.b1")
    layer.w2 = layer._param(_normal(rng, lead + (cfg.d_f, d), 1 / math.sqrt(cfg.d_f), dtype), "ffn.w2")
    layer.b2 = layer._param(np.zeros(lead + (d,)), "ffn.b2")


def hetero_scores(E, layer: HeteroLayer) -> np.ndarray:
    """Attention probabilities ``(H, L, L)`` of a single ``(L, d)`` list.

    Entry ``(h, i, j)`` is the softmax over j of
    ``(e_i Q_i^h) . (e_j K_j^h) / sqrt(d_k)``; no normalization is applied
    to ``E`` first.
    """
    E = E if isinstance(E, nx.Tensor) else nx.Tensor(np.asarray(E, dtype=layer.dtype))
    L, d = E.shape
    cfg = layer.cfg
    with nx.no_grad():
        X = nx.reshape(E, (L, 1, d))
        _, probs = attend(positionwise(X, layer.wq), positionwise(X, layer.wk),
                          positionwise(X, layer.wv), cfg.heads, cfg.d_k, cfg.d_v)
    return probs.data.reshape(cfg.heads, L, L)


def hetero_ffn(o_i, i: int, layer: _Layer) -> np.ndarray:
    """Position-specific ``GELU(o W1_i + b1_i) W2_i + b2_i`` for one vector."""
    if not 0 <= i < layer.cfg.length:
        raise ConfigError(f"position {i} outside [0, {layer.cfg.length})")
    x = nx.Tensor(np.asarray(o_i, dtype=layer.dtype).reshape(1, 1, -1))
    with nx.no_grad():
        w1 = layer._slice(layer.w1, i, i + 1)
        b1 = layer._slice_bias(layer.b1, i, i + 1)
        w2 = layer._slice(layer.w2, i, i + 1)
        b2 = layer._slice_bias(layer.b2, i, i + 1)
        h = nx.gelu(positionwise_bias(positionwise(x, w1), b1))
        out = positionwise_bias(positionwise(h, w2), b2)
    return out.data.reshape(-1)


# ---------------------------------------------------------------------------
# Hiformer (composite projections)
# ---------------------------------------------------------------------------


def flatten_list(X: nx.Tensor) -> nx.Tensor:
    """``(L, B, d)`` -> ``(B, L*d)``: concat of the list per example."""
    L, b, d = X.shape
    return nx.reshape(nx.transpose(X, (1, 0, 2)), (b, L * d))


def composite_project(E, left, right) -> np.ndarray:
    """One head's composite projection of a single ``(L, d)`` list.

    Computes ``concat(e_1..e_L) @ left @ right.T`` without forming the
    ``Ld x L d_k`` product, and splits the result into ``L`` rows.
    ``left`` is ``(L*d, r)``, ``right`` is ``(L*d_k, r)``.
    """
    E = np.asarray(E.data if isinstance(E, nx.Tensor) else E)
    left = np.asarray(left.data if isinstance(left, nx.Tensor) else left)
    right = np.asarray(right.data if isinstance(right, nx.Tensor) else right)
    L, d = E.shape
    if left.ndim != 2 or right.ndim != 2 or left.shape[0] != L * d:
        raise ConfigError(f"left factor {left.shape} incompatible with list {E.shape}")
    if left.shape[1] != right.shape[1] or left.shape[1] < 1 or right.shape[0] % L:
        raise ConfigError(f"factor shapes {left.shape} / {right.shape} are inconsistent")
    with nx.no_grad():
        flat = nx.Tensor(E.reshape(1, L * d))
        z = nx.matmul(nx.matmul(flat, nx.Tensor(left)), nx.Tensor(np.ascontiguousarray(right.T)))
    return z.data.reshape(L, right.shape[0] // L)


class HiformerLayer(_Layer):
    """Composite-projection attention.

    In ``lowrank`` mode head h stores ``left`` ``(L*d, r)`` and ``right``
    ``(L*d_k, r)`` factors for each of q/k/v (stacked over heads). In
    ``dense`` mode it stores the full ``(H, L*d, L*d_k)`` matrices.
    """

    kind = "hiformer"

    def __init__(self, cfg: LayerConfig, rng: np.random.Generator, prefix: str = "layer0", dtype=np.float32):
        super().__init__(cfg, prefix, dtype)
        L, d, H = cfg.length, cfg.d, cfg.heads
        Ld = L * d
        if cfg.composite == "lowrank":
            cfg.validate_ranks()
            for which, width, r in (("q", cfg.d_k, cfg.r_k), ("k", cfg.d_k, cfg.r_k), ("v", cfg.d_v, cfg.r_v)):
                std = (Ld * r) ** -0.25
                setattr(self, f"{which}_left", self._param(_normal(rng, (H, Ld, r), std, dtype), f"{which}.left"))
                setattr(self, f"{which}_right", self._param(_normal(rng, (H, L * width, r), std, dtype),
                                                            f"{which}.right"))
        else:
            for which, width in (("q", cfg.d_k), ("k", cfg.d_k), ("v", cfg.d_v)):
                setattr(self, f"{which}_full", self._param(_normal(rng, (H, Ld, L * width), Ld ** -0.5, dtype),
                                                           f"{which}.full"))
        _init_output_ffn(self, rng, dtype)

    def _project(self, X: nx.Tensor, which: str, width: int, start: int = 0) -> nx.Tensor:
        L, b, _ = X.shape
        H = self.cfg.heads
        stop = L
        flat = nx.expand(flatten_list(X), 0, H)                       # (H, B, Ld)
        if self.cfg.composite == "lowrank":
            right = getattr(self, f"{which}_right")
            if start:
                right = nx.slice_axis(right, 1, start * width, stop * width)
            z = nx.matmul(nx.matmul(flat, getattr(self, f"{which}_left")), nx.swap_last(right))
        else:
            full = getattr(self, f"{which}_full")
            if start:
                full = nx.slice_axis(full, 2, start * width, stop * width)
            z = nx.matmul(flat, full)
        n = stop - start                                              # z: (H, B, n*width)
        return nx.reshape(nx.transpose(nx.reshape(z, (H, b, n, width)), (2, 1, 0, 3)), (n, b, H * width))

    def queries(self, X, start):
        return self._project(X, "q", self.cfg.d_k, start)

    def keys(self, X):
        return self._project(X, "k", self.cfg.d_k)

    def values(self, X):
        return self._project(X, "v", self.cfg.d_v)

    def implied_matrix(self, which: str, head: int) -> np.ndarray:
        """Dense ``L*d x L*width`` composite matrix for one head."""
        if self.cfg.composite == "dense":
            return getattr(self, f"{which}_full").data[head].astype(np.float64)
        left = getattr(self, f"{which}_left").data[head].astype(np.float64)
        right = getattr(self, f"{which}_right").data[head].astype(np.float64)
        return left @ right.T

    @classmethod
    def from_hetero(cls, hetero: HeteroLayer) -> HiformerLayer:
        """Exact full-rank factorization of the block-diagonal composite
        matrices implied by ``hetero``'s per-position Q/K/V; output and FFN
        weights are copied."""
        cfg = hetero.cfg
        L, d, H = cfg.length, cfg.d, cfg.heads
        r_k, r_v = cfg.max_rank_k, cfg.max_rank_v
        cfg = replace(cfg, r_k=r_k, r_v=r_v, composite="lowrank")
        layer = cls.__new__(cls)
        _Layer.__init__(layer, cfg, hetero.prefix, hetero.dtype)
        for which, width, w in (("q", cfg.d_k, hetero.wq), ("k", cfg.d_k, hetero.wk), ("v", cfg.d_v, hetero.wv)):
            lefts, rights = [], []
            for h in range(H):
                blocks = [w.data[j][:, h * width:(h + 1) * width].astype(np.float64) for j in range(L)]
                full = _block_diag(blocks)                           # (L*d, L*width)
                if width <= d:
                    lefts.append(full)
                    rights.append(np.eye(L * width))
                else:
                    lefts.append(np.eye(L * d))
                    rights.append(full.T)
            setattr(layer, f"{which}_left", layer._param(np.stack(lefts), f"{which}.left"))
            setattr(layer, f"{which}_right", layer._param(np.stack(rights), f"{which}.right"))
        for name in ("o", "w1", "b1", "w2", "b2"):
            src = getattr(hetero, name)
            setattr(layer, name, layer._param(src.data.copy(), _PARAM_NAMES[name]))
        if cfg.residual_norm:
            for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                getattr(layer, name).data[...] = getattr(hetero, name).data
        return layer


def _block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


# ---------------------------------------------------------------------------
# construction and stacking
# ---------------------------------------------------------------------------


def build_layer(kind: str, cfg: LayerConfig, rng: np.random.Generator, prefix: str = "layer0",
                dtype=np.float32) -> _Layer:
    if kind == "homo":
        return HomoLayer(cfg, rng, prefix, dtype=dtype)
    if kind == "homo-pe":
        return HomoLayer(cfg, rng, prefix, position_encoding=True, dtype=dtype)
    if kind == "hetero":
        return HeteroLayer(cfg, rng, prefix, dtype=dtype)
    if kind == "hiformer":
        return HiformerLayer(cfg, rng, prefix, dtype=dtype)
    raise ConfigError(f"unknown layer type {kind!r}; choose from {LAYER_TYPES}")


def stack_layers(E: nx.Tensor, layers: Sequence[_Layer], cfg: LayerConfig,
                 prune: Sequence[bool] | None = None) -> nx.Tensor:
    """Run ``layers`` in order and return the task rows ``(t, B, d)``.

    ``prune[k]`` selects query pruning for layer k; by default only the last
    layer is pruned, and only when ``cfg.prune_last`` is set. Pruning any
    non-final layer is rejected because later layers need all L rows.
    """
    n = len(layers)
    if prune is None:
        prune = [cfg.prune_last and k == n - 1 for k in range(n)]
    if len(prune) != n:
        raise ConfigError("prune flags must match the number of layers")
    if any(prune[:-1]):
        raise ConfigError("only the final layer may be pruned")
    x = E
    for layer, p in zip(layers, prune):
        x = layer.forward(x, prune=p)
    if x.shape[0] == cfg.tasks:
        return x
    return nx.slice_axis(x, 0, x.shape[0] - cfg.tasks, x.shape[0])
