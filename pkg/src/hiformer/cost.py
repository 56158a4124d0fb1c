"""Analytical FLOPs / parameter model, wall-clock benchmark, and spectra.

Two counting conventions are reported, never mixed:

``mac``
    Multiply-accumulate counts per example, derived from the layer shapes
    with general ``d_k``, ``d_v``, ``d_f`` and ``H``. With ``d_k = d_v = d/H``
    and ``d_f = 4d`` they reduce to the familiar closed forms
    (QKV ``3L^2d^2``, attention ``2L^2d``, output ``Ld^2``, FFN ``8Ld^2``; see
    :func:`mac_closed_form`). In that closed form the attention term
    covers both the score product and the value mix.
``exact``
    ``2*m*k*n`` FLOPs for every matmul the implementation in
    :mod:`hiformer.interaction` actually executes (element-wise work such
    as softmax, GELU and normalization is not counted).

The two differ by the factor 2 everywhere except the pruned composite
query, where the implementation still reads the whole flattened list.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .interaction import LayerConfig

FLOP_STAGES = ("qkv_projection", "attention_scores", "attention_mix", "output_projection", "ffn")
PARAM_STAGES = ("qkv_projection", "output_projection", "ffn", "layer_norm", "position_encoding")
CONFIG_FIELDS = ("length", "d", "heads", "d_k", "d_v", "d_f", "r_k", "r_v", "tasks")


@dataclass
class CostReport:
    name: str
    convention: str
    flops: dict[str, int]
    params: dict[str, int]
    config: dict[str, int]
    pruned: bool = False
    detail: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    def record(self) -> dict:
        row = {"name": self.name, "convention": self.convention, "pruned": self.pruned}
        row.update(self.config)
        row.update({f"flops.{k}": v for k, v in self.flops.items()})
        row.update({f"flops.{k}": v for k, v in self.detail.items()})
        row["flops.total"] = self.total_flops
        row.update({f"params.{k}": v for k, v in self.params.items()})
        row["params.total"] = self.total_params
        return row


def _echo(cfg: LayerConfig) -> dict[str, int]:
    return {k: int(getattr(cfg, k)) for k in CONFIG_FIELDS}


def mac_closed_form(L: int, d: int) -> dict[str, int]:
    """Reference per-stage costs, valid for d_k = d_v = d/H, d_f = 4d."""
    return {"qkv_projection": 3 * L * L * d * d, "attention": 2 * L * L * d,
            "output_projection": L * d * d, "ffn": 8 * L * d * d}


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


def _attention_flops(cfg: LayerConfig, n_q: int) -> tuple[int, int]:
    L, H = cfg.length, cfg.heads
    return n_q * L * H * cfg.d_k, n_q * L * H * cfg.d_v


def _tail_flops(cfg: LayerConfig, n_q: int) -> tuple[int, int]:
    d, H = cfg.d, cfg.heads
    return n_q * H * cfg.d_v * d, 2 * n_q * d * cfg.d_f


def _rank_warnings(cfg: LayerConfig) -> list[str]:
    notes = []
    if cfg.r_k > cfg.max_rank_k:
        notes.append(f"r_k={cfg.r_k} exceeds full rank {cfg.max_rank_k}")
    if cfg.r_v > cfg.max_rank_v:
        notes.append(f"r_v={cfg.r_v} exceeds full rank {cfg.max_rank_v}")
    for n in notes:
        warnings.warn(n, stacklevel=3)
    return notes


def layer_flops(kind: str, cfg: LayerConfig, pruned: bool = False, convention: str = "mac") -> CostReport:
    """Per-example cost of one interaction layer.

    ``kind`` is ``homo``, ``homo-pe``, ``hetero``, ``hiformer-dense`` or
    ``hiformer-lowrank``. ``pruned`` restricts queries, output projection
    and FFN to the ``t`` task rows.
    """
    if convention not in ("mac", "exact"):
        raise ConfigError(f"unknown convention {convention!r}")
    L, d, H, t = cfg.length, cfg.d, cfg.heads, cfg.tasks
    dk, dv = cfg.d_k, cfg.d_v
    n_q = t if pruned else L
    notes = []
    if kind in ("homo", "homo-pe", "hetero"):
        q, k, v = n_q * d * H * dk, L * d * H * dk, L * d * H * dv
    elif kind == "hiformer-dense":
        q, k, v = H * L * d * n_q * dk, H * L * d * L * dk, H * L * d * L * dv
    elif kind == "hiformer-lowrank":
        notes = _rank_warnings(cfg)
        rk, rv = cfg.r_k, cfg.r_v
        if convention == "mac":
            q = H * n_q * rk * (d + dk)
        else:
            # the flattened list is always multiplied by the left factor in full
            q = H * (L * d * rk + rk * n_q * dk)
        k = H * L * rk * (d + dk)
        v = H * L * rv * (d + dv)
        notes.append("low-rank projection counts are summed over all H heads")
    else:
        raise ConfigError(f"unknown layer kind {kind!r}")
    scores, mix = _attention_flops(cfg, n_q)
    out, ffn = _tail_flops(cfg, n_q)
    scale_ = 1 if convention == "mac" else 2
    flops = dict(zip(FLOP_STAGES, (scale_ * (q + k + v), scale_ * scores, scale_ * mix, scale_ * out, scale_ * ffn)))
    detail = {"q_projection": scale_ * q, "k_projection": scale_ * k, "v_projection": scale_ * v}
    base = kind.split("-")[0] if kind.startswith("hiformer") else kind
    composite = "dense" if kind == "hiformer-dense" else "lowrank"
    params = params_count(base, _with(cfg, composite=composite)).params
    return CostReport(kind, convention, flops, params, _echo(cfg), pruned, detail, notes)


def _with(cfg: LayerConfig, **kw) -> LayerConfig:
    from dataclasses import replace
    return replace(cfg, **kw)


def flops_dense_hiformer(cfg: LayerConfig, convention: str = "mac") -> CostReport:
    return layer_flops("hiformer-dense", cfg, False, convention)


def flops_lowrank_hiformer(cfg: LayerConfig, convention: str = "mac") -> CostReport:
    return layer_flops("hiformer-lowrank", cfg, False, convention)


def flops_pruned_last_layer(cfg: LayerConfig, convention: str = "mac") -> CostReport:
    if cfg.tasks < 1:
        raise ConfigError("pruning needs at least one task row")
    return layer_flops("hiformer-lowrank", cfg, True, convention)


def pruned_closed_form(cfg: LayerConfig) -> int:
    """Sum of the pruned-last-layer terms, written out term by term:
    query t r_k(d+d_k), key L r_k(d+d_k), value L r_v(d+d_v) per head,
    attention L t H (d_k+d_v), output t H d_v d, FFN 2 t d d_f."""
    L, d, H, t = cfg.length, cfg.d, cfg.heads, cfg.tasks
    dk, dv, rk, rv = cfg.d_k, cfg.d_v, cfg.r_k, cfg.r_v
    return (H * (t * rk * (d + dk) + L * rk * (d + dk) + L * rv * (d + dv))
            + L * t * H * (dk + dv) + t * H * dv * d + 2 * t * d * cfg.d_f)


def break_even(cfg: LayerConfig) -> dict[str, float]:
    """Rank thresholds below which a factored projection is cheaper.

    ``exact_*`` compares ``L r (d + w)`` with the dense ``L d * L w`` per
    head; ``rule_*`` is the common ``L w / 2`` rule, which coincides
    with the exact threshold when ``w == d`` and is a sufficient condition
    whenever ``w <= d``.
    """
    L, d = cfg.length, cfg.d
    return {
        "exact_k": L * d * cfg.d_k / (d + cfg.d_k),
        "exact_v": L * d * cfg.d_v / (d + cfg.d_v),
        "rule_k": L * cfg.d_k / 2,
        "rule_v": L * cfg.d_v / 2,
    }


@dataclass
class ParityWitness:
    homo: CostReport
    hetero: CostReport

    @property
    def equal(self) -> bool:
        return self.homo.flops == self.hetero.flops

    def __bool__(self) -> bool:
        return self.equal


def flops_equal_homo_hetero(cfg: LayerConfig, pruned: bool = False, convention: str = "mac") -> ParityWitness:
    """Homogeneous and heterogeneous layers run the same operations."""
    w = ParityWitness(layer_flops("homo", cfg, pruned, convention), layer_flops("hetero", cfg, pruned, convention))
    if not w.equal:
        raise AssertionError(f"FLOPs differ: {w.homo.flops} vs {w.hetero.flops}")
    return w


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def params_count(kind: str, cfg: LayerConfig) -> CostReport:
    """Exact parameter count per stage; matches the tensors a layer owns."""
    L, d, H = cfg.length, cfg.d, cfg.heads
    dk, dv, df = cfg.d_k, cfg.d_v, cfg.d_f
    per_qkv = d * H * (2 * dk + dv)
    per_out = H * dv * d
    per_ffn = 2 * d * df + df + d
    pe = 0
    if kind in ("homo", "homo-pe"):
        qkv, out, ffn = per_qkv, per_out, per_ffn
        pe = L * d if kind == "homo-pe" else 0
    elif kind in ("hetero", "hiformer"):
        out = per_out if cfg.tie_output else L * per_out
        ffn = per_ffn if cfg.tie_ffn else L * per_ffn
        if kind == "hetero":
            qkv = L * per_qkv
        elif cfg.composite == "dense":
            qkv = H * (L * d * L * dk * 2 + L * d * L * dv)
        else:
            qkv = H * (cfg.r_k * (L * d + L * dk) * 2 + cfg.r_v * (L * d + L * dv))
    else:
        raise ConfigError(f"unknown layer kind {kind!r}")
    norm = 4 * d if cfg.residual_norm else 0
    params = dict(zip(PARAM_STAGES, (qkv, out, ffn, norm, pe)))
    flops = dict.fromkeys(FLOP_STAGES, 0)
    return CostReport(f"params:{kind}", "exact", flops, params, _echo(cfg))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def reports_to_csv(reports: Sequence[CostReport]) -> str:
    rows = [r.record() for r in reports]
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def reports_to_json(reports: Sequence[CostReport]) -> str:
    return "\n".join(json.dumps(r.record(), sort_keys=True) for r in reports) + "\n"


def rows_to_csv(rows: Sequence[Mapping]) -> str:
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# wall clock
# ---------------------------------------------------------------------------


def time_callable(fn: Callable[[], object], repeats: int, warmup: int = 1) -> np.ndarray:
    """Wall times in ms of ``repeats`` calls after ``warmup`` discarded calls."""
    for _ in range(warmup):
        fn()
    out = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn()
        out[i] = (time.perf_counter() - t0) * 1e3
    return out


def bench_forward(cases: Mapping[str, tuple], batch_sizes: Sequence[int], repeats: int = 5,
                  warmup: int = 1, baseline: str | None = None, seed: int = 0) -> list[dict]:
    """Median / min / p95 forward wall time per case and batch size.

    ``cases`` maps a name to ``(layer, prune)``. Inputs are random
    ``(L, B, d)`` lists drawn from ``seed``. ``normalized`` divides by the
    baseline case's median at the same batch size.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    rows = []
    for b in batch_sizes:
        for name, (layer, prune) in cases.items():
            cfg = layer.cfg
            rng = np.random.default_rng(seed)
            E = nx.Tensor(rng.standard_normal((cfg.length, b, cfg.d)).astype(layer.dtype))

            def run(layer=layer, E=E, prune=prune):
                with nx.no_grad():
                    layer.forward(E, prune=prune)

            times = time_callable(run, repeats, warmup)
            rows.append({"name": name, "length": cfg.length, "batch": b, "repeats": repeats,
                         "median_ms": float(np.median(times)), "min_ms": float(times.min()), "p95_ms": float(np.percentile(times, 95)),
                         "low_confidence": repeats < 3})
    if baseline is not None:
        base = {r["batch"]: r["median_ms"] for r in rows if r["name"] == baseline}
        if not base:
            raise ConfigError(f"baseline case {baseline!r} not benchmarked")
        for r in rows:
            r["normalized"] = r["median_ms"] / base[r["batch"]]
    return rows


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

MAX_SVD_ENTRIES = 1 << 22


def singular_values(matrix, tol: float = 1e-9, max_iter: int = 10_000, top: int | None = None,
                    seed: int = 0) -> np.ndarray:
    """Singular values (non-increasing) by power iteration with deflation.

    Each step iterates ``v <- A^T A v`` until the pair residual
    ``|A^T u - sigma v|`` is at most ``tol * sigma``, then removes
    ``sigma u v^T``.
    Once the remaining matrix is numerically zero the rest are reported
    as 0.
    """
    A = np.array(matrix, dtype=np.float64)
    if A.ndim != 2:
        raise ConfigError("singular_values needs a 2-D matrix")
    if A.size > MAX_SVD_ENTRIES:
        raise ConfigError(f"matrix with {A.size} entries exceeds the {MAX_SVD_ENTRIES}-entry limit")
    m, n = A.shape
    k = min(m, n) if top is None else min(top, m, n)
    rng = np.random.default_rng(seed)
    out = np.zeros(k)
    scale0 = np.linalg.norm(A)
    if scale0 == 0.0:
        return out
    for i in range(k):
        if np.linalg.norm(A) <= 1e-13 * scale0:
            break
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        sigma, u = 0.0, np.zeros(m)
        for _ in range(max_iter):
            u = A @ v
            sigma = np.linalg.norm(u)
            if sigma == 0.0:
                break
            u /= sigma
            w = A.T @ u
            # residual of the singular pair (sigma, u, v)
            if np.linalg.norm(w - sigma * v) <= tol * sigma:
                break
            v = w / np.linalg.norm(w)
        out[i] = sigma
        A -= sigma * np.outer(u, v)
    return np.sort(out)[::-1]


def singular_value_report(matrix, **kw) -> str:
    """CSV ``index,singular_value`` of a (materialized) composite matrix."""
    values = singular_values(matrix, **kw)
    lines = ["index,singular_value"] + [f"{i},{float(v)!r}" for i, v in enumerate(values)]
    return "\n".join(lines) + "\n"
