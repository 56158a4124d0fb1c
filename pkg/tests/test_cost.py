import json
import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiformer import checkpoint
from hiformer import cost
from hiformer.errors import ConfigError
from hiformer.interaction import LayerConfig, build_layer

DEFAULTS = dict(d=128, heads=4, d_k=16, d_v=64, r_k=128, r_v=1024)


def cfg(**kw):
    return LayerConfig(**kw)


@st.composite
def configs(draw):
    L = draw(st.integers(1, 40))
    return LayerConfig(d=draw(st.integers(1, 64)), heads=draw(st.integers(1, 8)), d_k=draw(st.integers(1, 32)),
                       d_v=draw(st.integers(1, 32)), d_f=draw(st.integers(1, 256)), length=L,
                       tasks=draw(st.integers(1, L)), r_k=draw(st.integers(1, 64)), r_v=draw(st.integers(1, 64)))


class TestDenseHiformer:
    def test_worked_example(self):
        rep = cost.flops_dense_hiformer(cfg(d=8, heads=2, d_k=4, d_v=4, length=10))
        assert rep.flops["qkv_projection"] == 19200
        assert rep.flops["attention_scores"] + rep.flops["attention_mix"] == 1600
        assert rep.flops["output_projection"] == 640
        assert rep.flops["ffn"] == 5120

    @pytest.mark.parametrize("d,H", [(8, 2), (12, 3), (16, 4), (5, 1)])
    def test_single_position(self, d, H):
        rep = cost.flops_dense_hiformer(cfg(d=d, heads=H, d_k=d // H, d_v=d // H, length=1))
        assert rep.flops["qkv_projection"] == 3 * d * d
        assert rep.flops["attention_scores"] + rep.flops["attention_mix"] == 2 * d
        assert rep.flops["output_projection"] == d * d
        assert rep.flops["ffn"] == 8 * d * d

    def test_doubling_length(self):
        a = cost.flops_dense_hiformer(cfg(d=8, heads=2, d_k=3, d_v=5, length=7))
        b = cost.flops_dense_hiformer(cfg(d=8, heads=2, d_k=3, d_v=5, length=14))
        for stage in ("qkv_projection", "attention_scores", "attention_mix"):
            assert b.flops[stage] == 4 * a.flops[stage]
        for stage in ("output_projection", "ffn"):
            assert b.flops[stage] == 2 * a.flops[stage]

    @settings(max_examples=60, deadline=None)
    @given(L=st.integers(1, 50), dh=st.integers(1, 16), H=st.integers(1, 8))
    def test_reduces_to_closed_form(self, L, dh, H):
        d = dh * H
        rep = cost.flops_dense_hiformer(cfg(d=d, heads=H, d_k=dh, d_v=dh, length=L))
        closed = cost.mac_closed_form(L, d)
        assert rep.flops["qkv_projection"] == closed["qkv_projection"]
        assert rep.flops["attention_scores"] + rep.flops["attention_mix"] == closed["attention"]
        assert rep.flops["output_projection"] == closed["output_projection"]
        assert rep.flops["ffn"] == closed["ffn"]

    def test_exact_convention_doubles(self):
        c = cfg(d=8, heads=2, d_k=3, d_v=5, length=6)
        mac, exact = cost.flops_dense_hiformer(c), cost.flops_dense_hiformer(c, "exact")
        assert exact.convention == "exact"
        assert {k: 2 * v for k, v in mac.flops.items()} == exact.flops

    def test_unknown_convention(self):
        with pytest.raises(ConfigError):
            cost.flops_dense_hiformer(cfg(), "macs")


class TestLowRank:
    @pytest.mark.parametrize("L,d", [(4, 8), (10, 6), (36, 16)])
    def test_break_even_boundary(self, L, d):
        # with d_k = d the factored key projection costs exactly the dense one at r_k = L d_k / 2
        c = cfg(d=d, heads=2, d_k=d, d_v=d, length=L, r_k=L * d // 2, r_v=L * d // 2)
        low = cost.flops_lowrank_hiformer(c).detail
        dense = cost.flops_dense_hiformer(c).detail
        assert low["k_projection"] == dense["k_projection"]
        assert low["v_projection"] == dense["v_projection"]

    @pytest.mark.parametrize("L", [100, 1000, 10000])
    def test_rank_one_value_is_linear(self, L):
        c = cfg(d=8, heads=2, d_k=4, d_v=4, length=L, r_k=1, r_v=1)
        assert cost.flops_lowrank_hiformer(c).detail["v_projection"] == 2 * L * (8 + 4)

    def test_defaults_crossover(self):
        # with r_v = 1024 the value factors dominate until L = 19, where both totals tie
        def totals(L):
            c = cfg(length=L, **DEFAULTS)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                return cost.flops_lowrank_hiformer(c).total_flops, cost.flops_dense_hiformer(c).total_flops
        assert all(totals(L)[0] > totals(L)[1] for L in range(1, 19))
        low, dense = totals(19)
        assert low == dense
        assert all(totals(L)[0] < totals(L)[1] for L in range(20, 257))

    def test_rank_above_full_warns(self):
        with pytest.warns(UserWarning, match="exceeds full rank"):
            rep = cost.flops_lowrank_hiformer(cfg(d=4, heads=1, d_k=2, d_v=2, length=3, r_k=100, r_v=2))
        assert rep.notes and rep.total_flops > 0

    @pytest.mark.parametrize("L", [2, 5, 9])
    @pytest.mark.parametrize("d", [2, 4, 8])
    def test_break_even_exact_when_dk_equals_d(self, L, d):
        for r in range(1, L * d + 1):
            c = cfg(d=d, heads=2, d_k=d, d_v=d, length=L, r_k=r, r_v=r)
            low = cost.flops_lowrank_hiformer(c).detail
            dense = cost.flops_dense_hiformer(c).detail
            assert (low["k_projection"] < dense["k_projection"]) == (r < L * d / 2)
            assert (low["v_projection"] < dense["v_projection"]) == (r < L * d / 2)

    @settings(max_examples=200, deadline=None)
    @given(L=st.integers(1, 30), d=st.integers(1, 32), dk=st.integers(1, 32), r=st.integers(1, 400))
    def test_exact_threshold(self, L, d, dk, r):
        c = cfg(d=d, heads=1, d_k=dk, d_v=dk, length=L, r_k=r, r_v=r)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            low = cost.flops_lowrank_hiformer(c).detail["k_projection"]
        dense = cost.flops_dense_hiformer(c).detail["k_projection"]
        # integer form of r < L d d_k / (d + d_k)
        assert (low < dense) == (r * (d + dk) < L * d * dk)
        if dk <= d and r < L * dk / 2:
            assert low < dense


class TestPruned:
    def test_full_task_rows_equal_unpruned(self):
        c = cfg(d=16, heads=2, d_k=4, d_v=8, length=6, tasks=6, r_k=8, r_v=8)
        assert cost.flops_pruned_last_layer(c).flops == cost.flops_lowrank_hiformer(c).flops

    def test_linear_growth(self):
        totals = [cost.flops_pruned_last_layer(cfg(length=L, **DEFAULTS)).total_flops
                  for L in (2 ** 12, 2 ** 13, 2 ** 16, 2 ** 17)]
        assert abs(totals[1] / totals[0] - 2) < 0.01
        assert abs(totals[3] / totals[2] - 2) < abs(totals[1] / totals[0] - 2)

    def test_hand_evaluated_defaults(self):
        rep = cost.flops_pruned_last_layer(cfg(length=36, tasks=1, **DEFAULTS))
        # q 4*1*128*(128+16), k 4*36*128*(128+16), v 4*36*1024*(128+64)
        assert rep.detail == {"q_projection": 73728, "k_projection": 2654208, "v_projection": 28311552}
        assert rep.flops == {"qkv_projection": 31039488, "attention_scores": 2304, "attention_mix": 9216,
                             "output_projection": 32768, "ffn": 131072}
        assert rep.total_flops == 31214848
        assert rep.total_flops == cost.pruned_closed_form(rep_cfg := cfg(length=36, tasks=1, **DEFAULTS))
        assert rep.config["length"] == rep_cfg.length and rep.pruned

    @settings(max_examples=100, deadline=None)
    @given(configs())
    def test_closed_form_and_dominance(self, c):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pruned = cost.flops_pruned_last_layer(c)
            full = cost.flops_lowrank_hiformer(c)
        assert pruned.total_flops == cost.pruned_closed_form(c)
        for stage in cost.FLOP_STAGES:
            assert pruned.flops[stage] <= full.flops[stage]
        if c.tasks < c.length:
            assert pruned.total_flops < full.total_flops

    def test_exact_counts_full_flattened_read(self):
        c = cfg(d=8, heads=2, d_k=4, d_v=4, length=5, tasks=1, r_k=3, r_v=3)
        rep = cost.flops_pruned_last_layer(c, "exact")
        assert rep.detail["q_projection"] == 2 * 2 * (5 * 8 * 3 + 3 * 1 * 4)


class TestParity:
    @settings(max_examples=100, deadline=None)
    @given(configs(), st.booleans(), st.sampled_from(["mac", "exact"]))
    def test_homo_hetero_equal(self, c, pruned, convention):
        w = cost.flops_equal_homo_hetero(c, pruned, convention)
        assert w.equal and bool(w)
        assert w.homo.total_flops == w.hetero.total_flops

    def test_unequal_dk_dv(self):
        assert cost.flops_equal_homo_hetero(cfg(d=8, heads=2, d_k=3, d_v=7, length=5)).equal


class TestParams:
    TINY = dict(d=4, heads=1, d_k=2, d_v=2, d_f=16, length=3)

    def test_hand_counts(self):
        homo = cost.params_count("homo", cfg(**self.TINY)).params
        assert homo == {"qkv_projection": 24, "output_projection": 8, "ffn": 148, "layer_norm": 16,
                        "position_encoding": 0}
        hetero = cost.params_count("hetero", cfg(**self.TINY)).params
        assert hetero == {"qkv_projection": 72, "output_projection": 24, "ffn": 444, "layer_norm": 16,
                          "position_encoding": 0}

    @pytest.mark.parametrize("kind,composite", [("homo", "lowrank"), ("homo-pe", "lowrank"),
                                                ("hetero", "lowrank"), ("hiformer", "lowrank"),
                                                ("hiformer", "dense")])
    def test_matches_checkpoint_manifest(self, tmp_path, kind, composite):
        c = cfg(**self.TINY, r_k=5, r_v=4, composite=composite)
        layer = build_layer(kind, c, np.random.default_rng(0), dtype=np.float64)
        path = tmp_path / "layer.bin"
        checkpoint.save(path, {p.name: p.data for p in layer.parameters()}, {})
        manifest = checkpoint.read_manifest(path)
        enumerated = sum(math.prod(t["shape"]) for t in manifest["tensors"])
        assert cost.params_count(kind, c).total_params == enumerated

    @settings(max_examples=50, deadline=None)
    @given(configs())
    def test_hetero_is_L_copies(self, c):
        homo = cost.params_count("homo", c).params
        hetero = cost.params_count("hetero", c).params
        for stage in ("qkv_projection", "output_projection", "ffn"):
            assert hetero[stage] == c.length * homo[stage]

    @pytest.mark.parametrize("L,d", [(3, 4), (6, 8)])
    def test_lowrank_params_below_dense_iff_below_break_even(self, L, d):
        for r in range(1, L * d + 1):
            c = cfg(d=d, heads=2, d_k=d, d_v=d, d_f=4, length=L, r_k=r, r_v=r)
            low = cost.params_count("hiformer", c).params["qkv_projection"]
            dense = cost.params_count("hiformer", replace(c, composite="dense")).params["qkv_projection"]
            assert (low < dense) == (r < L * d / 2)

    def test_tied_output_and_ffn(self):
        c = cfg(**self.TINY, tie_output=True, tie_ffn=True)
        assert cost.params_count("hetero", c).params["ffn"] == 148

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            cost.params_count("mlp", cfg())


class TestSerialization:
    def test_totals_are_integer_sums(self):
        rep = cost.flops_lowrank_hiformer(cfg(d=8, heads=2, d_k=4, d_v=4, length=5, r_k=4, r_v=4))
        rec = rep.record()
        assert rec["flops.total"] == sum(rec[f"flops.{s}"] for s in cost.FLOP_STAGES)
        assert all(isinstance(v, int) for v in rep.flops.values())

    def test_json_and_csv(self):
        c = cfg(d=8, heads=2, d_k=4, d_v=4, length=5, r_k=4, r_v=4)
        reps = [cost.flops_dense_hiformer(c), cost.flops_pruned_last_layer(c)]
        lines = cost.reports_to_json(reps).splitlines()
        assert [json.loads(x)["name"] for x in lines] == ["hiformer-dense", "hiformer-lowrank"]
        rows = cost.reports_to_csv(reps).splitlines()
        assert len(rows) == 3 and rows[0].startswith("name,convention,pruned")


class TestBench:
    def _layer(self, L, composite="lowrank"):
        c = cfg(d=8, heads=2, d_k=4, d_v=4, length=L, r_k=8, r_v=8, composite=composite)
        return build_layer("hiformer", c, np.random.default_rng(0))

    def test_single_repeat_low_confidence(self):
        rows = cost.bench_forward({"a": (self._layer(4), False)}, [2], repeats=1)
        assert rows[0]["low_confidence"] is True and rows[0]["median_ms"] == rows[0]["p95_ms"]

    def test_normalized_against_baseline(self):
        layer = self._layer(4)
        rows = cost.bench_forward({"base": (layer, False), "pruned": (layer, True)}, [2, 4], repeats=3,
                                  baseline="base")
        assert [r["normalized"] for r in rows if r["name"] == "base"] == [1.0, 1.0]
        assert not rows[0]["low_confidence"]

    def test_missing_baseline(self):
        with pytest.raises(ConfigError):
            cost.bench_forward({"a": (self._layer(3), False)}, [1], repeats=1, baseline="b")

    def test_pruned_faster_at_length_64(self):
        layer = self._layer(64)
        rows = cost.bench_forward({"full": (layer, False), "pruned": (layer, True)}, [32], repeats=7)
        med = {r["name"]: r["median_ms"] for r in rows}
        assert med["pruned"] < med["full"]

    def test_slope(self):
        xs = [16, 32, 64, 128]
        assert cost.loglog_slope(xs, [3 * x ** 2 for x in xs]) == pytest.approx(2.0)


class TestSingularValues:
    def test_identity(self):
        np.testing.assert_allclose(cost.singular_values(np.eye(6)), np.ones(6), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("r", [1, 3, 5])
    def test_rank_bound(self, r):
        rng = np.random.default_rng(r)
        A = rng.normal(size=(30, r)) @ rng.normal(size=(r, 20))
        s = cost.singular_values(A)
        assert (s > 1e-8 * s[0]).sum() <= r
        assert np.all(s[r:] <= 1e-8)

    @pytest.mark.parametrize("shape", [(12, 7), (7, 12), (20, 20)])
    def test_matches_lapack(self, shape):
        A = np.random.default_rng(3).normal(size=shape)
        s = cost.singular_values(A)
        np.testing.assert_allclose(s, np.linalg.svd(A, compute_uv=False), rtol=1e-8, atol=1e-10)
        assert np.all(np.diff(s) <= 0)

    def test_zero_matrix(self):
        np.testing.assert_array_equal(cost.singular_values(np.zeros((3, 2))), [0.0, 0.0])

    def test_size_limit(self):
        with pytest.raises(ConfigError, match="entry limit"):
            cost.singular_values(np.zeros((cost.MAX_SVD_ENTRIES + 1, 1)))

    def test_csv_report(self):
        text = cost.singular_value_report(np.diag([3.0, 1.0, 2.0]))
        assert text.splitlines() == ["index,singular_value", "0,3.0", "1,2.0", "2,1.0"]

    def test_composite_matrix_rank(self):
        layer = build_layer("hiformer", cfg(d=4, heads=1, d_k=2, d_v=3, length=4, r_k=2, r_v=3),
                            np.random.default_rng(0), dtype=np.float64)
        s = cost.singular_values(layer.implied_matrix("v", 0))
        assert s.shape == (12,) and np.all(s[3:] <= 1e-8 * s[0])
