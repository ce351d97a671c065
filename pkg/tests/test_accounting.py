from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpa.accounting import (
    InfeasibleError,
    allocate_surplus,
    count_attention_flops,
    count_attention_macs,
    count_params,
    fmt_params,
    linear_params,
    lpa_delta,
    saves_params,
)
from lpa.config import PUBLISHED_TOTALS, ModelConfig, get_preset
from lpa.verify import counted_attention_macs, threshold_sweep

M = 1e6


def total(name):
    return count_params(get_preset(name)).total


@pytest.mark.parametrize("name", sorted(PUBLISHED_TOTALS))
def test_published_totals(name):
    tol = 0.02e9 if name.startswith("3b") else 1 * M
    assert abs(total(name) - PUBLISHED_TOTALS[name]) <= tol


def test_setting1_deltas():
    base = total("setting1-369m")
    assert (base - total("setting1-lpa-319m-r256")) == pytest.approx(50.3 * M, abs=0.1 * M)
    assert (base - total("setting1-lpa-kv-344m-r256")) == pytest.approx(25.2 * M, abs=0.1 * M)
    assert (base - total("setting1-lpa-qkv-331m-r256")) == pytest.approx(37.7 * M, abs=0.1 * M)


def test_large_delta_closed_form():
    delta = total("3b-same-dim-3.23b") - total("3b-lpa-r512")
    assert delta == 16 * 4 * (4096**2 - 2 * 4096 * 512) == lpa_delta(4096, 16, 512)
    assert delta == pytest.approx(0.805e9, abs=0.001e9)


def test_report_breakdown_sums():
    rep = count_params(get_preset("setting2-lpa-318m-r256"))
    assert rep.embeddings + rep.attention + rep.ffn + rep.norms + rep.output_head == rep.total
    assert rep.dense_baseline_total - rep.total == rep.delta_vs_dense


def test_linear_params_hand():
    assert linear_params(4, 4) == 16 and linear_params(4, 4, 1) == 8


def test_threshold_equality_case():
    assert not saves_params(1024, 1024, 512)
    assert saves_params(1024, 1024, 511)
    assert linear_params(1024, 1024, 512) == linear_params(1024, 1024)


def test_threshold_exhaustive():
    assert threshold_sweep(64) == []


@given(st.integers(1, 500), st.integers(1, 500), st.integers(1, 500))
def test_threshold_property(d_in, d_out, r):
    assert saves_params(d_in, d_out, r) == (r < Fraction(d_in * d_out, d_in + d_out))


class TestFlops:
    def test_unit_scale(self):
        assert count_attention_flops(1, 1, None, 1) == 10

    def test_large_values(self):
        assert count_attention_flops(1024, 1024, None, 512) == 8 * 512 * 1024**2 + 2 * 512**2 * 1024
        assert count_attention_flops(1024, 1024, 256, 512) == 8 * 512 * 256 * 2048 + 2 * 512**2 * 1024

    @pytest.mark.parametrize("L", [8, 64])
    @pytest.mark.parametrize("d", [32, 128])
    @pytest.mark.parametrize("r", [None, 4, 16])
    def test_counted_macs_match_mac_form(self, L, d, r):
        assert counted_attention_macs(d, L, r) == count_attention_macs(d, d, r, L)

    def test_counted_macs_match_printed_form(self):
        # the printed projection term carries a factor 8 for four maps; one MAC
        # per weight per token gives 4, so this equality does not hold
        mismatches = [
            (L, d, r, counted_attention_macs(d, L, r), count_attention_flops(d, d, r, L))
            for L in (8, 64) for d in (32, 128) for r in (None, 4, 16)
            if counted_attention_macs(d, L, r) != count_attention_flops(d, d, r, L)
        ]
        assert mismatches == []

    def test_projection_ratio(self):
        d, r, L = 512, 64, 256
        dense = counted_attention_macs(d, L, None, heads=8, scope="attention.proj")
        lpa = counted_attention_macs(d, L, r, heads=8, scope="attention.proj")
        assert Fraction(lpa, dense) == Fraction(r * (d + d), d * d)

    def test_core_term_unchanged(self):
        assert counted_attention_macs(64, 16, 8, scope="attention.core") == \
            counted_attention_macs(64, 16, None, scope="attention.core") == 2 * 16**2 * 64


class TestMonotone:
    @pytest.mark.parametrize("field,lo,hi", [("d_model", 64, 128), ("ffn_dim", 100, 101), ("layer_count", 2, 3)])
    def test_increasing(self, field, lo, hi):
        base = get_preset("desk-lpa-r16")
        assert count_params(base.replace(**{field: lo})).total < count_params(base.replace(**{field: hi})).total

    def test_increasing_in_r(self):
        base = get_preset("desk-lpa-r16")
        totals = [count_params(base.with_placement("all", r)).total for r in range(1, 40)]
        assert all(a < b for a, b in zip(totals, totals[1:]))


class TestAllocate:
    target = count_params(get_preset("setting1-369m")).total
    base = get_preset("setting1-lpa-319m-r256")

    @pytest.mark.parametrize("strategy", ["attn_dim", "ffn_dim", "layer_num"])
    def test_within_one_quantum(self, strategy):
        a = allocate_surplus(self.base, self.target, strategy)
        assert count_params(a.config).total == a.achieved_total
        assert self.target - a.quantum_cost < a.achieved_total <= self.target

    def test_attn_dim_closed_form(self):
        # 4 r per inner unit per layer
        a = allocate_surplus(self.base, self.target, "attn_dim")
        assert a.config.d_a == 1024 + (self.target - total("setting1-lpa-319m-r256")) // (24 * 4 * 256)
        assert a.config.d_a == 3072

    def test_ffn_dim_closed_form(self):
        a = allocate_surplus(self.base, self.target, "ffn_dim")
        assert a.config.ffn_dim == 4096 + (self.target - total("setting1-lpa-319m-r256")) // (24 * 2 * 1024)
        assert a.config.ffn_dim == 5120

    def test_layer_num_floor(self):
        base = get_preset("desk-lpa-r16")
        per_layer = count_params(base.replace(layer_count=3)).total - count_params(base).total
        surplus = per_layer + 10
        a = allocate_surplus(base, count_params(base).total + surplus, "layer_num")
        assert a.config.layer_count == base.layer_count + surplus // per_layer

    def test_infeasible(self):
        with pytest.raises(InfeasibleError):
            allocate_surplus(self.base, 100, "ffn_dim")

    def test_rotary_grid_keeps_even_heads(self):
        a = allocate_surplus(get_preset("setting2-lpa-318m-r256"), count_params(get_preset("setting2-368m")).total,
                             "attn_dim")
        a.config.validate()
        assert a.config.head_dim % 2 == 0


def test_fmt():
    assert fmt_params(318_343_168) == "318.3M" and fmt_params(2_423_000_000) == "2.42B"


def test_model_flops_scale_with_layers():
    cfg = ModelConfig()
    assert count_params(cfg.replace(layer_count=4), 32).attention_flops_per_sequence == \
        2 * count_params(cfg, 32).attention_flops_per_sequence
