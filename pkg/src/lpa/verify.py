"""Property suites behind ``lpa verify``.

Each check returns a :class:`Check`; the CLI prints one JSON line per check
and exits non-zero if any failed.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from lpa import numerics as nx
from lpa.accounting import (
    STRATEGIES,
    allocate_surplus,
    count_attention_flops,
    count_attention_macs,
    count_params,
    saves_params,
)
from lpa.config import PUBLISHED_TOTALS, ModelConfig, PlacementSpec, get_preset
from lpa.layers import (
    AttentionLayer,
    DenseLinear,
    FactoredLinear,
    FeedForward,
    LowRankWarning,
    jacobian_dependence,
    savings_threshold,
)
from lpa.model import build_model, factorize_model, lm_loss

SUITES = ("grad", "jacobian", "equivalence", "accounting", "flops")
ALL = ("grad", "jacobian", "equivalence", "accounting")

PLACEMENT_MODES = ("none", "attn", "ffn", "all")


@dataclass
class Check:
    suite: str
    check: str
    passed: bool
    value: object = None
    tolerance: object = None
    seconds: float = 0.0

    def to_json(self):
        d = asdict(self)
        d["status"] = "pass" if self.passed else "fail"
        return json.dumps(d, default=str)


def _timed(suite, name, fn):
    t0 = time.perf_counter()
    try:
        passed, value, tol = fn()
    except Exception as exc:  # a crashing check is a failed check
        passed, value, tol = False, f"{type(exc).__name__}: {exc}", None
    return Check(suite, name, bool(passed), value, tol, round(time.perf_counter() - t0, 3))


# grad -----------------------------------------------------------------------

GRAD_TOL = 1e-4
# balances O(h^2) truncation against roundoff on gradients near 1e-6
GRAD_STEP = 1e-5


def tiny_config(setting, mode, r=2, d=8, L=4, layers=2):
    """Small 64-bit model for finite-difference checks."""
    base = ModelConfig(
        vocab_size=13, d_model=d, head_count=2, ffn_dim=2 * d, layer_count=layers,
        max_seq_len=L, precision="float64",
    )
    if setting == "setting2":
        base = base.replace(norm="rms", order="setting2", ffn_variant="swiglu3", position="rotary")
    return base.with_placement(mode, None if mode == "none" else r)


def model_grad_error(cfg: ModelConfig, seed=0):
    model = build_model(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    tokens = rng.integers(0, cfg.vocab_size, size=(2, cfg.max_seq_len + 1))
    params = list(model.parameters().values())
    # perturb away from the symmetric init so norms and gates are non-trivial
    for p in params:
        p.data = p.data + rng.normal(0, 0.1, size=p.shape)

    def f(*_):
        return lm_loss(model, tokens)

    return nx.grad_check(f, params, step=GRAD_STEP)


def grad_checks():
    out = []
    for setting in ("setting1", "setting2"):
        for mode in PLACEMENT_MODES:
            cfg = tiny_config(setting, mode)

            def run(cfg=cfg):
                err = model_grad_error(cfg)
                return err < GRAD_TOL, err, GRAD_TOL

            out.append(_timed("grad", f"grad.{setting}.{mode}", run))
    return out


# jacobian -------------------------------------------------------------------

JAC_L, JAC_D = 6, 8


def jacobian_checks():
    eye = np.eye(JAC_L, dtype=bool)
    lower = np.tril(np.ones((JAC_L, JAC_L), dtype=bool))
    cases = [
        ("ffn.relu2", lambda: jacobian_dependence("ffn", JAC_L, JAC_D), eye),
        ("ffn.swiglu3", lambda: jacobian_dependence("ffn", JAC_L, JAC_D, ffn_variant="swiglu3"), eye),
        ("ffn.factored", lambda: jacobian_dependence("ffn", JAC_L, JAC_D, r=2), eye),
        ("attention.dense", lambda: jacobian_dependence("attention", JAC_L, JAC_D), lower),
        ("attention.factored", lambda: jacobian_dependence("attention", JAC_L, JAC_D, r=2), lower),
    ]
    out = []
    for name, fn, expected in cases:

        def run(fn=fn, expected=expected):
            dep = fn()
            mismatches = int(np.sum(dep != expected))
            return mismatches == 0, {"mismatches": mismatches, "nonzero": int(dep.sum())}, "exact pattern"

        out.append(_timed("jacobian", f"jacobian.{name}", run))
    return out


# equivalence ----------------------------------------------------------------

EQUIV_TOL = 1e-6


def _factor_attention(layer: AttentionLayer):
    subs = {n: FactoredLinear.from_dense(m.dense_weight()) for n, m in layer.sublayers().items()}
    return AttentionLayer(subs, layer.head_count, rotary=layer.rotary)


def _factor_ffn(ffn: FeedForward):
    mats = {n: FactoredLinear.from_dense(m.dense_weight()) for n, m in ffn.matrices().items()}
    return FeedForward(ffn.variant, mats["up"], mats["down"], mats.get("gate"))


def equivalence_checks(d=32, L=10):
    rng = np.random.default_rng(0)
    x = nx.Tensor(rng.normal(size=(2, L, d)))
    out = []

    def attn():
        layer = AttentionLayer.init(d, 4, np.random.default_rng(1))
        diff = float(np.max(np.abs(layer(x).data - _factor_attention(layer)(x).data)))
        return diff <= EQUIV_TOL, diff, EQUIV_TOL

    out.append(_timed("equivalence", "equivalence.attention", attn))
    for variant in ("relu2", "swiglu3"):

        def ffn(variant=variant):
            layer = FeedForward.init(variant, d, 2 * d, np.random.default_rng(2))
            diff = float(np.max(np.abs(layer(x).data - _factor_ffn(layer)(x).data)))
            return diff <= EQUIV_TOL, diff, EQUIV_TOL

        out.append(_timed("equivalence", f"equivalence.ffn.{variant}", ffn))
    for setting in ("setting1", "setting2"):

        def full(setting=setting):
            cfg = tiny_config(setting, "none", d=d, L=L).replace(head_count=4)
            dense = build_model(cfg, 3)
            fact = factorize_model(dense, PlacementSpec("all", "Q,K,V,O", d))
            tokens = np.random.default_rng(4).integers(0, cfg.vocab_size, size=(2, L))
            diff = float(np.max(np.abs(dense.logits(tokens).data - fact.logits(tokens).data)))
            return diff <= EQUIV_TOL, diff, EQUIV_TOL

        out.append(_timed("equivalence", f"equivalence.model.{setting}", full))
    return out


# accounting -----------------------------------------------------------------

PARAM_TOL = 1e6
LARGE_TOL = 0.02e9


def _preset_total_check(name, tol):
    def run():
        total = count_params(get_preset(name)).total
        err = abs(total - PUBLISHED_TOTALS[name])
        return err <= tol, {"total": total, "published": PUBLISHED_TOTALS[name], "abs_error": err}, tol

    return run


def published_total_checks(names, tol=PARAM_TOL, suite="accounting"):
    return [_timed(suite, f"params.{n}", _preset_total_check(n, tol)) for n in names]


R_SWEEP = ("setting1-lpa-319m-r256", "setting1-lpa-293m-r128", "setting1-lpa-281m-r64", "setting1-lpa-274m-r32")
SUBSETS = ("setting1-lpa-kv-344m-r256", "setting1-lpa-qkv-331m-r256")
LARGE = ("3b-same-dim-3.23b", "3b-lpa-r512")


def threshold_sweep(max_dim=64):
    """Factored ``r`` saves parameters iff ``r < d_in d_out / (d_in + d_out)``."""
    bad = []
    for d_in in range(1, max_dim + 1):
        for d_out in range(1, max_dim + 1):
            bound = Fraction(d_in * d_out, d_in + d_out)
            threshold = savings_threshold(d_in, d_out)
            for r in range(1, max_dim + 1):
                exact = r < bound
                if saves_params(d_in, d_out, r) != exact or (r < threshold) != exact:
                    bad.append((d_in, d_out, r))
    return bad


def module_threshold_sweep(max_dim=16):
    """Same property measured on constructed modules rather than formulas."""
    rng = np.random.default_rng(0)
    bad = []
    for d_in in range(1, max_dim + 1):
        for d_out in range(1, max_dim + 1):
            dense = DenseLinear.init(d_in, d_out, rng).param_count
            for r in range(1, max_dim + 1):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", LowRankWarning)
                    fact = FactoredLinear.init(d_in, d_out, r, rng).param_count
                if (fact < dense) != (r * (d_in + d_out) < d_in * d_out):
                    bad.append((d_in, d_out, r))
    return bad


def allocation_checks(suite="accounting"):
    base = get_preset("setting1-lpa-319m-r256")
    target = count_params(get_preset("setting1-369m")).total
    out = []
    for strategy in STRATEGIES:

        def run(strategy=strategy):
            alloc = allocate_surplus(base, target, strategy)
            recount = count_params(alloc.config).total
            gap = target - recount
            ok = recount == alloc.achieved_total and 0 <= gap < alloc.quantum_cost
            value = {"achieved": recount, "target": target, "gap": gap, "quantum": alloc.quantum_cost,
                     "d_a": alloc.config.d_a, "ffn_dim": alloc.config.ffn_dim,
                     "layer_count": alloc.config.layer_count}
            if strategy == "attn_dim":
                # closed form: with all four maps factored each extra inner unit
                # costs 4r per layer; round down to the head-count grid
                d, L, r, h = base.d_model, base.layer_count, base.placement.r, base.head_count
                saved = target - count_params(base).total
                expected = d + (saved // (L * 4 * r * h)) * h
                value["closed_form_d_a"] = expected
                ok = ok and alloc.config.d_a == expected
            return ok, value, "one quantum"

        out.append(_timed(suite, f"allocate.{strategy}", run))
    return out


def mac_checks(suite="accounting", grid=((8, 64), (32, 128), (4, 16))):
    """Counted multiply-accumulates of an attention forward vs their closed form."""
    Ls, ds, rs = grid
    out = []
    for L in Ls:
        for d in ds:
            for r in (None,) + tuple(rs):
                def run(L=L, d=d, r=r):
                    counted = counted_attention_macs(d, L, r)
                    expected = count_attention_macs(d, d, r, L)
                    return counted == expected, {"counted": counted, "expected": expected}, "exact"

                tag = "dense" if r is None else f"r{r}"
                out.append(_timed(suite, f"macs.L{L}.d{d}.{tag}", run))
    return out


def counted_attention_macs(d, L, r=None, heads=4, scope=None):
    rng = np.random.default_rng(0)
    factored = ("Q", "K", "V", "O") if r is not None else ()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowRankWarning)
        layer = AttentionLayer.init(d, heads, rng, r=r, factored=factored)
    x = nx.Tensor(rng.normal(size=(L, d)))
    with nx.no_grad(), nx.FlopCounter() as fc:
        layer(x)
    return fc.multiply_accumulate_count if scope is None else fc.scope_total(scope)


def flop_formula_checks(suite="flops", grid=((8, 64), (32, 128), (4, 16))):
    """Counted MACs against the printed ``8L d_in d_out + 2L^2 d_out`` forms."""
    Ls, ds, rs = grid
    out = []
    for L in Ls:
        for d in ds:
            for r in (None,) + tuple(rs):
                def run(L=L, d=d, r=r):
                    counted = counted_attention_macs(d, L, r)
                    printed = count_attention_flops(d, d, r, L)
                    return counted == printed, {"counted": counted, "printed_formula": printed}, "exact"

                tag = "dense" if r is None else f"r{r}"
                out.append(_timed(suite, f"flops.L{L}.d{d}.{tag}", run))
    return out


def accounting_checks():
    out = published_total_checks(R_SWEEP) + published_total_checks(SUBSETS)
    out += published_total_checks(LARGE, tol=LARGE_TOL)

    def threshold():
        bad = threshold_sweep()
        return not bad, {"violations": len(bad), "first": bad[:3]}, "exact"

    def module_threshold():
        bad = module_threshold_sweep()
        return not bad, {"violations": len(bad), "first": bad[:3]}, "exact"

    out.append(_timed("accounting", "threshold.formula", threshold))
    out.append(_timed("accounting", "threshold.modules", module_threshold))
    out += allocation_checks()
    out += mac_checks()
    return out


RUNNERS = {
    "grad": grad_checks,
    "jacobian": jacobian_checks,
    "equivalence": equivalence_checks,
    "accounting": accounting_checks,
    "flops": flop_formula_checks,
}


def run_suite(name):
    if name == "all":
        return [c for s in ALL for c in RUNNERS[s]()]
    if name not in RUNNERS:
        raise ValueError(f"unknown suite {name!r}; expected one of {SUITES + ('all',)}")
    return RUNNERS[name]()
