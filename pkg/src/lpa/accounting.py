"""Closed-form parameter and FLOP arithmetic, and surplus reallocation.

Nothing here builds tensors; every count is derived from a ModelConfig.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from lpa.config import ConfigError, ModelConfig, PlacementSpec
from lpa.layers import savings_threshold

STRATEGIES = ("attn_dim", "ffn_dim", "layer_num")


class InfeasibleError(ValueError):
    pass


def linear_params(d_in, d_out, r=None):
    return d_in * d_out if r is None else r * (d_in + d_out)


def saves_params(d_in, d_out, r):
    """True iff a rank-``r`` factored map is strictly smaller than the dense one."""
    return linear_params(d_in, d_out, r) < linear_params(d_in, d_out)


@dataclass(frozen=True)
class AccountingReport:
    embeddings: int
    attention: int
    ffn: int
    norms: int
    output_head: int
    total: int
    dense_baseline_total: int
    delta_vs_dense: int
    seq_len: int
    attention_flops_per_sequence: int
    attention_flops_per_token: float

    def as_dict(self):
        return asdict(self)


def attention_params(cfg: ModelConfig):
    d, d_a = cfg.d_model, cfg.d_a
    fact = cfg.placement.factored_sublayers()
    r = cfg.placement.r
    total = 0
    for name in ("Q", "K", "V", "O"):
        d_in, d_out = (d_a, d) if name == "O" else (d, d_a)
        total += linear_params(d_in, d_out, r if name in fact else None)
    return total


def ffn_params(cfg: ModelConfig):
    r = cfg.placement.r if cfg.placement.ffn_factored else None
    return cfg.ffn_matrix_count * linear_params(cfg.d_model, cfg.ffn_dim, r)


def norm_params_each(cfg: ModelConfig):
    return 2 * cfg.d_model if cfg.norm == "layer" else cfg.d_model


def layer_params(cfg: ModelConfig):
    return attention_params(cfg) + ffn_params(cfg) + 2 * norm_params_each(cfg)


def count_attention_flops(d_in, d_out, r=None, L=1):
    """Attention-layer forward cost, as printed: ``8L d_in d_out + 2L^2 d_out``.

    With ``r`` the projection term becomes ``8L r (d_in + d_out)``.
    """
    proj = d_in * d_out if r is None else r * (d_in + d_out)
    return 8 * L * proj + 2 * L * L * d_out


def count_attention_macs(d_in, d_out, r=None, L=1):
    """Multiply-accumulates actually performed by one attention forward.

    Four projections at one MAC per weight per token, plus the ``L x L``
    score and weighted-value products over the full square.
    """
    proj = d_in * d_out if r is None else r * (d_in + d_out)
    return 4 * L * proj + 2 * L * L * d_out


def attention_macs_for(cfg: ModelConfig, L):
    """MACs of one attention layer of ``cfg`` including per-sublayer placement."""
    d, d_a = cfg.d_model, cfg.d_a
    fact = cfg.placement.factored_sublayers()
    r = cfg.placement.r
    proj = 0
    for name in ("Q", "K", "V", "O"):
        d_in, d_out = (d_a, d) if name == "O" else (d, d_a)
        proj += linear_params(d_in, d_out, r if name in fact else None)
    return L * proj + 2 * L * L * d_a


def count_params(cfg: ModelConfig, seq_len=None) -> AccountingReport:
    cfg.validate()
    d, V = cfg.d_model, cfg.vocab_size
    embeddings = V * d + (cfg.max_seq_len * d if cfg.position == "learned" else 0)
    attention = cfg.layer_count * attention_params(cfg)
    ffn = cfg.layer_count * ffn_params(cfg)
    norms = (2 * cfg.layer_count + 1) * norm_params_each(cfg)
    head = 0 if cfg.tie_embeddings else d * V
    total = embeddings + attention + ffn + norms + head
    dense_cfg = cfg.replace(placement=PlacementSpec("none"))
    if cfg.placement.mode == "none":
        dense_total = total
    else:
        dense_total = count_params(dense_cfg).total
    L = cfg.max_seq_len if seq_len is None else seq_len
    # printed form generalized per sublayer: 2L * (projection weights) + 2L^2 d_a
    core = 2 * L * L * cfg.d_a
    per_layer = 2 * (attention_macs_for(cfg, L) - core) + core
    flops = cfg.layer_count * per_layer
    return AccountingReport(
        embeddings=embeddings,
        attention=attention,
        ffn=ffn,
        norms=norms,
        output_head=head,
        total=total,
        dense_baseline_total=dense_total,
        delta_vs_dense=dense_total - total,
        seq_len=L,
        attention_flops_per_sequence=flops,
        attention_flops_per_token=flops / L if L else 0.0,
    )


def lpa_delta(d, layers, r, sublayers=4):
    """Parameters saved by factoring ``sublayers`` square ``d x d`` maps per layer."""
    return layers * sublayers * (d * d - 2 * d * r)


def fmt_params(n):
    """Decimal M/B rendering, as in the published tables."""
    if abs(n) >= 1e9:
        return f"{n / 1e9:.2f}B"
    return f"{n / 1e6:.1f}M"


# surplus reallocation -------------------------------------------------------


@dataclass(frozen=True)
class Allocation:
    config: ModelConfig
    achieved_total: int
    target_total: int
    quantum_cost: int
    strategy: str


def _with_value(cfg: ModelConfig, strategy, value):
    if strategy == "attn_dim":
        return cfg.replace(attn_inner_dim=value)
    if strategy == "ffn_dim":
        return cfg.replace(ffn_dim=value)
    if strategy == "layer_num":
        return cfg.replace(layer_count=value)
    raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def _grid(cfg: ModelConfig, strategy):
    """(current value, step) for the strategy's free variable."""
    if strategy == "attn_dim":
        step = cfg.head_count * (2 if cfg.position == "rotary" else 1)
        return cfg.d_a, step
    if strategy == "ffn_dim":
        return cfg.ffn_dim, 1
    if strategy == "layer_num":
        return cfg.layer_count, 1
    raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def allocate_surplus(cfg: ModelConfig, target_total, strategy) -> Allocation:
    """Grow one dimension until the parameter count is as close to ``target_total``
    as possible without exceeding it.

    The search is monotone on the strategy's grid (multiples of head count
    for ``attn_dim``, integers otherwise): exponential bracketing followed by
    bisection, each probe evaluated with :func:`count_params`.
    """
    start, step = _grid(cfg, strategy)

    def total_at(k):
        return count_params(_with_value(cfg, strategy, start + k * step)).total

    current = total_at(0)
    if target_total < current:
        raise InfeasibleError(f"target {target_total} is below the current total {current}")
    lo, hi = 0, 1
    while total_at(hi) <= target_total:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if total_at(mid) <= target_total:
            lo = mid
        else:
            hi = mid
    best = _with_value(cfg, strategy, start + lo * step)
    achieved = total_at(lo)
    return Allocation(
        config=best,
        achieved_total=achieved,
        target_total=int(target_total),
        quantum_cost=total_at(lo + 1) - achieved,
        strategy=strategy,
    )


__all__ = [
    "AccountingReport",
    "Allocation",
    "InfeasibleError",
    "STRATEGIES",
    "allocate_surplus",
    "attention_macs_for",
    "count_attention_flops",
    "count_attention_macs",
    "count_params",
    "fmt_params",
    "linear_params",
    "lpa_delta",
    "saves_params",
    "savings_threshold",
]
