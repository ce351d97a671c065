"""Decoder-only language model assembled from a :class:`ModelConfig`."""

from __future__ import annotations

import numpy as np

from lpa import numerics as nx
from lpa.config import ModelConfig, PlacementSpec, SUBLAYERS
from lpa.layers import (
    AttentionLayer,
    Block,
    DenseLinear,
    FactoredLinear,
    FeedForward,
    make_norm,
    rotary_tables,
)
from lpa.numerics import DTYPES, Tensor

EMBED_STD = 0.02


class Model:
    def __init__(self, config: ModelConfig, token_embed, pos_embed, blocks, final_norm, head):
        self.config = config
        self.token_embed = token_embed
        self.pos_embed = pos_embed
        self.blocks = blocks
        self.final_norm = final_norm
        self.head = head
        self.rope = None
        if config.position == "rotary":
            self.rope = rotary_tables(config.max_seq_len, config.head_dim, DTYPES[config.precision])

    def parameters(self):
        """Ordered ``{name: Tensor}`` of every trainable tensor."""
        out = {"embed.token": self.token_embed}
        if self.pos_embed is not None:
            out["embed.pos"] = self.pos_embed
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters().items():
                out[f"blocks.{i}.{name}"] = p
        for name, p in self.final_norm.parameters().items():
            out[f"final_norm.{name}"] = p
        if self.head is not None:
            out["head.W"] = self.head.W
        return out

    def linear_modules(self):
        """``(name, module)`` for every dense or factored map inside the blocks."""
        for i, block in enumerate(self.blocks):
            for name, mod in block.attention.sublayers().items():
                yield f"blocks.{i}.attn.{name.lower()}", mod
            for name, mod in block.ffn.matrices().items():
                yield f"blocks.{i}.ffn.{name}", mod

    def param_count(self):
        return sum(p.data.size for p in self.parameters().values())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def logits(self, tokens):
        """``tokens [B, T]`` (or ``[T]``) -> logits ``[B, T, V]`` (or ``[T, V]``)."""
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        B, T = tokens.shape
        if T > self.config.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}")
        x = nx.embedding(self.token_embed, tokens)
        if self.pos_embed is not None:
            x = x + nx.embedding(self.pos_embed, np.arange(T))
        for block in self.blocks:
            x = block(x, self.rope)
        x = self.final_norm(x)
        W = self.head.W if self.head is not None else self.token_embed.transpose()
        out = x @ W
        return out.reshape(T, -1) if squeeze else out


def _placement_walk(model: Model):
    """Recover the placement from module types alone."""
    attn_fact = set()
    ffn_fact = []
    r_values = set()
    for name, mod in model.linear_modules():
        is_f = isinstance(mod, FactoredLinear)
        if is_f:
            r_values.add(mod.r)
        if ".attn." in name:
            if is_f:
                attn_fact.add(name.rsplit(".", 1)[1].upper())
        else:
            ffn_fact.append(is_f)
    subs = tuple(s for s in SUBLAYERS if s in attn_fact)
    ffn_any = any(ffn_fact)
    if ffn_any and not all(ffn_fact):
        raise ValueError("mixed dense/factored FFN matrices are not a valid placement")
    if len(r_values) > 1:
        raise ValueError(f"inconsistent factor ranks {sorted(r_values)}")
    r = r_values.pop() if r_values else None
    if subs and ffn_any:
        return PlacementSpec("all", subs, r)
    if subs:
        return PlacementSpec("attn", subs, r)
    if ffn_any:
        return PlacementSpec("ffn", SUBLAYERS, r)
    return PlacementSpec("none", SUBLAYERS, None)


def walk_placement(model: Model) -> PlacementSpec:
    return _placement_walk(model)


def walk_param_count(model: Model) -> int:
    """Parameter count by summing the sizes of every stored tensor."""
    return model.param_count()


def build_model(config: ModelConfig, seed=0) -> Model:
    """Construct a model deterministically from ``config`` and ``seed``."""
    config.validate()
    dtype = DTYPES[config.precision]
    rng = np.random.default_rng(seed)
    d, V = config.d_model, config.vocab_size
    p = config.placement
    r = p.r
    attn_fact = p.factored_sublayers()
    ffn_r = r if p.ffn_factored else None

    token_embed = Tensor(rng.normal(0.0, EMBED_STD, size=(V, d)).astype(dtype), requires_grad=True)
    pos_embed = None
    if config.position == "learned":
        pos_embed = Tensor(
            rng.normal(0.0, EMBED_STD, size=(config.max_seq_len, d)).astype(dtype), requires_grad=True
        )
    blocks = []
    for _ in range(config.layer_count):
        attn = AttentionLayer.init(
            d, config.head_count, rng, r=r, factored=attn_fact, d_a=config.d_a,
            rotary=config.position == "rotary", dtype=dtype,
        )
        ffn = FeedForward.init(config.ffn_variant, d, config.ffn_dim, rng, r=ffn_r, dtype=dtype)
        blocks.append(Block(attn, ffn, make_norm(config.norm, d, dtype), make_norm(config.norm, d, dtype), config.order))
    final_norm = make_norm(config.norm, d, dtype)
    head = None if config.tie_embeddings else DenseLinear.init(d, V, rng, dtype)
    return Model(config, token_embed, pos_embed, blocks, final_norm, head)


def lm_loss(model: Model, tokens):
    """Mean next-token cross entropy over ``tokens [B, T+1]``."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise ValueError(f"lm_loss expects [B, T+1] tokens with T >= 1, got {tokens.shape}")
    V = model.config.vocab_size
    if tokens.min() < 0 or tokens.max() >= V:
        raise IndexError(f"token index out of range for vocabulary of {V}")
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    logits = model.logits(inputs)
    B, T, _ = logits.shape
    return nx.cross_entropy(logits.reshape(B * T, V), targets.reshape(-1))


def generate(model: Model, prompt, n_tokens, temperature=0.0, seed=0):
    """Extend ``prompt`` by ``n_tokens``, recomputing the full prefix each step.

    Greedy at ``temperature == 0``; otherwise samples from the tempered
    softmax with a generator seeded by ``seed``.  The context is cropped to
    the last ``max_seq_len`` tokens once it grows past that.
    """
    tokens = [int(t) for t in prompt]
    max_len = model.config.max_seq_len
    if len(tokens) > max_len:
        raise ValueError(f"prompt of {len(tokens)} tokens exceeds max_seq_len {max_len}")
    if not tokens and n_tokens:
        raise ValueError("generation needs a non-empty prompt")
    rng = np.random.default_rng(seed)
    with nx.no_grad():
        for _ in range(n_tokens):
            ctx = np.asarray(tokens[-max_len:])
            last = model.logits(ctx).data[-1].astype(np.float64)
            if temperature == 0:
                nxt = int(np.argmax(last))
            else:
                z = last / temperature
                probs = np.exp(z - z.max())
                probs /= probs.sum()
                nxt = int(rng.choice(len(probs), p=probs))
            tokens.append(nxt)
    return tokens


def factorize_model(dense: Model, placement: PlacementSpec) -> Model:
    """Copy of ``dense`` with the placed maps replaced by exact SVD factors.

    ``placement.r`` is ignored: every factored map gets full rank
    ``min(d_in, d_out)`` so the copy computes the same function.
    """
    cfg = dense.config
    factored = build_model(cfg.replace(placement=PlacementSpec("none")), 0)
    factored.token_embed = Tensor(dense.token_embed.data.copy(), requires_grad=True)
    if dense.pos_embed is not None:
        factored.pos_embed = Tensor(dense.pos_embed.data.copy(), requires_grad=True)
    for src, dst in zip(dense.blocks, factored.blocks):
        subs = {}
        for name, mod in src.attention.sublayers().items():
            if name in placement.factored_sublayers():
                subs[name] = FactoredLinear.from_dense(mod.dense_weight())
            else:
                subs[name] = DenseLinear(Tensor(mod.dense_weight().copy(), requires_grad=True))
        dst.attention = AttentionLayer(subs, src.attention.head_count, rotary=src.attention.rotary)
        mats = {}
        for name, mod in src.ffn.matrices().items():
            if placement.ffn_factored:
                mats[name] = FactoredLinear.from_dense(mod.dense_weight())
            else:
                mats[name] = DenseLinear(Tensor(mod.dense_weight().copy(), requires_grad=True))
        dst.ffn = FeedForward(src.ffn.variant, mats["up"], mats["down"], mats.get("gate"))
        for a, b in ((src.norm1, dst.norm1), (src.norm2, dst.norm2)):
            for k, t in a.parameters().items():
                b.parameters()[k].data = t.data.copy()
    for k, t in dense.final_norm.parameters().items():
        factored.final_norm.parameters()[k].data = t.data.copy()
    if dense.head is not None:
        factored.head = DenseLinear(Tensor(dense.head.W.data.copy(), requires_grad=True))
    factored.config = cfg.replace(placement=walk_placement(factored))
    return factored
