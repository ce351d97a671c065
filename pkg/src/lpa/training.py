"""Byte-level data pipeline, AdamW, schedule, training loop, and evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from lpa import numerics as nx
from lpa.checkpoint import TrainState, save_checkpoint
from lpa.config import ConfigError, ModelConfig
from lpa.layers import AttentionLayer
from lpa.model import Model, build_model, lm_loss

log = logging.getLogger(__name__)

EOT = 256


class DataError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ByteTokenizer:
    """Raw bytes as tokens 0..255, plus an end-of-text sentinel 256."""

    vocab_size = 257
    eot = EOT

    def tokenize(self, data):
        if isinstance(data, str):
            data = data.encode("utf-8")
        return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)

    def detokenize(self, tokens):
        tokens = np.asarray(tokens)
        return bytes(tokens[tokens != EOT].astype(np.uint8).tolist())


def split_stream(stream, split_fractions=(0.8, 0.1, 0.1)):
    fracs = [float(f) for f in split_fractions]
    if len(fracs) != 3 or any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fracs}")
    n = len(stream)
    a = int(math.floor(fracs[0] * n + 1e-9))
    b = int(math.floor((fracs[0] + fracs[1]) * n + 1e-9))
    return {"train": stream[:a], "valid": stream[a:b], "test": stream[b:]}


def load_corpus(path, split_fractions=(0.8, 0.1, 0.1)):
    """Read one or more files as documents and split the token stream contiguously.

    Each file is tokenized byte-for-byte and followed by the sentinel; the
    concatenated stream is cut by ``split_fractions`` of the content-byte
    count, so the trailing sentinel lands in the last split.
    """
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    tok = ByteTokenizer()
    parts = []
    n_bytes = 0
    for p in paths:
        try:
            with open(p, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read corpus {p}: {exc}") from exc
        if not raw:
            raise DataError(f"corpus file {p} is empty")
        n_bytes += len(raw)
        parts.append(tok.tokenize(raw))
        parts.append(np.array([EOT], dtype=np.int64))
    stream = np.concatenate(parts)
    fracs = [float(f) for f in split_fractions]
    cuts = split_stream(np.arange(n_bytes), fracs)
    a = len(cuts["train"])
    b = a + len(cuts["valid"])
    return {"train": stream[:a], "valid": stream[a:b], "test": stream[b:]}


_SYLLABLES = (
    "ka ti ro me su la ne vo ri da po fe gu ben tor sal mir ent ion ar "
    "el an is ur os th st pr qu lo ve ca ma ni de co re in"
).split()


def synthetic_corpus(n_bytes, seed=0):
    """Deterministic English-like text: a Zipfian lexicon arranged into sentences."""
    rng = np.random.default_rng(seed)
    lexicon = []
    for _ in range(600):
        k = int(rng.integers(1, 4))
        lexicon.append("".join(rng.choice(_SYLLABLES, size=k)))
    ranks = np.arange(1, len(lexicon) + 1)
    probs = 1.0 / ranks
    probs /= probs.sum()
    out = []
    size = 0
    while size < n_bytes:
        words = rng.choice(len(lexicon), size=int(rng.integers(4, 14)), p=probs)
        sentence = " ".join(lexicon[w] for w in words)
        sentence = sentence[0].upper() + sentence[1:] + (". " if rng.random() < 0.85 else ", ")
        if rng.random() < 0.08:
            sentence += "\n"
        out.append(sentence)
        size += len(sentence)
    return "".join(out).encode("ascii")[:n_bytes]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    warmup_fraction: float = 0.01
    final_lr_fraction: float = 0.1
    batch_size: int = 16
    seq_len: int = 128
    total_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    seed: int = 0
    eval_interval: int = 0
    precision: str = "float32"

    def validate(self):
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        for name in ("batch_size", "seq_len", "total_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.eval_interval < 0:
            raise ConfigError("eval_interval must be non-negative")
        if self.precision not in nx.DTYPES:
            raise ConfigError(f"precision must be one of {tuple(nx.DTYPES)}, got {self.precision!r}")
        return self

    def replace(self, **changes):
        from dataclasses import replace

        return replace(self, **changes)


TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))

DESK_TRAIN = TrainConfig()


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    learning_rate: float
    tokens_seen: int
    wall_ms_per_step: float
    eval_loss: float | None = None
    ppl: float | None = None

    def to_json(self):
        d = asdict(self)
        return json.dumps({k: v for k, v in d.items() if v is not None}, sort_keys=False)


def lr_at(step, config: TrainConfig):
    """Linear warmup from 0 to peak, then cosine decay to ``final_lr_fraction * peak``."""
    peak = config.learning_rate
    total = config.total_steps
    warm = max(1, int(round(config.warmup_fraction * total)))
    if step <= 0:
        return 0.0
    if step < warm:
        return peak * step / warm
    if step >= total:
        return peak * config.final_lr_fraction
    progress = (step - warm) / max(1, total - warm)
    floor = peak * config.final_lr_fraction
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.0, decay_mask=None, check_finite=True):
    """One AdamW update in place.

    ``params`` and ``grads`` are ``{name: array}``; ``decay_mask`` (optional
    ``{name: bool}``) selects which tensors get decoupled weight decay.
    """
    if check_finite:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        if weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def iter_windows(stream, seq_len):
    """Start offsets of contiguous, non-overlapping ``seq_len`` input windows."""
    n = (len(stream) - 1) // seq_len
    return np.arange(n) * seq_len


def get_batch(stream, seq_len, batch_size, step):
    starts = iter_windows(stream, seq_len)
    if len(starts) == 0:
        raise DataError(f"stream of {len(stream)} tokens is too short for seq_len {seq_len}")
    idx = (step * batch_size + np.arange(batch_size)) % len(starts)
    return np.stack([stream[s : s + seq_len + 1] for s in starts[idx]])


def _set_threads():
    limit = os.environ.get("LPA_THREADS")
    if not limit:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(limit))


def train(model: Model, corpus, config: TrainConfig, out_dir=None, eval_stream=None,
          record_timing=True, metrics_path=None, on_step=None):
    """Sequential next-token training; returns ``(model, [MetricsRecord])``.

    ``corpus`` is a token stream or a dict with a ``"train"`` stream.
    Metrics are appended to ``metrics_path`` (default
    ``out_dir/train.metrics.jsonl``) one JSON object per step.  With
    ``record_timing=False`` the wall-clock field is written as 0 so reruns
    produce byte-identical files.
    """
    config.validate()
    stream = corpus["train"] if isinstance(corpus, dict) else np.asarray(corpus)
    if config.seq_len > model.config.max_seq_len:
        raise ConfigError(f"seq_len {config.seq_len} exceeds model max_seq_len {model.config.max_seq_len}")
    if len(stream) < config.seq_len + 1:
        raise DataError(f"training stream of {len(stream)} tokens is shorter than one window")
    limiter = _set_threads()
    params = model.parameters()
    decay_mask = {k: p.ndim >= 2 and not k.startswith("embed.") for k, p in params.items()}
    state = AdamState()
    records = []
    tokens_seen = 0
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = metrics_path or os.path.join(out_dir, "train.metrics.jsonl")
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(config.total_steps):
            t0 = time.perf_counter()
            batch = get_batch(stream, config.seq_len, config.batch_size, step)
            model.zero_grad()
            loss = lm_loss(model, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step}", step=step)
            nx.backward(loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            if config.grad_clip_norm:
                clip_grad_norm(grads, config.grad_clip_norm)
            lr = lr_at(step + 1, config)
            try:
                adamw_step(
                    {k: p.data for k, p in params.items()}, grads, state, lr,
                    config.beta1, config.beta2, config.eps, config.weight_decay, decay_mask,
                    check_finite=not config.grad_clip_norm,
                )
            except TrainingError as exc:
                raise TrainingError(f"{exc} at step {step}", step=step) from exc
            tokens_seen += batch.shape[0] * (batch.shape[1] - 1)
            wall = (time.perf_counter() - t0) * 1e3 if record_timing else 0.0
            rec = MetricsRecord(step, value, lr, tokens_seen, round(wall, 3))
            last = step == config.total_steps - 1
            if eval_stream is not None and ((config.eval_interval and (step + 1) % config.eval_interval == 0) or last):
                ev = evaluate_ppl(model, eval_stream, config.seq_len)
                rec.eval_loss, rec.ppl = ev["nll"], ev["ppl"]
            records.append(rec)
            if fh:
                fh.write(rec.to_json() + "\n")
            if on_step:
                on_step(rec)
            if out_dir is not None and config.eval_interval and (step + 1) % config.eval_interval == 0 and not last:
                save_checkpoint(model, os.path.join(out_dir, f"step{step + 1}.ckpt"),
                                TrainState(step + 1, config.seed, state.m, state.v))
    finally:
        if fh:
            fh.close()
        if limiter is not None:
            limiter.restore_original_limits()
    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, "final.ckpt"),
                        TrainState(config.total_steps, config.seed, state.m, state.v))
    return model, records


def evaluate_ppl(model: Model, stream, seq_len, batch_size=16):
    """Mean next-token NLL over non-overlapping windows; ``ppl = exp(nll)``."""
    stream = np.asarray(stream)
    if len(stream) < 2:
        raise DataError("evaluation stream needs at least 2 tokens")
    seq_len = min(seq_len, model.config.max_seq_len)
    windows = [stream[s : s + seq_len + 1] for s in range(0, len(stream) - 1, seq_len)]
    total, count = 0.0, 0
    with nx.no_grad():
        full = [w for w in windows if len(w) == seq_len + 1]
        rest = [w for w in windows if len(w) != seq_len + 1]
        for i in range(0, len(full), batch_size):
            batch = np.stack(full[i : i + batch_size])
            n = batch.shape[0] * (batch.shape[1] - 1)
            total += float(lm_loss(model, batch).data) * n
            count += n
        for w in rest:
            n = len(w) - 1
            total += float(lm_loss(model, w[None, :]).data) * n
            count += n
    nll = total / count
    return {"nll": nll, "ppl": math.exp(nll)}


@dataclass
class SeedSummary:
    mean_ppl: float
    std_ppl: float
    per_seed: list
    single_seed: bool = False

    def format(self):
        """``mean±std`` with two decimals, as in the published tables."""
        return f"{self.mean_ppl:.2f}±{self.std_ppl:.2f}"


def run_seeds(model_config: ModelConfig, train_config: TrainConfig, corpus, seeds, out_dir=None,
              record_timing=True):
    """Train and evaluate one fresh model per seed; summarize test perplexity."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("run_seeds needs at least one seed")
    per_seed = []
    for seed in seeds:
        tcfg = train_config.replace(seed=seed)
        model = build_model(model_config, seed=seed)
        sub = os.path.join(out_dir, f"seed{seed}") if out_dir else None
        _, records = train(model, corpus, tcfg, out_dir=sub, record_timing=record_timing)
        ev = evaluate_ppl(model, corpus["test"], tcfg.seq_len)
        per_seed.append({
            "seed": seed,
            "initial_loss": records[0].train_loss,
            "final_loss": records[-1].train_loss,
            "nll": ev["nll"],
            "ppl": ev["ppl"],
        })
        log.info("seed %s: test ppl %.4f", seed, ev["ppl"])
    ppls = [r["ppl"] for r in per_seed]
    if len(ppls) == 1:
        return SeedSummary(ppls[0], 0.0, per_seed, single_seed=True)
    return SeedSummary(statistics.fmean(ppls), statistics.stdev(ppls), per_seed)


def bench_eval(model, L, repeats=5, warmup=3, seed=0):
    """Median wall time of ``repeats`` forward passes on one length-``L`` input.

    ``model`` may be a :class:`Model` (random token input) or an
    :class:`AttentionLayer` (random ``[1, L, d]`` input).  Counted
    multiply-accumulates of the last pass are reported alongside, split into
    attention projections and the attention core.
    """
    rng = np.random.default_rng(seed)
    if isinstance(model, AttentionLayer):
        dtype = model.q.parameters()[next(iter(model.q.parameters()))].dtype
        x = nx.Tensor(rng.normal(size=(1, L, model.d_model)).astype(dtype))

        def run():
            return model(x)
    else:
        tokens = rng.integers(0, model.config.vocab_size, size=(1, L))

        def run():
            return model.logits(tokens)

    times = []
    with nx.no_grad():
        for _ in range(warmup):
            run()
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            run()
            times.append((time.perf_counter() - t0) * 1e3)
        with nx.FlopCounter() as fc:
            run()
    return {
        "median_ms": statistics.median(times),
        "repeats": len(times),
        "low_confidence": len(times) < 2,
        "flops": fc.multiply_accumulate_count,
        "attention_proj_flops": fc.scope_total("attention.proj"),
        "attention_core_flops": fc.scope_total("attention.core"),
    }
