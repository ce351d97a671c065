import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpa import numerics as nx
from lpa.config import ConfigError, ModelConfig, get_preset
from lpa.model import build_model, lm_loss
from lpa.training import (
    EOT,
    AdamState,
    ByteTokenizer,
    DataError,
    TrainConfig,
    TrainingError,
    adamw_step,
    bench_eval,
    clip_grad_norm,
    evaluate_ppl,
    get_batch,
    load_corpus,
    lr_at,
    run_seeds,
    split_stream,
    synthetic_corpus,
    train,
)

TINY = ModelConfig(vocab_size=257, d_model=16, head_count=2, ffn_dim=32, layer_count=1, max_seq_len=16,
                   precision="float64")


class TestTokenizer:
    def test_bytes(self):
        assert ByteTokenizer().tokenize("ab").tolist() == [97, 98]

    @given(st.binary(max_size=200))
    def test_round_trip(self, data):
        tok = ByteTokenizer()
        assert tok.detokenize(tok.tokenize(data)) == data

    def test_utf8_file_round_trip(self, tmp_path):
        text = "héllo wörld ✓\n".encode()
        p = tmp_path / "u.txt"
        p.write_bytes(text)
        s = load_corpus(str(p), (1.0, 0.0, 0.0))
        joined = np.concatenate([s["train"], s["valid"], s["test"]])
        assert ByteTokenizer().detokenize(joined) == text


class TestCorpus:
    def test_split_sizes(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_bytes(bytes(range(100)))
        s = load_corpus(str(p), (0.8, 0.1, 0.1))
        assert (len(s["train"]), len(s["valid"]), len(s["test"])) == (80, 10, 11)
        assert s["test"][-1] == EOT and s["train"].tolist() == list(range(80))

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_bytes(b"")
        with pytest.raises(DataError, match="empty"):
            load_corpus(str(p))

    def test_bad_fractions(self):
        with pytest.raises(DataError):
            split_stream(np.arange(10), (0.5, 0.3, 0.3))

    def test_synthetic_deterministic(self):
        a = synthetic_corpus(5000, 2)
        assert a == synthetic_corpus(5000, 2) and len(a) == 5000 and a != synthetic_corpus(5000, 3)

    def test_batches_contiguous_non_overlapping(self):
        stream = np.arange(100)
        b0 = get_batch(stream, 8, 3, 0)
        b1 = get_batch(stream, 8, 3, 1)
        assert b0[:, 0].tolist() == [0, 8, 16] and b1[:, 0].tolist() == [24, 32, 40]
        assert np.all(np.diff(b0, axis=1) == 1)


class TestAdamW:
    def test_first_step_closed_form(self):
        p = {"w": np.array([0.0])}
        adamw_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.1, weight_decay=0.0)
        # m_hat = v_hat = 1 on step one
        assert p["w"][0] == pytest.approx(-0.1 * 1 / (1 + 1e-8), abs=1e-12)

    def test_zero_grad_no_decay_is_noop(self):
        p = {"w": np.array([1.5, -2.0])}
        adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.0)
        assert p["w"].tolist() == [1.5, -2.0]

    def test_decoupled_decay(self):
        p = {"w": np.array([2.0, -4.0])}
        adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * (1 - 0.05))

    def test_decay_mask(self):
        p = {"a": np.array([1.0]), "b": np.array([1.0])}
        adamw_step(p, {"a": np.zeros(1), "b": np.zeros(1)}, AdamState(), lr=0.1, weight_decay=0.5,
                   decay_mask={"a": True, "b": False})
        assert p["a"][0] < 1.0 and p["b"][0] == 1.0

    def test_non_finite(self):
        with pytest.raises(TrainingError):
            adamw_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, AdamState(), lr=0.1)

    def test_quadratic_bowl(self):
        cfg = TrainConfig(learning_rate=0.1, total_steps=20, warmup_fraction=0.1)
        p = {"w": np.array([3.0, -2.0, 1.0])}
        state = AdamState()
        values = []
        for step in range(20):
            adamw_step(p, {"w": 2 * p["w"]}, state, lr_at(step + 1, cfg))
            values.append(float(np.sum(p["w"] ** 2)))
        warm = max(1, round(0.1 * 20))
        assert all(b < a for a, b in zip(values[warm:], values[warm + 1:]))


class TestSchedule:
    cfg = TrainConfig(learning_rate=1.0, total_steps=1000, warmup_fraction=0.01, final_lr_fraction=0.1)

    def test_endpoints(self):
        assert lr_at(0, self.cfg) == 0.0
        assert lr_at(10, self.cfg) == pytest.approx(1.0)
        assert lr_at(1000, self.cfg) == pytest.approx(0.1)

    def test_continuous_and_piecewise_monotone(self):
        lrs = [lr_at(s, self.cfg) for s in range(1001)]
        assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) <= 0.1 + 1e-12
        peak = int(np.argmax(lrs))
        assert all(a <= b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
        assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1:]))

    def test_invalid_warmup(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_fraction=0.0).validate()


class TestClip:
    @given(st.floats(0.01, 10), st.integers(0, 1000))
    def test_post_clip_norm(self, max_norm, seed):
        rng = np.random.default_rng(seed)
        grads = {"a": rng.normal(size=(3, 4)) * 5, "b": rng.normal(size=7)}
        before = clip_grad_norm(grads, max_norm)
        after = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if before > max_norm:
            assert after <= max_norm + 1e-6
        else:
            assert after == pytest.approx(before)


def _stream(n_windows, T, seed=0):
    return np.random.default_rng(seed).integers(0, 257, size=n_windows * T + 1)


class TestTrain:
    def test_lr_zero_keeps_loss(self):
        model = build_model(TINY, 0)
        _, recs = train(model, _stream(4, 16), TrainConfig(learning_rate=0.0, batch_size=4, seq_len=16,
                                                           total_steps=5, precision="float64"))
        assert len({r.train_loss for r in recs}) == 1

    def test_deterministic_metrics(self, tmp_path):
        cfg = TrainConfig(batch_size=4, seq_len=16, total_steps=6, eval_interval=3)
        stream = _stream(40, 16)
        for name in ("a", "b"):
            train(build_model(TINY, 1), {"train": stream}, cfg, out_dir=tmp_path / name,
                  eval_stream=stream[:200], record_timing=False)
        a = (tmp_path / "a" / "train.metrics.jsonl").read_bytes()
        assert a == (tmp_path / "b" / "train.metrics.jsonl").read_bytes()
        lines = [json.loads(x) for x in a.decode().splitlines()]
        assert [r["step"] for r in lines] == list(range(6))
        assert set(lines[0]) == {"step", "train_loss", "learning_rate", "tokens_seen", "wall_ms_per_step"}
        assert "ppl" in lines[2] and "ppl" in lines[5]
        assert (tmp_path / "a" / "step3.ckpt").exists() and (tmp_path / "a" / "final.ckpt").exists()

    def test_nan_loss_names_step(self):
        model = build_model(TINY, 0)
        model.head.W.data[0, 0] = np.nan
        with pytest.raises(TrainingError, match="step 0") as err:
            train(model, _stream(4, 16), TrainConfig(batch_size=2, seq_len=16, total_steps=3))
        assert err.value.step == 0

    def test_seq_len_too_long(self):
        with pytest.raises(ConfigError):
            train(build_model(TINY), _stream(4, 32), TrainConfig(seq_len=32, total_steps=1))

    def test_loss_decreases_desk(self, corpus_file):
        corpus = load_corpus(corpus_file)
        _, recs = train(build_model(get_preset("desk-lpa-r16"), 0), corpus, TrainConfig(total_steps=60))
        assert recs[-1].train_loss < 0.7 * recs[0].train_loss


class TestEvaluate:
    def test_uniform_model(self):
        model = build_model(TINY, 0)
        model.head.W.data[:] = 0
        ev = evaluate_ppl(model, _stream(3, 16), 16)
        assert ev["ppl"] == pytest.approx(257, abs=0.5) and ev["ppl"] == math.exp(ev["nll"])

    def test_short_stream(self):
        with pytest.raises(DataError):
            evaluate_ppl(build_model(TINY), np.array([1]), 16)

    def test_partial_window_counts(self):
        model = build_model(TINY, 0)
        stream = _stream(2, 16)[:27]
        ev = evaluate_ppl(model, stream, 16)
        with nx.no_grad():
            a = lm_loss(model, stream[None, :17]).item() * 16
            b = lm_loss(model, stream[None, 16:27]).item() * 10
        assert ev["nll"] == pytest.approx((a + b) / 26, rel=1e-12)

    def test_memorized_batch(self):
        cfg = TINY.replace(d_model=32, head_count=4, ffn_dim=128, layer_count=2)
        stream = _stream(4, 16, seed=3)
        model = build_model(cfg, 0)
        train(model, stream, TrainConfig(learning_rate=1e-2, batch_size=4, seq_len=16, total_steps=200,
                                         weight_decay=0.0, warmup_fraction=0.05, final_lr_fraction=1.0))
        assert evaluate_ppl(model, stream, 16)["ppl"] < 1.2


class TestSeeds:
    corpus = {k: _stream(30, 16, seed=i) for i, k in enumerate(("train", "valid", "test"))}
    cfg = TrainConfig(batch_size=4, seq_len=16, total_steps=4)

    def test_empty(self):
        with pytest.raises(ConfigError):
            run_seeds(TINY, self.cfg, self.corpus, [])

    def test_same_seed_zero_std(self):
        s = run_seeds(TINY, self.cfg, self.corpus, [5, 5, 5])
        assert s.std_ppl == 0.0 and not s.single_seed

    def test_single_seed_flag(self):
        s = run_seeds(TINY, self.cfg, self.corpus, [1])
        assert s.single_seed and s.std_ppl == 0.0

    def test_sample_std(self):
        s = run_seeds(TINY, self.cfg, self.corpus, [1, 2, 3])
        ppls = [r["ppl"] for r in s.per_seed]
        assert len(set(ppls)) == 3
        mean = sum(ppls) / 3
        std = math.sqrt(sum((p - mean) ** 2 for p in ppls) / 2)
        assert s.mean_ppl == pytest.approx(mean) and s.std_ppl == pytest.approx(std)
        assert s.format() == f"{mean:.2f}±{std:.2f}"


class TestBench:
    def test_low_confidence(self):
        res = bench_eval(build_model(TINY), 8, repeats=1)
        assert res["repeats"] == 1 and res["low_confidence"]

    def test_median_of_repeats(self):
        res = bench_eval(build_model(TINY), 8, repeats=4)
        assert res["repeats"] == 4 and not res["low_confidence"] and res["median_ms"] > 0
        assert res["flops"] >= res["attention_proj_flops"] + res["attention_core_flops"] > 0
