import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcdm import checkpoint as ckpt_io
from dcdm.autodiff import NonFiniteError
from dcdm.config import ModelConfig
from dcdm.corpus import load_corpus
from dcdm.trainer import (METRICS_HEADER, OptimizerState, adamw_step, clip_by_global_norm,
                          global_norm, load_metrics, lr_schedule, train)


def tiny_train_config(**kw):
    base = dict(mode="dcdm", d=16, n_layers=2, n_heads=2, d_ff=32, max_len=24, seq_len=24,
                batch_size=3, K=4, h=4, max_steps=6)
    base.update(kw)
    return ModelConfig(**base).validate()


def fake_clock():
    ticks = itertools.count()
    return lambda: float(next(ticks))


class TestSchedule:
    def test_peak_at_warmup_end(self):
        assert lr_schedule(100, 3e-4, 100, 1000) == 3e-4

    def test_half_at_decay_midpoint(self):
        assert lr_schedule(550, 3e-4, 100, 1000) == pytest.approx(1.5e-4, rel=1e-12)

    def test_zero_at_end(self):
        assert lr_schedule(1000, 3e-4, 100, 1000) == pytest.approx(0.0, abs=1e-20)

    def test_linear_ramp(self):
        assert lr_schedule(25, 1.0, 100, 1000) == 0.25

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(1001, 1.0, 10, 1000)

    @given(st.integers(1, 50), st.integers(51, 500))
    def test_monotone_decay(self, warmup, total):
        lrs = [lr_schedule(s, 1.0, warmup, total) for s in range(warmup, total + 1)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestAdamW:
    def test_zero_gradient_no_decay_is_fixed_point(self):
        p = {"w": np.array([1.0, -2.0])}
        st_ = OptimizerState.fresh(p, weight_decay=0.0)
        adamw_step(p, {"w": np.zeros(2)}, st_, 0.1)
        assert p["w"].tolist() == [1.0, -2.0]

    def test_first_step_is_lr_sized(self):
        p = {"w": np.array([0.0])}
        adamw_step(p, {"w": np.array([1.0])}, OptimizerState.fresh(p, weight_decay=0.0), 0.1)
        # m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert p["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)

    def test_decay_alone_shrinks(self):
        p = {"w": np.array([2.0])}
        adamw_step(p, {"w": np.array([0.0])}, OptimizerState.fresh(p, weight_decay=0.5), 0.1)
        assert p["w"][0] == pytest.approx(2.0 * (1 - 0.05))

    def test_non_finite_names_parameter(self):
        p = {"good": np.zeros(1), "bad": np.zeros(2)}
        with pytest.raises(NonFiniteError, match="bad"):
            adamw_step(p, {"good": np.zeros(1), "bad": np.array([0.0, np.nan])},
                       OptimizerState.fresh(p), 0.1)
        assert p["bad"].tolist() == [0.0, 0.0]

    def test_moment_shapes(self):
        p = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
        s = OptimizerState.fresh(p)
        assert all(s.m[k].shape == p[k].shape == s.v[k].shape for k in p)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_clipping_bounds_norm(seed, scale):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.normal(size=(3, 4)) * scale, "b": rng.normal(size=5) * scale}
    clipped, before = clip_by_global_norm(grads, 1.0)
    assert global_norm(clipped) <= 1.0 + 1e-9
    assert before == pytest.approx(math.sqrt(sum((g ** 2).sum() for g in grads.values())))
    if before <= 1.0:
        assert all(np.array_equal(clipped[k], grads[k]) for k in grads)


class TestTrain:
    def test_metrics_file_bitwise_reproducible(self, tmp_path, small_corpus):
        corpus = load_corpus(small_corpus)
        cfg = tiny_train_config(max_steps=2)
        train(cfg, corpus, 5, tmp_path / "a", clock=fake_clock())
        train(cfg, corpus, 5, tmp_path / "b", clock=fake_clock())
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a.decode().splitlines()[0] == ",".join(METRICS_HEADER)

    def test_rows_and_bias_updates(self, small_corpus):
        cfg = tiny_train_config(max_steps=4)
        result = train(cfg, load_corpus(small_corpus), 0)
        assert [r.step for r in result.metrics] == [1, 2, 3, 4]
        assert result.model.bias.updates == result.optimizer.step == 4

    def test_baseline_modes_skip_bias(self, small_corpus):
        result = train(tiny_train_config(mode="bdlm", max_steps=2), load_corpus(small_corpus), 0)
        assert result.model.bias.updates == 0
        assert all(r.aux == 0.0 for r in result.metrics)

    def test_resume_is_exact(self, tmp_path, small_corpus):
        corpus = load_corpus(small_corpus)
        cfg = tiny_train_config(max_steps=5, checkpoint_every=2)
        full = train(cfg, corpus, 3, tmp_path / "full", clock=fake_clock())
        part = train(cfg, corpus, 3, tmp_path / "part", stop_after=2, clock=fake_clock())
        resumed = train(cfg, corpus, 3, tmp_path / "part",
                        resume=tmp_path / "part" / "checkpoints" / "step-000002.ckpt")
        assert len(part.metrics) == 2 and [r.step for r in resumed.metrics] == [3, 4, 5]
        for name, p in full.model.params.items():
            assert np.array_equal(p, resumed.model.params[name]), name
        assert np.array_equal(full.model.bias.b, resumed.model.bias.b)
        rows = load_metrics(tmp_path / "part" / "metrics.csv")
        assert [r.step for r in rows] == [1, 2, 3, 4, 5]
        ref = load_metrics(tmp_path / "full" / "metrics.csv")
        assert [(r.nelbo, r.aux, r.violation, r.lr) for r in rows] == \
            [(r.nelbo, r.aux, r.violation, r.lr) for r in ref]

    def test_corpus_too_short(self):
        with pytest.raises(ValueError, match="shorter"):
            train(tiny_train_config(), np.zeros(10, dtype=np.uint8), 0)

    def test_writes_layout(self, tmp_path, small_corpus):
        train(tiny_train_config(max_steps=2), load_corpus(small_corpus), 0, tmp_path)
        assert (tmp_path / "config.txt").exists() and (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "checkpoints" / "final.ckpt").exists()


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, small_corpus):
        result = train(tiny_train_config(max_steps=2), load_corpus(small_corpus), 1, tmp_path)
        saved = ckpt_io.load(tmp_path / "checkpoints" / "final.ckpt")
        assert saved.step == 2 and saved.config == result.model.cfg.replace(seed=0)
        for name, p in result.model.params.items():
            assert saved.params[name].tobytes() == p.tobytes()
            assert saved.moments[0][name].tobytes() == result.optimizer.m[name].tobytes()
        assert saved.bias.b.tobytes() == result.model.bias.b.tobytes()
        ckpt_io.save(saved, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == \
            (tmp_path / "checkpoints" / "final.ckpt").read_bytes()

    def test_header(self, tmp_path):
        cfg = tiny_train_config()
        path = ckpt_io.save(ckpt_io.Checkpoint(cfg, {"w": np.arange(3.0)}), tmp_path / "x.ckpt")
        raw = path.read_bytes()
        assert raw[:4] == b"DCDM" and int.from_bytes(raw[4:8], "little") == ckpt_io.VERSION

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ckpt_io.CheckpointError):
            ckpt_io.load(tmp_path / "bad.ckpt")
        good = ckpt_io.save(ckpt_io.Checkpoint(tiny_train_config(), {"w": np.ones(2)}),
                            tmp_path / "good.ckpt")
        (tmp_path / "cut.ckpt").write_bytes(good.read_bytes()[:-3])
        with pytest.raises(ckpt_io.CheckpointError):
            ckpt_io.load(tmp_path / "cut.ckpt")
