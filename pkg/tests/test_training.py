import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambapeft.checkpoint import decode, encode, load_checkpoint, load_store, save_checkpoint
from mambapeft.errors import CheckpointError, ConfigError, TrainingDiverged
from mambapeft.mamba import MambaConfig, MambaModel
from mambapeft.peft import PeftSpec, apply_specs, variant_spec
from mambapeft.tasks import TaskSpec, make_task, majority_label, sample
from mambapeft.training import (
    OptimizerState,
    Schedule,
    TrainConfig,
    adamw_step,
    evaluate,
    lr_at,
    train,
)
from mambapeft.store import ParamStore

TINY = dict(d_model=8, expand=2, d_state=2, n_layers=1, vocab_size=8, n_classes=2, max_seq_len=16)


def tiny_model(seed=0, **kw):
    return MambaModel.create(MambaConfig(**{**TINY, **kw}), seed=seed)


class TestSchedule:
    def test_boundaries(self):
        s = Schedule(total_steps=100, warmup_steps=10, peak=1e-3)
        assert lr_at(0, s) == 0.0
        assert lr_at(10, s) == pytest.approx(1e-3, abs=1e-12)
        assert lr_at(55, s) == pytest.approx(5e-4, abs=1e-12)
        assert lr_at(100, s) == pytest.approx(0.0, abs=1e-12)

    def test_linear_warmup(self):
        s = Schedule(20, 4, 2.0)
        assert [lr_at(k, s) for k in range(5)] == [0.0, 0.5, 1.0, 1.5, 2.0]

    def test_continuous_at_warmup(self):
        s = Schedule(1000, 100, 1.0)
        assert abs(lr_at(99, s) - lr_at(100, s)) < 0.011
        assert abs(lr_at(101, s) - lr_at(100, s)) < 1e-4

    def test_no_warmup(self):
        assert lr_at(0, Schedule(10, 0, 3.0)) == 3.0

    def test_floor(self):
        assert lr_at(10, Schedule(10, 2, 1.0, floor=0.1)) == pytest.approx(0.1, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            lr_at(11, Schedule(10, 1, 1.0))

    @given(st.integers(1, 500), st.floats(0.0, 1.0), st.data())
    def test_bounded(self, total, frac, data):
        s = Schedule.cosine(total, 1e-3, frac)
        k = data.draw(st.integers(0, total))
        assert 0.0 <= lr_at(k, s) <= 1e-3 + 1e-18


def scalar_store(value=0.0, anchored=None):
    store = ParamStore()
    store.add("w", np.array([value]), trainable=True)
    store.snapshot_pretrained()
    if anchored is not None:
        store["w"].data = np.array([anchored])
        store.anchored.add("w")
    return store


class TestAdamW:
    def test_scalar_first_step(self):
        store = scalar_store(0.0)
        opt = OptimizerState.for_store(store, lr=0.1, wd=0.0)
        store["w"].grad = np.array([1.0])
        adamw_step(store, opt)
        # m_hat = v_hat = 1 after bias correction
        assert store["w"].data[0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)

    def test_zero_grad_zero_wd_unchanged(self):
        store = scalar_store(0.7)
        opt = OptimizerState.for_store(store, lr=0.1, wd=0.0)
        for _ in range(3):
            store["w"].grad = np.zeros(1)
            adamw_step(store, opt)
        assert store["w"].data[0] == 0.7

    def test_plain_decay(self):
        store = scalar_store(2.0)
        opt = OptimizerState.for_store(store, lr=0.1, wd=0.5)
        store["w"].grad = np.zeros(1)
        adamw_step(store, opt)
        assert store["w"].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)

    def test_anchored_at_anchor_is_zero(self):
        store = scalar_store(1.5, anchored=1.5)
        opt = OptimizerState.for_store(store, lr=0.1, wd=0.5)
        store["w"].grad = np.zeros(1)
        adamw_step(store, opt)
        assert store["w"].data[0] == 1.5

    def test_anchored_pulls_to_snapshot(self):
        store = scalar_store(1.0, anchored=3.0)
        opt = OptimizerState.for_store(store, lr=0.1, wd=1e-3)
        gaps = []
        for _ in range(50):
            store["w"].grad = np.zeros(1)
            adamw_step(store, opt)
            gaps.append(abs(store["w"].data[0] - 1.0))
        assert all(b < a for a, b in zip(gaps, gaps[1:]))

    def test_override(self):
        store = scalar_store(0.0)
        opt = OptimizerState.for_store(store, lr=0.1, wd=0.0, overrides={"w": (0.01, None)})
        store["w"].grad = np.array([1.0])
        adamw_step(store, opt)
        assert store["w"].data[0] == pytest.approx(-0.01, rel=1e-7)

    def test_schedule_scales(self):
        store = scalar_store(0.0)
        opt = OptimizerState.for_store(store, lr=0.1, wd=0.0)
        store["w"].grad = np.array([1.0])
        adamw_step(store, opt, Schedule(4, 2, 0.1))
        assert store["w"].data[0] == pytest.approx(-0.05, rel=1e-7)

    def test_missing_grad(self):
        store = scalar_store(0.0)
        opt = OptimizerState.for_store(store, lr=0.1, wd=0.0)
        with pytest.raises(ConfigError, match="no gradient"):
            adamw_step(store, opt)

    def test_step_counter(self):
        store = scalar_store(0.0)
        opt = OptimizerState.for_store(store, lr=0.1, wd=0.0)
        for k in range(1, 4):
            store["w"].grad = np.ones(1)
            adamw_step(store, opt)
            assert opt.step == k
        assert set(opt.m) == {"w"}


class TestTasks:
    @pytest.mark.parametrize("kind", ["selective-copy", "majority-token", "shifted-majority", "lagged-recall"])
    def test_deterministic(self, kind):
        spec = TaskSpec(kind=kind, seed=3)
        a, b = sample(spec, 5), sample(spec, 5)
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]
        assert a[0].shape == (spec.seq_len,) and 0 <= a[1] < spec.n_classes

    def test_identity_shift_is_majority(self):
        base = TaskSpec(kind="majority-token", seed=2)
        shifted = TaskSpec(kind="shifted-majority", seed=2, permutation=list(range(8)))
        for i in range(20):
            x0, y0 = sample(base, i)
            x1, y1 = sample(shifted, i)
            assert np.array_equal(x0, x1) and y0 == y1

    def test_shift_permutes_tokens(self):
        base = TaskSpec(kind="majority-token", seed=2)
        shifted = TaskSpec(kind="shifted-majority", seed=2, perm_seed=5)
        perm = shifted.perm()
        x0, y0 = sample(base, 1)
        x1, y1 = sample(shifted, 1)
        assert np.array_equal(perm[x0], x1) and y0 == y1

    def test_majority_ties_lowest(self):
        assert majority_label(np.array([3, 1, 3, 1]), 8, 8) == 1
        assert majority_label(np.array([5, 5, 5]), 8, 2) == 1

    def test_selective_copy(self):
        spec = TaskSpec(kind="selective-copy", vocab=6, n_classes=5)
        for i in range(10):
            x, y = sample(spec, i)
            at = int(np.flatnonzero(x == 5)[0])
            assert y == x[at + 1]

    def test_lagged_recall(self):
        spec = TaskSpec(kind="lagged-recall", lag=3, n_classes=8)
        x, y = sample(spec, 0)
        assert y == x[-4]

    def test_splits_disjoint_indices(self):
        spec = TaskSpec(n_train=10, n_val=4)
        tr, va = make_task(spec)
        assert len(tr) == 10 and len(va) == 4
        assert np.array_equal(va.x[0], sample(spec, 10)[0])

    @pytest.mark.parametrize(
        "kw",
        [dict(kind="sorting"), dict(vocab=3, n_classes=4), dict(kind="selective-copy", vocab=4, n_classes=4), dict(n_train=0), dict(permutation=[0, 0, 1, 2, 3, 4, 5, 6])],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TaskSpec(**kw)


class TestTrain:
    def _data(self, **kw):
        return make_task(TaskSpec(**{"n_train": 64, "n_val": 32, **kw}))

    def test_deterministic(self):
        tr, va = self._data()
        runs = []
        for _ in range(2):
            model = tiny_model(seed=1)
            runs.append(train(model, tr, va, TrainConfig(epochs=2, batch_size=16, lr=5e-3)).history)
        assert runs[0] == runs[1]

    def test_zero_lr_keeps_weights(self):
        tr, va = self._data()
        model = tiny_model(seed=2)
        before = model.store.state()
        _, acc0 = evaluate(model, va)
        result = train(model, tr, va, TrainConfig(epochs=2, lr=0.0, wd=0.0))
        after = model.store.state()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert result.final()["acc"] == acc0

    def test_emits_rows(self):
        tr, va = self._data()
        rows = []
        train(tiny_model(), tr, va, TrainConfig(epochs=2), emit=rows.append)
        assert [(r["epoch"], r["split"]) for r in rows] == [(1, "train"), (1, "val"), (2, "train"), (2, "val")]
        assert set(rows[0]) == {"epoch", "split", "loss", "acc"}

    def test_divergence_raises(self):
        tr, va = self._data()
        model = tiny_model()
        model.store["head.bias"].data[...] = np.nan
        with pytest.raises(TrainingDiverged):
            train(model, tr, va, TrainConfig(epochs=1))

    def test_loss_decreases_early(self):
        tr, va = make_task(TaskSpec(n_train=256, n_val=64))
        model = MambaModel.create(MambaConfig(d_model=16, d_state=4), seed=0)
        res = train(model, tr, va, TrainConfig(epochs=5, lr=5e-3))
        losses = [r["loss"] for r in res.history if r["split"] == "train"]
        assert losses[-1] < losses[0]

    def test_zero_init_adapters_lr0_match_pretrained(self):
        tr, va = self._data()
        model = tiny_model(seed=3)
        _, acc0 = evaluate(model, va)
        specs = [variant_spec(n) for n in ("LoRA(in_proj)", "LoRA_p(X)", "ParallelAdapter", "Additional-scan")]
        apply_specs(model, specs)
        res = train(model, tr, va, TrainConfig(epochs=1, lr=0.0))
        assert res.final()["acc"] == acc0

    @pytest.mark.slow
    def test_full_finetune_fits_majority(self):
        tr, va = make_task(TaskSpec(n_train=512, seq_len=16))
        model = MambaModel.create(MambaConfig(d_model=32, d_state=4), seed=0)
        res = train(model, tr, va, TrainConfig(epochs=30))
        assert res.final("train")["acc"] >= 0.95


class TestCheckpoint:
    def _model(self):
        model = tiny_model(seed=4)
        apply_specs(model, [PeftSpec("LoRA", target="in_proj", r=2), PeftSpec("PartialTuning", target="D")], train_head=True)
        model.store["peft.LoRA.in_proj.layers.0.W_up"].data[...] = 0.25
        return model

    def test_roundtrip_bytes(self, tmp_path):
        model = self._model()
        p1, p2 = tmp_path / "a.mpk", tmp_path / "b.mpk"
        save_checkpoint(model, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_values(self, tmp_path):
        model = self._model()
        save_checkpoint(model, tmp_path / "a.mpk")
        back = load_checkpoint(tmp_path / "a.mpk")
        for path in model.store:
            assert np.array_equal(back.store[path].data, model.store[path].data)
            assert back.store.trainable[path] == model.store.trainable[path]
        for path, snap in model.store.pretrained.items():
            assert np.array_equal(back.store.pretrained[path], snap)
        assert back.store.anchored == model.store.anchored
        x = np.arange(10)[None] % 8
        assert np.array_equal(back(x).data, model(x).data)

    def test_bad_magic(self):
        raw = encode(self._model().store)
        with pytest.raises(CheckpointError, match="magic"):
            decode(b"MPK2" + raw[4:])

    def test_truncated(self):
        raw = encode(self._model().store)
        with pytest.raises(CheckpointError, match="bytes"):
            decode(raw[:-8])

    def test_header_mismatch(self):
        raw = encode(self._model().store)
        with pytest.raises(CheckpointError, match="bytes"):
            decode(raw.replace(b"head.bias\t2\t", b"head.bias\t3\t", 1))

    def test_malformed_entry(self):
        raw = encode(self._model().store)
        with pytest.raises(CheckpointError, match="malformed"):
            decode(raw.replace(b"\tparam\n", b"\tweights\n", 1))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot read"):
            load_store(tmp_path / "nope.mpk")

    def test_magic_first_bytes(self, tmp_path):
        save_checkpoint(self._model(), tmp_path / "a.mpk")
        assert (tmp_path / "a.mpk").read_bytes()[:4] == b"MPK1"
