import math

import numpy as np
import pytest
from conftest import tiny_records, tiny_train_config

from usmim import checkpoint as ckpt
from usmim import tensor as T
from usmim.train import (METRIC_COLUMNS, MetricsRow, OptimizerState, Trainer, TrainState, adamw_step,
                         checkpoint_load, checkpoint_save, clip_grads, decays, global_norm, lr_schedule,
                         metrics_csv, pretrain, read_metrics, state_entries, total_loss)


def params_of(**arrays):
    return {k: T.parameter(np.asarray(v, dtype=np.float64)) for k, v in arrays.items()}


class TestAdamW:
    def test_decay_only(self):
        p = params_of(w=[1.0, -2.0])
        st = OptimizerState.zeros_like(p)
        adamw_step(p, {"w": np.zeros(2)}, st, 5e-4, 0.04)
        np.testing.assert_allclose(p["w"].data, [0.99998, -1.99996], rtol=0, atol=1e-15)

    def test_first_step_is_sign(self, rng):
        g = rng.normal(size=10)
        p = params_of(w=np.zeros(10))
        adamw_step(p, {"w": g}, OptimizerState.zeros_like(p), 1e-3, 0.0)
        # m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps)
        np.testing.assert_allclose(p["w"].data, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(p["w"].data, -1e-3 * np.sign(g), rtol=1e-6)

    def test_groups_skip_decay(self):
        p = params_of(**{"blk.w": [1.0], "blk.b": [1.0], "norm.g": [1.0]})
        mask = {k: decays(k) for k in p}
        assert mask == {"blk.w": True, "blk.b": False, "norm.g": False}
        adamw_step(p, {}, OptimizerState.zeros_like(p), 0.1, 0.5, decay_mask=mask)
        assert p["blk.w"].data[0] == pytest.approx(0.95)
        assert p["blk.b"].data[0] == 1.0 and p["norm.g"].data[0] == 1.0

    def test_non_finite_skips(self):
        p = params_of(w=[1.0, 2.0])
        st = OptimizerState.zeros_like(p)
        assert not adamw_step(p, {"w": np.array([np.nan, 1.0])}, st, 0.1, 0.1)
        assert p["w"].data.tolist() == [1.0, 2.0] and st.step == 0

    def test_shape_mismatch(self):
        p = params_of(w=[1.0, 2.0])
        with pytest.raises(T.ShapeError):
            adamw_step(p, {"w": np.zeros(3)}, OptimizerState.zeros_like(p), 0.1, 0.0)

    def test_matches_reference_loop(self, rng):
        # an independent scalar implementation over several steps
        g_seq = rng.normal(size=(5, 3))
        p = params_of(w=np.ones(3))
        st = OptimizerState.zeros_like(p)
        ref = np.ones(3)
        m = np.zeros(3)
        v = np.zeros(3)
        for t, g in enumerate(g_seq, 1):
            adamw_step(p, {"w": g}, st, 0.01, 0.1)
            for i in range(3):
                ref[i] *= 1 - 0.01 * 0.1
                m[i] = 0.9 * m[i] + 0.1 * g[i]
                v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
                ref[i] -= 0.01 * (m[i] / (1 - 0.9**t)) / (math.sqrt(v[i] / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"].data, ref, rtol=1e-13)


def test_clip_grads():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grads(grads, 1.0) == 5.0
    assert global_norm(grads) == pytest.approx(1.0)
    grads = {"a": np.array([0.3])}
    clip_grads(grads, 1.0)
    assert grads["a"][0] == 0.3


class TestLRSchedule:
    def test_points(self):
        assert lr_schedule(0, 100, 10, 1.0) == 0.0
        assert lr_schedule(10, 100, 10, 1.0) == 1.0
        assert lr_schedule(55, 100, 10, 1.0) == pytest.approx(0.5, abs=1e-15)
        assert lr_schedule(100, 100, 10, 1.0) == 0.0

    def test_no_warmup(self):
        assert lr_schedule(0, 10, 0, 2.0) == 2.0

    def test_bad(self):
        with pytest.raises(ValueError):
            lr_schedule(0, 10, 10, 1.0)


class TestTotalLoss:
    def test_sum(self):
        assert total_loss({"cls": 1.0, "patch": 2.0, "recon_g": 3.0, "recon_l": 4.0}) == 10.0

    def test_only_contrastive(self):
        assert total_loss({"cls": 1.5, "patch": 2.5}) == 4.0

    def test_zeros(self):
        assert total_loss({"cls": 0.0, "patch": 0.0}) == 0.0
        assert total_loss({}) == 0.0

    def test_weights(self):
        assert total_loss({"cls": 1.0, "patch": 2.0}, {"patch": 0.5}) == 2.0


def test_metrics_csv_roundtrip(tmp_path):
    rows = [MetricsRow(1, 1, 0.1 + 0.2, 0.1, 0.2, 0.0, 0.0, 0.1, 0.1, 1e-4, 5.0)]
    text = metrics_csv(rows)
    assert text.splitlines()[0] == ",".join(METRIC_COLUMNS)
    (tmp_path / "m.csv").write_text(text)
    assert read_metrics(tmp_path / "m.csv") == rows


class TestTrainer:
    def test_schedule_endpoints(self):
        tr = Trainer(tiny_train_config(epochs=5), tiny_records(4))
        assert tr.schedule(0) == (0.1, 0.1)
        assert tr.schedule(4) == (0.9, 0.9)

    def test_mask_mode_overrides(self):
        assert Trainer(tiny_train_config(global_mask="attention"), tiny_records(4)).schedule(2)[0] == 0.0
        assert Trainer(tiny_train_config(global_mask="reconstruction"), tiny_records(4)).schedule(0)[0] == 1.0

    def test_loss_total_is_component_sum(self):
        tr = Trainer(tiny_train_config(), tiny_records())
        for _ in range(3):
            for r in tr.run_epoch():
                parts = math.fsum([r.loss_cls, r.loss_patch, r.loss_recon_g, r.loss_recon_l])
                assert abs(r.loss_total - parts) <= 1e-6
                assert all(math.isfinite(v) for v in (r.loss_total, r.teacher_entropy))

    def test_disabled_terms_log_zero(self):
        tr = Trainer(tiny_train_config(use_recon_global=False, use_recon_local=False), tiny_records(4))
        rows = tr.run_epoch()
        assert all(r.loss_recon_g == 0.0 and r.loss_recon_l == 0.0 for r in rows)
        assert all(r.loss_total == math.fsum([r.loss_cls, r.loss_patch]) for r in rows)

    def test_loss_isolation(self):
        cfg = tiny_train_config(use_cls=False, use_patch=False, use_recon_local=False, views__n_local=0)
        tr = Trainer(cfg, tiny_records(4))
        tr.run_epoch()
        m = tr.state.opt.m
        for name in m:
            if name.startswith("head."):
                assert not np.any(m[name]), name
        assert any(np.any(m[k]) for k in m if k.startswith("recon."))

    def test_teacher_in_convex_hull(self):
        tr = Trainer(tiny_train_config(lam=0.9), tiny_records(4))
        student, teacher = tr.state.pair.student, tr.state.pair.teacher
        lo = {k: p.data.astype(np.float64).copy() for k, p in teacher.items()}
        hi = {k: v.copy() for k, v in lo.items()}
        snapshot = tr.state.rec_ema.snapshot()
        for epoch in range(3):
            order = tr.batch_order(epoch)
            for i in range(0, len(order), 4):
                tr.train_step(order[i:i + 4], epoch, snapshot)
                for k, p in student.items():
                    lo[k] = np.minimum(lo[k], p.data)
                    hi[k] = np.maximum(hi[k], p.data)
                for k, p in teacher.items():
                    tol = 1e-6 * (1 + np.abs(p.data))  # float32 rounding of the blend
                    assert np.all(p.data >= lo[k] - tol) and np.all(p.data <= hi[k] + tol), k

    def test_frozen_system(self):
        cfg = tiny_train_config(lam=1.0, base_lr=0.0, centering=False, global_mask="rbw",
                                epoch_invariant_sampling=True)
        tr = Trainer(cfg, tiny_records(4))
        by_epoch = [[(r.loss_cls, r.loss_patch, r.loss_recon_g, r.loss_recon_l) for r in tr.run_epoch()]
                    for _ in range(3)]
        assert by_epoch[0] == by_epoch[1] == by_epoch[2]

    def test_worker_invariance(self):
        a = Trainer(tiny_train_config(), tiny_records(), workers=1)
        b = Trainer(tiny_train_config(), tiny_records(), workers=3)
        for _ in range(2):
            assert metrics_csv(a.run_epoch()) == metrics_csv(b.run_epoch())

    def test_duplicate_ids(self):
        recs = tiny_records(2)
        with pytest.raises(ValueError):
            Trainer(tiny_train_config(), [recs[0], recs[0]])

    def test_finished_run(self):
        tr = Trainer(tiny_train_config(epochs=1, warmup_epochs=0), tiny_records(4))
        tr.run_epoch()
        with pytest.raises(ValueError):
            tr.run_epoch()


class TestCheckpoint:
    def test_byte_roundtrip(self, tmp_path):
        tr = Trainer(tiny_train_config(), tiny_records(4))
        tr.run_epoch()
        checkpoint_save(tmp_path / "a.ckpt", tr.state)
        back = checkpoint_load(tmp_path / "a.ckpt")
        a, b = state_entries(tr.state), state_entries(back)
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes(), k
        checkpoint_save(tmp_path / "b.ckpt", back)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_layout(self, tmp_path):
        ckpt.save(tmp_path / "x.ckpt", {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        buf = (tmp_path / "x.ckpt").read_bytes()
        assert buf[:8] == b"OUSCKPT1"
        assert int.from_bytes(buf[8:12], "little") == 1
        assert int.from_bytes(buf[12:14], "little") == 1 and buf[14:15] == b"w"
        assert buf[15] == 0 and buf[16] == 2
        assert int.from_bytes(buf[17:21], "little") == 2 and int.from_bytes(buf[21:25], "little") == 3
        assert len(buf) == 25 + 24 + 8
        assert int.from_bytes(buf[-8:], "little") == ckpt.checksum(buf[:-8])

    @pytest.mark.parametrize("where", ["magic", "body", "tail"])
    def test_corruption_rejected(self, tmp_path, where):
        tr = Trainer(tiny_train_config(), tiny_records(4))
        path = tmp_path / "a.ckpt"
        checkpoint_save(path, tr.state)
        buf = bytearray(path.read_bytes())
        pos = {"magic": 0, "body": len(buf) // 2, "tail": len(buf) - 1}[where]
        buf[pos] ^= 0xFF
        path.write_bytes(bytes(buf))
        with pytest.raises(ckpt.CheckpointError):
            checkpoint_load(path)

    def test_truncated(self, tmp_path):
        ckpt.save(tmp_path / "x.ckpt", {"w": np.zeros(4)})
        buf = (tmp_path / "x.ckpt").read_bytes()
        (tmp_path / "x.ckpt").write_bytes(buf[:20])
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load(tmp_path / "x.ckpt")

    def test_version_mismatch(self, tmp_path):
        tr = Trainer(tiny_train_config(), tiny_records(4))
        e = state_entries(tr.state)
        e["meta.version"] = np.array([99.0])
        ckpt.save(tmp_path / "v.ckpt", e)
        with pytest.raises(ckpt.CheckpointError):
            checkpoint_load(tmp_path / "v.ckpt")

    def test_missing_entry(self, tmp_path):
        e = state_entries(TrainState.fresh(tiny_train_config()))
        del e["center.cls"]
        ckpt.save(tmp_path / "m.ckpt", e)
        with pytest.raises(ckpt.CheckpointError):
            checkpoint_load(tmp_path / "m.ckpt")


class TestPretrain:
    def test_deterministic_csv(self, tmp_path):
        cfg, recs = tiny_train_config(), tiny_records()
        pretrain(cfg, recs, tmp_path / "a")
        pretrain(cfg, recs, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg, recs = tiny_train_config(epochs=4), tiny_records()
        pretrain(cfg, recs, tmp_path / "full")
        pretrain(cfg, recs, tmp_path / "part", stop_after=2, ckpt_every=1)
        pretrain(cfg, recs, tmp_path / "part", resume=tmp_path / "part" / "epoch_002.ckpt")
        assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()
        assert (tmp_path / "full" / "last.ckpt").read_bytes() == (tmp_path / "part" / "last.ckpt").read_bytes()

    def test_resume_config_mismatch(self, tmp_path):
        cfg, recs = tiny_train_config(epochs=2, warmup_epochs=0), tiny_records(4)
        pretrain(cfg, recs, tmp_path, stop_after=1)
        with pytest.raises(ValueError):
            pretrain(tiny_train_config(epochs=2, warmup_epochs=0, seed=5), recs, tmp_path,
                     resume=tmp_path / "last.ckpt")
