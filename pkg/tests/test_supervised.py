import csv
import math

import numpy as np
import pytest

from ganca import checkpoint as ckpt
from ganca import data
from ganca import supervised as sup
from ganca import tensor as T
from ganca.errors import ConfigError, TrainingDiverged
from ganca.nca import NcaParams
from ganca.optim import AdamState
from ganca.supervised import SamplePool, TrainConfig, pool_sample, train_step_supervised, train_supervised
from oracles import central_diff, nca_rollout64, rel_error


def _square(size, lo, hi, colour):
    img = np.zeros((size, size, 4))
    img[lo:hi, lo:hi] = [*colour, 1.0]
    return img


@pytest.fixture
def tiny_manifest(tmp_path):
    gt = tmp_path / "gt"
    gt.mkdir()
    data.save_png(_square(8, 2, 6, (0.9, 0.2, 0.1)), gt / "a.png")
    data.save_png(_square(8, 1, 5, (0.1, 0.3, 0.8)), gt / "b.png")
    m = data.build_manifest(gt, 0.0, 0, edge_dir=tmp_path / "edges")
    m.save(tmp_path / "edges" / "manifest.json")
    return m


def _cfg(**kw):
    base = dict(steps=4, batch_size=2, iter_lo=3, iter_hi=5, depth=8, hidden=16, seed=0, checkpoint_every=2)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# pool


def test_pool_reuse_zero_always_fresh():
    pool = SamplePool(4, reuse_prob=0.0)
    pool.commit("a", np.ones((2, 2, 5)))
    fresh = np.zeros((2, 2, 5))
    rng = np.random.default_rng(0)
    for _ in range(50):
        np.testing.assert_array_equal(pool_sample(pool, "a", rng, fresh), fresh)


def test_empty_pool_returns_fresh_even_when_reuse_is_certain():
    pool = SamplePool(4, reuse_prob=1.0)
    fresh = np.full((2, 2, 5), 0.25)
    out = pool_sample(pool, "a", np.random.default_rng(0), fresh)
    np.testing.assert_array_equal(out, fresh)
    assert out is not fresh


def test_pool_reuse_one_returns_stored_state():
    pool = SamplePool(4, reuse_prob=1.0)
    stored = [np.full((2, 2, 5), float(k)) for k in range(3)]
    for s in stored:
        pool.commit("a", s)
    rng = np.random.default_rng(1)
    seen = {float(pool_sample(pool, "a", rng, np.zeros((2, 2, 5)))[0, 0, 0]) for _ in range(60)}
    assert seen == {0.0, 1.0, 2.0}


def test_pool_evicts_oldest_first_and_pairs_by_id():
    pool = SamplePool(capacity=2, reuse_prob=1.0)
    for k in range(3):
        pool.commit("a", np.full((1, 1, 5), float(k)))
    pool.commit("b", np.full((1, 1, 5), 9.0))
    assert [float(s[0, 0, 0]) for s in pool.states("a")] == [1.0, 2.0]
    assert len(pool) == 3
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert pool_sample(pool, "b", rng, np.zeros((1, 1, 5)))[0, 0, 0] == 9.0


def test_pool_copies_committed_states():
    pool = SamplePool(2)
    s = np.zeros((1, 1, 5), np.float32)
    pool.commit("a", s)
    s[:] = 7
    assert pool.states("a")[0].max() == 0


def test_pool_tensor_round_trip():
    pool = SamplePool(3)
    rng = np.random.default_rng(0)
    for eid in ("x", "y"):
        for _ in range(2):
            pool.commit(eid, rng.normal(size=(2, 3, 5)))
    layout, tensors = pool.to_tensors()
    back = SamplePool(3)
    back.restore(layout, tensors)
    for eid in ("x", "y"):
        for a, b in zip(pool.states(eid), back.states(eid)):
            np.testing.assert_array_equal(a, b)


def test_pool_rejects_zero_capacity():
    with pytest.raises(ConfigError):
        SamplePool(0)


# ---------------------------------------------------------------------------
# single step


def test_train_step_gradient_matches_finite_difference(monkeypatch):
    # capture what the step hands to Adam and compare with the normalised FD gradient
    rng = np.random.default_rng(0)
    p = NcaParams.init(rng, 6, 8)
    p.b_perc.data[:] = rng.normal(0, 0.1, 8)
    p.w_out.data[:] = rng.normal(0, 0.2, (8, 6))
    p.b_out.data[:] = rng.normal(0, 0.01, 6)
    start = rng.uniform(size=(6, 6, 6)).astype(np.float32)
    target = rng.uniform(size=(6, 6, 4)).astype(np.float32)
    arrays = [t.data.astype(np.float64) for t in p.tensors()]

    captured = {}
    real_adam = sup.adam_step

    def spy(params, grads, state, lr=None):
        captured["grads"] = [g.copy() for g in grads]
        return real_adam(params, grads, state, lr=lr)

    monkeypatch.setattr(sup, "adam_step", spy)
    res = train_step_supervised(
        [("a", start, target)], p, AdamState.for_params(p.tensors()), np.random.default_rng(0), 3, 3
    )
    assert res.n_iters == 3

    def f(arrs):
        return float(np.mean((nca_rollout64(start[None], *arrs, 3)[0, ..., :4] - target) ** 2))

    assert res.loss == pytest.approx(f(arrays), rel=1e-4)
    fd = central_diff(f, arrays, h=1e-6)
    fd = [d / (np.linalg.norm(d) + 1e-8) for d in fd]
    errs = np.concatenate([rel_error(g, d, floor=1e-4).ravel() for g, d in zip(captured["grads"], fd)])
    assert np.mean(errs < 1e-2) >= 0.99


def test_train_step_commits_end_states():
    p = NcaParams.init(np.random.default_rng(0), 8, 8)
    pool = SamplePool(4)
    s = np.zeros((4, 4, 8), np.float32)
    t = np.zeros((4, 4, 4), np.float32)
    res = train_step_supervised([("a", s, t), ("b", s, t)], p, AdamState.for_params(p.tensors()),
                                np.random.default_rng(0), 2, 4, pool=pool)
    assert 2 <= res.n_iters <= 4
    assert len(pool.states("a")) == 1 and len(pool.states("b")) == 1
    np.testing.assert_array_equal(pool.states("a")[0], res.final_states[0])


def test_train_step_rejects_bad_batches():
    p = NcaParams.init(np.random.default_rng(0), 8, 8)
    opt = AdamState.for_params(p.tensors())
    with pytest.raises(ConfigError):
        train_step_supervised([], p, opt, np.random.default_rng(0), 1, 1)
    with pytest.raises(ConfigError, match="depth"):
        train_step_supervised([("a", np.zeros((4, 4, 9)), np.zeros((4, 4, 4)))], p, opt, np.random.default_rng(0), 1, 1)


def test_non_finite_loss_raises_training_diverged():
    p = NcaParams.init(np.random.default_rng(0), 8, 8)
    s = np.full((4, 4, 8), np.inf, np.float32)
    with pytest.raises(TrainingDiverged) as info:
        train_step_supervised([("a", s, np.zeros((4, 4, 4)))], p, AdamState.for_params(p.tensors()),
                              np.random.default_rng(0), 2, 2, step=17)
    assert info.value.step == 17 and info.value.n_iters == 2
    assert not math.isfinite(info.value.loss)


# ---------------------------------------------------------------------------
# loop


def test_single_target_smoke_loss_falls(tmp_path):
    gt = tmp_path / "gt"
    gt.mkdir()
    data.save_png(_square(8, 2, 6, (0.8, 0.3, 0.2)), gt / "a.png")
    data.save_png(_square(8, 2, 6, (0.8, 0.3, 0.2)), gt / "b.png")
    m = data.build_manifest(gt, 0.0, 0, edge_dir=tmp_path / "e")
    cfg = TrainConfig(steps=300, batch_size=1, iter_lo=8, iter_hi=12, depth=16, hidden=32,
                      reuse_prob=0.0, checkpoint_every=1000)
    res = train_supervised(cfg, m, tmp_path / "run")
    assert res.train_losses[299] < res.train_losses[9]


def test_one_step_logs_once_and_saves_final(tiny_manifest, tmp_path):
    res = train_supervised(_cfg(steps=1), tiny_manifest, tmp_path / "run")
    assert len(res.train_losses) == 1
    rows = list(csv.reader(open(res.metrics_path)))
    assert rows[0] == ["step", "split", "loss"] and len(rows) == 2
    assert sorted(p.name for p in (tmp_path / "run").glob("*.ckpt")) == ["final.ckpt"]
    c = ckpt.load(res.final_checkpoint)
    assert c.kind == "nca" and c.header["step"] == 1 and c.header["adam_step"] == 1


def test_training_is_deterministic(tiny_manifest, tmp_path):
    a = train_supervised(_cfg(), tiny_manifest, tmp_path / "a")
    b = train_supervised(_cfg(), tiny_manifest, tmp_path / "b")
    assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()
    assert a.train_losses == b.train_losses


def test_resume_equals_straight_run(tiny_manifest, tmp_path):
    straight = train_supervised(_cfg(steps=4), tiny_manifest, tmp_path / "s")
    train_supervised(_cfg(steps=4), tiny_manifest, tmp_path / "r")
    resumed = train_supervised(_cfg(steps=4), tiny_manifest, tmp_path / "r",
                               resume=tmp_path / "r" / "checkpoint_000002.ckpt")
    assert resumed.final_checkpoint.read_bytes() == straight.final_checkpoint.read_bytes()
    assert resumed.train_losses == straight.train_losses[2:]
    assert open(resumed.metrics_path).read() == open(straight.metrics_path).read()


def test_resume_rejects_mismatched_architecture(tiny_manifest, tmp_path):
    train_supervised(_cfg(steps=2), tiny_manifest, tmp_path / "r")
    with pytest.raises(ConfigError, match="D="):
        train_supervised(_cfg(steps=4, hidden=8), tiny_manifest, tmp_path / "r",
                         resume=tmp_path / "r" / "final.ckpt")


def test_val_losses_are_logged(tmp_path):
    data_dir = tmp_path / "gt"
    data.save_png(_square(8, 2, 6, (1, 0, 0)), data_dir / "a.png")
    data.save_png(_square(8, 1, 5, (0, 1, 0)), data_dir / "b.png")
    data.save_png(_square(8, 3, 7, (0, 0, 1)), data_dir / "c.png")
    m = data.build_manifest(data_dir, 0.34, 0)
    res = train_supervised(_cfg(steps=4, val_every=2), m, tmp_path / "run")
    rows = list(csv.reader(open(res.metrics_path)))[1:]
    assert [r[0] for r in rows if r[1] == "val"] == ["2", "4"]


def test_config_validation():
    assert TrainConfig().validate() is not None
    for bad in (dict(steps=0), dict(batch_size=0), dict(iter_lo=0), dict(iter_lo=9, iter_hi=3),
                dict(lr=0.0), dict(reuse_prob=1.5), dict(pool_capacity=0), dict(depth=4),
                dict(lr_decay_at=2.0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_lr_schedule_drops_at_eighty_percent():
    cfg = TrainConfig(steps=100, lr=2e-3)
    assert cfg.lr_at(0) == 2e-3 and cfg.lr_at(79) == 2e-3
    assert cfg.lr_at(80) == pytest.approx(2e-4)


def test_rgba_mse_of_identity_rule_is_seed_error():
    p = NcaParams.init(np.random.default_rng(0), 8, 8)
    e = np.eye(4)
    ex = sup.Example("a", sup.build_seed(e, 8), np.zeros((4, 4, 4), np.float32))
    assert sup.rgba_mse(p, [ex], 5) == pytest.approx(np.mean(e**2))


def test_no_train_entries_is_config_error(tmp_path):
    gt = tmp_path / "gt"
    data.save_png(np.ones((4, 4, 4)), gt / "a.png")
    data.save_png(np.ones((4, 4, 4)), gt / "b.png")
    m = data.build_manifest(gt, 0.0, 0)
    for e in m.entries:
        e.split = "val"
    with pytest.raises(ConfigError, match="no train"):
        train_supervised(_cfg(), m, tmp_path / "run")


def test_loop_leaves_no_open_tape(tiny_manifest, tmp_path):
    train_supervised(_cfg(steps=1), tiny_manifest, tmp_path / "run")
    assert T._active_tape() is None
