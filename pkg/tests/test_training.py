import csv
import math

import numpy as np
import pytest

from haca.checkpoint import from_bytes, to_bytes
from haca.data import SynthConfig, make_batch, synth_dataset
from haca.model import HacaConfig, Model, scheduled_sample
from haca.tensor import Tensor, set_debug
from haca.training import (METRICS_HEADER, AdadeltaState, TrainConfig, Trainer,
                           TrainingDiverged, adadelta_update, clip_gradients,
                           cross_entropy_loss, lr_plateau, plateau_reductions,
                           teacher_forcing_prob)


def logp(rows):
    return [Tensor(np.log(np.asarray(r, dtype=float))[None]) for r in rows]


@pytest.fixture(scope="module")
def tiny():
    return synth_dataset(SynthConfig(train=8, val=4, test=0), seed=3)


def tiny_model(ds, seed=0, **kw):
    return Model(HacaConfig.micro(vocab_size=len(ds.vocab), **kw), seed)


def test_cross_entropy_hand_example():
    # zero-based targets: word 1 in both steps
    loss = cross_entropy_loss(logp([[0.2, 0.5, 0.3], [0.6, 0.3, 0.1]]), np.array([1, 1]),
                              reduction="sum")
    assert float(loss.data) == pytest.approx(-(math.log(0.5) + math.log(0.3)), abs=1e-12)
    assert float(loss.data) == pytest.approx(1.897, abs=5e-4)
    mean = cross_entropy_loss(logp([[0.2, 0.5, 0.3], [0.6, 0.3, 0.1]]), np.array([1, 1]))
    assert float(mean.data) == pytest.approx(float(loss.data) / 2, abs=1e-15)


def test_cross_entropy_uniform_and_perfect():
    V = 7
    uniform = [Tensor(np.full((2, V), -math.log(V))) for _ in range(3)]
    targets = np.array([[4, 5, 2], [6, 2, 0]])
    assert float(cross_entropy_loss(uniform, targets).data) == pytest.approx(math.log(V), abs=1e-12)
    onehot = np.full((1, V), -np.inf)
    onehot[0, 3] = 0.0
    with np.errstate(invalid="ignore"):
        perfect = cross_entropy_loss([Tensor(onehot)], np.array([[3]]))
    assert float(perfect.data) == 0.0


def test_cross_entropy_padding_excluded():
    rows = [Tensor(np.log(np.array([[0.5, 0.25, 0.25]]))) for _ in range(2)]
    a = cross_entropy_loss(rows[:1], np.array([[1]]))
    b = cross_entropy_loss(rows, np.array([[1, 0]]))
    assert float(a.data) == float(b.data)


def test_cross_entropy_errors():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy_loss(logp([[0.5, 0.5]]), np.array([2]))
    with pytest.raises(ValueError):
        cross_entropy_loss(logp([[0.5, 0.5]]), np.array([1, 1]))


def test_zero_parameter_model_loss_is_log_vocab(tiny):
    m = tiny_model(tiny)
    for p in m.params.values():
        p.data[:] = 0.0
    batch = make_batch(tiny.train, ["visual", "audio"])
    outs = m.forward_teacher_forced(batch.features, batch.targets, batch.lengths)
    loss = float(cross_entropy_loss(outs, batch.targets).data)
    assert abs(loss - math.log(len(tiny.vocab))) <= 1e-9


def test_scheduled_sampling_fraction():
    rng = np.random.default_rng(0)
    truth = np.zeros(10_000, dtype=np.int64)
    picked = scheduled_sample(truth, np.ones_like(truth), 0.5, rng)
    assert 0.48 <= (picked == 0).mean() <= 0.52


def test_teacher_forcing_one_matches_plain_path(tiny):
    m = tiny_model(tiny, seed=4)
    batch = make_batch(tiny.train, ["visual", "audio"])
    a = m.forward_teacher_forced(batch.features, batch.targets, batch.lengths)
    b = m.forward_teacher_forced(batch.features, batch.targets, batch.lengths,
                                 teacher_forcing=1.0, rng=np.random.default_rng(1), train=True)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


def test_teacher_forcing_zero_feeds_own_argmax(tiny):
    m = tiny_model(tiny, seed=4)
    batch = make_batch(tiny.train[:2], ["visual", "audio"])
    outs = m.forward_teacher_forced(batch.features, batch.targets, batch.lengths,
                                    teacher_forcing=0.0)
    state, memory, _ = m.start(batch.features, batch.lengths)
    words = state.prev_words
    for o in outs:
        step, state = m.decode_step(state, memory, words)
        np.testing.assert_array_equal(step.data, o.data)
        words = step.data.argmax(axis=1)


def test_teacher_forcing_schedule():
    cfg = TrainConfig(max_epochs=11, tf_start=1.0, tf_end=0.75)
    assert teacher_forcing_prob(1, cfg) == 1.0
    assert teacher_forcing_prob(11, cfg) == 0.75
    assert teacher_forcing_prob(6, cfg) == pytest.approx(0.875)
    assert teacher_forcing_prob(50, cfg) == 0.75


def test_adadelta_zero_gradient():
    p = np.array([1.0, -2.0])
    state = AdadeltaState(np.array([0.5, 0.5]), np.array([0.2, 0.2]))
    adadelta_update(p, np.zeros(2), state, lr=1.0)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    np.testing.assert_allclose(state.sq_grad, 0.95 * 0.5)
    np.testing.assert_allclose(state.sq_delta, 0.95 * 0.2)


@pytest.mark.parametrize("lr", [1.0, 0.3])
def test_adadelta_first_step_closed_form(lr):
    g = np.array([0.5, -3.0, 1e-4])
    rho, eps = 0.95, 1e-6
    p = np.zeros(3)
    state = AdadeltaState(np.zeros(3), np.zeros(3))
    step = adadelta_update(p, g, state, lr, rho, eps)
    expected = -lr * math.sqrt(eps) / np.sqrt((1 - rho) * g * g + eps) * g
    np.testing.assert_allclose(step, expected, rtol=1e-14)
    np.testing.assert_allclose(p, expected, rtol=1e-14)


def test_adadelta_quadratic_monotone():
    x = np.array([3.0])
    state = AdadeltaState(np.zeros(1), np.zeros(1))
    losses = []
    for _ in range(200):
        losses.append(0.5 * float(x[0]) ** 2)
        adadelta_update(x, x.copy(), state, lr=1.0)
    assert all(b <= a for a, b in zip(losses[5:], losses[6:]))
    assert losses[-1] < losses[0]


def test_adadelta_rejects_nonfinite():
    with pytest.raises(TrainingDiverged):
        adadelta_update(np.zeros(1), np.array([np.nan]), AdadeltaState(np.zeros(1), np.zeros(1)), 1.0)


def test_clipping():
    np.testing.assert_array_equal(clip_gradients(np.array([15.0, -15.0, 3.0])), [10.0, -10.0, 3.0])
    g = np.random.default_rng(0).normal(scale=20, size=100)
    once = clip_gradients(g)
    np.testing.assert_array_equal(clip_gradients(once), once)
    assert clip_gradients({"a": np.array([11.0])})["a"][0] == 10.0


def test_plateau_rule():
    assert lr_plateau([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 1.0) == 1.0
    assert lr_plateau([0.3] * 5, 1.0) == 0.5
    assert not any(plateau_reductions([0.3] * 4))
    every_third = [0.1 * (i // 3) for i in range(30)]
    assert not any(plateau_reductions(every_third))
    # counter restarts after each reduction
    assert plateau_reductions([0.5] * 9) == [False] * 4 + [True] + [False] * 3 + [True]
    with pytest.raises(ValueError):
        lr_plateau([], 1.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(plateau_patience=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(tf_end=1.5).validate()


def run_trainer(ds, epochs, seed=0, **kw):
    cfg = TrainConfig(batch_size=4, max_epochs=epochs, seed=seed, **kw)
    t = Trainer(tiny_model(ds), ds.train, ds.val, cfg)
    t.run()
    return t


def test_training_is_deterministic(tiny):
    a = run_trainer(tiny, 2, tf_end=1.0)
    b = run_trainer(tiny, 2, tf_end=1.0)
    for name in a.model.params:
        assert np.array_equal(a.model.params[name].data, b.model.params[name].data)
    assert [m.row() for m in a.history] == [m.row() for m in b.history]


def test_single_sample_single_epoch_deterministic(tiny):
    def final():
        cfg = TrainConfig(batch_size=1, max_epochs=1)
        t = Trainer(tiny_model(tiny), tiny.train[:1], [], cfg)
        return t.run()[-1].train_loss
    assert final() == final()


def test_shuffle_changes_order_only_when_enabled(tiny):
    def order(shuffle):
        t = Trainer(tiny_model(tiny), tiny.train, [], TrainConfig(batch_size=3, shuffle=shuffle))
        return [p for b in t.batches() for p in b]
    assert order(False) == [(i, 0) for i in range(8)]
    assert order(True) != order(False)
    assert sorted(order(True)) == order(False)


def test_resume_matches_uninterrupted_run(tiny):
    kw = dict(batch_size=4, max_epochs=4, tf_end=0.5, seed=5)
    full = Trainer(tiny_model(tiny, dropout=0.3), tiny.train, tiny.val, TrainConfig(**kw))
    full.run()

    first = Trainer(tiny_model(tiny, dropout=0.3), tiny.train, tiny.val, TrainConfig(**kw))
    first.run(2)
    blob = to_bytes(first.checkpoint())
    resumed = Trainer.from_checkpoint(from_bytes(blob), tiny.train, tiny.val)
    assert resumed.config == TrainConfig(**kw)
    resumed.run()
    for name in full.model.params:
        assert np.array_equal(full.model.params[name].data, resumed.model.params[name].data)
    assert [m.row() for m in full.history] == [m.row() for m in resumed.history]


def test_metrics_csv_and_checkpoint(tiny, tmp_path):
    cfg = TrainConfig(batch_size=4, max_epochs=2)
    t = Trainer(tiny_model(tiny), tiny.train, tiny.val, cfg,
                metrics_path=tmp_path / "m.csv", checkpoint_path=tmp_path / "c.bin")
    t.run()
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == METRICS_HEADER
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert (tmp_path / "c.bin").exists()


def test_loss_decreases_over_first_updates(tiny):
    batch = make_batch(tiny.train[:4], ["visual", "audio"])
    wins = 0
    for seed in range(5):
        t = Trainer(tiny_model(tiny, seed=seed), tiny.train[:4], [],
                    TrainConfig(batch_size=4, shuffle=False))
        before = float(cross_entropy_loss(
            t.model.forward_teacher_forced(batch.features, batch.targets, batch.lengths),
            batch.targets).data)
        for _ in range(20):
            t.train_batch([(i, 0) for i in range(4)], 1.0)
        after = float(cross_entropy_loss(
            t.model.forward_teacher_forced(batch.features, batch.targets, batch.lengths),
            batch.targets).data)
        wins += after < before
    assert wins >= 4


def test_nonfinite_loss_names_batch(tiny):
    m = tiny_model(tiny)
    m.params["proj.W_p"].data[:] = np.inf
    t = Trainer(m, tiny.train, [], TrainConfig(batch_size=2, shuffle=False))
    previous = set_debug(False)
    try:
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="train00000"):
            t.train_batch([(0, 0), (1, 0)], 1.0)
    finally:
        set_debug(previous)
