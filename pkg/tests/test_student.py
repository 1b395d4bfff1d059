import numpy as np
import pytest

from ardistill.core import TrajectoryPoint, line_codebook
from ardistill.flowmatch import SolverConfig
from ardistill.nn.transformer import TransformerConfig, init_params, param_arrays
from ardistill.student import (StudentModel, StudentTrainConfig, TimestepSchedule, distill_loss,
                               distill_loss_batch, f_theta, init_student, sample_timesteps, train_student)
from ardistill.teacher import NeuralTeacher, markov_teacher
from ardistill.trajgen import FingerprintMismatch, build_xt, generate_dataset

FAST = SolverConfig("heun", 16)
TINY = StudentTrainConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, steps=5, batch=16, lr=1e-3, seed=0)


def _setup(n=3, V=3, N=64):
    cb = line_codebook(V, 2.0)
    teacher = markov_teacher(n, cb, 0.7)
    return teacher, generate_dataset(teacher, N, 0, FAST)


def test_schedule_validation():
    with pytest.raises(ValueError):
        TimestepSchedule((2, 3))
    with pytest.raises(ValueError):
        TimestepSchedule((1, 3, 3))
    with pytest.raises(ValueError):
        TimestepSchedule((1, 2), (1.0,))
    with pytest.raises(ValueError):
        TimestepSchedule((1, 5)).validate(4)
    assert TimestepSchedule((1, 3)).weight(3) == 1.0


def test_default_split_point_is_schedule_median():
    assert TimestepSchedule((1, 3)).default_split() == 3
    assert TimestepSchedule((1, 2, 4)).default_split() == 2
    assert TimestepSchedule((1,)).default_split() == 2


def test_prediction_copies_prefix_and_counts_calls():
    teacher, store = _setup()
    model = init_student(3, teacher.codebook, TimestepSchedule((1, 2)), TINY)
    noise = store.noise[:4]
    out = model.predict_batch(store.data[:4], noise, 2, np.zeros(4, int))
    np.testing.assert_array_equal(out[:, 0], store.data[:4, 0])
    assert model.calls == 1
    model.predict_batch(store.data[:4], noise, 4, np.zeros(4, int))
    assert model.calls == 1


def test_prediction_ignores_tokens_beyond_prefix():
    teacher, store = _setup()
    model = init_student(3, teacher.codebook, TimestepSchedule((1, 2)), TINY)
    a = model.predict_batch(store.data[:8], store.noise[:8], 2, np.zeros(8, int))
    scrambled = store.data[:8].copy()
    scrambled[:, 1:] = (scrambled[:, 1:] + 1) % 3
    b = model.predict_batch(scrambled, store.noise[:8], 2, np.zeros(8, int))
    np.testing.assert_array_equal(a, b)


def test_f_theta_and_predict_final_shapes():
    teacher, store = _setup()
    model = init_student(3, teacher.codebook, TimestepSchedule((1, 2)), TINY)
    xt = build_xt(store.record(0), 2)
    logits, emb = f_theta(model, xt)
    assert logits.shape == (3, 3) and emb.shape == (3, 1)
    seq = model.predict_final(xt)
    assert seq.ids[0] == store.data[0, 0]
    with pytest.raises(ValueError):
        f_theta(model, TrajectoryPoint((), np.zeros((3, 1)), 1), t=5)


def test_loss_scales_with_lambda_and_vanishes_when_fully_supervised_prefix():
    teacher, store = _setup()
    model = init_student(3, teacher.codebook, TimestepSchedule((1, 2)), TINY)
    pair = store.record(0)
    l1 = float(distill_loss(model, pair, 1, lam=1.0).data)
    l2 = float(distill_loss(model, pair, 1, lam=2.5).data)
    assert l2 == pytest.approx(2.5 * l1, rel=1e-5)
    assert float(distill_loss(model, pair, 4).data) == 0.0


def test_loss_combines_embedding_and_logit_terms():
    teacher, store = _setup()
    model = init_student(3, teacher.codebook, TimestepSchedule((1, 2)), TINY)
    args = (store.data[:4], store.noise[:4], 1, np.zeros(4, int))
    emb_only = float(distill_loss_batch(model, *args, w_emb=1.0, w_logit=0.0).data)
    ce_only = float(distill_loss_batch(model, *args, w_emb=0.0, w_logit=1.0).data)
    both = float(distill_loss_batch(model, *args).data)
    assert both == pytest.approx(emb_only + 0.1 * ce_only, rel=1e-5)


def test_loss_gradients_reach_every_trained_parameter():
    teacher, store = _setup()
    model = init_student(3, teacher.codebook, TimestepSchedule((1, 2)), TINY)
    loss = distill_loss_batch(model, store.data[:8], store.noise[:8], np.array([1, 2] * 4), np.zeros(8, int))
    loss.backward()
    for name, p in model.params.items():
        if name.startswith("cls_emb") or name == "type_emb":
            continue
        assert p.grad is not None and np.any(p.grad != 0), name


def test_init_inherits_teacher_weights():
    cb = line_codebook(3, 2.0)
    cfg = TransformerConfig(seq_len=3, C=1, V=3, d_model=16, n_layers=1, n_heads=2, d_ff=16)
    teacher = NeuralTeacher(param_arrays(init_params(cfg, np.random.default_rng(1))), cfg, cb)
    model = init_student(3, cb, TimestepSchedule((1, 2)), TINY, teacher)
    for name, arr in teacher.arrays.items():
        got = model.params[name].data
        if name == "pos_emb":
            np.testing.assert_array_equal(got[:3], arr)
            assert got.shape[0] == 4
        else:
            np.testing.assert_array_equal(got, arr)
    assert model.cfg.d_model == 16


def test_zero_head_init():
    teacher, _ = _setup()
    cfg = StudentTrainConfig(**{**TINY.__dict__, "head_init": "zero"})
    model = init_student(3, teacher.codebook, TimestepSchedule((1,)), cfg)
    assert not np.any(model.params["head.embed.w"].data)


def test_training_rejects_foreign_pair_store():
    _, store = _setup()
    other = markov_teacher(3, line_codebook(3, 2.0), 0.2)
    with pytest.raises(FingerprintMismatch):
        train_student(store, other, TimestepSchedule((1, 2)), TINY)


def test_training_is_deterministic_and_reduces_loss():
    teacher, store = _setup(N=128)
    cfg = StudentTrainConfig(**{**TINY.__dict__, "steps": 60, "lr": 3e-3, "ema_decay": 0.0})
    a, ha = train_student(store, teacher, TimestepSchedule((1, 2)), cfg)
    b, _ = train_student(store, teacher, TimestepSchedule((1, 2)), cfg)
    assert a.to_bytes() == b.to_bytes()
    losses = [l for _, l in ha["epoch_loss"]]
    assert losses[-1] < losses[0]


def test_checkpoint_roundtrip(tmp_path):
    teacher, store = _setup()
    model = init_student(3, teacher.codebook, TimestepSchedule((1, 2), (1.0, 0.5)), TINY)
    path = tmp_path / "s.ddtc"
    model.save(path)
    loaded = StudentModel.load(path)
    assert loaded.to_bytes() == model.to_bytes()
    assert loaded.schedule == model.schedule and loaded.split_point == model.split_point
    np.testing.assert_array_equal(loaded.predict_batch(store.data[:5], store.noise[:5], 1, np.zeros(5, int)),
                                  model.predict_batch(store.data[:5], store.noise[:5], 1, np.zeros(5, int)))


def test_sample_timesteps_stays_in_schedule():
    ts = sample_timesteps(TimestepSchedule((1, 3, 4)), 1000, np.random.default_rng(0))
    assert set(ts.tolist()) == {1, 3, 4}


def test_prediction_does_not_depend_on_chunking(monkeypatch):
    import ardistill.student as student_mod

    model = init_student(3, line_codebook(3), TimestepSchedule((1, 2)),
                         StudentTrainConfig(d_model=8, n_layers=1, n_heads=2, d_ff=8, seed=0))
    noise = np.random.default_rng(0).standard_normal((50, 3, 1))
    tokens = np.zeros((50, 3), dtype=np.int64)
    for decode in ("argmax", "sample"):
        model.decode = decode
        whole = model.predict_batch(tokens, noise, 1, np.zeros(50, int), np.random.default_rng(1))
        monkeypatch.setattr(student_mod, "PREDICT_CHUNK", 7)
        chunked = model.predict_batch(tokens, noise, 1, np.zeros(50, int), np.random.default_rng(1))
        monkeypatch.setattr(student_mod, "PREDICT_CHUNK", 4096)
        np.testing.assert_array_equal(whole, chunked)
