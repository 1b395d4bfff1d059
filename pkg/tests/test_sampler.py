import numpy as np
import pytest

from ardistill.core import NoiseSeq, TokenSeq, line_codebook
from ardistill.flowmatch import SolverConfig
from ardistill.sampler import (OracleStudent, PathError, SamplePath, StepReport, draw_noise, jump_back, sample,
                               sample_batch, sample_hybrid, sample_hybrid_batch)
from ardistill.student import StudentTrainConfig, TimestepSchedule, init_student
from ardistill.teacher import markov_teacher
from ardistill.trajgen import complete_tokens

FAST = SolverConfig("heun", 16)
TINY = StudentTrainConfig(d_model=8, n_layers=1, n_heads=2, d_ff=8, seed=0)


def test_path_validation():
    with pytest.raises(PathError):
        SamplePath((2,))
    with pytest.raises(PathError):
        SamplePath((1, 3, 2))
    with pytest.raises(PathError):
        SamplePath((1, 3), t_s=3)
    with pytest.raises(PathError):
        SamplePath((1, 2, 3), t_s=2)
    assert SamplePath((1, 6), 4).expected_steps == 4


def test_path_must_be_in_trained_schedule():
    teacher = markov_teacher(3, line_codebook(2), 0.7)
    model = init_student(3, teacher.codebook, TimestepSchedule((1,)), TINY)
    with pytest.raises(PathError):
        sample(model, (1, 2), rng=np.random.default_rng(0))


def test_step_counts_for_plain_paths():
    teacher = markov_teacher(4, line_codebook(2), 0.7)
    model = init_student(4, teacher.codebook, TimestepSchedule((1, 2, 3)), TINY)
    noise = draw_noise(np.random.default_rng(0), 5, 4, 1)
    conds = np.zeros(5, int)
    assert sample_batch(model, (1,), noise, conds)[1] == StepReport(1, 0)
    assert sample_batch(model, (1, 3), noise, conds)[1] == StepReport(2, 0)
    assert sample_batch(model, (1, 2, 3), noise, conds)[1].total == 3


@pytest.mark.parametrize("n,t_k2,t_s,expected", [(256, 6, 4, 4), (256, 81, 41, 42), (8, 5, 2, 5)])
def test_hybrid_step_arithmetic(n, t_k2, t_s, expected):
    cb = line_codebook(2)
    teacher = markov_teacher(n, cb, 0.7)
    model = init_student(n, cb, TimestepSchedule((1, t_k2)), StudentTrainConfig(d_model=8, n_layers=1, n_heads=1,
                                                                                  d_ff=8))
    noise = draw_noise(np.random.default_rng(0), 2, n, 1)
    for variant in ("deterministic", "stochastic"):
        _, rep = sample_hybrid_batch(model, teacher, (1, t_k2), t_s, noise, np.zeros(2, int), variant, FAST,
                                     np.random.default_rng(1))
        assert rep.total == expected == SamplePath((1, t_k2), t_s).expected_steps
        assert rep.student == 2 and rep.teacher == t_k2 - t_s


def test_oracle_paths_agree_exactly():
    teacher = markov_teacher(4, line_codebook(3, 2.0), 0.6)
    oracle = OracleStudent(teacher, FAST)
    noise = draw_noise(np.random.default_rng(3), 200, 4, 1)
    conds = np.zeros(200, int)
    ref = complete_tokens(teacher, noise, conds, FAST)
    for path in [(1,), (1, 2), (1, 3), (1, 2, 3), (1, 2, 3, 4)]:
        toks, rep = sample_batch(oracle, path, noise, conds)
        np.testing.assert_array_equal(toks, ref)
        assert rep.student == len(path)


def test_oracle_hybrid_deterministic_matches_plain_path():
    teacher = markov_teacher(4, line_codebook(3, 2.0), 0.6)
    oracle = OracleStudent(teacher, FAST)
    noise = draw_noise(np.random.default_rng(4), 100, 4, 1)
    conds = np.zeros(100, int)
    plain, _ = sample_batch(oracle, (1,), noise, conds)
    hyb, rep = sample_hybrid_batch(oracle, teacher, (1, 4), 2, noise, conds, "deterministic", FAST)
    np.testing.assert_array_equal(plain, hyb)
    assert rep == StepReport(2, 2)


def test_single_sample_helpers():
    teacher = markov_teacher(3, line_codebook(2), 0.7)
    oracle = OracleStudent(teacher, FAST)
    seq, rep = sample(oracle, (1, 2), rng=np.random.default_rng(0))
    assert isinstance(seq, TokenSeq) and seq.n == 3 and rep.total == 2
    seq, rep = sample_hybrid(oracle, teacher, (1, 3), 2, rng=np.random.default_rng(0), solver_cfg=FAST)
    assert rep.as_dict() == {"student_steps": 2, "teacher_steps": 1, "total_steps": 3}


def test_jump_back_restores_noise():
    x1 = NoiseSeq(np.arange(6, dtype=np.float32).reshape(3, 2))
    xt = jump_back(TokenSeq((2, 0, 1)), x1, 2)
    assert xt.prefix == (2,)
    np.testing.assert_array_equal(xt.suffix, x1.values[1:])
    with pytest.raises(IndexError):
        jump_back(TokenSeq((2, 0, 1)), x1, 5)
