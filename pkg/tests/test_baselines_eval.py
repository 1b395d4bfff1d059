import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ardistill.baselines import (MarginalTable, fit_onestep_star, onestep_objective, project_simplex,
                                 sample_onestep_star, sample_onestep_star_batch, skip_n_sample,
                                 skip_n_sample_batch, verify_prop1)
from ardistill.core import line_codebook
from ardistill.evaluation import (EvalReport, JointDist, SizeGuardError, compare, decode, empirical_joint, encode,
                                  evaluate_run, exact_joint, joint_from_samples, joint_from_table, mi_gap,
                                  mutual_information, read_csv, tv_distance, tv_halfwidth, write_csv)
from ardistill.sampler import OracleStudent
from ardistill.flowmatch import SolverConfig
from ardistill.teacher import fit_tabular, markov_teacher

DIAG = [(0, 0), (1, 1)]


def test_onestep_star_on_diagonal_data():
    table = fit_onestep_star(DIAG)
    np.testing.assert_allclose(table.probs, [[0.5, 0.5], [0.5, 0.5]])
    joint = joint_from_table(table)
    np.testing.assert_allclose(joint.probs, [0.25] * 4)
    truth = JointDist(2, 2, np.array([0.5, 0, 0, 0.5]))
    assert tv_distance(truth, joint) == pytest.approx(0.5)


def test_onestep_star_sampling_frequencies():
    table = fit_onestep_star(DIAG)
    seqs = sample_onestep_star_batch(table, 50_000, np.random.default_rng(0))
    freq = np.bincount(encode(seqs, 2), minlength=4) / len(seqs)
    np.testing.assert_allclose(freq, 0.25, atol=0.01)
    assert sample_onestep_star(table, np.random.default_rng(0)).n == 2


def test_prop1_holds_on_diagonal_data():
    res = verify_prop1(DIAG, trials=200)
    assert res["optimal"] and res["beaten_by"] == 0
    assert res["lagrange_multiplier"] == [1.0, 1.0]
    assert res["objective_at_frequencies"] == pytest.approx(np.log(0.5))


def test_prop1_explicit_candidates():
    data = [(0, 1), (0, 0), (1, 1), (0, 1)]
    res = verify_prop1(data, candidates=[np.array([[0.5, 0.5], [0.5, 0.5]]), np.array([[0.75, 0.25], [0.25, 0.75]])])
    assert res["optimal"]
    assert res["best_alternative"] == pytest.approx(res["objective_at_frequencies"])


def test_onestep_objective_value():
    table = MarginalTable(np.array([[0.25, 0.75]]))
    assert onestep_objective([(1,), (1,), (0,)], table) == pytest.approx((2 * np.log(0.75) + np.log(0.25)) / 3)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
@settings(max_examples=100, deadline=None)
def test_project_simplex_yields_distribution(values):
    p = project_simplex(np.array(values))[0]
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)


def test_project_simplex_fixes_distributions():
    p = np.array([[0.2, 0.3, 0.5]])
    np.testing.assert_allclose(project_simplex(p), p)


def test_marginal_table_validation():
    with pytest.raises(ValueError):
        MarginalTable(np.array([[0.5, 0.6]]))


def test_skip_n_shapes_and_prefix_distribution():
    teacher = markov_teacher(4, line_codebook(3), 0.9)
    truth = exact_joint(teacher)
    table = MarginalTable(truth.marginals())
    rng = np.random.default_rng(0)
    full = skip_n_sample_batch(teacher, 2, 20_000, rng, table)
    assert full.shape == (20_000, 4)
    trunc = skip_n_sample_batch(teacher, 2, 10, rng, fill="truncate")
    assert trunc.shape == (10, 2)
    # the teacher-generated prefix keeps its correlation
    assert np.mean(full[:, 0] == full[:, 1]) == pytest.approx(0.9, abs=0.01)
    assert skip_n_sample(teacher, 0, rng).n == 4
    with pytest.raises(ValueError):
        skip_n_sample_batch(teacher, 4, 1, rng, table)
    with pytest.raises(ValueError):
        skip_n_sample_batch(teacher, 1, 1, rng)


def test_encode_decode_roundtrip():
    seqs = np.random.default_rng(0).integers(0, 5, size=(50, 4))
    np.testing.assert_array_equal(decode(encode(seqs, 5), 4, 5), seqs)


def test_exact_joint_normalised_and_consistent_with_next_dist():
    teacher = fit_tabular([(0, 1, 2), (0, 1, 1), (2, 2, 0), (1, 0, 0)], alpha=0.3, V=3)
    joint = exact_joint(teacher)
    assert joint.total() == pytest.approx(1.0)
    np.testing.assert_allclose(joint.marginals()[0], teacher.next_dist(()))
    pair = joint.pair_marginal(0, 1)
    np.testing.assert_allclose(pair[2] / pair[2].sum(), teacher.next_dist((2,)))


def test_exact_joint_size_guard():
    teacher = markov_teacher(21, line_codebook(2), 0.5)
    with pytest.raises(SizeGuardError):
        exact_joint(teacher)


def test_tv_examples():
    a = JointDist(1, 2, np.array([1.0, 0.0]))
    b = JointDist(1, 2, np.array([0.0, 1.0]))
    assert tv_distance(a, a) == 0.0
    assert tv_distance(a, b) == 1.0
    with pytest.raises(ValueError):
        tv_distance(a, JointDist(2, 2, np.full(4, 0.25)))


def test_tv_is_a_metric_on_random_triples():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p, q, r = (JointDist(2, 3, rng.dirichlet(np.ones(9))) for _ in range(3))
        assert tv_distance(p, q) == pytest.approx(tv_distance(q, p))
        assert tv_distance(p, q) >= 0
        assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-12


def test_sparse_and_dense_tv_agree():
    seqs = np.random.default_rng(1).integers(0, 3, size=(500, 3))
    dense = joint_from_samples(seqs, 3)
    sparse = JointDist(3, 3, dense.as_dict(), 500)
    other = JointDist(3, 3, np.full(27, 1 / 27))
    assert tv_distance(sparse, other) == pytest.approx(tv_distance(dense, other))
    np.testing.assert_allclose(sparse.to_dense(), dense.probs)


def test_sparse_joint_beyond_dense_limit():
    seqs = np.random.default_rng(2).integers(0, 10, size=(100, 7))
    joint = joint_from_samples(seqs, 10)
    assert not joint.dense and joint.total() == pytest.approx(1.0)
    assert joint.marginals().shape == (7, 10)


def test_mutual_information_values():
    assert mutual_information(np.full((2, 2), 0.25)) == pytest.approx(0.0)
    assert mutual_information(np.array([[0.5, 0], [0, 0.5]])) == pytest.approx(np.log(2))
    diag = JointDist(2, 2, np.array([0.5, 0, 0, 0.5]))
    assert mi_gap(diag, joint_from_table(fit_onestep_star(DIAG))) == pytest.approx(np.log(2))


def test_teacher_against_itself_within_noise_floor():
    teacher = markov_teacher(3, line_codebook(3), 0.6)
    truth = exact_joint(teacher)
    from ardistill.teacher import ar_sample_batch
    est = empirical_joint(lambda m: ar_sample_batch(teacher, m, np.random.default_rng(0)), 20_000, 3, 3)
    assert tv_distance(truth, est) < tv_halfwidth(3, 3, 20_000)


def test_report_serialisations(tmp_path):
    rep = EvalReport("dd-1", 1, 0.1234567, [0.01, 0.02], 0.3, student_steps=1, samples=100)
    kv = rep.to_kv()
    assert "tv_joint=0.123457" in kv and "tv_marginals=0.01,0.02" in kv
    path = tmp_path / "r.csv"
    path.write_text(write_csv([rep]))
    assert path.read_text().splitlines()[0] == "system,steps,tv_joint,tv_marginal_mean,wall_ms,samples"
    row = read_csv(path)[0]
    assert row["steps"] == 1 and row["tv_joint"] == pytest.approx(0.123457)
    with pytest.raises(ValueError):
        EvalReport("x", 1, 1.5, [], 0.0)


def test_evaluate_run_with_oracle_student():
    teacher = markov_teacher(3, line_codebook(3, 2.0), 0.8)
    oracle = OracleStudent(teacher, SolverConfig("heun", 16))
    reports = evaluate_run(teacher, oracle, 5000, {"paths": [(1,), (1, 2)], "hybrid": [((1, 3), 2)],
                                                   "skip": [1], "solver": SolverConfig("heun", 16)})
    by = {r.system: r for r in reports}
    assert set(by) == {"teacher", "onestep*", "skip-1", "dd-1", "dd-1-2", "dd-hybrid-1-2-3"}
    assert by["dd-1"].steps == 1 and by["dd-1"].speedup == 3.0
    assert by["dd-hybrid-1-2-3"].steps == 3
    floor = 3 * tv_halfwidth(3, 3, 5000)
    for name in ("teacher", "dd-1", "dd-1-2", "dd-hybrid-1-2-3"):
        assert by[name].tv_joint < floor
    assert by["onestep*"].tv_joint > 0.3


def test_compare_counts_steps():
    truth = JointDist(1, 2, np.array([0.5, 0.5]))
    r = compare("x", truth, truth, student_steps=1, teacher_steps=2)
    assert r.steps == 3 and r.tv_joint == 0.0
