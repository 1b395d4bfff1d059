import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ardistill.core import (Codebook, NoiseSeq, StructureError, TokenSeq, TrajectoryPoint, concat_mixed,
                            line_codebook, nearest_token, nearest_tokens, noise_from_seed, slice_head,
                            slice_tail, split_seed)


def test_slice_head_examples():
    X = ("a", "b", "c")
    assert slice_head(X, 2) == ("a", "b")
    assert slice_head(X, 0) == ()
    assert slice_head(X, 3) == X


def test_slice_head_out_of_range():
    with pytest.raises(IndexError):
        slice_head((1, 2, 3), 4)
    with pytest.raises(IndexError):
        slice_head((1, 2, 3), -1)


def test_slice_tail_is_complement_of_head():
    X = tuple(range(5))
    for t in range(1, 7):
        assert slice_head(X, t - 1) + slice_tail(X, t) == X


def test_concat_mixed_layout():
    eps = np.array([[0.3], [-0.4]], dtype=np.float32)
    xt = concat_mixed((1, 2), eps, 3)
    assert xt.prefix == (1, 2)
    np.testing.assert_array_equal(xt.suffix, eps)
    assert xt.n == 4 and xt.t == 3


def test_concat_mixed_endpoints():
    eps = np.zeros((3, 2), dtype=np.float32)
    x1 = concat_mixed((), eps, 1)
    assert x1.is_noise and x1.n == 3
    xd = concat_mixed((0, 1, 2), np.zeros((0, 2)), 4)
    assert xd.is_data and xd.n == 3


def test_concat_mixed_length_mismatch():
    with pytest.raises(StructureError):
        concat_mixed((1,), np.zeros((2, 1)), 3)


@given(n=st.integers(1, 6), data=st.data())
@settings(max_examples=50, deadline=None)
def test_trajectory_point_length_is_n(n, data):
    seq = data.draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    t = data.draw(st.integers(1, n + 1))
    noise = np.random.default_rng(0).standard_normal((n, 2))
    xt = concat_mixed(slice_head(seq, t - 1), noise[t - 1:], t)
    assert len(xt) == n
    assert list(xt.prefix) == seq[:t - 1]


def test_embedded_mixes_codebook_rows_and_noise():
    cb = Codebook([[1.0, 0.0], [0.0, 1.0]])
    xt = TrajectoryPoint((1,), np.array([[5.0, 6.0]]), 2)
    np.testing.assert_allclose(xt.embedded(cb), [[0.0, 1.0], [5.0, 6.0]])


def test_nearest_token_examples():
    cb = Codebook([[-1.0], [1.0]])
    assert nearest_token([0.9], cb) == 1
    assert nearest_token([0.0], cb) == 0
    single = Codebook([[0.25, -3.0]])
    for x in np.random.default_rng(0).normal(size=(10, 2)):
        assert nearest_token(x, single) == 0


def test_nearest_token_tie_break_both_orderings():
    # equidistant point resolves to the smaller index whichever atom comes first
    for entries in ([[-1.0], [1.0]], [[1.0], [-1.0]]):
        assert nearest_token([0.0], Codebook(entries)) == 0


def test_projection_fixes_atoms():
    cb = Codebook(np.random.default_rng(3).normal(size=(8, 3)))
    np.testing.assert_array_equal(nearest_tokens(cb.entries, cb), np.arange(8))


def test_codebook_rejects_duplicates_and_nonfinite():
    with pytest.raises(ValueError):
        Codebook([[1.0], [1.0]])
    with pytest.raises(ValueError):
        Codebook([[np.nan]])
    with pytest.raises(StructureError):
        Codebook(np.zeros((0, 2)))


def test_codebook_file_roundtrip(tmp_path):
    cb = Codebook(np.random.default_rng(1).normal(size=(5, 3)))
    path = tmp_path / "cb.ddcb"
    cb.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"DDCB"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 5
    assert int.from_bytes(raw[12:16], "little") == 3
    assert len(raw) == 16 + 5 * 3 * 4
    assert Codebook.load(path) == cb


def test_codebook_file_rejects_bad_magic():
    with pytest.raises(StructureError):
        Codebook.from_bytes(b"XXXX" + bytes(12))


def test_noise_seed_reproducible():
    a = NoiseSeq.from_seed(12345, 4, 3)
    b = NoiseSeq.from_seed(12345, 4, 3)
    assert a == b and a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, noise_from_seed(12346, 4, 3))


def test_split_seed_is_deterministic_and_distinct():
    seeds = [split_seed(7, i) for i in range(1000)]
    assert seeds == [split_seed(7, i) for i in range(1000)]
    assert len(set(seeds)) == 1000
    assert split_seed(7, 0) != split_seed(8, 0)


def test_token_seq_checks_ids():
    cb = line_codebook(3)
    TokenSeq((0, 1, 2)).check(cb)
    with pytest.raises(ValueError):
        TokenSeq((0, 3)).check(cb)
