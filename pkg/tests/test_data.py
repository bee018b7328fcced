import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpadaln.data import (MaskRanges, MaskSpec, NormStats, block_mask, chronological_split, load_csv,
                          month_split, random_mask, sample_mask, stride_mask, synth_series, window_dataset,
                          window_offsets)
from dpadaln.rng import CounterRNG


def _runs(bits):
    """(start, length) of each run of zeros."""
    out, start = [], None
    for i, b in enumerate(list(bits) + [1]):
        if b == 0 and start is None:
            start = i
        elif b == 1 and start is not None:
            out.append((start, i - start))
            start = None
    return out


def test_random_mask_counts():
    assert random_mask(10, 0.5, CounterRNG(0, 2)).n_masked == 5
    assert random_mask(10, 0.1, CounterRNG(0, 2)).n_masked == 1
    assert random_mask(168, 0.25, CounterRNG(1, 2)).n_masked == 42
    with pytest.raises(ValueError):
        random_mask(10, 0.01, CounterRNG(0, 2))
    with pytest.raises(ValueError):
        random_mask(10, 1.0, CounterRNG(0, 2))


@given(st.integers(4, 200), st.floats(0.1, 0.5), st.integers(0, 2**32))
def test_random_mask_property(L, ratio, seed):
    n = int(np.floor(ratio * L + 0.5))
    if not 0 < n < L:
        return
    m = random_mask(L, ratio, CounterRNG(seed, 2))
    assert m.n_masked == n
    assert np.array_equal(m.bits, random_mask(L, ratio, CounterRNG(seed, 2)).bits)


def test_block_mask_examples():
    m = block_mask(168, 24)
    assert m.bits[:144].all() and not m.bits[144:].any()
    assert block_mask(5, 1).bits.tolist() == [1, 1, 1, 1, 0]
    with pytest.raises(ValueError):
        block_mask(5, 5)
    with pytest.raises(ValueError):
        block_mask(5, 0)


def test_stride_mask_examples():
    for seed in range(20):
        m = stride_mask(24, 4, CounterRNG(seed, 2))
        runs = _runs(m.bits)
        assert len(runs) == 4 and all(n == 3 for _, n in runs)
        starts = [s for s, _ in runs]
        assert np.all(np.diff(starts) == 6)
        one = _runs(stride_mask(10, 1, CounterRNG(seed, 2)).bits)
        assert len(one) == 1 and one[0][1] == 5
        assert one[0][0] > 0 and one[0][0] + 5 < 10
    with pytest.raises(ValueError):
        stride_mask(6, 4, CounterRNG(0, 2))


@given(st.integers(8, 200), st.integers(0, 2**32))
def test_sample_mask_always_valid(L, seed):
    ranges = MaskRanges(pred_len=(1, L // 2), num_blocks=(1, max(1, L // 8)))
    m = sample_mask(L, ranges, CounterRNG(seed, 2))
    assert 0 < m.n_masked < L
    assert m.kind in ranges.kinds


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec(np.ones(4), "random")
    with pytest.raises(ValueError):
        MaskSpec(np.array([0, 1, 2]), "random")
    with pytest.raises(ValueError):
        MaskSpec(np.array([0, 1]), "diagonal")


def test_windows():
    assert len(window_dataset(np.zeros((168, 2)), 168, 24)) == 1
    assert len(window_dataset(np.zeros((192, 2)), 168, 24)) == 2
    assert window_offsets(200, 168, 24).tolist() == [0, 24]
    with pytest.raises(ValueError):
        window_dataset(np.zeros((167, 2)), 168, 24)
    series = np.arange(60.0).reshape(30, 2)
    ws = window_dataset(series, 10, 5)
    assert all(np.array_equal(w.values, series[w.origin:w.origin + 10]) for w in ws)


def test_normalize_round_trip():
    r = np.random.default_rng(0)
    x = r.normal(3.0, 7.0, size=(500, 4))
    st_ = NormStats.fit(x)
    z = st_.normalize(x)
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(0), 1, atol=1e-12)
    assert np.max(np.abs(st_.denormalize(z) - x)) <= 1e-10
    x[:, 2] = 1.5
    with pytest.raises(ValueError, match=r"\[2\]"):
        NormStats.fit(x)


def test_load_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("date,a,b\n2020-01-01,1,2\n2020-01-02,3.5,-4\n")
    vals, names = load_csv(str(p))
    assert names == ("a", "b")
    assert vals.tolist() == [[1.0, 2.0], [3.5, -4.0]]
    p.write_text("date,a,b\n2020-01-01,1\n")
    with pytest.raises(ValueError, match=":2:"):
        load_csv(str(p))
    p.write_text("date,a\nx,nan\n")
    with pytest.raises(ValueError, match="non-finite"):
        load_csv(str(p))
    p.write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_csv(str(p))


def test_splits():
    s = np.arange(100)
    a, b, c = chronological_split(s)
    assert (len(a), len(b), len(c)) == (70, 15, 15)
    assert np.array_equal(np.concatenate([a, b, c]), s)
    a, b, c = month_split(np.arange(20 * 720), 720)
    assert (len(a), len(b), len(c)) == (12 * 720, 4 * 720, 4 * 720)
    with pytest.raises(ValueError):
        month_split(np.arange(100), 720)
    with pytest.raises(ValueError):
        chronological_split(s, (0.5, 0.5, 0.5))


def test_synthetic_bursts_fatten_the_tail():
    def tail(p):
        x = synth_series(20_000, 4, p, 8.0, CounterRNG(0, 9))
        a = np.abs(x[:, 1:]).ravel()
        return np.percentile(a, 99.9) / np.percentile(a, 50)

    assert tail(0.02) > 1.3 * tail(0.0)
    x = synth_series(500, 3, 0.02, 8.0, CounterRNG(5, 9))
    assert np.array_equal(x, synth_series(500, 3, 0.02, 8.0, CounterRNG(5, 9)))
    with pytest.raises(ValueError):
        synth_series(100, 3, 0.5, 8.0, CounterRNG(0, 9))
