import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpadaln import kernels
from dpadaln.kernels import KIND_BAND, KIND_HARD, KIND_STE, KIND_TANH, _reference
from dpadaln.rng import CounterRNG, derive_key

MASK64 = (1 << 64) - 1


def splitmix_scalar(key, ctr):
    z = (key + (ctr + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


BACKENDS = sorted(kernels.implementations().items())


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_splitmix_matches_integer_arithmetic(name, impl):
    key = derive_key(7, 3)
    got = impl.splitmix64(key, 100, 50)
    want = [splitmix_scalar(key, 100 + i) for i in range(50)]
    assert [int(v) for v in got] == want


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_uniform_open_interval_and_formula(name, impl):
    key = derive_key(1, 1)
    u = impl.counter_uniform(key, 0, 20000)
    assert np.all(u > 0) and np.all(u < 1)
    want = [((splitmix_scalar(key, i) >> 11) + 0.5) / 2.0 ** 53 for i in range(10)]
    assert np.array_equal(u[:10], want)
    assert abs(u.mean() - 0.5) < 0.01


@pytest.mark.parametrize("name,impl", BACKENDS)
def test_normal_is_box_muller_of_the_uniform_stream(name, impl):
    key = derive_key(5, 4)
    u = impl.counter_uniform(key, 0, 8)
    z = impl.counter_normal(key, 0, 8)
    r = np.sqrt(-2 * np.log(u[0::2]))
    th = 2 * np.pi * u[1::2]
    np.testing.assert_allclose(z[0::2], r * np.cos(th), rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(z[1::2], r * np.sin(th), rtol=1e-14, atol=1e-15)


def test_normal_moments():
    z = CounterRNG(3, 9).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01


def test_streams_are_independent_and_replayable():
    a, b = CounterRNG(0, 1), CounterRNG(0, 2)
    assert not np.array_equal(a.uniform(10), b.uniform(10))
    x = CounterRNG(11, 5).normal((3, 4))
    y = CounterRNG(11, 5).normal((3, 4))
    assert np.array_equal(x, y)


def test_position_advances_and_resumes():
    r = CounterRNG(2, 3)
    first = r.uniform(5)
    rest = r.uniform(5)
    assert r.position == 10
    both = CounterRNG(2, 3).uniform(10)
    assert np.array_equal(np.concatenate([first, rest]), both)
    assert np.array_equal(CounterRNG(2, 3, position=5).uniform(5), rest)


def test_odd_normal_draws_consume_pairs():
    r = CounterRNG(0, 4)
    r.normal(3)
    assert r.position == 4


@given(st.integers(1, 50), st.integers(0, 2**32))
def test_choice_without_replacement_distinct(n, seed):
    k = max(1, n // 2)
    out = CounterRNG(seed, 2).choice_without_replacement(n, k)
    assert len(set(out.tolist())) == k
    assert out.min() >= 0 and out.max() < n


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
class TestBackendAgreement:
    def setup_method(self):
        self.impls = dict(BACKENDS)
        self.r = np.random.default_rng(0)

    def test_rng_bitwise(self):
        a, b = self.impls["python"], self.impls["compiled"]
        key = derive_key(9, 9)
        assert np.array_equal(a.splitmix64(key, 3, 1000), b.splitmix64(key, 3, 1000))
        assert np.array_equal(a.counter_uniform(key, 3, 1000), b.counter_uniform(key, 3, 1000))
        np.testing.assert_allclose(a.counter_normal(key, 3, 1001), b.counter_normal(key, 3, 1001),
                                   rtol=1e-13, atol=1e-14)

    @pytest.mark.parametrize("kind", [KIND_TANH, KIND_HARD, KIND_BAND, KIND_STE])
    def test_bound_kernels(self, kind):
        a, b = self.impls["python"], self.impls["compiled"]
        x = self.r.normal(size=(7, 11)) * 4
        for M in (0.7, 2.0, np.inf):
            np.testing.assert_allclose(a.bound_forward(x, M, kind, 0.2), b.bound_forward(x, M, kind, 0.2),
                                       rtol=1e-14, atol=1e-15)
            np.testing.assert_allclose(a.bound_derivative(x, M, kind, 0.2),
                                       b.bound_derivative(x, M, kind, 0.2), rtol=1e-14, atol=1e-15)

    def test_layer_norm(self):
        a, b = self.impls["python"], self.impls["compiled"]
        x = self.r.normal(size=(13, 8))
        ya, ra = a.layer_norm_forward(x, 1e-5)
        yb, rb = b.layer_norm_forward(x, 1e-5)
        np.testing.assert_allclose(ya, yb, rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(ra, rb, rtol=1e-12)
        g = self.r.normal(size=x.shape)
        np.testing.assert_allclose(a.layer_norm_backward(g, ya, ra), b.layer_norm_backward(g, yb, rb),
                                   rtol=1e-11, atol=1e-12)

    def test_clip_accumulate(self):
        a, b = self.impls["python"], self.impls["compiled"]
        G = self.r.normal(size=(9, 300))
        for C in (0.5, 100.0, np.inf):
            for u, v in zip(a.clip_accumulate(G, C), b.clip_accumulate(G, C)):
                np.testing.assert_allclose(u, v, rtol=1e-13, atol=1e-14)


def test_clip_accumulate_against_direct_sum():
    G = np.random.default_rng(1).normal(size=(6, 40)) * 3
    total, norms, eta = _reference.clip_accumulate(G, 1.0)
    n = np.linalg.norm(G, axis=1)
    np.testing.assert_allclose(norms, n, rtol=1e-14)
    np.testing.assert_allclose(eta, np.minimum(1, 1.0 / n), rtol=1e-14)
    np.testing.assert_allclose(total, (G * eta[:, None]).sum(0), rtol=1e-12, atol=1e-13)


def test_backend_name_is_reported():
    assert kernels.BACKEND in ("python", "compiled")
