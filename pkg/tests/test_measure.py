import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mkvfbsde.measure import (ParticleCloud, chaos_rate, cloud_from_csv, cloud_to_csv,
                              empirical_projection_gradient, mean, norm2, wasserstein2,
                              write_text_atomic)


def brute_w2(a, b):
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    M = a.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(M)):
        best = min(best, np.mean(np.sum((a - b[list(perm)]) ** 2, axis=1)))
    return np.sqrt(best)


# ParticleCloud ---------------------------------------------------------------

def test_cloud_shapes_and_immutability():
    c = ParticleCloud([1.0, 2.0, 3.0])
    assert (c.M, c.d) == (3, 1)
    with pytest.raises(ValueError):
        c.points[0, 0] = 5.0
    assert ParticleCloud([[1.0, 2.0]]).d == 2


@pytest.mark.parametrize("bad", [[], [[np.nan]], [1.0, np.inf]])
def test_cloud_rejects_invalid(bad):
    with pytest.raises(ValueError):
        ParticleCloud(bad)


def test_cloud_copies_input():
    src = np.array([[0.0], [1.0]])
    c = ParticleCloud(src)
    src[0, 0] = 9.0
    assert c.points[0, 0] == 0.0


# mean / norm2 ----------------------------------------------------------------

def test_mean_examples():
    assert mean(ParticleCloud([0.0, 2.0])) == pytest.approx([1.0])
    assert mean(ParticleCloud([[3.5, -1.0]])) == pytest.approx([3.5, -1.0])


def test_mean_matches_naive_sum():
    pts = np.random.default_rng(7).standard_normal(100)
    total = 0.0
    for v in pts:
        total += v
    assert mean(pts)[0] == pytest.approx(total / 100, abs=1e-14)


def test_norm2_examples():
    assert norm2(ParticleCloud([0.0])) == 0.0
    assert norm2(ParticleCloud([3.0, 4.0])) == pytest.approx(np.sqrt(12.5), abs=1e-15)


def test_norm2_matches_naive_loop():
    pts = np.random.default_rng(11).standard_normal((40, 3))
    acc = 0.0
    for row in pts:
        for v in row:
            acc += v * v
    assert norm2(pts) == pytest.approx(np.sqrt(acc / 40), abs=1e-12)


# wasserstein2 ----------------------------------------------------------------

def test_w2_examples():
    assert wasserstein2([0.0], [1.0]) == pytest.approx(1.0)
    c = np.random.default_rng(0).standard_normal((6, 2))
    assert wasserstein2(c, c) == 0.0
    assert wasserstein2([0.0, 2.0], [1.0, 3.0]) == pytest.approx(1.0, abs=1e-15)


def test_w2_d2_matches_permutation_brute_force():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    w = wasserstein2(a, b)
    assert w.method == "assignment" and w.exact
    assert float(w) == pytest.approx(brute_w2(a, b), abs=1e-12)


def test_w2_1d_sorted_formula():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal(50), rng.normal(1, 2, 50)
    expect = np.mean((np.sort(a) - np.sort(b)) ** 2)
    assert float(wasserstein2(a, b)) ** 2 == pytest.approx(expect, rel=1e-13)


def test_w2_1d_unequal_counts_is_exact():
    # {0, 1} against {0.5}: every point moves 0.5
    assert wasserstein2([0.0, 1.0], [0.5]) == pytest.approx(0.5)
    # repeating atoms does not change the measure
    a = np.array([0.3, -1.2, 2.0])
    assert wasserstein2(a, np.repeat(a, 3)) == pytest.approx(0.0, abs=1e-15)


def test_w2_sliced_for_unequal_counts_in_2d():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((40, 2))
    w = wasserstein2(a, a + np.array([1.0, 0.0]), method="sliced", n_directions=256)
    assert w.method == "sliced" and not w.exact
    assert float(w) ** 2 == pytest.approx(1.0, rel=0.2)
    w = wasserstein2(a, rng.standard_normal((30, 2)))
    assert not w.exact
    with pytest.raises(ValueError):
        wasserstein2(a, a[:30], method="exact")


def test_w2_dimension_mismatch():
    with pytest.raises(ValueError):
        wasserstein2(np.zeros((3, 1)), np.zeros((3, 2)))


def test_w2_large_cloud_uses_slices():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((20, 2)), rng.standard_normal((20, 2))
    assert wasserstein2(a, b, assignment_cutoff=10).method == "sliced"


clouds = st.integers(1, 5).flatmap(
    lambda M: st.tuples(*[arrays(np.float64, (M, 2), elements=st.floats(-10, 10))] * 3))


@settings(max_examples=60, deadline=None)
@given(clouds)
def test_w2_metric_axioms(abc):
    a, b, c = abc
    ab, ba = wasserstein2(a, b), wasserstein2(b, a)
    assert abs(ab - ba) <= 1e-12 * (1 + ab)
    assert wasserstein2(a, a) == 0.0
    assert ab <= wasserstein2(a, c) + wasserstein2(c, b) + 1e-9
    # index coupling is one admissible plan
    assert ab <= np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))) + 1e-9


def test_w2_zero_only_for_equal_multisets():
    a = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert wasserstein2(a, a[::-1]) == 0.0
    assert wasserstein2(a, a + 1e-6) > 0.0


def test_w2_sampling_convergence_decreases():
    # E W2^2(empirical N-sample, fine reference) over repetitions
    rng = np.random.default_rng(9)
    ref = np.sort(rng.standard_normal(40000))
    vals = [np.mean([float(wasserstein2(rng.standard_normal(N), ref)) ** 2 for _ in range(40)])
            for N in (8, 64, 512)]
    assert vals[0] > vals[1] > vals[2]


# empirical projection --------------------------------------------------------

def test_projection_gradient_linear_functional():
    g = empirical_projection_gradient(lambda cl, xq: 2 * xq, ParticleCloud([1.0, 3.0]))
    assert g[:, 0] == pytest.approx([1.0, 3.0])


def test_projection_gradient_constant():
    g = empirical_projection_gradient(lambda cl, xq: np.zeros_like(xq), ParticleCloud([1.0, 3.0, 4.0]))
    assert np.all(g == 0.0)


def test_projection_gradient_mean_squared_matches_fd():
    g = empirical_projection_gradient(lambda cl, xq: np.broadcast_to(2 * cl.bar, xq.shape),
                                      ParticleCloud([0.0, 2.0]))
    assert g[:, 0] == pytest.approx([1.0, 1.0])
    u = lambda x1, x2: ((x1 + x2) / 2) ** 2  # noqa: E731
    h = 1e-6
    fd = [(u(h, 2) - u(-h, 2)) / (2 * h), (u(0, 2 + h) - u(0, 2 - h)) / (2 * h)]
    assert g[:, 0] == pytest.approx(fd, abs=1e-8)


def test_projection_gradient_smooth_u_fd(rng):
    # u(mu) = <sin, mu> * <x^2, mu>, du(x') = cos(x') m2 + m1 2x'
    pts = rng.standard_normal((7, 1))

    def u(p):
        return np.mean(np.sin(p)) * np.mean(p ** 2)

    def du(cl, xq):
        p = cl.points
        return np.cos(xq) * np.mean(p ** 2) + np.mean(np.sin(p)) * 2 * xq

    g = empirical_projection_gradient(du, pts)
    h = 1e-6
    for i in range(7):
        e = np.zeros_like(pts)
        e[i] = h
        assert g[i, 0] == pytest.approx((u(pts + e) - u(pts - e)) / (2 * h), abs=1e-6)


def test_projection_gradient_shape_check():
    with pytest.raises(ValueError):
        empirical_projection_gradient(lambda cl, xq: np.zeros(3), ParticleCloud([1.0, 2.0]))


# chaos_rate ------------------------------------------------------------------

def test_chaos_rate_examples():
    assert chaos_rate(1, 3) == 1.0
    assert chaos_rate(32, 1) == pytest.approx(0.5, abs=1e-15)
    vals = [chaos_rate(N, 2) for N in (1, 2, 10, 100, 1000)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        chaos_rate(0, 1)


# I/O -------------------------------------------------------------------------

def test_cloud_csv_round_trip(tmp_path, rng):
    c = ParticleCloud(rng.standard_normal((9, 3)) * 1e3)
    text = cloud_to_csv(c, tmp_path / "c.csv", header="config={}")
    assert text.startswith("# config={}\nx0,x1,x2\n")
    assert cloud_from_csv(tmp_path / "c.csv") == c
    assert cloud_from_csv(text) == c


def test_write_text_atomic_leaves_no_temp(tmp_path):
    write_text_atomic(tmp_path / "sub" / "a.txt", "hello")
    assert (tmp_path / "sub" / "a.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.txt"]
