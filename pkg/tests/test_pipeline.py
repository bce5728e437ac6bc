import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitcat.pipeline import (
    LabelParams,
    RequestMatrix,
    Sample,
    WindowedMatrix,
    build_request_matrix,
    chronological_split,
    label_topk,
    node_samples,
    read_samples,
    request_probability,
    segment,
    skewness,
    skewness_columns,
    window_requests,
    write_samples,
)
from vitcat.trace import RequestEvent, SyntheticSpec, generate_synthetic


def brute_window(values, w):
    n_w = values.shape[0] // w
    out = np.zeros((n_w, values.shape[1]), dtype=np.int64)
    for u in range(n_w):
        for t in range(u * w, (u + 1) * w):
            for l in range(values.shape[1]):
                out[u, l] += values[t, l]
    return out


def brute_skew(h):
    # plain-loop weighted moments of the time index
    total = sum(h)
    if total == 0:
        return 0.0
    mu = sum(w * (t + 1) for t, w in enumerate(h)) / total
    m2 = sum(w * (t + 1 - mu) ** 2 for t, w in enumerate(h)) / total
    m3 = sum(w * (t + 1 - mu) ** 3 for t, w in enumerate(h)) / total
    return 0.0 if m2 == 0 else m3 / m2**1.5


def brute_label(row, hist, k):
    # enumerate every K-subset, keep the lexicographically best by
    # (eligible members, probabilities in rank order)
    n = len(row)
    total = sum(row)
    prob = [r / total if total else 0.0 for r in row]
    skews = [brute_skew(list(hist[:, l])) for l in range(n)]
    key_of = lambda l: (skews[l] < 0, prob[l], -l)
    best = max(itertools.combinations(range(n), k), key=lambda c: sorted((key_of(l) for l in c), reverse=True))
    y = np.zeros(n, dtype=np.uint8)
    y[list(best)] = 1
    return y


def ev(cid, ts):
    return RequestEvent(0, cid, ts, "0")


def test_request_matrix_single_event():
    m = build_request_matrix([ev(0, 100)], resolution=60)
    assert m.values.shape == (1, 1) and m.values[0, 0] == 1 and m.t0 == 100


def test_request_matrix_counts_same_bucket():
    m = build_request_matrix([ev(1, 0), ev(1, 30)], resolution=60, n_contents=3)
    assert m.values[0, 1] == 2 and m.values.sum() == 2


def test_request_matrix_length_formula():
    m = build_request_matrix([ev(0, 0), ev(0, 120)], resolution=60)
    assert m.n_times == 3  # ceil(121 / 60)
    m = build_request_matrix([ev(0, 0), ev(0, 119)], resolution=60)
    assert m.n_times == 2


def test_request_matrix_column_sums():
    rng = np.random.default_rng(0)
    events = sorted((ev(int(c), int(t)) for c, t in zip(rng.integers(0, 5, 50), rng.integers(0, 1000, 50))),
                    key=lambda e: e.timestamp)
    m = build_request_matrix(events, resolution=37, n_contents=5)
    expected = np.bincount([e.content_id for e in events], minlength=5)
    np.testing.assert_array_equal(m.values.sum(axis=0), expected)


def test_request_matrix_errors():
    with pytest.raises(ValueError):
        build_request_matrix([], 10)
    with pytest.raises(ValueError):
        build_request_matrix([ev(0, 1)], 0)


def test_window_examples():
    m = RequestMatrix(np.array([[1], [0], [1], [1], [1], [0]]), 0, 1)
    np.testing.assert_array_equal(window_requests(m, 3).values[:, 0], [2, 2])
    np.testing.assert_array_equal(window_requests(m, 1).values, m.values)
    with pytest.raises(ValueError):
        window_requests(m, 7)


def test_window_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = rng.integers(0, 6, size=(20, 5))
        np.testing.assert_array_equal(window_requests(RequestMatrix(v, 0, 1), 4).values, brute_window(v, 4))


@given(st.integers(1, 30), st.integers(1, 6), st.integers(1, 30), st.integers(0, 999))
@settings(max_examples=50, deadline=None)
def test_window_column_sum_property(t, n_c, w, seed):
    w = min(w, t)
    v = np.random.default_rng(seed).integers(0, 9, size=(t, n_c))
    wm = window_requests(RequestMatrix(v, 0, 1), w)
    np.testing.assert_array_equal(wm.values.sum(axis=0), v[: wm.n_windows * w].sum(axis=0))


def test_request_probability():
    np.testing.assert_allclose(request_probability([2, 3, 5]), [0.2, 0.3, 0.5])
    np.testing.assert_array_equal(request_probability([0, 0, 0]), [0, 0, 0])
    row = np.random.default_rng(2).integers(0, 20, size=12)
    row[0] += 1
    assert request_probability(row).sum() == pytest.approx(1.0, abs=1e-12)


def test_skewness_examples():
    assert skewness([1, 2, 1]) == 0.0
    assert skewness([1, 1, 10]) == pytest.approx(-2.2240, abs=1e-4)
    assert skewness([10, 1, 1]) == pytest.approx(2.2240, abs=1e-4)
    assert skewness([0, 0, 0]) == 0.0
    assert skewness([0, 5, 0]) == 0.0


def test_skewness_moment_values():
    # m2 = 0.354167 and m3 = -0.46875 for [1, 1, 10]
    assert brute_skew([1, 1, 10]) == pytest.approx(-0.46875 / 0.354167**1.5, rel=1e-5)


@given(st.lists(st.integers(0, 50), min_size=2, max_size=12))
@settings(max_examples=100, deadline=None)
def test_skewness_antisymmetry(h):
    assert skewness(h[::-1]) == -skewness(h)


@pytest.mark.parametrize("L", range(4, 11))
def test_skewness_negative_on_geometric_growth(L):
    assert skewness([2**t for t in range(1, L + 1)]) < 0


def test_skewness_columns_matches_scalar():
    h = np.random.default_rng(3).integers(0, 7, size=(9, 15))
    np.testing.assert_allclose(skewness_columns(h), [skewness(h[:, j]) for j in range(15)], atol=1e-12)


def test_label_example():
    # probs [0.4, 0.3, 0.2, 0.1]; skews [-0.5, +0.2, -1.0, -0.3]
    hist = np.array([[1, 10, 1, 1], [1, 1, 1, 1], [10, 1, 10, 10]], dtype=float)
    hist[:, 0] = [1, 2, 6]
    skews = skewness_columns(hist)
    assert list(np.sign(skews)) == [-1, 1, -1, -1]
    y = label_topk([4, 3, 2, 1], hist, LabelParams(k=2, l_history=3))
    np.testing.assert_array_equal(y, [1, 0, 1, 0])


def test_label_fill_rules():
    rising = np.array([[5, 5, 5], [1, 1, 1]], dtype=float)  # all skews positive
    np.testing.assert_array_equal(label_topk([1, 7, 3], rising, LabelParams(2, 2)), [0, 1, 1])
    np.testing.assert_array_equal(label_topk([1, 7, 3], rising, LabelParams(3, 2)), [1, 1, 1])
    # zero demand: lowest-index K contents
    np.testing.assert_array_equal(label_topk([0, 0, 0, 0], rising[:, [0, 1, 2, 0]], LabelParams(2, 2)), [1, 1, 0, 0])


def test_label_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n, L = rng.integers(2, 7), rng.integers(2, 6)
        k = rng.integers(1, n + 1)
        row = rng.integers(0, 5, size=n)
        hist = rng.integers(0, 5, size=(L, n))
        np.testing.assert_array_equal(label_topk(row, hist, LabelParams(int(k), int(L))), brute_label(row, hist, k))


def test_segment_counts_and_overlap():
    L = 4
    wm = WindowedMatrix(np.arange(5 * 3).reshape(5, 3), 1)
    assert len(segment(wm, LabelParams(1, L))) == 1
    wm = WindowedMatrix(np.random.default_rng(5).integers(0, 9, size=(L + 5, 3)), 1)
    s = segment(wm, LabelParams(1, L))
    assert len(s) == 5
    for a, b in zip(s, s[1:]):
        np.testing.assert_array_equal(a.x[1:], b.x[:-1])
        assert b.u == a.u + 1
    with pytest.raises(ValueError):
        segment(WindowedMatrix(np.ones((L, 3)), 1), LabelParams(1, L))


def test_segment_label_sums():
    wm = WindowedMatrix(np.random.default_rng(6).integers(0, 9, size=(40, 6)), 1)
    samples = segment(wm, LabelParams(2, 10))
    assert len(samples) == 30
    assert all(s.y.sum() == 2 for s in samples)
    for s in samples:
        np.testing.assert_array_equal(s.x, wm.values[s.u - 10 : s.u])


def test_chronological_split():
    samples = [Sample(np.zeros((2, 2)), np.zeros(2, dtype=np.uint8), u) for u in range(10)]
    train, test = chronological_split(samples, 0.8)
    assert (len(train), len(test)) == (8, 2)
    assert [s.u for s in train + test] == list(range(10))
    assert max(s.u for s in train) < min(s.u for s in test)
    with pytest.raises(ValueError):
        chronological_split(samples[:1], 0.5)
    with pytest.raises(ValueError):
        chronological_split(samples, 1.0)


def test_node_samples_deterministic():
    events = generate_synthetic(SyntheticSpec(n_contents=12, n_events=3000, horizon=5000, seed=2))
    p = LabelParams(2, 6)
    _, a = node_samples(events, p, 50, 4, 12)
    _, b = node_samples(events, p, 50, 4, 12)
    assert len(a) == len(b) > 0
    assert all(np.array_equal(x.x, y.x) and np.array_equal(x.y, y.y) for x, y in zip(a, b))


def test_sample_file_roundtrip(tmp_path):
    wm = WindowedMatrix(np.random.default_rng(7).integers(0, 50, size=(20, 5)), 1)
    samples = segment(wm, LabelParams(2, 6))
    path = tmp_path / "s.bin"
    write_samples(samples, 2, path)
    blob = path.read_bytes()
    assert blob[:4] == b"VCAT"
    assert len(blob) == 24 + len(samples) * (4 * 6 * 5 + 5)
    back, k = read_samples(path)
    assert k == 2
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        assert a.u == b.u
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        read_samples(path)
