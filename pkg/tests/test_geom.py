import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointjepa.errors import InvalidArgument
from pointjepa.geom import (
    START_CENTROID,
    START_RANDOM,
    farthest_point_sample,
    knn_group,
    normalize_patches,
    tokenize,
)


def fps_oracle(points, c, start):
    """Pure-Python greedy max-min selection with lowest-index tie-breaking."""
    pts = [tuple(float(v) for v in p) for p in np.asarray(points, dtype=np.float32)]

    def sq(a, b):
        return sum((np.float32(x) - np.float32(y)) ** 2 for x, y in zip(a, b))

    chosen = [start]
    while len(chosen) < c:
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            d = min(sq(p, pts[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn_oracle(points, center, k):
    pts = np.asarray(points, dtype=np.float64)
    d = [(float(((p - pts[center]) ** 2).sum()), i) for i, p in enumerate(pts)]
    return [i for _, i in sorted(d)[:k]]


clouds = st.integers(1, 40).flatmap(
    lambda n: st.lists(
        st.tuples(*[st.integers(-20, 20)] * 3), min_size=n, max_size=n
    ).map(lambda rows: np.array(rows, dtype=np.float32) / 4)
)


def test_fps_single_point():
    assert farthest_point_sample(np.zeros((1, 3)), 1).tolist() == [0]


def test_fps_picks_far_point():
    pts = np.array([[0, 0, 0], [10, 0, 0], [1, 0, 0]], dtype=np.float32)
    assert set(farthest_point_sample(pts, 2, start=0).tolist()) == {0, 1}


def test_fps_full_is_permutation():
    pts = np.random.default_rng(0).normal(size=(30, 3))
    idx = farthest_point_sample(pts, 30)
    assert sorted(idx.tolist()) == list(range(30))


@pytest.mark.parametrize("c", [0, 6])
def test_fps_rejects_bad_count(c):
    with pytest.raises(InvalidArgument):
        farthest_point_sample(np.zeros((5, 3)), c)


def test_fps_rejects_nonfinite():
    pts = np.zeros((3, 3))
    pts[1, 2] = np.nan
    with pytest.raises(InvalidArgument):
        farthest_point_sample(pts, 2)


@settings(max_examples=60, deadline=None)
@given(clouds, st.data())
def test_fps_matches_oracle(pts, data):
    n = pts.shape[0]
    c = data.draw(st.integers(1, n))
    start = data.draw(st.integers(0, n - 1))
    assert farthest_point_sample(pts, c, start=start).tolist() == fps_oracle(pts, c, start)


def test_fps_two_from_start_is_linear_scan_max():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pts = rng.normal(size=(40, 3)).astype(np.float32)
        s = int(rng.integers(40))
        idx = farthest_point_sample(pts, 2, start=s)
        d = ((pts - pts[s]) ** 2).sum(axis=1)
        assert idx[0] == s and d[idx[1]] == d.max()


def test_fps_ignores_duplicates_of_selected_points():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(25, 3)).astype(np.float32)
    base = farthest_point_sample(pts, 8)
    extended = np.concatenate([pts, pts[base[:3]], pts[base[5:]]])
    assert farthest_point_sample(extended, 8).tolist() == base.tolist()


def test_fps_start_policies():
    pts = np.random.default_rng(3).normal(size=(50, 3)).astype(np.float32)
    a = farthest_point_sample(pts, 5, start=START_RANDOM, rng=np.random.default_rng(7))
    b = farthest_point_sample(pts, 5, start=START_RANDOM, rng=np.random.default_rng(7))
    assert a.tolist() == b.tolist()
    far = farthest_point_sample(pts, 1, start=START_CENTROID)[0]
    assert far == np.argmax(np.linalg.norm(pts - pts.mean(axis=0), axis=1))
    with pytest.raises(InvalidArgument):
        farthest_point_sample(pts, 2, start=START_RANDOM)


def test_knn_k1_is_self():
    pts = np.random.default_rng(4).normal(size=(20, 3))
    centers = np.array([0, 5, 19])
    ps = knn_group(pts, centers, 1)
    assert ps.groups[:, 0].tolist() == centers.tolist()
    assert np.all(ps.local_coords == 0)


def test_knn_collinear_tie():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=np.float32)
    ps = knn_group(pts, [1], 2)
    assert ps.groups[0].tolist() == [1, 0]


def test_knn_equidistant_pair_prefers_lower_index():
    pts = np.array([[0, 0, 1], [5, 5, 5], [0, 1, 0], [0, 0, 0], [1, 0, 0]], dtype=np.float32)
    ps = knn_group(pts, [3], 2)
    assert ps.groups[0].tolist() == [3, 0] == knn_oracle(pts, 3, 2)


def test_knn_rejects_large_k():
    with pytest.raises(InvalidArgument):
        knn_group(np.zeros((3, 3)), [0], 4)


@settings(max_examples=60, deadline=None)
@given(clouds, st.data())
def test_knn_matches_oracle(pts, data):
    n = pts.shape[0]
    k = data.draw(st.integers(1, n))
    centers = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=5))
    ps = knn_group(pts, centers, k)
    assert ps.groups.shape == (len(centers), k)
    for row, ci in zip(ps.groups, centers):
        assert row.tolist() == knn_oracle(pts, ci, k)


def test_knn_relabeling_equivariance():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(60, 3)).astype(np.float32)
    perm = rng.permutation(60)
    inv = np.argsort(perm)  # new position of old index
    centers = np.array([0, 17, 42])
    a = knn_group(pts, centers, 8)
    b = knn_group(pts[perm], inv[centers], 8)
    assert np.array_equal(perm[b.groups], a.groups)
    assert np.array_equal(a.local_coords, b.local_coords)


def test_patchset_invariant():
    pts = np.random.default_rng(6).normal(size=(100, 3)).astype(np.float32)
    ps = tokenize(pts, 10, 7)
    assert ps.c == 10 and ps.k == 7
    expect = pts[ps.groups] - ps.centers[:, None, :]
    assert np.array_equal(ps.local_coords, expect)


def test_normalize_examples():
    pts = np.array([[1, 1, 1], [3, 4, 5]], dtype=np.float32)
    out = normalize_patches(pts, pts[[0]], [[0, 1]])
    assert out[0].tolist() == [[0, 0, 0], [2, 3, 4]]
    with pytest.raises(InvalidArgument):
        normalize_patches(pts, pts[[0]], [[0, 2]])


def test_normalize_translation_invariant():
    rng = np.random.default_rng(8)
    # dyadic coordinates keep the arithmetic exact
    pts = rng.integers(-64, 64, size=(50, 3)).astype(np.float32) / 8
    groups = knn_group(pts, [0, 9, 33], 6).groups
    shift = np.array([3.5, -7.25, 100.0], dtype=np.float32)
    a = normalize_patches(pts, pts[[0, 9, 33]], groups)
    b = normalize_patches(pts + shift, (pts + shift)[[0, 9, 33]], groups)
    assert np.array_equal(a, b)
    # generic coordinates: within tolerance
    g = rng.normal(size=(50, 3)).astype(np.float32)
    shift = rng.normal(size=3).astype(np.float32)
    np.testing.assert_allclose(
        normalize_patches(g, g[[1]], [[1, 2, 3]]),
        normalize_patches(g + shift, (g + shift)[[1]], [[1, 2, 3]]),
        atol=1e-6,
    )
