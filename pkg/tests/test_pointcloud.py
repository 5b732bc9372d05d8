import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aerodrag import shapes
from aerodrag.mesh import TriangleMesh
from aerodrag.pointcloud import (
    CacheError,
    EmptyCloud,
    PointCloud,
    TooFewClouds,
    ZeroAreaMesh,
    cache_name,
    chamfer_distance,
    chamfer_distance_bruteforce,
    diversity_score,
    normalize_unit_sphere,
    read_cache,
    sample_surface,
    write_cache,
)


def chamfer_oracle(A, B):
    """Plain double loop over Python floats."""
    A, B = np.asarray(A, float).tolist(), np.asarray(B, float).tolist()

    def sq(a, b):
        return sum((x - y) ** 2 for x, y in zip(a, b))

    ab = sum(min(sq(a, b) for b in B) for a in A) / len(A)
    ba = sum(min(sq(a, b) for a in A) for b in B) / len(B)
    return ab + ba


TRI = TriangleMesh(np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0]], float), [[0, 1, 2]])


def test_samples_inside_triangle():
    pc = sample_surface(TRI, 100, seed=3)
    p = pc.points
    # barycentric coordinates w.r.t. the triangle (0,0), (2,0), (0,1)
    l1 = p[:, 0] / 2
    l2 = p[:, 1]
    l0 = 1 - l1 - l2
    bary = np.stack([l0, l1, l2], 1)
    assert np.all(bary >= -1e-12)
    np.testing.assert_allclose(bary.sum(1), 1.0)
    np.testing.assert_array_equal(p[:, 2], 0)


def test_area_weighted_counts():
    sq = shapes.unit_square()
    pc = sample_surface(sq, 10000, seed=1)
    first = int((pc.points[:, 0] >= pc.points[:, 1]).sum())  # triangle (0,0),(1,0),(1,1)
    sigma = math.sqrt(10000 * 0.25)
    assert abs(first - 5000) < 4 * sigma


def test_sampling_deterministic():
    ico = shapes.icosphere(2)
    a = sample_surface(ico, 500, seed=9).points
    b = sample_surface(ico, 500, seed=9).points
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample_surface(ico, 500, seed=10).points)


def test_zero_area_mesh():
    line = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float), [[0, 1, 2]])
    with pytest.raises(ZeroAreaMesh):
        sample_surface(line, 10, 0)


def test_normalize_examples():
    pc, t = normalize_unit_sphere(PointCloud(np.array([[-1.0, 0, 0], [1.0, 0, 0]])))
    np.testing.assert_array_equal(pc.points, [[-1, 0, 0], [1, 0, 0]])
    assert t.translation == (0.0, 0.0, 0.0) and t.scale == 1.0

    pc, t = normalize_unit_sphere(PointCloud(np.array([[2.0, 0, 0], [4.0, 0, 0]])))
    np.testing.assert_array_equal(pc.points, [[-1, 0, 0], [1, 0, 0]])
    assert t.translation == (3.0, 0.0, 0.0) and t.scale == 1.0

    pc, t = normalize_unit_sphere(PointCloud(np.full((5, 3), 7.5)))
    np.testing.assert_array_equal(pc.points, 0)
    assert t.scale == 1.0


def test_normalize_general(rng):
    raw = rng.normal(loc=5, scale=3, size=(400, 3))
    pc, t = normalize_unit_sphere(PointCloud(raw))
    assert np.abs(pc.points.mean(0)).max() < 1e-9
    assert np.linalg.norm(pc.points, axis=1).max() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(t.invert(pc.points), raw, atol=1e-12)


def test_chamfer_examples():
    assert chamfer_distance([[0.0, 0, 0]], [[1.0, 0, 0]]) == 2.0
    A = np.random.default_rng(0).normal(size=(30, 3))
    assert chamfer_distance(A, A) == 0.0
    with pytest.raises(EmptyCloud):
        chamfer_distance(np.zeros((0, 3)), A)


def test_chamfer_matches_double_loop(rng):
    for _ in range(5):
        A, B = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        want = chamfer_oracle(A, B)
        assert chamfer_distance(A, B) == pytest.approx(want, rel=1e-12)
        assert chamfer_distance_bruteforce(A, B) == pytest.approx(want, rel=1e-12)


def test_chamfer_translation_invariant(rng):
    A, B = rng.normal(size=(50, 3)), rng.normal(size=(70, 3))
    shift = np.array([3.0, -2.0, 10.0])
    assert chamfer_distance(A + shift, B + shift) == pytest.approx(chamfer_distance(A, B), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 25), st.just(3)), elements=st.floats(-10, 10, width=32)),
    arrays(np.float64, st.tuples(st.integers(1, 25), st.just(3)), elements=st.floats(-10, 10, width=32)),
)
def test_chamfer_symmetric_nonnegative(A, B):
    ab, ba = chamfer_distance(A, B), chamfer_distance(B, A)
    assert ab == ba
    assert ab >= 0
    assert chamfer_distance(A, A) == 0


def test_diversity(rng):
    clouds = [rng.normal(size=(15, 3)) for _ in range(3)]
    pairs = [chamfer_oracle(clouds[0], clouds[1]), chamfer_oracle(clouds[0], clouds[2]),
             chamfer_oracle(clouds[1], clouds[2])]
    got = diversity_score([PointCloud(c) for c in clouds], subsample_to=None)
    assert got == pytest.approx(sum(pairs) / 3, rel=1e-12)
    assert diversity_score(clouds[:2], None) == pytest.approx(chamfer_distance(*clouds[:2]), rel=1e-15)
    same = [clouds[0]] * 4
    assert diversity_score(same, None) == 0.0
    with pytest.raises(TooFewClouds):
        diversity_score(clouds[:1])


def test_diversity_subsampling(rng):
    clouds = [rng.normal(size=(3000, 3)) for _ in range(3)]
    a = diversity_score(clouds, subsample_to=256, seed=4)
    b = diversity_score(clouds, subsample_to=256, seed=4)
    assert a == b
    assert a > 0


def test_cache_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(123, 3))
    path = tmp_path / cache_name("car_001", 123, 7)
    assert path.name == "car_001_123_7.dapc"
    write_cache(path, pts)
    raw = path.read_bytes()
    assert raw[:4] == b"DAPC"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 123
    assert len(raw) == 12 + 123 * 12
    back = read_cache(path)
    np.testing.assert_array_equal(back, pts.astype(np.float32))


def test_cache_rejects_garbage(tmp_path):
    bad = tmp_path / "x.dapc"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CacheError):
        read_cache(bad)
    short = tmp_path / "y.dapc"
    short.write_bytes(b"DAPC" + (1).to_bytes(4, "little") + (5).to_bytes(4, "little") + bytes(12))
    with pytest.raises(CacheError):
        read_cache(short)
