import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rpq.dataset import (
    GroundTruth,
    VectorDataset,
    VectorFormatError,
    compute_ground_truth,
    load_ground_truth,
    load_vectors,
    make_sift_like,
    make_synthetic,
    sample_training_subset,
    save_ground_truth,
    save_vectors,
)
from rpq.graph import recall_at_k
from rpq.pq import kmeans


def _brute_knn(base, queries, k):
    out = []
    for q in np.asarray(queries, dtype=np.float64):
        d = ((np.asarray(base, dtype=np.float64) - q) ** 2).sum(axis=1)
        out.append(sorted(range(len(base)), key=lambda i: (d[i], i))[:k])
    return np.array(out)


def test_single_record_file(tmp_path):
    path = tmp_path / "one.fvecs"
    path.write_bytes(struct.pack("<i4f", 4, 1.0, 2.0, 3.0, 4.0))
    ds = load_vectors(path)
    assert (ds.count, ds.dim) == (1, 4)
    np.testing.assert_array_equal(ds.data[0], [1, 2, 3, 4])


def test_empty_file(tmp_path):
    path = tmp_path / "empty.fvecs"
    path.write_bytes(b"")
    ds = load_vectors(path)
    assert ds.count == 0 and ds.dim == 0


def test_dimension_mismatch_is_reported(tmp_path):
    path = tmp_path / "bad.fvecs"
    path.write_bytes(struct.pack("<i4f", 4, 1, 2, 3, 4) + struct.pack("<i5f", 5, 1, 2, 3, 4, 5))
    with pytest.raises(VectorFormatError, match="record 1 has dimension 5"):
        load_vectors(path)


def test_truncated_record(tmp_path):
    path = tmp_path / "cut.fvecs"
    path.write_bytes(struct.pack("<i4f", 4, 1, 2, 3, 4) + struct.pack("<i2f", 4, 1, 2))
    with pytest.raises(VectorFormatError, match="truncated"):
        load_vectors(path)


def test_bvecs_widened_and_ivecs_roundtrip(tmp_path):
    data = np.array([[0, 255, 7], [1, 2, 3]], dtype=np.float32)
    save_vectors(tmp_path / "a.bvecs", data)
    ds = load_vectors(tmp_path / "a.bvecs")
    assert ds.data.dtype == np.float32
    np.testing.assert_array_equal(ds.data, data)
    with pytest.raises(ValueError):
        save_vectors(tmp_path / "b.bvecs", np.array([[256.0]]))


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError, match="unknown vector format"):
        save_vectors(tmp_path / "x.npy", np.zeros((1, 1)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 9)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_fvecs_roundtrip_is_byte_exact(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "d.fvecs"
    save_vectors(path, data)
    first = path.read_bytes()
    back = load_vectors(path)
    np.testing.assert_array_equal(back.data, data)
    save_vectors(path, back)
    assert path.read_bytes() == first


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        VectorDataset(np.array([[np.nan, 1.0]]))


def test_ground_truth_small_example():
    base = np.array([[0, 0], [1, 1], [5, 5]], dtype=np.float32)
    gt = compute_ground_truth(base, np.array([[0.1, 0.1]]), 2)
    assert gt.neighbors.tolist() == [[0, 1]]


def test_ground_truth_self_and_ties():
    base = make_synthetic(50, 4, 2, seed=0).data
    gt = compute_ground_truth(base, base[7:8], 1)
    assert gt.neighbors[0, 0] == 7
    dup = np.array([[3, 3], [0, 0], [0, 0]], dtype=np.float32)
    assert compute_ground_truth(dup, np.array([[0.0, 0.0]]), 1).neighbors[0, 0] == 1
    with pytest.raises(ValueError):
        compute_ground_truth(dup, dup, 4)


def test_ground_truth_matches_brute_force_and_is_worker_independent():
    base = make_synthetic(400, 6, 5, seed=2).data
    queries = make_synthetic(30, 6, 5, seed=3).data
    one = compute_ground_truth(base, queries, 10, workers=1, block=7)
    many = compute_ground_truth(base, queries, 10, workers=3, block=7)
    np.testing.assert_array_equal(one.neighbors, many.neighbors)
    np.testing.assert_array_equal(one.neighbors, _brute_knn(base, queries, 10))


def test_self_ground_truth_gives_unit_recall():
    base = make_synthetic(120, 3, 3, seed=9).data
    gt = compute_ground_truth(base, base, 1)
    np.testing.assert_array_equal(gt.neighbors[:, 0], np.arange(120))
    assert all(recall_at_k(row, row) == 1.0 for row in gt.neighbors)


def test_ground_truth_file_roundtrip(tmp_path):
    gt = GroundTruth(np.array([[3, 1], [0, 2]]))
    save_ground_truth(tmp_path / "gt.ivecs", gt)
    np.testing.assert_array_equal(load_ground_truth(tmp_path / "gt.ivecs").neighbors, gt.neighbors)


def test_synthetic_shape_and_determinism():
    a = make_synthetic(10, 4, 1, seed=1)
    assert a.data.shape == (10, 4) and np.isfinite(a.data).all()
    assert a.data.tobytes() == make_synthetic(10, 4, 1, seed=1).data.tobytes()
    s = make_sift_like(200, 32, seed=4)
    assert s.data.min() >= 0 and s.data.max() <= 255
    np.testing.assert_array_equal(s.data, np.rint(s.data))


def test_two_clusters_beat_one():
    data = make_synthetic(100, 2, 2, seed=3).data
    one = kmeans(data, 1, 10, seed=0)[1][-1]
    two = kmeans(data, 2, 10, seed=0)[1][-1]
    assert two < one


def test_training_subset():
    ids = sample_training_subset(np.zeros((50, 2)), 20, seed=0)
    assert len(set(ids.tolist())) == 20 and np.all(np.diff(ids) > 0)
    assert len(sample_training_subset(np.zeros((5, 2)), 20, seed=0)) == 5
