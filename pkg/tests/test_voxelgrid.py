"""Voxelization, coordinate hashing, and set intersection."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxdistill.errors import ConfigError, ContractError, RangeError
from voxdistill.voxelgrid import (
    GridConfig,
    PointCloud,
    SparseVoxelSet,
    VoxelCoord,
    hash_coord,
    hash_coords,
    intersect_coords,
    unhash_key,
    voxelize,
)

GRID = GridConfig(voxel_size=(1.0, 1.0, 1.0),
                  x_range=(0.0, 10.0), y_range=(0.0, 10.0), z_range=(0.0, 4.0))


class TestVoxelize:
    def test_single_point_at_center(self):
        cloud = PointCloud(np.array([[2.5, 3.5, 0.5, 0.8]]))
        vs = voxelize(cloud, GRID)
        assert len(vs) == 1
        assert tuple(vs.coords[0]) == (2, 3, 0)
        f = vs.feature_data[0]
        assert np.allclose(f[:3], 0.0, atol=1e-12)
        assert np.isclose(f[3], 0.8)
        assert np.isclose(f[4], math.log(2))  # log(1 + 1)

    def test_symmetric_pair_zero_offset(self):
        cloud = PointCloud(np.array([[2.2, 3.5, 0.5, 0.0],
                                     [2.8, 3.5, 0.5, 1.0]]))
        vs = voxelize(cloud, GRID)
        assert len(vs) == 1
        assert np.allclose(vs.feature_data[0, :3], 0.0, atol=1e-12)
        assert np.isclose(vs.feature_data[0, 3], 0.5)

    def test_groupby_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(0, 2, 5), rng.uniform(0, 1, 5),
                               rng.uniform(0, 1, 5), rng.uniform(0, 1, 5)])
        vs = voxelize(PointCloud(pts), GRID)
        # brute-force group-by over cells
        cells = {}
        for p in pts:
            key = tuple(int(np.floor(v)) for v in p[:3])
            cells.setdefault(key, []).append(p)
        assert len(vs) == len(cells)
        for coord, feat in zip(vs.coords, vs.feature_data):
            group = np.array(cells[tuple(coord)])
            center = coord + 0.5
            assert np.allclose(feat[:3], group[:, :3].mean(axis=0) - center)
            assert np.isclose(feat[3], group[:, 3].mean())
            assert np.isclose(feat[4], math.log1p(len(group)))

    def test_empty_cloud(self):
        vs = voxelize(PointCloud(np.zeros((0, 4))), GRID)
        assert len(vs) == 0

    def test_out_of_range_dropped(self):
        cloud = PointCloud(np.array([[50.0, 50.0, 50.0, 1.0],
                                     [1.5, 1.5, 0.5, 1.0]]))
        assert len(voxelize(cloud, GRID)) == 1

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        pts = np.column_stack([rng.uniform(0, 10, n), rng.uniform(0, 10, n),
                               rng.uniform(0, 4, n), rng.uniform(0, 1, n)])
        perm = rng.permutation(n)
        a = voxelize(PointCloud(pts), GRID)
        b = voxelize(PointCloud(pts[perm]), GRID)
        assert np.array_equal(a.coords, b.coords)
        assert np.allclose(a.feature_data, b.feature_data, atol=1e-12)


class TestHash:
    def test_origin_key_is_offset_packing(self):
        # with the range offset removed, (0,0,0) packs to key 0
        off = 1 << 20
        assert hash_coord(VoxelCoord(0, 0, 0)) == (off << 42) | (off << 21) | off
        assert hash_coord(VoxelCoord(-off, -off, -off)) == 0

    def test_injective_sweep(self):
        rng = np.random.default_rng(1)
        coords = rng.integers(-2**20, 2**20 + 1, size=(10**5, 3))
        keys = hash_coords(coords)
        uniq_coords = np.unique(coords, axis=0)
        assert len(np.unique(keys)) == len(uniq_coords)

    def test_unhash_inverts(self):
        rng = np.random.default_rng(2)
        for c in rng.integers(-2**20, 2**20, size=(100, 3)):
            assert unhash_key(hash_coord(tuple(c))) == tuple(c)

    def test_range_error(self):
        with pytest.raises(RangeError):
            hash_coord(VoxelCoord(2**20 + 1, 0, 0))


class TestIntersect:
    def _vset(self, coords):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return SparseVoxelSet(coords, np.zeros((len(coords), 2)), GRID)

    def test_disjoint(self):
        a = self._vset([[0, 0, 0]])
        b = self._vset([[1, 1, 1]])
        assert len(intersect_coords(a, b)) == 0

    def test_idempotent(self):
        a = self._vset([[0, 0, 0], [1, 2, 3], [4, 4, 0]])
        got = intersect_coords(a, a)
        assert sorted(map(tuple, got)) == sorted(map(tuple, a.coords))

    def test_two_element_case(self):
        a = self._vset([[0, 0, 0], [1, 0, 0]])
        b = self._vset([[1, 0, 0], [2, 0, 0]])
        got = intersect_coords(a, b)
        assert [tuple(c) for c in got] == [(1, 0, 0)]

    def test_commutative_and_bounded(self):
        rng = np.random.default_rng(3)
        ca = np.unique(rng.integers(0, 4, (20, 3)), axis=0)
        cb = np.unique(rng.integers(0, 4, (20, 3)), axis=0)
        a, b = self._vset(ca), self._vset(cb)
        ab = intersect_coords(a, b)
        ba = intersect_coords(b, a)
        assert np.array_equal(ab, ba)
        assert len(ab) <= min(len(a), len(b))

    def test_grid_mismatch(self):
        other = GridConfig(voxel_size=(2.0, 2.0, 2.0), x_range=(0, 10),
                           y_range=(0, 10), z_range=(0, 4))
        a = self._vset([[0, 0, 0]])
        b = SparseVoxelSet(np.array([[0, 0, 0]]), np.zeros((1, 2)), other)
        with pytest.raises(ConfigError):
            intersect_coords(a, b)


class TestPointCloudIO:
    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        pts = rng.uniform(-5, 5, (17, 4))
        cloud = PointCloud(pts)
        path = tmp_path / "c.csv"
        cloud.to_csv(path)
        assert path.read_text().splitlines()[0] == "x,y,z,intensity"
        back = PointCloud.from_csv(path)
        assert np.allclose(back.points, pts, atol=0)

    def test_binary_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-5, 5, (9, 4)).astype(np.float32).astype(np.float64)
        path = tmp_path / "c.bin"
        PointCloud(pts).to_binary(path)
        assert path.stat().st_size == 9 * 4 * 4
        back = PointCloud.from_binary(path)
        assert np.array_equal(back.points, pts)

    def test_rejects_nonfinite(self):
        with pytest.raises(ContractError):
            PointCloud(np.array([[0.0, 0.0, np.nan, 0.0]]))


def test_duplicate_coords_rejected():
    with pytest.raises(ContractError):
        SparseVoxelSet(np.array([[0, 0, 0], [0, 0, 0]]), np.zeros((2, 2)), GRID)
