"""Projection, rasterisation, densification and box masks against loop oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from clft.geometry import (BACKGROUND, HUMAN, VEHICLE, VOID, Box3D, PlaneStack, SensorRig,
                           boxes_to_mask, densify, filter_and_populate, load_boxes, load_cloud,
                           project_to_image, save_boxes, save_cloud, transform_to_camera)
from clft.synthetic import default_rig


def rig(euler=(0, 0, 0), pos=(0, 0, 0), focal=(100, 100), res=(384, 384)):
    return SensorRig(euler, pos, focal, res)


def random_rig(rng, size=(24, 16)):
    return SensorRig(tuple(rng.uniform(-math.pi, math.pi, 3)), tuple(rng.normal(0, 0.5, 3)),
                     tuple(rng.uniform(5, 40, 2)), size)


class TestSensorRig:
    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError):
            rig(focal=(0, 100))

    def test_rejects_nonfinite_angles(self):
        with pytest.raises(ValueError):
            rig(euler=(math.nan, 0, 0))

    def test_rotation_is_orthonormal(self, rng):
        for _ in range(20):
            R = random_rig(rng).rotation()
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-14)
            assert np.linalg.det(R) == pytest.approx(1.0)

    def test_rotation_matches_oracle(self, rng):
        r = random_rig(rng)
        np.testing.assert_allclose(r.rotation(), oracles.rotation(*r.euler), atol=1e-15)

    def test_json_round_trip(self, tmp_path):
        r = default_rig()
        r.save(tmp_path / "rig.json")
        assert SensorRig.load(tmp_path / "rig.json") == r


class TestTransform:
    def test_identity(self, rng):
        pts = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(transform_to_camera(pts, rig()), pts)

    def test_translation_cancels(self):
        np.testing.assert_array_equal(transform_to_camera([[1, 2, 3]], rig(pos=(1, 2, 3))), [[0, 0, 0]])

    def test_yaw_quarter_turn(self):
        out = transform_to_camera([[1, 0, 0]], rig(euler=(0, 0, math.pi / 2)))
        np.testing.assert_allclose(out, [[0, -1, 0]], atol=1e-15)

    def test_default_rig_looks_forward(self):
        # LiDAR forward (+x) is the camera optical axis (+z), left (+y) is image-left (-x),
        # up (+z) is image-up (-y).
        r = default_rig()
        R = r.rotation()
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(R @ [0, 1, 0], [-1, 0, 0], atol=1e-15)
        np.testing.assert_allclose(R @ [0, 0, 1], [0, -1, 0], atol=1e-15)


class TestProjection:
    def test_optical_axis_hits_centre(self):
        p = project_to_image([[0, 0, 5]], rig())
        assert (p.u[0], p.v[0]) == (192, 192)

    def test_closed_form(self):
        assert project_to_image([[1, 0, 2]], rig()).u[0] == 242

    def test_behind_flag(self):
        p = project_to_image([[0, 0, -1], [0, 0, 0], [0, 0, 1]], rig())
        assert p.behind.tolist() == [True, True, False]
        assert np.isnan(p.u[0])


class TestFilterAndPopulate:
    def test_empty_cloud(self):
        planes = filter_and_populate(np.zeros((0, 3)), rig(res=(8, 6)))
        assert not planes.occupancy.any()
        assert not planes.stack().any()
        assert planes.shape == (6, 8)

    def test_single_point(self):
        r = rig(res=(8, 8), focal=(4, 4))
        planes = filter_and_populate(np.array([[0.5, -0.25, 2.0]]), r)
        assert planes.occupancy.sum() == 1
        # u = 4 * 0.25 + 4 = 5, v = 4 * -0.125 + 4 = 3.5
        assert planes.occupancy[3, 5]
        np.testing.assert_array_equal(planes.stack()[:, 3, 5], [0.5, -0.25, 2.0])

    def test_nearest_depth_wins(self):
        r = rig(res=(4, 4), focal=(1, 1))
        cloud = np.array([[0, 0, 4.0], [0, 0, 2.0], [0, 0, 3.0]])
        planes = filter_and_populate(cloud, r)
        assert planes.xz[2, 2] == 2.0

    def test_tie_goes_to_lowest_index(self):
        r = rig(res=(4, 4), focal=(1, 1))
        cloud = np.array([[0.1, 0, 2.0], [0.2, 0, 2.0]])   # same pixel and depth
        assert filter_and_populate(cloud, r).xy[2, 2] == 0.1
        assert filter_and_populate(cloud[::-1], r).xy[2, 2] == 0.2

    def test_zero_coordinate_is_still_occupied(self):
        planes = filter_and_populate(np.array([[0.0, 0.0, 1.0]]), rig(res=(4, 4)))
        assert planes.occupancy[2, 2]
        assert planes.xy[2, 2] == 0.0

    def test_thousand_random_points_match_oracle(self, rng):
        r = random_rig(rng, (40, 30))
        cloud = rng.normal(0, 4, (1000, 3))
        grids, occ = oracles.populate(cloud, r)
        planes = filter_and_populate(cloud, r)
        np.testing.assert_array_equal(planes.stack(), grids)
        np.testing.assert_array_equal(planes.occupancy, occ)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_fuzzed_rigs_match_oracle(self, seed):
        g = np.random.default_rng(seed)
        r = random_rig(g, (int(g.integers(1, 20)), int(g.integers(1, 20))))
        cloud = g.normal(0, 3, (int(g.integers(0, 200)), 3))
        cloud[: len(cloud) // 4] = np.round(cloud[: len(cloud) // 4])   # provoke ties
        grids, occ = oracles.populate(cloud, r)
        planes = filter_and_populate(cloud, r)
        assert np.array_equal(planes.stack(), grids) and np.array_equal(planes.occupancy, occ)


class TestDensify:
    def _single(self, h=7, w=7, r=3, c=3, value=(1.0, 2.0, 3.0)):
        p = PlaneStack.empty(h, w)
        p.xy[r, c], p.yz[r, c], p.xz[r, c] = value
        p.occupancy[r, c] = True
        return p

    def test_radius_zero_is_identity(self):
        p = self._single()
        assert densify(p, 0).equals(p)

    def test_single_pixel_radius_one(self):
        out = densify(self._single(), 1)
        block = np.zeros((7, 7), bool)
        block[2:5, 2:5] = True
        np.testing.assert_array_equal(out.occupancy, block)
        np.testing.assert_array_equal(out.xz[block], 3.0)

    def test_two_pixels_give_disjoint_blocks(self):
        p = self._single(9, 9, 4, 2)
        p.xy[4, 6], p.yz[4, 6], p.xz[4, 6] = 5.0, 6.0, 7.0
        p.occupancy[4, 6] = True
        out = densify(p, 1)
        grids, occ = oracles.densify(p.stack(), p.occupancy, 1)
        np.testing.assert_array_equal(out.stack(), grids)
        np.testing.assert_array_equal(out.occupancy, occ)
        assert out.occupancy.sum() == 18

    def test_equidistant_tie_prefers_smaller_depth(self):
        p = PlaneStack.empty(1, 3)
        p.xz[0, 0], p.xz[0, 2] = 9.0, 4.0
        p.occupancy[0, [0, 2]] = True
        assert densify(p, 1).xz[0, 1] == 4.0

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            densify(self._single(), -1)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    @settings(max_examples=25, deadline=None)
    def test_random_sparse_grids_match_oracle(self, seed, radius):
        g = np.random.default_rng(seed)
        h, w = g.integers(1, 14, 2)
        p = PlaneStack.empty(int(h), int(w))
        p.occupancy[:] = g.random((h, w)) < 0.1
        for grid in (p.xy, p.yz, p.xz):
            grid[p.occupancy] = g.integers(-3, 4, int(p.occupancy.sum()))   # ties likely
        grids, occ = oracles.densify(p.stack(), p.occupancy, radius)
        out = densify(p, radius)
        assert np.array_equal(out.stack(), grids) and np.array_equal(out.occupancy, occ)


class TestBoxesToMask:
    def setup_method(self):
        self.rig = rig(res=(32, 32), focal=(16, 16))

    def test_no_boxes(self, rng):
        cloud = rng.normal(0, 1, (50, 3)) + [0, 0, 5]
        assert (boxes_to_mask(cloud, [], self.rig) == BACKGROUND).all()

    def test_five_points_in_one_box(self):
        # camera frame equals LiDAR frame here; five points spread over distinct pixels
        pts = np.array([[x, 0.0, 5.0] for x in (-1.0, -0.5, 0.0, 0.5, 1.0)])
        box = Box3D((0, 0, 5), (2.5, 2.0, 0.5), 0.0, "vehicle")
        mask = boxes_to_mask(pts, [box], self.rig)
        assert (mask == VEHICLE).sum() == 5
        assert set(np.unique(mask)) <= {BACKGROUND, VEHICLE, VOID}
        assert (mask == VOID).sum() > 0

    def test_footprint_without_points_is_void(self):
        box = Box3D((0, 0, 5), (1.0, 1.0, 1.0), 0.0, "human")
        mask = boxes_to_mask(np.zeros((0, 3)), [box], self.rig)
        assert (mask == VOID).sum() > 0
        assert (mask == HUMAN).sum() == 0

    def test_human_overrides_vehicle(self):
        pt = np.array([[0.0, 0.0, 5.0]])
        boxes = [Box3D((0, 0, 5), (1, 1, 1), 0.0, "human"), Box3D((0, 0, 5), (2, 2, 2), 0.0, "vehicle")]
        assert boxes_to_mask(pt, boxes, self.rig)[16, 16] == HUMAN

    def test_matches_oracle_on_synthetic_frame(self):
        from clft.synthetic import generate_scene
        r = default_rig(32, 27.0)
        scene = generate_scene(np.random.default_rng(3), r)
        cloud = scene.cloud[::3]
        expected = oracles.boxes_to_mask(cloud, scene.boxes, r)
        np.testing.assert_array_equal(boxes_to_mask(cloud, scene.boxes, r), expected)

    def test_matches_oracle_on_random_boxes(self, rng):
        for _ in range(5):
            boxes = [Box3D(rng.normal(0, 1, 3) + [0, 0, 6], rng.uniform(0.5, 2, 3), rng.uniform(-3, 3),
                           str(rng.choice(["vehicle", "pedestrian", "cyclist"]))) for _ in range(3)]
            cloud = rng.normal(0, 1.5, (300, 3)) + [0, 0, 6]
            expected = oracles.boxes_to_mask(cloud, boxes, self.rig)
            np.testing.assert_array_equal(boxes_to_mask(cloud, boxes, self.rig), expected)


class TestFiles:
    def test_cloud_round_trip(self, tmp_path, rng):
        pts = rng.normal(size=(10, 3))
        save_cloud(tmp_path / "c.txt", pts)
        np.testing.assert_array_equal(load_cloud(tmp_path / "c.txt"), pts)

    def test_empty_cloud_file(self, tmp_path):
        (tmp_path / "c.txt").write_text("")
        assert load_cloud(tmp_path / "c.txt").shape == (0, 3)

    def test_malformed_cloud(self, tmp_path):
        (tmp_path / "c.txt").write_text("1 2\n")
        with pytest.raises(ValueError):
            load_cloud(tmp_path / "c.txt")

    def test_boxes_round_trip(self, tmp_path):
        boxes = [Box3D((1, 2, 3), (4, 2, 1.5), 0.3, "cyclist", {"id": 7})]
        save_boxes(tmp_path / "b.json", boxes)
        back = load_boxes(tmp_path / "b.json")
        assert back[0].code == HUMAN and back[0].extra == {"id": 7} and back[0].center == (1, 2, 3)

    def test_plane_stack_round_trip(self, tmp_path, rng):
        p = PlaneStack.empty(3, 4)
        p.occupancy[1, 2] = True
        p.xy[1, 2] = 0.0
        p.xz[1, 2] = 2.5
        p.save(tmp_path / "p.bin")
        assert PlaneStack.load(tmp_path / "p.bin").equals(p)
