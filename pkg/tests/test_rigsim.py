import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from embedcal import rigsim
from embedcal.errors import NotVisible, ProjectorBehindBoard
from embedcal.geomcore import Extrinsics, Intrinsics, look_at
from embedcal.rigsim import (
    EmbeddedCameraSpec,
    RigConfig,
    build_projector,
    capture_stack,
    falloff,
    ground_truth_correspondence,
    render_board_footprint,
)
from embedcal.slcodec import LINE_X, PatternFrame, PatternSetSpec, build_pattern_set

from conftest import make_rig


def axis_rig(offsets=((0, 0, 0),) * 4, psf=0.0, **kw):
    """Camera 0 at the board origin with a projector straight above it."""
    intr = Intrinsics.from_fov(641, 361, 102.0)
    cams = [
        EmbeddedCameraSpec(xy, intr, 641, 361, offset_mm=off, psf_sigma=psf)
        for xy, off in zip([(0, 0), (100, 0), (100, 60), (0, 60)], offsets)
    ]
    poses = [Extrinsics.identity()]
    proj = build_projector(Intrinsics(1000, 1000, 639.5, 399.5), look_at((0, 0, 1.0), (0, 0, 0)), poses, 1280, 800)
    return RigConfig(470, 320, cams, [proj], poses, **kw)


class TestCapture:
    def test_on_axis_white_is_single_pixel(self):
        rig = axis_rig()
        ps = build_pattern_set(PatternSetSpec(1, 1280, 800))
        frames = capture_stack(rig, ps, 0, 0).frames
        white = frames[0]
        assert np.count_nonzero(white) == 1
        assert white[180, 320] == pytest.approx(1.0)

    def test_black_frame_with_ambient(self):
        rig = axis_rig(ambient_level=0.3)
        ps = build_pattern_set(PatternSetSpec(1, 1280, 800))
        black = capture_stack(rig, ps, 0, 0).frames[1]
        np.testing.assert_allclose(black, 0.3)

    def test_frame_count_and_shape(self, small_rig):
        ps = build_pattern_set(PatternSetSpec(2, 1280, 800, 4))
        st_ = capture_stack(small_rig, ps, 0, 1)
        assert st_.frames.shape == (len(ps), 360, 640)

    def test_deterministic_with_noise(self, small_rig):
        rig = small_rig.replace(noise_sigma=0.02, rng_seed=11)
        ps = build_pattern_set(PatternSetSpec(2, 1280, 800, 4))
        a = capture_stack(rig, ps, 1, 2).frames
        b = capture_stack(rig, ps, 1, 2).frames
        assert a.tobytes() == b.tobytes()
        c = capture_stack(rig.replace(rng_seed=12), ps, 1, 2).frames
        assert not np.array_equal(a, c)

    def test_superposition(self, small_rig):
        rig = small_rig.replace(ambient_level=0.05)
        ps = build_pattern_set(PatternSetSpec(2, 1280, 800, 4))
        both = capture_stack(rig, ps, 0, 0).frames
        one = capture_stack(rig, ps, 0, 0, projectors=[0]).frames
        two = capture_stack(rig, ps, 0, 0, projectors=[1]).frames
        np.testing.assert_allclose(both, one + two - 0.05, atol=1e-12)

    def test_roi_keeps_sensor_coordinates(self, small_rig):
        ps = build_pattern_set(PatternSetSpec(2, 1280, 800))
        full = capture_stack(small_rig, ps, 0, 0)
        roi = capture_stack(small_rig, ps, 0, 0, roi=(100, 50, 300, 200))
        assert roi.origin == (100, 50)
        np.testing.assert_array_equal(roi.frames, full.frames[:, 50:250, 100:400])

    def test_projector_behind_board(self):
        rig = axis_rig()
        behind = look_at((0, 0, -1.0), (0, 0, -2.0))
        proj = rig.projectors[0]
        bad = rig.replace(projectors=(build_projector(proj.intrinsics, behind, rig.board_poses, 1280, 800),))
        ps = build_pattern_set(PatternSetSpec(1, 1280, 800))
        with pytest.raises(ProjectorBehindBoard):
            capture_stack(bad, ps, 0, 0)

    def test_energy_within_three_sigma(self):
        s = 2.5
        sl, patch = rigsim._blob((50.3, 40.7), s, (100, 100), (0, 0))
        yy, xx = np.mgrid[sl[0], sl[1]]
        total = np.exp(-0.5 * ((xx - 50.3) ** 2 + (yy - 40.7) ** 2) / s**2).sum()
        assert patch.sum() / total >= 0.99


class TestFalloff:
    cam = EmbeddedCameraSpec((0, 0), Intrinsics(100, 100, 50, 50), 100, 100)

    def test_normal_incidence(self):
        assert falloff(0, 0, self.cam) == 1.0

    def test_half_angle(self):
        assert falloff(self.cam.falloff_half_angle_x, 0, self.cam) == pytest.approx(0.5)
        assert falloff(0, self.cam.falloff_half_angle_y, self.cam) == pytest.approx(0.5)

    def test_double_half_angle(self):
        assert falloff(2 * self.cam.falloff_half_angle_x, 0, self.cam) < 0.1

    @given(st.floats(0, 89), st.floats(0, 89))
    def test_monotone_per_axis(self, a, b):
        lo, hi = sorted((a, b))
        assert falloff(lo, 10, self.cam) >= falloff(hi, 10, self.cam)
        assert falloff(10, -lo, self.cam) >= falloff(10, -hi, self.cam)


class TestGroundTruth:
    def test_zero_offset_hits_nominal_point(self):
        rig = make_rig(offsets=[(0, 0, 0)] * 4)
        for m in range(3):
            gt = ground_truth_correspondence(rig, 0, m, 2)
            np.testing.assert_allclose(gt.board_point_mm, rig.cameras[2].nominal_mm, atol=1e-9)

    def test_axial_offset_splits_board_points(self):
        rig = make_rig(offsets=[(0, 0, 5.0)] * 4)
        a = ground_truth_correspondence(rig, 0, 0, 1).board_point_mm
        b = ground_truth_correspondence(rig, 0, 1, 1).board_point_mm
        assert np.linalg.norm(a - b) > 0.5

    def test_board_point_is_on_ray(self, rig):
        gt = ground_truth_correspondence(rig, 3, 1, 0)
        C = rig.projectors[1].poses[3].center
        O = rig.cameras[0].center
        X = np.array([*gt.board_point_mm * rigsim.MM, 0.0])
        assert np.linalg.norm(np.cross(X - C, O - C)) < 1e-12

    def test_not_visible_at_grazing_angle(self):
        rig = axis_rig()
        side = look_at((1.0, 0, 0.05), (0, 0, 0))
        proj = rig.projectors[0]
        rig = rig.replace(projectors=(build_projector(proj.intrinsics, side, rig.board_poses, 1280, 800),))
        with pytest.raises(NotVisible):
            ground_truth_correspondence(rig, 0, 0, 0)


class TestFootprint:
    def test_white_is_uniform_inside_footprint(self):
        rig = axis_rig()
        r = render_board_footprint(rig, 0, 0, PatternFrame("white"), 1.0)
        vals = np.unique(r.image)
        assert set(vals) <= {0.0, 1.0} and 1.0 in vals
        # 1280 px at f=1000 from 1 m covers 1.28 m: the whole board is lit
        assert r.image.min() == 1.0

    def test_fronto_parallel_line_is_vertical(self):
        rig = axis_rig()
        r = render_board_footprint(rig, 0, 0, PatternFrame(LINE_X, position=700.0), 2.0)
        rows, cols = np.nonzero(r.image > 0.5)
        assert np.ptp(rows) > 100
        # a 1 mm wide stripe at 2 px/mm: same columns on every row
        per_row = {tuple(cols[rows == i]) for i in np.unique(rows)}
        assert len(per_row) == 1 and len(per_row.pop()) <= 3

    def test_oblique_line_stays_straight(self, rig):
        r = render_board_footprint(rig, 2, 1, PatternFrame(LINE_X, position=640.0), 1.0)
        rows, cols = np.nonzero(r.image > 0.5)
        pts = np.column_stack([cols, rows]).astype(float)
        c = pts - pts.mean(axis=0)
        _, s, vt = np.linalg.svd(c, full_matrices=False)
        resid = np.abs(c @ vt[1])
        assert resid.max() < 1.0 and np.sqrt(np.mean(resid**2)) < 0.5


def test_generate_board_poses_ranges():
    poses = rigsim.generate_board_poses(50, 1.0, np.random.default_rng(0))
    for p in poses:
        assert abs(p.translation[2]) <= 0.15 + 1e-12
        tilt = np.degrees(np.arccos(np.clip(p.rotation[2, 2], -1, 1)))
        assert tilt <= 20 * np.sqrt(2) + 1e-9


def test_rig_validation():
    cams = rigsim.default_cameras()[:3]
    with pytest.raises(ValueError, match="N >= 4"):
        RigConfig(470, 320, cams, [], [])
