import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from embedcal import compense
from embedcal.compense import (
    CompensationSample,
    CompensationSession,
    LineParams,
    MisalignmentMap,
    RansacParams,
    binarize,
    compensate,
    estimate_misalignment_homography,
    hough_lines,
    intersect_lines,
    measure_board_intersection,
    refine_line,
    session_rig,
)
from embedcal.decode import Correspondence
from embedcal.errors import AllDark, CameraMismatch, InsufficientPoints, LinesParallel, NoLineFound
from embedcal.geomcore import Homography2D, apply_homography
from embedcal.rigsim import ground_truth_correspondence
from embedcal.slcodec import PatternSetSpec, build_pattern_set

from conftest import make_rig

H_TRUE = np.array([[0.021, -0.0013, -6.2], [0.0009, 0.0205, -3.4], [2e-6, -1e-6, 1.0]])


def line_image(rho, theta, shape=(120, 120), half_width=0.5):
    rows, cols = np.mgrid[: shape[0], : shape[1]]
    return np.abs(cols * np.cos(theta) + rows * np.sin(theta) - rho) <= half_width


def line_error(a: LineParams, rho, theta):
    """(rho error, theta error) allowing for the theta = 0 / pi wrap."""
    d = (a.theta - theta + np.pi / 2) % np.pi - np.pi / 2
    flip = abs(a.theta - theta) > np.pi / 2
    return abs((-a.rho if flip else a.rho) - rho), abs(d)


def synthetic_session(h=H_TRUE, count=36, camera=0):
    xs = np.linspace(20, 620, 6)
    ys = np.linspace(20, 340, 6)
    src = np.array([(x, y) for x in xs for y in ys])[:count]
    dst = apply_homography(h, src)
    samples = tuple(CompensationSample((0.0, 0.0, 1.0), tuple(s), tuple(d)) for s, d in zip(src, dst))
    return CompensationSession(camera, samples), src, dst


class TestBinarize:
    def test_all_dark(self):
        with pytest.raises(AllDark):
            binarize(np.zeros((4, 4)))

    def test_single_row(self):
        img = np.zeros((5, 5))
        img[2] = 1.0
        assert np.array_equal(binarize(img), img > 0)

    def test_gaussian_band_width(self):
        sigma = 3.0
        x = np.arange(101) - 50.0
        img = np.tile(np.exp(-0.5 * (x / sigma) ** 2), (10, 1))
        width = binarize(img, 0.5)[0].sum()
        assert abs(width - 2 * sigma * np.sqrt(2 * np.log(2))) <= 1.0


class TestHough:
    def test_horizontal(self):
        img = np.zeros((50, 50), bool)
        img[5, :] = True
        line = hough_lines(img)
        assert line.theta == pytest.approx(np.pi / 2) and line.rho == pytest.approx(5.0)

    def test_vertical(self):
        img = np.zeros((50, 50), bool)
        img[:, 3] = True
        line = hough_lines(img)
        assert line.theta == pytest.approx(0.0) and line.rho == pytest.approx(3.0)

    def test_diagonal(self):
        line = hough_lines(np.eye(50, dtype=bool))
        assert line.theta == pytest.approx(3 * np.pi / 4) and line.rho == pytest.approx(0.0, abs=1e-9)

    def test_too_little_support(self):
        img = np.zeros((20, 20), bool)
        img[3, 3:8] = True
        with pytest.raises(NoLineFound):
            hough_lines(img)

    @given(st.floats(0, np.pi - 1e-6), st.floats(0.3, 0.7))
    def test_random_lines(self, theta, frac):
        # a line through a random point of the central region
        px, py = 60 + 40 * (frac - 0.5), 60 - 40 * (frac - 0.5)
        rho = px * np.cos(theta) + py * np.sin(theta)
        img = line_image(rho, theta)
        coarse = hough_lines(img)
        assert abs(coarse.distance(px, py)) <= 0.5
        assert line_error(coarse, rho, theta)[1] <= np.radians(1.0)
        drho, dtheta = line_error(refine_line(img, coarse), rho, theta)
        assert drho <= 0.5 and dtheta <= np.radians(0.5)


class TestIntersect:
    def test_axis_lines(self):
        p = intersect_lines(LineParams(3.0, 0.0), LineParams(5.0, np.pi / 2))
        np.testing.assert_allclose(p, (3, 5), atol=1e-12)

    def test_parallel(self):
        with pytest.raises(LinesParallel):
            intersect_lines(LineParams(1.0, 0.3), LineParams(1.0, 0.3))

    def test_through_origin(self):
        p = intersect_lines(LineParams(0.0, np.pi / 4), LineParams(0.0, 3 * np.pi / 4))
        np.testing.assert_allclose(p, (0, 0), atol=1e-12)


class TestMeasure:
    @pytest.fixture(scope="class")
    @classmethod
    def setup(cls):
        rig = make_rig(num_projectors=1, num_poses=1)
        return rig, build_pattern_set(PatternSetSpec(1, 1280, 800, 10))

    def test_zero_offset_hits_nominal(self):
        rig = make_rig(num_projectors=1, num_poses=1, offsets=[(0, 0, 0)] * 4)
        srig = session_rig(rig, 2)
        ps = build_pattern_set(PatternSetSpec(1, 1280, 800, 10))
        s = measure_board_intersection(srig, 7, 0, 2, ps)
        assert np.linalg.norm(np.array(s.board_point_mm) - rig.cameras[2].nominal_mm) < 0.05

    def test_matches_oracle(self, setup):
        rig, ps = setup
        srig = session_rig(rig, 2)  # offset (1, 1, 5) mm
        points = []
        for k in (0, 14, 35):
            s = measure_board_intersection(srig, k, 0, 2, ps)
            gt = ground_truth_correspondence(srig, k, 0, 2)
            assert np.linalg.norm(np.array(s.board_point_mm) - gt.board_point_mm) < 0.2
            points.append(s.board_point_mm)
        assert np.linalg.norm(np.subtract(points[0], points[2])) > 1.0


class TestMisalignment:
    def test_exact_recovery(self):
        session, src, dst = synthetic_session()
        mp = estimate_misalignment_homography(session)
        assert mp.inlier_count == 36
        assert mp.rms_residual_mm < 1e-9
        Hn = Homography2D(H_TRUE).normalized().matrix
        np.testing.assert_allclose(mp.homography.matrix, Hn, rtol=1e-7, atol=1e-12)

    def test_outliers(self):
        session, src, dst = synthetic_session()
        rng = np.random.default_rng(4)
        bad = rng.choice(36, size=11, replace=False)
        dst = dst.copy()
        dst[bad] = rng.uniform([-235, -160], [235, 160], size=(11, 2))
        samples = tuple(CompensationSample((0, 0, 1.0), tuple(s), tuple(d)) for s, d in zip(src, dst))
        mp = estimate_misalignment_homography(CompensationSession(0, samples), RansacParams(seed=1))
        truth = np.ones(36, bool)
        truth[bad] = False
        assert np.array_equal(mp.inliers, truth)
        assert mp.rms_residual_mm < 1e-6

    def test_three_samples(self):
        session, _, _ = synthetic_session(count=3)
        with pytest.raises(InsufficientPoints):
            estimate_misalignment_homography(session)

    def test_board_frame_equivariance(self):
        session, src, dst = synthetic_session()
        G = np.array([[np.cos(0.3), -np.sin(0.3), 12.0], [np.sin(0.3), np.cos(0.3), -4.0], [0, 0, 1]])
        moved = apply_homography(G, dst)
        samples = tuple(CompensationSample((0, 0, 1.0), tuple(s), tuple(d)) for s, d in zip(src, moved))
        a = estimate_misalignment_homography(session).homography
        b = estimate_misalignment_homography(CompensationSession(0, samples)).homography
        expected = Homography2D(G @ a.matrix).normalized().matrix
        np.testing.assert_allclose(b.matrix, expected, rtol=1e-7, atol=1e-12)

    def test_round_trip_dict(self):
        session, _, _ = synthetic_session()
        mp = estimate_misalignment_homography(session)
        back = MisalignmentMap.from_dict(mp.to_dict())
        np.testing.assert_array_equal(back.homography.matrix, mp.homography.matrix)
        assert back.camera == mp.camera and back.rms_residual_mm == mp.rms_residual_mm


class TestCompensate:
    corr = Correspondence(0, 1, 2, (100.5, 200.25), (12.0, 34.0))

    def test_identity_map(self):
        mp = MisalignmentMap(1, Homography2D(np.eye(3) * 3.0), 36, 0.0)
        out = compensate(mp, self.corr)
        assert out.board_point_mm == (12.0, 34.0)
        assert out.projector_pixel == self.corr.projector_pixel and out.pose == self.corr.pose

    def test_camera_mismatch(self):
        with pytest.raises(CameraMismatch):
            compensate(MisalignmentMap(0, Homography2D(), 36, 0.0), self.corr)

    def test_deterministic(self):
        mp = MisalignmentMap(1, Homography2D(H_TRUE), 36, 0.0)
        assert compensate(mp, self.corr) == compensate(mp, compensate(mp, self.corr))


def test_simulated_session_predicts_oracle():
    rig = make_rig(num_projectors=2, num_poses=2)
    session = compense.run_compensation_session(rig, 1)
    assert len(session) == 36
    mp = estimate_misalignment_homography(session)
    ps = build_pattern_set(PatternSetSpec(2, 1280, 800, 10))
    from embedcal.decode import extract_correspondences
    from embedcal.rigsim import capture_stack

    for c in extract_correspondences(capture_stack(rig, ps, 1, 1), ps):
        gt = ground_truth_correspondence(rig, 1, c.projector, 1)
        assert np.linalg.norm(np.array(compensate(mp, c).board_point_mm) - gt.board_point_mm) < 0.1
