import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import echograd as eg
from echograd.reconstruct import (AdamConfig, LossSpec, NumericalFailure,
                                  build_problem, epoch_pass, eval_bathymetry,
                                  free_parameter_mask, interior_edges,
                                  normal_consistency, reconstruct, total_loss)
from echograd.renderer import RenderParams, Waterfall, render_waterfall
from echograd.scene import TriangleMesh, heightfield_to_mesh, make_flat_scene
from echograd.sonar import SurveyLeg, make_survey_lines, pose_rows

DEG = np.deg2rad


def dihedral_mesh(angle_deg):
    """Two triangles sharing the edge x in [0,1] at y=0, opened to the
    given angle between their normals."""
    a = DEG(angle_deg)
    v = np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.5, -1.0, 0.0],
        [0.5, np.cos(a), np.sin(a)],
    ])
    faces = np.array([[0, 2, 1], [0, 1, 3]])
    return TriangleMesh(v, faces, np.ones(2))


class TestNormalConsistency:
    def test_flat_heightfield_is_zero(self):
        mesh = heightfield_to_mesh(make_flat_scene(20.0, 8, 8, 0.5))
        assert normal_consistency(mesh) == pytest.approx(0.0, abs=1e-14)

    def test_sixty_degree_dihedral_is_half(self):
        mesh = dihedral_mesh(60.0)
        assert len(interior_edges(mesh.faces)) == 1
        assert normal_consistency(mesh) == pytest.approx(0.5, abs=1e-12)

    def test_finer_dome_is_smoother(self):
        coarse = heightfield_to_mesh(eg.make_dome_scene(5.0, 20.0, 21, 21, 1.0))
        fine = heightfield_to_mesh(eg.make_dome_scene(5.0, 20.0, 41, 41, 0.5))
        assert normal_consistency(fine) < normal_consistency(coarse)

    def test_no_interior_edges_is_zero(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
        mesh = TriangleMesh(v, np.array([[0, 1, 2]]), np.ones(1))
        assert normal_consistency(mesh) == 0.0

    def test_translation_invariance(self):
        mesh = heightfield_to_mesh(eg.make_dome_scene(4.0, 15.0, 17, 17, 1.0))
        shifted = TriangleMesh(mesh.vertices + np.array([5.0, -3.0, 11.0]),
                               mesh.faces, mesh.albedo)
        assert normal_consistency(shifted) == pytest.approx(
            normal_consistency(mesh), rel=1e-12)

    @settings(max_examples=10, deadline=None)
    @given(scale=st.floats(0.1, 10.0))
    def test_uniform_scaling_invariance(self, scale):
        mesh = heightfield_to_mesh(eg.make_dome_scene(4.0, 15.0, 17, 17, 1.0))
        scaled = TriangleMesh(mesh.vertices * scale, mesh.faces, mesh.albedo)
        assert normal_consistency(scaled) == pytest.approx(
            normal_consistency(mesh), rel=1e-9)


class TestTotalLoss:
    def test_identical_waterfalls_flat_mesh(self):
        mesh = heightfield_to_mesh(make_flat_scene(20.0, 5, 5, 1.0))
        wf = Waterfall(np.random.default_rng(0).uniform(0, 1, (4, 16)))
        assert total_loss(wf, wf, mesh, LossSpec(lambda_nc=0.5)) == 0.0

    def test_constant_offset_gives_unit_mse(self):
        mesh = heightfield_to_mesh(make_flat_scene(20.0, 5, 5, 1.0))
        ref = Waterfall(np.zeros((3, 8)))
        ren = Waterfall(np.ones((3, 8)))
        assert total_loss(ren, ref, mesh, LossSpec(lambda_nc=0.0)) == pytest.approx(1.0)

    def test_regularizer_weight_is_linear(self):
        mesh = dihedral_mesh(60.0)
        wf = Waterfall(np.zeros((2, 8)))
        assert total_loss(wf, wf, mesh, LossSpec(lambda_nc=2.0)) == pytest.approx(1.0)

    def test_shape_mismatch_rejected(self):
        mesh = dihedral_mesh(30.0)
        with pytest.raises(ValueError):
            total_loss(Waterfall(np.zeros((2, 8))), Waterfall(np.zeros((3, 8))),
                       mesh, LossSpec())

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossSpec(lambda_nc=-0.1)


@pytest.fixture(scope="module")
def small_problem(intr, beam):
    """Tiny flat-floor reconstruction setup: 2 ping rows, 12x12 grid."""
    params = RenderParams()
    truth = make_flat_scene(20.0, 12, 12, 1.0)
    poses = make_survey_lines(
        [SurveyLeg((-17.0, -1.07), (-17.0, 1.11), 0.0, 2.0)], DEG(30))
    rows = pose_rows(poses)
    reference = render_waterfall(heightfield_to_mesh(truth), rows, intr, beam, params)
    return truth, rows, reference, params


class TestReconstruct:
    def test_reference_equals_init_is_fixed_point(self, intr, beam, small_problem):
        truth, rows, reference, params = small_problem
        est, state = reconstruct(reference, rows, intr, beam, params, LossSpec(),
                                 truth, epochs=1, adam=AdamConfig(lr=0.1))
        assert np.abs(est.z - truth.z).max() < 1e-6
        assert state.loss_history[0][2] == pytest.approx(0.0, abs=1e-18)

    def test_stationary_gradient_at_optimum(self, intr, beam, small_problem):
        truth, rows, reference, params = small_problem
        problem = build_problem(truth, rows, reference, intr, beam, params,
                                LossSpec(lambda_nc=0.0))
        _, _, grad = epoch_pass(problem, truth.z.ravel(), want_grad=True)
        assert np.abs(grad).max() < 1e-8

    def test_loss_history_length_and_epoch_counter(self, intr, beam, small_problem):
        truth, rows, reference, params = small_problem
        init = make_flat_scene(19.5, 12, 12, 1.0)
        est, state = reconstruct(reference, rows, intr, beam, params, LossSpec(),
                                 init, epochs=3, adam=AdamConfig(lr=0.05))
        assert state.epoch == 3
        assert len(state.loss_history) == 4

    def test_deterministic_and_threads_equivalent(self, intr, beam, small_problem):
        truth, rows, reference, params = small_problem
        init = make_flat_scene(19.5, 12, 12, 1.0)
        runs = [reconstruct(reference, rows, intr, beam, params, LossSpec(), init,
                            epochs=2, adam=AdamConfig(lr=0.05), threads=t)
                for t in (1, 1, 2)]
        z0, z1, z2 = (r[0].z for r in runs)
        assert np.array_equal(z0, z1)
        assert np.array_equal(z0, z2)
        assert runs[0][1].loss_history == runs[1][1].loss_history == runs[2][1].loss_history

    def test_boundary_ring_frozen(self, intr, beam, small_problem):
        truth, rows, reference, params = small_problem
        init = make_flat_scene(19.0, 12, 12, 1.0)
        est, _ = reconstruct(reference, rows, intr, beam, params, LossSpec(), init,
                             epochs=2, adam=AdamConfig(lr=0.1), freeze_boundary=True)
        ring = np.ones((12, 12), dtype=bool)
        ring[1:-1, 1:-1] = False
        assert np.array_equal(est.z[ring], init.z[ring])

    def test_resume_continues_history(self, intr, beam, small_problem):
        truth, rows, reference, params = small_problem
        init = make_flat_scene(19.5, 12, 12, 1.0)
        _, full = reconstruct(reference, rows, intr, beam, params, LossSpec(), init,
                              epochs=4, adam=AdamConfig(lr=0.05))
        _, part = reconstruct(reference, rows, intr, beam, params, LossSpec(), init,
                              epochs=2, adam=AdamConfig(lr=0.05))
        _, resumed = reconstruct(reference, rows, intr, beam, params, LossSpec(), init,
                                 epochs=2, adam=AdamConfig(lr=0.05), state=part)
        assert resumed.epoch == 4
        assert len(resumed.loss_history) == 5
        assert resumed.loss_history == full.loss_history

    def test_nan_aborts_with_checkpoint(self, intr, beam, small_problem):
        truth, rows, reference, params = small_problem
        bad_ref = Waterfall(reference.data.copy())
        init = make_flat_scene(19.5, 12, 12, 1.0)
        seen = []
        # an absurd learning rate drives z through the sensor plane -> NaN
        with pytest.raises(NumericalFailure):
            reconstruct(bad_ref, rows, intr, beam, params, LossSpec(), init,
                        epochs=200, adam=AdamConfig(lr=1e4),
                        checkpoint_cb=lambda e, hf, st: seen.append(e),
                        checkpoint_every=10**9)
        assert seen  # the abort path wrote a final checkpoint

    def test_free_mask_shape(self):
        hf = make_flat_scene(10.0, 5, 7, 1.0)
        m = free_parameter_mask(hf, True)
        assert m.sum() == 3 * 5
        assert free_parameter_mask(hf, False).all()


class TestEvalBathymetry:
    def test_identical_grids_zero(self):
        hf = eg.make_dome_scene(5.0, 20.0, 21, 21, 1.0)
        m = eval_bathymetry(hf, hf)
        assert m.mae == 0.0 and m.rmse == 0.0 and m.max_abs == 0.0
        assert m.apex_error == 0.0

    def test_uniform_offset(self):
        truth = eg.make_dome_scene(5.0, 20.0, 21, 21, 1.0)
        est = truth.copy()
        est.z = truth.z + 0.5
        m = eval_bathymetry(est, truth)
        assert m.mae == pytest.approx(0.5)
        assert m.rmse == pytest.approx(0.5)
        assert m.apex_depth_estimate == pytest.approx(14.5)

    def test_apex_probe_in_feature_region(self):
        truth = eg.make_dome_scene(5.0, 20.0, 31, 31, 1.0)
        est = truth.copy()
        est.z = truth.z.copy()
        est.z[1, 1] = -1.0   # shallow spike far outside the dome
        m = eval_bathymetry(est, truth, feature_center=(0.0, 0.0), feature_radius=5.0)
        assert m.apex_depth_truth == pytest.approx(15.0)
        assert m.apex_depth_estimate == pytest.approx(15.0)

    def test_grid_mismatch_rejected(self):
        a = make_flat_scene(10.0, 5, 5, 1.0)
        b = make_flat_scene(10.0, 6, 5, 1.0)
        with pytest.raises(ValueError):
            eval_bathymetry(a, b)


def test_single_bump_two_lines_converges(intr, beam):
    """Convergence smoke: a small bump seen from two orthogonal lines."""
    params = RenderParams(gamma=(8 * intr.bin_width) ** 2)
    truth = eg.make_dome_scene(3.0, 20.0, 25, 25, 1.0)
    poses = make_survey_lines([
        SurveyLeg((-16.0, -12.0), (-16.0, 12.0), 0.0, 1.5),
        SurveyLeg((-12.0, 16.0), (12.0, 16.0), 0.0, 1.5),
    ], DEG(30))
    rows = pose_rows(poses)
    reference = render_waterfall(heightfield_to_mesh(truth), rows, intr, beam,
                                 params, threads=2)
    init = make_flat_scene(20.0, 25, 25, 1.0)
    est, state = reconstruct(reference, rows, intr, beam, params,
                             LossSpec(lambda_nc=0.15), init, epochs=60,
                             adam=AdamConfig(lr=0.15), threads=2)
    h = state.loss_history
    assert h[-1][0] < 0.10 * h[0][0]
