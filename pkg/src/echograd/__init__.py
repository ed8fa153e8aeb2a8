"""Differentiable sidescan-sonar rendering and bathymetry reconstruction."""

from .autodiff import Tape, TapeError, Var
from .renderer import (FragmentBuffer, Ping, RenderParams, Waterfall, blend_ping,
                       gaussian_kernel, make_row, rasterize, render_ping,
                       render_row, render_waterfall, shade_lambertian)
from .reconstruct import (AdamConfig, BathymetryMetrics, LossSpec, NumericalFailure,
                          OptimState, eval_bathymetry, normal_consistency,
                          reconstruct, total_loss)
from .scene import (Heightfield, SparseDepthSet, TriangleMesh, heightfield_to_mesh,
                    init_from_sparse_depth, make_dome_scene, make_flat_scene,
                    make_rocky_scene)
from .sonar import (PORT, STARBOARD, BeamPattern, SonarIntrinsics, SonarPose,
                    SurveyLeg, beam_pattern, bin_center, bin_centers, camera_basis,
                    grazing_angle, intrinsics_from_fov, make_box_survey,
                    make_survey_lines, pose_rows)
from .gradcheck import GradReport, gradcheck

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
