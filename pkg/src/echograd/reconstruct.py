"""Inverse rendering: recover heightfield depths from reference waterfalls.

Each epoch renders every ping against the current surface, accumulates
the mean-squared image error plus a normal-consistency penalty, and
applies one Adam step to the free grid depths.  Ping gradients are
reduced in ping order regardless of worker count, so runs are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, value
from ._parallel import map_ordered
from .renderer import RenderParams, Waterfall, taped_row_ssq
from .scene import Heightfield, TriangleMesh, heightfield_to_mesh
from .sonar import BeamPattern, SonarIntrinsics, SonarPose


class NumericalFailure(RuntimeError):
    """The optimization produced a non-finite loss or gradient."""


@dataclass
class LossSpec:
    """Mean-squared image error plus weighted normal consistency."""

    lambda_nc: float = 1e-2

    def __post_init__(self) -> None:
        if self.lambda_nc < 0.0:
            raise ValueError("lambda_nc must be non-negative")


@dataclass
class AdamConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimState:
    epoch: int
    heightfield: Heightfield
    m: np.ndarray
    v: np.ndarray
    # one (image, regularizer, total) triple per completed epoch, plus the initial one
    loss_history: list[tuple[float, float, float]] = field(default_factory=list)


def interior_edges(faces: np.ndarray) -> np.ndarray:
    """(E, 2) indices of face pairs sharing an edge."""
    faces = np.asarray(faces)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    face_of = np.tile(np.arange(len(faces)), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    se = edges[order]
    sf = face_of[order]
    same = (se[1:] == se[:-1]).all(axis=1)
    return np.column_stack([sf[:-1][same], sf[1:][same]])


def _face_normal_components(vx, vy, vz, faces: np.ndarray):
    g = ad.gather
    i0, i1, i2 = faces[:, 0], faces[:, 1], faces[:, 2]
    e1x, e1y, e1z = g(vx, i1) - g(vx, i0), g(vy, i1) - g(vy, i0), g(vz, i1) - g(vz, i0)
    e2x, e2y, e2z = g(vx, i2) - g(vx, i0), g(vy, i2) - g(vy, i0), g(vz, i2) - g(vz, i0)
    nx = e1y * e2z - e1z * e2y
    ny = e1z * e2x - e1x * e2z
    nz = e1x * e2y - e1y * e2x
    return nx, ny, nz


def _normal_consistency_expr(vx, vy, vz, faces: np.ndarray, pairs: np.ndarray):
    if len(pairs) == 0:
        return 0.0
    nx, ny, nz = _face_normal_components(vx, vy, vz, faces)
    norm = ad.sqrt(nx * nx + ny * ny + nz * nz)
    ux, uy, uz = nx / norm, ny / norm, nz / norm
    a, b = pairs[:, 0], pairs[:, 1]
    g = ad.gather
    dot = g(ux, a) * g(ux, b) + g(uy, a) * g(uy, b) + g(uz, a) * g(uz, b)
    return (1.0 - dot).sum() * (1.0 / len(pairs))


def normal_consistency(mesh: TriangleMesh) -> float:
    """Mean of (1 - cos angle) between unit normals of edge-adjacent faces."""
    pairs = interior_edges(mesh.faces)
    v = mesh.vertices
    expr = _normal_consistency_expr(v[:, 0], v[:, 1], v[:, 2], mesh.faces, pairs)
    return float(value(expr))


def total_loss(rendered: Waterfall, reference: Waterfall, mesh: TriangleMesh,
               spec: LossSpec) -> float:
    """MSE between waterfalls plus ``lambda_nc`` times normal consistency."""
    if rendered.data.shape != reference.data.shape:
        raise ValueError("waterfall shapes differ")
    mse = float(np.mean((rendered.data - reference.data) ** 2))
    return mse + spec.lambda_nc * normal_consistency(mesh)


def free_parameter_mask(hf: Heightfield, freeze_boundary: bool) -> np.ndarray:
    mask = np.ones((hf.nx, hf.ny), dtype=bool)
    if freeze_boundary:
        mask[0, :] = mask[-1, :] = False
        mask[:, 0] = mask[:, -1] = False
    return mask


@dataclass
class _Problem:
    """Everything an epoch pass needs besides the current z values."""

    vert_x: np.ndarray
    vert_y: np.ndarray
    mesh_topology: TriangleMesh     # faces + albedo; vertices refreshed per pass
    edge_pairs: np.ndarray
    rows: list[tuple[SonarPose, SonarPose]]
    reference: np.ndarray           # (n_rows, 2B)
    intr: SonarIntrinsics
    bp: BeamPattern | None
    params: RenderParams
    loss_spec: LossSpec


def build_problem(hf: Heightfield, rows, reference: Waterfall, intr, bp, params,
                  loss_spec, albedo: float = 1.0) -> _Problem:
    if reference.data.shape != (len(rows), 2 * intr.n_bins):
        raise ValueError("reference waterfall does not match the pose rows")
    mesh = heightfield_to_mesh(hf, albedo)
    return _Problem(
        vert_x=mesh.vertices[:, 0].copy(),
        vert_y=mesh.vertices[:, 1].copy(),
        mesh_topology=mesh,
        edge_pairs=interior_edges(mesh.faces),
        rows=list(rows),
        reference=reference.data.copy(),
        intr=intr,
        bp=bp,
        params=params,
        loss_spec=loss_spec,
    )


def epoch_pass(problem: _Problem, z_flat: np.ndarray, threads: int = 1,
               want_grad: bool = True, sig: "object | None" = None):
    """Loss terms and (optionally) their gradient at the given z.

    Returns ``(image_mse, nc_value, grad_or_None)``.  The reduction over
    pings runs in ping order.
    """
    n_total = problem.reference.size
    const_xy = (problem.vert_x, problem.vert_y)

    def row_work(i: int):
        tape = Tape()
        zv: Var | np.ndarray = tape.leaf(z_flat) if want_grad else z_flat
        ssq = taped_row_ssq(zv, const_xy, problem.mesh_topology, problem.rows[i],
                            problem.reference[i], problem.intr, problem.bp,
                            problem.params, sig)
        if want_grad and isinstance(ssq, Var):
            grads = tape.backward(ssq, seed=1.0 / n_total)
            return float(value(ssq)), grads.get(zv.id)
        return float(value(ssq)), None

    results = map_ordered(row_work, len(problem.rows), threads)

    grad = np.zeros_like(z_flat) if want_grad else None
    ssq_total = 0.0
    for ssq, g in results:
        ssq_total += ssq
        if g is not None:
            grad += g
    image_mse = ssq_total / n_total

    lam = problem.loss_spec.lambda_nc
    if want_grad and lam > 0.0:
        tape = Tape()
        zv = tape.leaf(z_flat)
        nc = _normal_consistency_expr(problem.vert_x, problem.vert_y, zv,
                                      problem.mesh_topology.faces, problem.edge_pairs)
        if isinstance(nc, Var):
            grads = tape.backward(nc, seed=lam)
            grad += grads.get(zv.id, 0.0)
            nc_value = float(value(nc))
        else:
            nc_value = float(nc)
    else:
        nc_value = float(value(_normal_consistency_expr(
            problem.vert_x, problem.vert_y, z_flat,
            problem.mesh_topology.faces, problem.edge_pairs)))
    return image_mse, nc_value, grad


def reconstruct(reference: Waterfall, rows, intr: SonarIntrinsics,
                bp: BeamPattern | None, params: RenderParams, loss_spec: LossSpec,
                init: Heightfield, epochs: int, adam: AdamConfig = AdamConfig(),
                freeze_boundary: bool = True, threads: int = 1,
                albedo: float = 1.0, state: OptimState | None = None,
                checkpoint_cb=None, checkpoint_every: int = 10):
    """Gradient-descend the heightfield depths against reference imagery.

    Returns ``(heightfield, OptimState)``.  ``state`` resumes a previous
    run (its moment buffers and loss history continue).  ``checkpoint_cb``
    receives ``(epoch, heightfield, state)`` every ``checkpoint_every``
    epochs and on NaN abort.
    """
    hf = (state.heightfield if state is not None else init).copy()
    problem = build_problem(hf, rows, reference, intr, bp, params, loss_spec, albedo)
    free = free_parameter_mask(hf, freeze_boundary).ravel()
    z = hf.z.ravel().copy()

    if state is not None:
        m, v = state.m.copy(), state.v.copy()
        step0 = state.epoch
        history = list(state.loss_history)[:-1]  # final entry is recomputed below
    else:
        m = np.zeros_like(z)
        v = np.zeros_like(z)
        step0 = 0
        history = []

    def snapshot(epoch: int) -> OptimState:
        out = hf.copy()
        out.z = z.reshape(hf.nx, hf.ny).copy()
        return OptimState(epoch, out, m.copy(), v.copy(), list(history))

    for step in range(step0 + 1, step0 + epochs + 1):
        image, nc, grad = epoch_pass(problem, z, threads=threads, want_grad=True)
        total = image + loss_spec.lambda_nc * nc
        history.append((image, nc, total))
        if not np.isfinite(total) or not np.all(np.isfinite(grad)):
            st = snapshot(step - 1)
            if checkpoint_cb is not None:
                checkpoint_cb(step - 1, st.heightfield, st)
            raise NumericalFailure(f"non-finite loss or gradient at epoch {step}")

        grad = np.where(free, grad, 0.0)
        m = adam.beta1 * m + (1.0 - adam.beta1) * grad
        v = adam.beta2 * v + (1.0 - adam.beta2) * grad * grad
        mhat = m / (1.0 - adam.beta1 ** step)
        vhat = v / (1.0 - adam.beta2 ** step)
        z = z - adam.lr * mhat / (np.sqrt(vhat) + adam.eps)

        if checkpoint_cb is not None and (step % checkpoint_every == 0):
            st = snapshot(step)
            checkpoint_cb(step, st.heightfield, st)

    image, nc, _ = epoch_pass(problem, z, threads=threads, want_grad=False)
    history.append((image, nc, image + loss_spec.lambda_nc * nc))

    final_state = snapshot(step0 + epochs)
    return final_state.heightfield, final_state


@dataclass
class BathymetryMetrics:
    mae: float
    rmse: float
    max_abs: float
    apex_depth_estimate: float
    apex_depth_truth: float

    @property
    def apex_error(self) -> float:
        return abs(self.apex_depth_estimate - self.apex_depth_truth)

    def as_dict(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "max_abs": self.max_abs,
            "apex_depth_estimate": self.apex_depth_estimate,
            "apex_depth_truth": self.apex_depth_truth,
            "apex_error": self.apex_error,
        }


def eval_bathymetry(estimate: Heightfield, truth: Heightfield,
                    feature_center: tuple[float, float] | None = None,
                    feature_radius: float | None = None) -> BathymetryMetrics:
    """Depth-error metrics plus a shallowest-point (apex) probe.

    The apex is probed inside the given disk, or over the whole grid when
    no region is supplied."""
    if estimate.z.shape != truth.z.shape or estimate.cell_size != truth.cell_size \
            or estimate.origin_xy != truth.origin_xy:
        raise ValueError("estimate and truth grids do not match")
    err = np.abs(estimate.z - truth.z)
    if feature_center is not None and feature_radius is not None:
        xg, yg = truth.vertex_xy()
        region = (xg - feature_center[0]) ** 2 + (yg - feature_center[1]) ** 2 \
            <= feature_radius**2
    else:
        region = np.ones_like(truth.z, dtype=bool)
    return BathymetryMetrics(
        mae=float(err.mean()),
        rmse=float(np.sqrt((err**2).mean())),
        max_abs=float(err.max()),
        apex_depth_estimate=float(-estimate.z[region].max()),
        apex_depth_truth=float(-truth.z[region].max()),
    )
