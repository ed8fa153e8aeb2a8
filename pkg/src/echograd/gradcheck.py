"""Finite-difference verification of the rendering gradients.

Central differences are compared per parameter against the tape's
analytic gradient of the same total loss (image MSE plus normal
consistency).  A perturbation that changes any discrete selection
(fragment sets, visibility, branch or bin-window choices) makes the two
estimates measure different smooth pieces, so such parameters are flagged
and reported separately instead of entering the tolerance accounting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .renderer import _SigAccum
from .reconstruct import _Problem, epoch_pass

_TINY = 1e-12


@dataclass
class GradReport:
    """Per-parameter comparison of analytic and numeric gradients."""

    indices: np.ndarray       # flat heightfield indices checked
    analytic: np.ndarray
    numeric: np.ndarray
    abs_err: np.ndarray
    rel_err: np.ndarray
    branch_flip: np.ndarray   # bool: perturbation changed a discrete selection
    eps: float

    def __post_init__(self) -> None:
        for arr in (self.analytic, self.numeric, self.abs_err, self.rel_err):
            if not np.all(np.isfinite(arr)):
                raise ValueError("gradient report contains non-finite entries")

    @property
    def n_flipped(self) -> int:
        return int(self.branch_flip.sum())

    def max_rel_error(self, exclude_flipped: bool = True) -> float:
        keep = ~self.branch_flip if exclude_flipped else np.ones_like(self.branch_flip)
        return float(self.rel_err[keep].max()) if keep.any() else 0.0

    def max_error_index(self, exclude_flipped: bool = True) -> int:
        keep = ~self.branch_flip if exclude_flipped else np.ones_like(self.branch_flip)
        if not keep.any():
            return -1
        sub = np.where(keep)[0]
        return int(self.indices[sub[np.argmax(self.rel_err[sub])]])

    def passes(self, tol: float) -> bool:
        return self.max_rel_error(exclude_flipped=True) < tol

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("parameter_index,analytic,numeric,abs_err,rel_err,branch_flip\n")
            for i in range(len(self.indices)):
                fh.write(f"{self.indices[i]},{self.analytic[i]!r},{self.numeric[i]!r},"
                         f"{self.abs_err[i]!r},{self.rel_err[i]!r},"
                         f"{int(self.branch_flip[i])}\n")


def _relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.abs(a), np.abs(n))
    out = np.zeros_like(scale)
    nz = scale > _TINY
    out[nz] = np.abs(a - n)[nz] / scale[nz]
    return out


def gradcheck(problem: _Problem, z_flat: np.ndarray, eps: float,
              free_mask: np.ndarray | None = None,
              subset: np.ndarray | None = None, threads: int = 1) -> GradReport:
    """Compare analytic and central-difference gradients of the total loss.

    ``subset`` selects flat parameter indices (default: every free one).
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    z_flat = np.asarray(z_flat, dtype=np.float64)
    if free_mask is None:
        free_mask = np.ones_like(z_flat, dtype=bool)
    if subset is None:
        subset = np.nonzero(free_mask.ravel())[0]
    subset = np.asarray(subset, dtype=np.int64)

    lam = problem.loss_spec.lambda_nc
    image, nc, grad = epoch_pass(problem, z_flat, threads=threads, want_grad=True)
    analytic = grad[subset]

    def loss_and_sig(z: np.ndarray) -> tuple[float, bytes]:
        sig = _SigAccum()
        image, nc, _ = epoch_pass(problem, z, threads=1, want_grad=False, sig=sig)
        return image + lam * nc, sig.digest()

    _, base_sig = loss_and_sig(z_flat)

    def fd_one(k: int):
        i = subset[k]
        zp = z_flat.copy()
        zp[i] += eps
        zm = z_flat.copy()
        zm[i] -= eps
        fp, sp = loss_and_sig(zp)
        fm, sm = loss_and_sig(zm)
        flipped = (sp != base_sig) or (sm != base_sig)
        return (fp - fm) / (2.0 * eps), flipped

    from ._parallel import map_ordered
    results = map_ordered(fd_one, len(subset), threads)
    numeric = np.array([r[0] for r in results])
    flips = np.array([r[1] for r in results], dtype=bool)

    return GradReport(
        indices=subset,
        analytic=analytic,
        numeric=numeric,
        abs_err=np.abs(analytic - numeric),
        rel_err=_relative_error(analytic, numeric),
        branch_flip=flips,
        eps=eps,
    )
