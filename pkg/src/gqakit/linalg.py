"""Dense linear-algebra kernels for head alignment.

All routines operate on float64, 2-D numpy arrays and are pure functions.
The three solvers cover the alignment needs of the pipeline:

* `orthogonal_procrustes` -- the classical problem min_Q ||Q X - Y||_F over
  the full orthogonal group (rotations and reflections), used for value
  heads.
* `rotation_procrustes_2d_blocks` -- the same objective restricted to
  block-diagonal planar rotations that share the rotary-embedding pairing,
  used for key heads (only such rotations commute with the position
  rotations).
* `generalized_procrustes` -- iterative alignment of several matrices to
  their evolving mean shape, used to align all heads of a group jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GPA_TOL = 1e-8
GPA_MAX_ITER = 100

PAIRINGS = ("half", "adjacent")


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def pair_indices(dim: int, pairing: str = "half") -> tuple[np.ndarray, np.ndarray]:
    """Return the (first, second) coordinate indices of each 2-D subspace.

    "half" pairs dimension i with i + dim/2 (the rotary convention used by
    the model module); "adjacent" pairs 2i with 2i+1.
    """
    if dim % 2 != 0:
        raise ValueError(f"dimension must be even, got {dim}")
    half = dim // 2
    if pairing == "half":
        return np.arange(half), np.arange(half) + half
    if pairing == "adjacent":
        return 2 * np.arange(half), 2 * np.arange(half) + 1
    raise ValueError(f"unknown pairing {pairing!r}; expected one of {PAIRINGS}")


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD a = u @ diag(s) @ vt with s non-negative and descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


@dataclass(frozen=True)
class OrthogonalTransform:
    """A square orthogonal matrix q (q.T @ q = I); may include reflections."""

    q: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.q @ x

    def inverse(self) -> "OrthogonalTransform":
        return OrthogonalTransform(self.q.T.copy())


@dataclass(frozen=True)
class BlockRotation:
    """Planar rotations of the 2-D subspaces given by a pairing convention.

    Expands to an orthogonal matrix built from 2x2 rotation blocks, each with
    determinant +1, so the transform commutes with any other block rotation
    that uses the same pairing (in particular the rotary position rotations).
    """

    angles: np.ndarray
    pairing: str = "half"

    def __post_init__(self):
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=np.float64))
        if self.pairing not in PAIRINGS:
            raise ValueError(f"unknown pairing {self.pairing!r}")

    @property
    def dim(self) -> int:
        return 2 * self.angles.size

    def matrix(self) -> np.ndarray:
        first, second = pair_indices(self.dim, self.pairing)
        c, s = np.cos(self.angles), np.sin(self.angles)
        m = np.zeros((self.dim, self.dim))
        m[first, first] = c
        m[second, second] = c
        m[first, second] = -s
        m[second, first] = s
        return m

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Rotate the rows of x (shape dim x N) pair by pair."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.dim:
            raise ValueError(f"expected {self.dim} rows, got {x.shape[0]}")
        first, second = pair_indices(self.dim, self.pairing)
        c = np.cos(self.angles)[:, None]
        s = np.sin(self.angles)[:, None]
        out = np.empty_like(x)
        out[first] = c * x[first] - s * x[second]
        out[second] = s * x[first] + c * x[second]
        return out

    def inverse(self) -> "BlockRotation":
        return BlockRotation(-self.angles, self.pairing)

    def compose(self, other: "BlockRotation") -> "BlockRotation":
        """self applied after other (angles add; pairings must match)."""
        if other.pairing != self.pairing or other.angles.size != self.angles.size:
            raise ValueError("cannot compose block rotations with different pairings")
        return BlockRotation(self.angles + other.angles, self.pairing)


def svd(a) -> SvdResult:
    """Thin SVD with the contract u @ diag(s) @ vt == a (descending s >= 0)."""
    a = _as_matrix(a, "svd input")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(u=u, s=s, vt=vt)


def orthogonal_procrustes(x, y) -> OrthogonalTransform:
    """Solve min_Q ||Q x - y||_F over orthogonal Q (x, y of shape M x N).

    Equivalently Q maximizes trace(Q.T @ y @ x.T): with y @ x.T = U S Vt the
    maximizer is Q = U @ Vt. Reflections are allowed.
    """
    x = _as_matrix(x, "x")
    y = _as_matrix(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs y {y.shape}")
    r = svd(y @ x.T)
    return OrthogonalTransform(r.u @ r.vt)


def rotation_procrustes_2d_blocks(x, y, pairing: str = "half") -> BlockRotation:
    """Best block-rotation aligning x to y: min_R ||R x - y||_F.

    Decomposes into independent planar problems; in each 2-D subspace the
    objective A cos(t) + B sin(t) with A = sum of dots and B = sum of crosses
    is maximized in closed form by t = atan2(B, A).
    """
    x = _as_matrix(x, "x")
    y = _as_matrix(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs y {y.shape}")
    first, second = pair_indices(x.shape[0], pairing)
    xa, xb = x[first], x[second]
    ya, yb = y[first], y[second]
    dots = (xa * ya + xb * yb).sum(axis=1)
    crosses = (xa * yb - xb * ya).sum(axis=1)
    angles = np.arctan2(crosses, dots)
    # degenerate subspace (both sums zero): identity is optimal
    angles[(dots == 0.0) & (crosses == 0.0)] = 0.0
    return BlockRotation(angles, pairing)


@dataclass
class GpaResult:
    """Outcome of generalized Procrustes alignment.

    `transforms[i]` maps input i onto its aligned copy; `residuals[t]` is
    sum_i ||Y_i - mean||_F recorded after iteration t (index 0 is the value
    at the unaligned start).
    """

    transforms: list
    mean_shape: np.ndarray
    aligned: list[np.ndarray]
    residuals: list[float]
    n_iter: int


def _gpa_residual(ys: list[np.ndarray], mean: np.ndarray) -> float:
    return float(sum(np.linalg.norm(y - mean) for y in ys))


def generalized_procrustes(
    xs,
    constrained: bool = False,
    tol: float = GPA_TOL,
    max_iter: int = GPA_MAX_ITER,
    pairing: str = "half",
) -> GpaResult:
    """Align a set of equally-shaped matrices to their evolving mean shape.

    Each sweep re-aligns every matrix to the current mean (full orthogonal
    solve, or block rotations when `constrained`) and recomputes the mean.
    Stops when the residual sum_i ||Y_i - mean||_F changes by less than `tol`
    or after `max_iter` sweeps. Per-input transforms are accumulated so that
    transforms[i] applied to the original input reproduces the aligned copy.
    """
    xs = [_as_matrix(x, f"input {i}") for i, x in enumerate(xs)]
    if not xs:
        raise ValueError("generalized_procrustes needs at least one input")
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ValueError("all inputs must have the same shape")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    ys = [x.copy() for x in xs]
    if constrained:
        transforms: list = [BlockRotation(np.zeros(shape[0] // 2), pairing) for _ in xs]
    else:
        transforms = [OrthogonalTransform(np.eye(shape[0])) for _ in xs]

    mean = sum(ys) / len(ys)
    residuals = [_gpa_residual(ys, mean)]
    n_iter = 0
    for _ in range(max_iter):
        n_iter += 1
        for i, y in enumerate(ys):
            if constrained:
                step = rotation_procrustes_2d_blocks(y, mean, pairing)
                transforms[i] = step.compose(transforms[i])
            else:
                step = orthogonal_procrustes(y, mean)
                transforms[i] = OrthogonalTransform(step.q @ transforms[i].q)
            ys[i] = step.apply(y)
        mean = sum(ys) / len(ys)
        residuals.append(_gpa_residual(ys, mean))
        if abs(residuals[-2] - residuals[-1]) < tol:
            break

    return GpaResult(
        transforms=transforms,
        mean_shape=mean,
        aligned=ys,
        residuals=residuals,
        n_iter=n_iter,
    )
