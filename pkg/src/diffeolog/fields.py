"""Dense 2D deformation fields and their group operations.

A deformation phi is stored as a displacement field u with phi(x) = x + u(x)
on a regular pixel grid.  Displacements are in grid-index units, component
order (d_row, d_col), row-major storage.  Off-grid sampling is bilinear with
query coordinates clamped to the grid bounds; clamping keeps constant fields
closed under composition, so translations compose exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GridMismatchError(ValueError):
    """Raised when two fields that must share a grid do not."""


@dataclass(frozen=True)
class Grid2:
    """Regular 2D pixel grid; spacing is fixed at one grid unit per pixel."""

    height: int
    width: int

    def __post_init__(self) -> None:
        if self.height < 4 or self.width < 4:
            raise ValueError(
                "grid must be at least 4x4 (central differences need interior "
                f"points), got {self.height}x{self.width}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def grid_coords(grid: Grid2) -> np.ndarray:
    """(H, W, 2) array of (row, col) coordinates of the grid points."""
    rr, cc = np.meshgrid(
        np.arange(grid.height, dtype=np.float64),
        np.arange(grid.width, dtype=np.float64),
        indexing="ij",
    )
    return np.stack([rr, cc], axis=-1)


@dataclass(frozen=True, eq=False)
class VectorField:
    """H x W x 2 field of (d_row, d_col) vectors in grid units."""

    grid: Grid2
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if data.shape != (self.grid.height, self.grid.width, 2):
            raise ValueError(
                f"field data shape {data.shape} does not match grid "
                f"{self.grid.height}x{self.grid.width}x2"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("vector field contains non-finite entries")
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, grid: Grid2) -> "VectorField":
        return cls(grid, np.zeros((grid.height, grid.width, 2)))

    @classmethod
    def from_array(cls, data: np.ndarray) -> "VectorField":
        data = np.asarray(data, dtype=np.float64)
        return cls(Grid2(data.shape[0], data.shape[1]), data)


@dataclass(frozen=True, eq=False)
class DeformationField:
    """phi(x) = x + u(x), with u the stored displacement field.

    A folded field (non-positive Jacobian determinant somewhere) is valid
    data; `min_jacobian_det` is the diagnostic, not a constructor check.
    """

    displacement: VectorField

    @property
    def grid(self) -> Grid2:
        return self.displacement.grid

    def positions(self) -> np.ndarray:
        """(H, W, 2) array of mapped positions phi(x) at the grid points."""
        return grid_coords(self.grid) + self.displacement.data

    def min_jacobian_det(self) -> float:
        return float(np.min(jacobian_det(self)))

    @classmethod
    def from_displacement_array(cls, data: np.ndarray) -> "DeformationField":
        return cls(VectorField.from_array(data))


def _check_same_grid(a: Grid2, b: Grid2) -> None:
    if a != b:
        raise GridMismatchError(f"grid mismatch: {a.shape} vs {b.shape}")


def _bilinear(values: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample values (H, W, C) at real coordinates, clamped to the bounds.

    Uses the difference form of the bilinear blend: stored values come back
    bitwise at integer coordinates and constant fields are reproduced exactly
    even where queries are clamped.
    """
    H, W = values.shape[:2]
    r = np.clip(rows, 0.0, float(H - 1))
    c = np.clip(cols, 0.0, float(W - 1))
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    fr = (r - r0)[..., None]
    fc = (c - c0)[..., None]
    v00 = values[r0, c0]
    v01 = values[r0, c1]
    v10 = values[r1, c0]
    v11 = values[r1, c1]
    top = v00 + fc * (v01 - v00)
    bot = v10 + fc * (v11 - v10)
    return top + fr * (bot - top)


def make_identity(grid: Grid2) -> DeformationField:
    """The identity deformation: zero displacement everywhere."""
    return DeformationField(VectorField.zeros(grid))


def sample_displacement(f: VectorField, points) -> np.ndarray:
    """Bilinear samples of f at (..., 2) real (row, col) coordinates.

    Query coordinates are clamped to [0, H-1] x [0, W-1] before interpolation.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 2:
        raise ValueError("points must have a trailing dimension of size 2")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite query coordinates")
    return _bilinear(f.data, pts[..., 0], pts[..., 1])


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """(outer o inner)(x) = outer(inner(x)) on a shared grid."""
    _check_same_grid(outer.grid, inner.grid)
    ui = inner.displacement.data
    pts = grid_coords(inner.grid) + ui
    uo = _bilinear(outer.displacement.data, pts[..., 0], pts[..., 1])
    return DeformationField(VectorField(inner.grid, ui + uo))


def self_compose(f: DeformationField, n_doublings: int) -> DeformationField:
    """Composition of f with itself 2**n_doublings times, by repeated squaring."""
    if n_doublings < 0:
        raise ValueError("n_doublings must be >= 0")
    out = f
    for _ in range(n_doublings):
        out = compose(out, out)
    return out


def negate(f: VectorField) -> VectorField:
    """Elementwise negation of a vector field."""
    return VectorField(f.grid, -f.data)


def inverse_consistency_residual(
    fwd: DeformationField, bwd: DeformationField, margin: int = 0
) -> float:
    """Mean displacement magnitude of compose(fwd, bwd), in grid units.

    Zero for an exactly mutually inverse pair.  `margin` restricts the mean
    to grid points at least that many pixels from the border, which excludes
    clamp effects when the pair moves mass through the boundary.
    """
    _check_same_grid(fwd.grid, bwd.grid)
    comp = compose(fwd, bwd)
    norms = np.linalg.norm(comp.displacement.data, axis=-1)
    if margin:
        H, W = fwd.grid.shape
        if 2 * margin >= min(H, W):
            raise ValueError("margin leaves no interior points")
        norms = norms[margin : H - margin, margin : W - margin]
    return float(norms.mean())


def jacobian_det(f: DeformationField) -> np.ndarray:
    """(H, W) map of det(d phi / dx), central differences in the interior."""
    pos = f.positions()
    dr = np.gradient(pos, axis=0)
    dc = np.gradient(pos, axis=1)
    return dr[..., 0] * dc[..., 1] - dr[..., 1] * dc[..., 0]


def jacobian_logdet(f: DeformationField) -> np.ndarray:
    """(H, W) map of log det(d phi / dx); NaN where the det is <= 0.

    Interior points use central differences of x + u, boundary rows and
    columns one-sided differences.  Non-positive determinants mark folds and
    are flagged with NaN rather than raising.
    """
    det = jacobian_det(f)
    out = np.full(det.shape, np.nan)
    ok = det > 0
    out[ok] = np.log(det[ok])
    return out


def warp_image(img: np.ndarray, f: DeformationField) -> np.ndarray:
    """Pull-back of an H x W image: output(x) = img(phi(x)), clamped bilinear."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != f.grid.shape:
        raise GridMismatchError(
            f"image shape {img.shape} does not match grid {f.grid.shape}"
        )
    pts = f.positions()
    return _bilinear(img[..., None], pts[..., 0], pts[..., 1])[..., 0]


def field_rms(u) -> float:
    """Root mean square displacement magnitude over the grid, in grid units."""
    arr = u.data if isinstance(u, VectorField) else np.asarray(u, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum(arr * arr, axis=-1))))


def rel_l2(a, b) -> float:
    """Relative L2 error ||a - b|| / ||b|| over flattened arrays."""
    aa = a.data if isinstance(a, VectorField) else np.asarray(a, dtype=np.float64)
    bb = b.data if isinstance(b, VectorField) else np.asarray(b, dtype=np.float64)
    denom = float(np.linalg.norm(bb.ravel()))
    num = float(np.linalg.norm((aa - bb).ravel()))
    if denom == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / denom
