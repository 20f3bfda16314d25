"""Masked 3D (and 2D) statistic grids: shapes, masks, connectivity, rank ordering.

Voxel data lives on a regular grid of ``dims = (nx, ny, nz)``; 2D images are
encoded with ``nz = 1``.  In-mask voxels are addressable two ways:

* *linear* index into the full C-ordered grid, ``lin = (x * ny + y) * nz + z``;
* *dense* index ``0 .. in_mask_count - 1``, the position among in-mask voxels
  in linear order.

All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridShape",
    "Connectivity",
    "Mask",
    "StatisticMap",
    "RankOrder",
    "build_mask",
    "neighbors",
    "rank_order",
]


@dataclass(frozen=True)
class GridShape:
    """Grid dimensions plus voxel sizes (mm, metadata only).

    Parameters
    ----------
    dims : tuple of int
        ``(nx, ny, nz)``; a 2D image uses ``nz = 1``.
    voxel_sizes : tuple of float, optional
        Physical voxel edge lengths in mm.  Not used by any computation.
    """

    dims: tuple[int, int, int]
    voxel_sizes: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3:
            raise ValueError(f"dims must be a (nx, ny, nz) triple, got {self.dims!r}")
        if any(int(d) != d or d < 1 for d in self.dims):
            raise ValueError(f"all dims must be positive integers, got {self.dims!r}")
        if any(s <= 0 for s in self.voxel_sizes):
            raise ValueError(f"voxel sizes must be positive, got {self.voxel_sizes!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def is_2d(self) -> bool:
        return self.dims[2] == 1


_CONNECTIVITY_KINDS = ("2d-4", "2d-8", "3d-6", "3d-18", "3d-26")


def _make_offsets(kind: str) -> np.ndarray:
    out = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                order = abs(dx) + abs(dy) + abs(dz)
                if order == 0:
                    continue
                if kind == "2d-4" and (dz != 0 or order != 1):
                    continue
                if kind == "2d-8" and dz != 0:
                    continue
                if kind == "3d-6" and order != 1:
                    continue
                if kind == "3d-18" and order > 2:
                    continue
                out.append((dx, dy, dz))
    return np.array(sorted(out), dtype=np.int64)


_OFFSETS = {kind: _make_offsets(kind) for kind in _CONNECTIVITY_KINDS}


@dataclass(frozen=True)
class Connectivity:
    """Spatial adjacency criterion: 4/8 neighbors in 2D, 6/18/26 in 3D."""

    kind: str

    def __post_init__(self):
        if self.kind not in _CONNECTIVITY_KINDS:
            raise ValueError(
                f"unknown connectivity {self.kind!r}; expected one of {_CONNECTIVITY_KINDS}"
            )

    @classmethod
    def from_neighbor_count(cls, n: int) -> "Connectivity":
        """Map a neighbor count (4, 8, 6, 18, 26) to its connectivity kind."""
        table = {4: "2d-4", 8: "2d-8", 6: "3d-6", 18: "3d-18", 26: "3d-26"}
        if n not in table:
            raise ValueError(f"no connectivity with {n} neighbors; choose from {sorted(table)}")
        return cls(table[n])

    @property
    def is_2d(self) -> bool:
        return self.kind.startswith("2d")

    @property
    def offsets(self) -> np.ndarray:
        """Neighbor offsets as an (n, 3) int array of (dx, dy, dz)."""
        return _OFFSETS[self.kind]

    def validate_for(self, shape: GridShape) -> None:
        if self.is_2d and not shape.is_2d:
            raise ValueError(
                f"{self.kind} connectivity requires nz = 1, got dims {shape.dims}"
            )


@dataclass(frozen=True)
class Mask:
    """Boolean membership on a grid with a dense index over in-mask voxels.

    Attributes
    ----------
    shape : GridShape
    membership : np.ndarray
        Boolean array of shape ``dims`` (read-only).
    dense_to_linear : np.ndarray
        For each dense index, the linear grid index.
    linear_to_dense : np.ndarray
        Full-grid array mapping linear index to dense index, -1 outside the mask.
    """

    shape: GridShape
    membership: np.ndarray
    dense_to_linear: np.ndarray = field(repr=False)
    linear_to_dense: np.ndarray = field(repr=False)

    @property
    def in_mask_count(self) -> int:
        return int(self.dense_to_linear.shape[0])

    def dense_to_coords(self, dense) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Grid coordinates (x, y, z) of dense-indexed voxels."""
        lin = self.dense_to_linear[dense]
        return np.unravel_index(lin, self.shape.dims)

    def coords_to_dense(self, x, y, z) -> np.ndarray:
        lin = np.ravel_multi_index((x, y, z), self.shape.dims)
        dense = self.linear_to_dense[lin]
        if np.any(dense < 0):
            raise ValueError("coordinates fall outside the mask")
        return dense

    def embed(self, dense_values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter per-in-mask values back onto the full grid."""
        dense_values = np.asarray(dense_values)
        if dense_values.shape != (self.in_mask_count,):
            raise ValueError(
                f"expected {self.in_mask_count} values, got shape {dense_values.shape}"
            )
        grid = np.full(self.shape.n_voxels, fill, dtype=dense_values.dtype)
        grid[self.dense_to_linear] = dense_values
        return grid.reshape(self.shape.dims)

    def extract(self, grid: np.ndarray) -> np.ndarray:
        """Gather in-mask values from a full-grid array (dense order)."""
        grid = np.asarray(grid)
        if grid.shape != self.shape.dims:
            raise ValueError(f"grid shape {grid.shape} != mask dims {self.shape.dims}")
        return np.ascontiguousarray(grid.reshape(-1)[self.dense_to_linear])

    def same_grid(self, other: "Mask") -> bool:
        return self.shape.dims == other.shape.dims and np.array_equal(
            self.membership, other.membership
        )


def build_mask(shape: GridShape, membership) -> Mask:
    """Build a :class:`Mask` from per-voxel membership flags.

    ``membership`` may be flat (length ``n_voxels``, linear order) or already
    shaped ``dims``.  Raises ``ValueError`` on a length/shape mismatch.
    """
    arr = np.asarray(membership, dtype=bool)
    if arr.ndim == 1:
        if arr.shape[0] != shape.n_voxels:
            raise ValueError(
                f"membership length {arr.shape[0]} != voxel count {shape.n_voxels}"
            )
        arr = arr.reshape(shape.dims)
    elif arr.shape != shape.dims:
        raise ValueError(f"membership shape {arr.shape} != dims {shape.dims}")
    arr = arr.copy()
    arr.setflags(write=False)
    dense_to_linear = np.flatnonzero(arr.reshape(-1))
    linear_to_dense = np.full(shape.n_voxels, -1, dtype=np.int64)
    linear_to_dense[dense_to_linear] = np.arange(dense_to_linear.shape[0])
    linear_to_dense.setflags(write=False)
    dense_to_linear.setflags(write=False)
    return Mask(shape, arr, dense_to_linear, linear_to_dense)


class StatisticMap:
    """Per-voxel statistic values on a masked grid.

    Values are stored densely (one per in-mask voxel) as read-only float64.
    NaN or infinite entries are rejected at construction; silently masking
    them out would change the inference scope invisibly.
    """

    __slots__ = ("mask", "values", "h_max")

    def __init__(self, mask: Mask, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (mask.in_mask_count,):
            raise ValueError(
                f"expected {mask.in_mask_count} values, got shape {values.shape}"
            )
        if values.size and not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise ValueError(f"non-finite statistic at dense voxel {bad}")
        values = values.copy()
        values.setflags(write=False)
        self.mask = mask
        self.values = values
        self.h_max = float(values.max()) if values.size else float("-inf")

    @classmethod
    def from_grid(cls, grid, mask: Mask) -> "StatisticMap":
        return cls(mask, mask.extract(np.asarray(grid, dtype=np.float64)))

    def to_grid(self, fill: float = 0.0) -> np.ndarray:
        return self.mask.embed(self.values, fill=fill)

    def negated(self) -> "StatisticMap":
        return StatisticMap(self.mask, -self.values)

    def __repr__(self):
        return (
            f"StatisticMap(dims={self.mask.shape.dims}, "
            f"n={self.mask.in_mask_count}, h_max={self.h_max:g})"
        )


class RankOrder:
    """Non-ascending height ordering of supra-threshold in-mask voxels.

    ``order[i]`` is the dense voxel index holding the ``i``-th largest value
    (0-based rank).  Only voxels with value strictly above ``h0`` participate.
    Ties are broken by ascending dense index, which makes the downstream
    merge-forest topology reproducible across platforms.
    """

    __slots__ = ("order", "heights", "h0", "rank_of_dense")

    def __init__(self, order: np.ndarray, heights: np.ndarray, h0: float, n_dense: int):
        self.order = order
        self.heights = heights
        self.h0 = float(h0)
        rank_of_dense = np.full(n_dense, -1, dtype=np.int64)
        rank_of_dense[order] = np.arange(order.shape[0])
        rank_of_dense.setflags(write=False)
        self.rank_of_dense = rank_of_dense

    @property
    def n(self) -> int:
        return int(self.order.shape[0])

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"RankOrder(n={self.n}, h0={self.h0:g})"


def rank_order(stat_map: StatisticMap, h0: float = 0.0) -> RankOrder:
    """Rank in-mask voxels with value > ``h0`` by non-ascending height.

    Equal values are ordered by ascending dense voxel index (stable sort on
    the negated values).
    """
    if h0 < 0:
        raise ValueError(f"h0 must be nonnegative, got {h0}")
    values = stat_map.values
    order = np.argsort(-values, kind="stable")
    n = int(np.count_nonzero(values > h0))
    order = np.ascontiguousarray(order[:n])
    heights = np.ascontiguousarray(values[order])
    order.setflags(write=False)
    heights.setflags(write=False)
    return RankOrder(order, heights, h0, stat_map.mask.in_mask_count)


def neighbors(mask: Mask, conn: Connectivity, voxel: int) -> np.ndarray:
    """In-mask neighbors of a dense-indexed voxel, sorted ascending.

    Out-of-grid and out-of-mask neighbors are silently excluded.
    """
    conn.validate_for(mask.shape)
    if not 0 <= voxel < mask.in_mask_count:
        raise ValueError(f"dense index {voxel} out of range [0, {mask.in_mask_count})")
    nx, ny, nz = mask.shape.dims
    x, y, z = np.unravel_index(mask.dense_to_linear[voxel], (nx, ny, nz))
    off = conn.offsets
    xx, yy, zz = x + off[:, 0], y + off[:, 1], z + off[:, 2]
    ok = (xx >= 0) & (xx < nx) & (yy >= 0) & (yy < ny) & (zz >= 0) & (zz < nz)
    lin = (xx[ok] * ny + yy[ok]) * nz + zz[ok]
    dense = mask.linear_to_dense[lin]
    return np.sort(dense[dense >= 0])
