"""Merge forests: one-pass union-find construction and cluster read-off.

Voxels are processed in non-ascending height order.  Each processed voxel
merges with the subtrees rooted at its already-processed neighbors and
becomes the root of the merged subtree; the forest therefore records, for
every voxel, the ordered heights at which the cluster containing it grew.
Reading clusters at any threshold is then a single linear sweep, with no
re-labeling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import build_forest_kernel, roots_at_threshold_kernel
from .volume import Connectivity, Mask, RankOrder, StatisticMap

__all__ = [
    "MergeForest",
    "ClusterRecord",
    "ClusterTable",
    "build_forest",
    "phi_set",
    "clusters_at_threshold",
]

SELF = -1  # absorbed_by marker for final roots


@dataclass(frozen=True)
class MergeForest:
    """Directed rooted forest over ranked supra-threshold voxels.

    Attributes
    ----------
    order : RankOrder
        The rank ordering the forest was built from.
    absorbed_by : np.ndarray
        For each rank ``i``, the rank ``u > i`` whose processing unified
        ``i``'s subtree into a larger one, or ``SELF`` (-1) for final roots.
    extent_at_own_height : np.ndarray
        For each rank ``i``, the size of the connected component containing
        ``i`` among all voxels with height >= ``height[i]``.
    """

    order: RankOrder
    absorbed_by: np.ndarray
    extent_at_own_height: np.ndarray
    conn: Connectivity
    mask: Mask = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.order.n

    @property
    def heights(self) -> np.ndarray:
        return self.order.heights

    @property
    def h0(self) -> float:
        return self.order.h0

    def roots(self) -> np.ndarray:
        """Ranks of the final roots (one per connected component)."""
        return np.flatnonzero(self.absorbed_by == SELF)

    def phi_set(self, v: int) -> np.ndarray:
        return phi_set(self, v)

    def merge_edges(self) -> list[tuple[int, int]]:
        """The multi-edge view of construction: (absorbing rank, absorbed root).

        One edge per non-root node, grouped by the rank that absorbed it;
        this is the per-step edge list the forest was grown with.
        """
        edges = [
            (int(u), i) for i, u in enumerate(self.absorbed_by) if u != SELF
        ]
        return sorted(edges)


def build_forest(order: RankOrder, mask: Mask, conn: Connectivity) -> MergeForest:
    """Build the merge forest for a rank ordering via union-find.

    Processes ranks in order; each node unions with the roots of its
    previously processed neighbors' subtrees (path compression keeps the
    total cost near-linear).  ``absorbed_by`` records which later node
    unified each former root, preserving the merge history that compression
    would otherwise destroy.
    """
    conn.validate_for(mask.shape)
    if order.rank_of_dense.shape[0] != mask.in_mask_count:
        raise ValueError("rank order was not derived from this mask")
    nx, ny, nz = mask.shape.dims
    order_lin = mask.dense_to_linear[order.order]
    rank_of_lin = np.full(mask.shape.n_voxels, -1, dtype=np.int64)
    rank_of_lin[order_lin] = np.arange(order.n)
    absorbed_by, extent = build_forest_kernel(
        order_lin, order.heights, rank_of_lin, nx, ny, nz, conn.offsets
    )
    absorbed_by.setflags(write=False)
    extent.setflags(write=False)
    return MergeForest(order, absorbed_by, extent, conn, mask)


def phi_set(forest: MergeForest, v: int) -> np.ndarray:
    """Ranks at which the cluster containing rank ``v`` changes size.

    Follows the ``absorbed_by`` chain from ``v`` up to and including the
    final root; the result is strictly increasing and starts at ``v``.
    """
    if not 0 <= v < forest.n_nodes:
        raise ValueError(f"rank {v} out of range [0, {forest.n_nodes})")
    chain = [v]
    ab = forest.absorbed_by
    while ab[chain[-1]] != SELF:
        chain.append(int(ab[chain[-1]]))
    return np.array(chain, dtype=np.int64)


@dataclass(frozen=True)
class ClusterRecord:
    """One supra-threshold cluster: root rank, size, mass, member voxels."""

    root: int
    extent: int
    mass: float
    members: np.ndarray  # dense voxel indices, sorted ascending


@dataclass(frozen=True)
class ClusterTable:
    """Supra-threshold clusters at a fixed cluster-defining threshold.

    Clusters partition the voxels with height >= ``cdt`` (closed threshold)
    and are listed by ascending smallest member index.
    """

    cdt: float
    clusters: tuple[ClusterRecord, ...]

    def __len__(self):
        return len(self.clusters)

    def extents(self) -> list[int]:
        return [c.extent for c in self.clusters]

    def member_sets(self) -> list[frozenset]:
        """Canonical partition view for order-insensitive comparisons."""
        return [frozenset(c.members.tolist()) for c in self.clusters]


def _supra_count(heights: np.ndarray, cdt: float) -> int:
    # heights are non-ascending; count entries >= cdt
    return int(np.searchsorted(-heights, -cdt, side="right"))


def clusters_at_threshold(
    forest: MergeForest,
    stat_map: StatisticMap,
    cdt: float,
    mass: str = "raw",
) -> ClusterTable:
    """Read supra-threshold clusters at ``cdt`` off the forest.

    A rank is a cluster root at ``cdt`` when its absorbing rank has height
    below ``cdt`` or it is a final root.  The resulting partition is
    identical to direct flood-fill labeling of ``{v : h_v >= cdt}``.

    ``mass`` selects the cluster-mass convention: ``"raw"`` (default) sums
    the statistic over members, ``"excess"`` sums the statistic minus ``cdt``.
    """
    if cdt <= forest.h0:
        raise ValueError(f"cdt must exceed h0 = {forest.h0:g}, got {cdt:g}")
    if mass not in ("raw", "excess"):
        raise ValueError(f"mass must be 'raw' or 'excess', got {mass!r}")
    if stat_map.mask.in_mask_count != forest.mask.in_mask_count:
        raise ValueError("statistic map does not match the forest's mask")
    heights = forest.heights
    m = _supra_count(heights, cdt)
    if m == 0:
        return ClusterTable(float(cdt), ())
    root = roots_at_threshold_kernel(forest.absorbed_by, m)
    vals = heights[:m] if mass == "raw" else heights[:m] - cdt
    records = []
    order = forest.order.order
    by_root = np.argsort(root, kind="stable")
    root_sorted = root[by_root]
    boundaries = np.flatnonzero(np.diff(root_sorted)) + 1
    for group in np.split(by_root, boundaries):
        members = np.sort(order[group])
        records.append(
            ClusterRecord(
                root=int(root[group[0]]),
                extent=int(group.shape[0]),
                mass=float(vals[group].sum()),
                members=members,
            )
        )
    records.sort(key=lambda r: int(r.members[0]))
    return ClusterTable(float(cdt), tuple(records))


def max_cluster_stats(forest: MergeForest, cdt: float, mass: str = "raw") -> tuple[int, float]:
    """Largest cluster extent and mass at ``cdt`` (0, 0.0 when none).

    Fast path for permutation nulls: no member lists are materialized.
    """
    heights = forest.heights
    m = _supra_count(heights, cdt)
    if m == 0:
        return 0, 0.0
    root = roots_at_threshold_kernel(forest.absorbed_by, m)
    counts = np.bincount(root, minlength=m)
    vals = heights[:m] if mass == "raw" else heights[:m] - cdt
    masses = np.bincount(root, weights=vals, minlength=m)
    return int(counts.max()), float(masses.max())
