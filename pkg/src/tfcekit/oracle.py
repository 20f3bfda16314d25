"""Brute-force reference implementations used by tests and `compare`.

These deliberately share nothing with the forest/enhancement code beyond the
volume types: clusters come from scipy's flood-fill labeling and scores from
midpoint-rule quadrature, so they can certify the fast paths.  Performance is
a non-goal; grids are capped accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .enhance import EnhanceParams, EnhancedMap, exact_tfce
from .forest import ClusterRecord, ClusterTable, build_forest
from .inference import PValueMap, SubjectData, one_sample_t
from .volume import Connectivity, StatisticMap, rank_order

__all__ = [
    "OracleConfig",
    "floodfill_clusters",
    "riemann_tfce",
    "enumerate_sign_flips",
]

_RIEMANN_VOXEL_CAP = 16 ** 3
_ENUMERATION_SUBJECT_CAP = 12


@dataclass(frozen=True)
class OracleConfig:
    riemann_steps: int = 10 ** 6
    tolerance: float = 1e-4  # relative

    def __post_init__(self):
        if self.riemann_steps < 10:
            raise ValueError(f"riemann_steps must be >= 10, got {self.riemann_steps}")
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")


def _structure(conn: Connectivity) -> np.ndarray:
    """scipy structuring element equivalent to a connectivity kind."""
    if conn.kind == "2d-4":
        st = ndimage.generate_binary_structure(3, 1)
        st[:, :, 0] = st[:, :, 2] = False
        return st
    if conn.kind == "2d-8":
        st = ndimage.generate_binary_structure(3, 2)
        st[:, :, 0] = st[:, :, 2] = False
        return st
    degree = {"3d-6": 1, "3d-18": 2, "3d-26": 3}[conn.kind]
    return ndimage.generate_binary_structure(3, degree)


def _label_supra(stat_map: StatisticMap, conn: Connectivity, threshold: float):
    """Label {v : h_v >= threshold} on the full grid; returns (labels, sizes)."""
    grid = stat_map.mask.embed(stat_map.values, fill=-np.inf)
    supra = np.asarray(grid >= threshold) & stat_map.mask.membership
    labels, n = ndimage.label(supra, structure=_structure(conn))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    return labels, sizes


def floodfill_clusters(stat_map: StatisticMap, conn: Connectivity, cdt: float) -> ClusterTable:
    """Cluster table at ``cdt`` by direct flood-fill labeling.

    Canonical ordering: clusters sorted by their smallest dense member index,
    members ascending.  Mass is the raw statistic sum over members.
    """
    conn.validate_for(stat_map.mask.shape)
    labels, _ = _label_supra(stat_map, conn, cdt)
    dense_labels = labels.reshape(-1)[stat_map.mask.dense_to_linear]
    records = []
    for lab in range(1, dense_labels.max() + 1):
        members = np.flatnonzero(dense_labels == lab)
        if members.size == 0:
            continue
        records.append(
            ClusterRecord(
                root=-1,  # flood fill has no forest rank to report
                extent=int(members.size),
                mass=float(stat_map.values[members].sum()),
                members=members,
            )
        )
    records.sort(key=lambda r: int(r.members[0]))
    return ClusterTable(float(cdt), tuple(records))


def riemann_tfce(
    stat_map: StatisticMap,
    conn: Connectivity,
    params: EnhanceParams = EnhanceParams(),
    cfg: OracleConfig = OracleConfig(),
) -> EnhancedMap:
    """Midpoint-rule quadrature of the TFCE integral.

    Uses ``riemann_steps`` uniform steps on (h0, h_max], evaluating the
    extent of each voxel's cluster at every step midpoint with flood-fill
    labeling.  Midpoints fall strictly inside the intervals on which extents
    are constant, so consecutive midpoints sharing an interval are grouped,
    which evaluates the very same sum without the per-step loop.
    """
    conn.validate_for(stat_map.mask.shape)
    n_vox = stat_map.mask.in_mask_count
    if n_vox > _RIEMANN_VOXEL_CAP:
        raise ValueError(
            f"riemann oracle is capped at {_RIEMANN_VOXEL_CAP} voxels, got {n_vox}"
        )
    out = np.zeros(n_vox)
    h0, h_max = params.h0, stat_map.h_max
    if n_vox == 0 or h_max <= h0:
        return EnhancedMap(stat_map.mask, out)

    steps = cfg.riemann_steps
    dh = (h_max - h0) / steps
    mids = h0 + (np.arange(steps) + 0.5) * dh
    levels = np.unique(stat_map.values[stat_map.values > h0])  # ascending
    # per-midpoint governing level: the smallest data height >= the midpoint
    which = np.searchsorted(levels, mids, side="left")
    weights = np.bincount(which, weights=mids ** params.H, minlength=levels.size) * dh

    values = stat_map.values
    for j, level in enumerate(levels):
        if weights[j] == 0.0:
            continue
        labels, sizes = _label_supra(stat_map, conn, level)
        dense_labels = labels.reshape(-1)[stat_map.mask.dense_to_linear]
        extent = np.where(values >= level, sizes[dense_labels], 0)
        out += np.where(extent > 0, extent.astype(float) ** params.E, 0.0) * weights[j]
    return EnhancedMap(stat_map.mask, out)


def enumerate_sign_flips(
    data: SubjectData,
    conn: Connectivity,
    params: EnhanceParams = EnhanceParams(),
) -> PValueMap:
    """Exact family-wise p-values over all 2**n_subjects sign patterns.

    Every pattern is scored from scratch (statistic map, fresh forest, exact
    TFCE of the positive tail); nothing is reused across patterns.  The
    p-value at a voxel is the fraction of patterns whose map-wide maximum
    reaches its observed score; the all-positive pattern is among them.
    """
    n = data.n_subjects
    if n > _ENUMERATION_SUBJECT_CAP:
        raise ValueError(
            f"exhaustive enumeration is capped at {_ENUMERATION_SUBJECT_CAP} subjects, got {n}"
        )
    maxima = np.empty(2 ** n)
    observed = None
    for b in range(2 ** n):
        signs = 1 - 2 * ((b >> np.arange(n)) & 1)
        t_map = one_sample_t(data, signs)
        order = rank_order(t_map, params.h0)
        forest = build_forest(order, data.mask, conn)
        enhanced = exact_tfce(forest, params)
        maxima[b] = enhanced.max_score
        if b == 0:
            observed = enhanced
    count = (maxima[None, :] >= observed.scores[:, None]).sum(axis=1)
    return PValueMap(data.mask, count / maxima.size)
