"""Nonparametric max-statistic inference with family-wise error control.

The resampling procedure: compute the observed statistic map, enhance it,
then for each randomization (sign flips for one-sample designs, label
permutations for two-sample designs) recompute the map, rebuild one merge
forest, and read every requested statistic off that forest — exact TFCE
scores plus cluster extent and mass at a fixed threshold.  Each statistic's
map-wide maximum forms its empirical null; corrected p-values count the
randomizations whose maximum reaches the observed value, with the identity
randomization always included.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .enhance import EnhancedMap, EnhanceParams, exact_tfce
from .forest import ClusterTable, build_forest, clusters_at_threshold, max_cluster_stats
from .volume import Connectivity, Mask, StatisticMap, rank_order

__all__ = [
    "T_CAP",
    "SubjectData",
    "RandomizationPlan",
    "NullDistribution",
    "PValueMap",
    "TailInference",
    "InferenceResult",
    "ComparisonReport",
    "StageTimings",
    "one_sample_t",
    "two_sample_t",
    "run_inference",
    "compare_pvalue_maps",
]

# Finite stand-in for an infinite t at zero within-voxel variance; keeps the
# enhancement arithmetic finite (T_CAP ** 3 is well inside float64 range).
T_CAP = 1e8

_EXHAUSTIVE_BUDGET = 2 ** 20

WORKERS_ENV_VAR = "TFCEKIT_WORKERS"


class SubjectData:
    """Per-subject contrast values on a shared mask, one row per subject."""

    __slots__ = ("mask", "matrix")

    def __init__(self, mask: Mask, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != mask.in_mask_count:
            raise ValueError(
                f"matrix must be (n_subjects, {mask.in_mask_count}), got {matrix.shape}"
            )
        if matrix.shape[0] < 2:
            raise ValueError(f"need at least 2 subjects, got {matrix.shape[0]}")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("subject matrix contains non-finite values")
        matrix = matrix.copy()
        matrix.setflags(write=False)
        self.mask = mask
        self.matrix = matrix

    @property
    def n_subjects(self) -> int:
        return int(self.matrix.shape[0])

    def __repr__(self):
        return f"SubjectData(n_subjects={self.n_subjects}, n_voxels={self.mask.in_mask_count})"


def _capped_t(mean: np.ndarray, se: np.ndarray) -> np.ndarray:
    t = np.zeros_like(mean)
    ok = se > 0
    t[ok] = mean[ok] / se[ok]
    degenerate = ~ok
    t[degenerate] = np.sign(mean[degenerate]) * T_CAP
    return t


def one_sample_t(data: SubjectData, signs=None) -> StatisticMap:
    """Voxel-wise one-sample t statistic of (optionally sign-flipped) rows.

    Uses the sample standard deviation (n - 1 denominator).  Zero-variance
    voxels get a sign-matched finite cap (``T_CAP``) when the mean is
    nonzero, and 0 when the mean is also zero.
    """
    x = data.matrix
    if signs is not None:
        signs = np.asarray(signs, dtype=np.float64)
        if signs.shape != (data.n_subjects,):
            raise ValueError(f"signs must have shape ({data.n_subjects},)")
        x = x * signs[:, None]
    n = data.n_subjects
    mean = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / math.sqrt(n)
    return StatisticMap(data.mask, _capped_t(mean, se))


def two_sample_t(data: SubjectData, labels) -> StatisticMap:
    """Pooled-variance two-sample t per voxel (first group minus second).

    ``labels`` is binary per subject; label 0 marks the first group.  Both
    groups must be nonempty.
    """
    labels = np.asarray(labels)
    if labels.shape != (data.n_subjects,):
        raise ValueError(f"labels must have shape ({data.n_subjects},)")
    g0 = data.matrix[labels == 0]
    g1 = data.matrix[labels != 0]
    n0, n1 = g0.shape[0], g1.shape[0]
    if n0 == 0 or n1 == 0:
        raise ValueError("both groups must be nonempty")
    mean_diff = g0.mean(axis=0) - g1.mean(axis=0)
    ss0 = ((g0 - g0.mean(axis=0)) ** 2).sum(axis=0)
    ss1 = ((g1 - g1.mean(axis=0)) ** 2).sum(axis=0)
    pooled_var = (ss0 + ss1) / (n0 + n1 - 2)
    se = np.sqrt(pooled_var * (1.0 / n0 + 1.0 / n1))
    return StatisticMap(data.mask, _capped_t(mean_diff, se))


@dataclass
class RandomizationPlan:
    """How to randomize: sign flips or group-label permutations.

    Randomization ``b = 0`` is always the identity (observed data).  For
    Monte Carlo plans, ``n_perm`` further random draws are generated from
    per-randomization substreams of ``seed``, so pattern ``b`` never depends
    on execution order or worker count.  Exhaustive plans enumerate every
    pattern (the identity is pattern 0), and externally supplied sign
    matrices are used verbatim.
    """

    kind: str = "sign-flip"
    n_perm: int = 0
    seed: int = 0
    group_labels: np.ndarray | None = None
    exhaustive: bool = False
    patterns: np.ndarray | None = None
    _combos: list | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("sign-flip", "two-sample-permutation"):
            raise ValueError(f"unknown randomization kind {self.kind!r}")
        if self.kind == "two-sample-permutation":
            if self.group_labels is None:
                raise ValueError("two-sample permutation requires group_labels")
            labels = np.asarray(self.group_labels)
            if not np.all(np.isin(labels, (0, 1))):
                raise ValueError("group_labels must be binary (0/1)")
            if (labels == 0).sum() == 0 or (labels == 1).sum() == 0:
                raise ValueError("both groups must be nonempty")
            self.group_labels = labels.astype(np.int64)
            if self.patterns is not None:
                raise ValueError("external patterns are only supported for sign flipping")
        if self.patterns is not None:
            pats = np.asarray(self.patterns)
            if pats.ndim != 2 or not np.all(np.isin(pats, (-1, 1))):
                raise ValueError("patterns must be a 2D array of +/-1 entries")
            if not np.all(pats[0] == 1):
                raise ValueError("pattern row 0 must be the identity (all +1)")
            self.patterns = pats.astype(np.int64)
            if self.exhaustive:
                raise ValueError("supply either exhaustive or explicit patterns, not both")
        elif not self.exhaustive and self.n_perm < 1:
            raise ValueError(f"n_perm must be >= 1, got {self.n_perm}")

    def n_total(self, n_subjects: int) -> int:
        """Total randomizations including the identity (b = 0)."""
        if self.patterns is not None:
            if self.patterns.shape[1] != n_subjects:
                raise ValueError(
                    f"patterns have {self.patterns.shape[1]} columns "
                    f"but the data has {n_subjects} subjects"
                )
            return int(self.patterns.shape[0])
        if self.exhaustive:
            if self.kind == "sign-flip":
                total = 2 ** n_subjects
            else:
                k = int((self.group_labels == 1).sum())
                total = math.comb(n_subjects, k)
            if total > _EXHAUSTIVE_BUDGET:
                raise ValueError(
                    f"exhaustive plan would need {total} randomizations "
                    f"(budget {_EXHAUSTIVE_BUDGET})"
                )
            return total
        return self.n_perm + 1

    def _exhaustive_label_arrangements(self, n_subjects: int) -> list:
        if self._combos is None:
            k = int((self.group_labels == 1).sum())
            observed = tuple(np.flatnonzero(self.group_labels == 1))
            combos = [observed]
            combos += [c for c in combinations(range(n_subjects), k) if c != observed]
            self._combos = combos
        return self._combos

    def pattern(self, b: int, n_subjects: int) -> np.ndarray:
        """Pattern ``b``: a sign vector or a group-label vector."""
        if self.kind == "sign-flip":
            if self.patterns is not None:
                return self.patterns[b]
            if self.exhaustive:
                return 1 - 2 * ((b >> np.arange(n_subjects)) & 1)
            if b == 0:
                return np.ones(n_subjects, dtype=np.int64)
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=self.seed, spawn_key=(b,))
            )
            return 1 - 2 * rng.integers(0, 2, n_subjects)
        # two-sample label permutation
        if self.exhaustive:
            ones_at = self._exhaustive_label_arrangements(n_subjects)[b]
            labels = np.zeros(n_subjects, dtype=np.int64)
            labels[list(ones_at)] = 1
            return labels
        if b == 0:
            return self.group_labels
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(b,))
        )
        return self.group_labels[rng.permutation(n_subjects)]


class PValueMap:
    """Family-wise corrected p-values per in-mask voxel, in (0, 1]."""

    __slots__ = ("mask", "p")

    def __init__(self, mask: Mask, p):
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (mask.in_mask_count,):
            raise ValueError(f"expected {mask.in_mask_count} p-values, got {p.shape}")
        if p.size and (p.min() <= 0 or p.max() > 1):
            raise ValueError("p-values must lie in (0, 1]")
        p = p.copy()
        p.setflags(write=False)
        self.mask = mask
        self.p = p

    def to_grid(self, fill: float = 1.0) -> np.ndarray:
        return self.mask.embed(self.p, fill=fill)

    def __repr__(self):
        pmin = self.p.min() if self.p.size else float("nan")
        return f"PValueMap(n={self.mask.in_mask_count}, min={pmin:g})"


@dataclass(frozen=True)
class NullDistribution:
    """Per-randomization maxima of one statistic (entry 0 is the identity)."""

    statistic: str
    maxima: np.ndarray
    observed: EnhancedMap | None = None

    @property
    def n_randomizations(self) -> int:
        return int(self.maxima.shape[0])

    @property
    def p_quantum(self) -> float:
        """Smallest attainable p-value, 1 / n_randomizations."""
        return 1.0 / self.n_randomizations


def _pvalues_from_maxima(maxima: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """p(v) = #{b : max(b) >= observed(v)} / B; entry 0 makes p >= 1/B."""
    sorted_max = np.sort(maxima)
    below = np.searchsorted(sorted_max, observed, side="left")
    return (maxima.size - below) / maxima.size


@dataclass
class StageTimings:
    """Accumulated wall time per pipeline stage, in seconds."""

    statistic: float = 0.0
    forest: float = 0.0  # includes rank ordering (sorting)
    tfce: float = 0.0
    cluster: float = 0.0
    n_randomizations: int = 0

    def add(self, other: dict) -> None:
        self.statistic += other.get("statistic", 0.0)
        self.forest += other.get("forest", 0.0)
        self.tfce += other.get("tfce", 0.0)
        self.cluster += other.get("cluster", 0.0)
        self.n_randomizations += 1

    @property
    def total(self) -> float:
        return self.statistic + self.forest + self.tfce + self.cluster

    def per_randomization(self) -> dict:
        n = max(self.n_randomizations, 1)
        return {
            "total": self.total / n,
            "statistic": self.statistic / n,
            "forest": self.forest / n,
            "tfce": self.tfce / n,
            "cluster": self.cluster / n,
        }


@dataclass
class TailInference:
    """Observed artifacts and nulls for one tail of the test."""

    tfce: EnhancedMap | None = None
    p_tfce: PValueMap | None = None
    null_tfce: NullDistribution | None = None
    clusters: ClusterTable | None = None
    p_cluster_extent: np.ndarray | None = None
    p_cluster_mass: np.ndarray | None = None
    null_extent: NullDistribution | None = None
    null_mass: NullDistribution | None = None


@dataclass
class InferenceResult:
    """Everything one resampling run produces."""

    mask: Mask
    t_observed: StatisticMap
    params: EnhanceParams
    conn: Connectivity
    requested: tuple
    tails: str
    cdt: float | None
    n_randomizations: int
    tail_results: dict
    p_tfce: PValueMap | None
    warnings: list
    timings: StageTimings
    seed: int


_STATS = ("tfce", "cluster-extent", "cluster-mass")


def _tail_values(t_map: StatisticMap, tail: str) -> StatisticMap:
    return t_map if tail == "positive" else t_map.negated()


def run_inference(
    data: SubjectData,
    conn: Connectivity,
    params: EnhanceParams,
    plan: RandomizationPlan,
    requested=("tfce",),
    cdt: float | None = None,
    tails: str = "positive",
    n_workers: int | None = None,
    mass: str = "raw",
) -> InferenceResult:
    """Run the full resampling procedure in one pass.

    Parameters
    ----------
    requested : iterable of str
        Any of ``"tfce"``, ``"cluster-extent"``, ``"cluster-mass"``.  All
        requested statistics are derived from the same per-randomization
        forest.
    cdt : float, optional
        Cluster-defining threshold (required for cluster statistics).
    tails : str
        ``"positive"``, ``"negative"``, or ``"two-sided"``.  Two-sided runs
        both tails (the negative tail enhances the negated map) and reports
        per voxel ``min(1, 2 * min(p_pos, p_neg))``.
    n_workers : int, optional
        Thread count for randomizations; defaults to the ``TFCEKIT_WORKERS``
        environment variable, else 1.  Results are bit-identical for any
        worker count.

    Returns
    -------
    InferenceResult
        Observed maps, per-tail nulls and p-values, cluster tables with
        per-cluster p-values, warnings, and stage timings.
    """
    requested = tuple(requested)
    for name in requested:
        if name not in _STATS:
            raise ValueError(f"unknown statistic {name!r}; expected subset of {_STATS}")
    if not requested:
        raise ValueError("at least one statistic must be requested")
    want_clusters = "cluster-extent" in requested or "cluster-mass" in requested
    want_tfce = "tfce" in requested
    if want_clusters:
        if cdt is None:
            raise ValueError("cluster statistics require a cdt")
        if cdt <= max(params.h0, 0.0):
            raise ValueError(f"cdt must be positive and exceed h0, got {cdt}")
    if tails not in ("positive", "negative", "two-sided"):
        raise ValueError(f"unknown tails {tails!r}")
    tail_list = ["positive", "negative"] if tails == "two-sided" else [tails]
    if n_workers is None:
        n_workers = int(os.environ.get(WORKERS_ENV_VAR, "1"))
    n_workers = max(1, n_workers)

    n_subjects = data.n_subjects
    total = plan.n_total(n_subjects)
    if plan.kind == "two-sample-permutation" and plan.exhaustive:
        plan._exhaustive_label_arrangements(n_subjects)  # build cache up front

    maxima = {
        (stat, tail): np.zeros(total)
        for stat in requested
        for tail in tail_list
    }
    observed: dict = {}
    timings = StageTimings()

    def stat_map_for(b: int) -> tuple[StatisticMap, float]:
        t0 = time.perf_counter()
        pattern = plan.pattern(b, n_subjects)
        if plan.kind == "sign-flip":
            smap = one_sample_t(data, pattern)
        else:
            smap = two_sample_t(data, pattern)
        return smap, time.perf_counter() - t0

    def process(b: int):
        smap, t_stat = stat_map_for(b)
        stage = {"statistic": t_stat}
        for tail in tail_list:
            tmap = _tail_values(smap, tail)
            t0 = time.perf_counter()
            order = rank_order(tmap, params.h0)
            forest = build_forest(order, data.mask, conn)
            stage["forest"] = stage.get("forest", 0.0) + time.perf_counter() - t0
            if want_tfce:
                t0 = time.perf_counter()
                enhanced = exact_tfce(forest, params)
                stage["tfce"] = stage.get("tfce", 0.0) + time.perf_counter() - t0
                maxima[("tfce", tail)][b] = enhanced.max_score
                if b == 0:
                    observed[("tfce", tail)] = enhanced
            if want_clusters:
                t0 = time.perf_counter()
                if b == 0:
                    table = (
                        clusters_at_threshold(forest, tmap, cdt, mass=mass)
                        if forest.n_nodes
                        else ClusterTable(float(cdt), ())
                    )
                    observed[("clusters", tail)] = table
                    max_ext = max(table.extents(), default=0)
                    max_mass = max((c.mass for c in table.clusters), default=0.0)
                else:
                    max_ext, max_mass = (
                        max_cluster_stats(forest, cdt, mass=mass)
                        if forest.n_nodes
                        else (0, 0.0)
                    )
                if "cluster-extent" in requested:
                    maxima[("cluster-extent", tail)][b] = max_ext
                if "cluster-mass" in requested:
                    maxima[("cluster-mass", tail)][b] = max_mass
                stage["cluster"] = stage.get("cluster", 0.0) + time.perf_counter() - t0
        if b == 0:
            observed["t_map"] = smap
        return stage

    # identity first (also warms the JIT before threads fan out)
    timings.add(process(0))
    if total > 1:
        if n_workers == 1:
            for b in range(1, total):
                timings.add(process(b))
        else:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                for stage in pool.map(process, range(1, total)):
                    timings.add(stage)

    warnings: list[str] = []
    tail_results: dict[str, TailInference] = {}
    for tail in tail_list:
        res = TailInference()
        if want_tfce:
            enhanced = observed[("tfce", tail)]
            m = maxima[("tfce", tail)]
            res.tfce = enhanced
            res.null_tfce = NullDistribution(f"tfce_{tail}", m, enhanced)
            res.p_tfce = PValueMap(data.mask, _pvalues_from_maxima(m, enhanced.scores))
        if want_clusters:
            table = observed[("clusters", tail)]
            res.clusters = table
            if "cluster-extent" in requested:
                m = maxima[("cluster-extent", tail)]
                res.null_extent = NullDistribution(f"cluster-extent_{tail}", m)
                res.p_cluster_extent = _pvalues_from_maxima(
                    m, np.array([c.extent for c in table.clusters], dtype=float)
                )
                if m.max() == 0:
                    warnings.append(
                        f"{tail} tail: no voxel reached cdt={cdt:g} in any randomization; "
                        "cluster p-values are 1"
                    )
            if "cluster-mass" in requested:
                m = maxima[("cluster-mass", tail)]
                res.null_mass = NullDistribution(f"cluster-mass_{tail}", m)
                res.p_cluster_mass = _pvalues_from_maxima(
                    m, np.array([c.mass for c in table.clusters], dtype=float)
                )
        tail_results[tail] = res

    p_tfce = None
    if tails == "two-sided":
        # Bonferroni-combine the two one-sided runs
        if want_tfce:
            p_pos = tail_results["positive"].p_tfce.p
            p_neg = tail_results["negative"].p_tfce.p
            p_tfce = PValueMap(
                data.mask, np.minimum(1.0, 2.0 * np.minimum(p_pos, p_neg))
            )
        for res in tail_results.values():
            if res.p_cluster_extent is not None:
                res.p_cluster_extent = np.minimum(1.0, 2.0 * res.p_cluster_extent)
            if res.p_cluster_mass is not None:
                res.p_cluster_mass = np.minimum(1.0, 2.0 * res.p_cluster_mass)
    elif want_tfce:
        p_tfce = tail_results[tails].p_tfce

    return InferenceResult(
        mask=data.mask,
        t_observed=observed["t_map"],
        params=params,
        conn=conn,
        requested=requested,
        tails=tails,
        cdt=cdt,
        n_randomizations=total,
        tail_results=tail_results,
        p_tfce=p_tfce,
        warnings=warnings,
        timings=timings,
        seed=plan.seed,
    )


@dataclass
class ComparisonReport:
    """Voxel-wise comparison of two corrected p-value maps.

    ``d = log10(p_b) - log10(p_a)`` per voxel, so positive values mean map
    ``a`` is the more significant one.  Gain counts voxels significant under
    ``a`` only; Loss counts voxels significant under ``b`` only.  All
    percentages are over in-mask voxels.
    """

    alpha: float
    n_in_mask: int
    d: np.ndarray
    d_pos_pct: float
    d_neg_pct: float
    mean_d_pos: float
    mean_abs_d_neg: float
    gain_pct: float
    loss_pct: float
    gain_voxels: np.ndarray
    loss_voxels: np.ndarray

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "n_in_mask": self.n_in_mask,
            "d_pos_pct": self.d_pos_pct,
            "d_neg_pct": self.d_neg_pct,
            "mean_d_pos": self.mean_d_pos,
            "mean_abs_d_neg": self.mean_abs_d_neg,
            "gain_pct": self.gain_pct,
            "loss_pct": self.loss_pct,
            "gain_voxels": self.gain_voxels.tolist(),
            "loss_voxels": self.loss_voxels.tolist(),
        }


def compare_pvalue_maps(a: PValueMap, b: PValueMap, alpha: float = 0.05) -> ComparisonReport:
    """Tabulate voxel-wise log-p differences and significance flips."""
    if not a.mask.same_grid(b.mask):
        raise ValueError("p-value maps live on different masks")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    d = np.log10(b.p) - np.log10(a.p)
    n = a.mask.in_mask_count
    pos = d > 0
    neg = d < 0
    gain = (a.p <= alpha) & (b.p > alpha)
    loss = (b.p <= alpha) & (a.p > alpha)
    return ComparisonReport(
        alpha=float(alpha),
        n_in_mask=n,
        d=d,
        d_pos_pct=100.0 * pos.sum() / n,
        d_neg_pct=100.0 * neg.sum() / n,
        mean_d_pos=float(d[pos].mean()) if pos.any() else 0.0,
        mean_abs_d_neg=float(-d[neg].mean()) if neg.any() else 0.0,
        gain_pct=100.0 * gain.sum() / n,
        loss_pct=100.0 * loss.sum() / n,
        gain_voxels=np.flatnonzero(gain),
        loss_voxels=np.flatnonzero(loss),
    )
