"""Command-line interface: tfce, infer, cluster, compare, bench.

Exit codes: 0 on success, 1 on runtime failure (with a structured message on
stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .enhance import DiscretizationScheme, EnhanceParams, discretized_tfce, exact_tfce
from .forest import build_forest, clusters_at_threshold
from .inference import (
    WORKERS_ENV_VAR,
    PValueMap,
    RandomizationPlan,
    SubjectData,
    compare_pvalue_maps,
    run_inference,
)
from .nifti import NiftiVolume, read_nifti, write_nifti
from .volume import Connectivity, GridShape, StatisticMap, build_mask, rank_order

__all__ = ["RunConfig", "read_permutation_matrix", "cli_dispatch", "main", "run_bench"]


class PermutationMatrixError(ValueError):
    """Malformed sign-flip matrix file."""


def read_permutation_matrix(path) -> RandomizationPlan:
    """Parse a sign-flip matrix: one row per randomization, +/-1 per subject.

    The first row must be the identity (all +1).  Returns a sign-flip plan
    that uses the rows verbatim.
    """
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            row = []
            for tok in tokens:
                if tok in ("+1", "1"):
                    row.append(1)
                elif tok in ("-1", "−1"):
                    row.append(-1)
                else:
                    raise PermutationMatrixError(
                        f"row {lineno}: entry {tok!r} is not +1 or -1"
                    )
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise PermutationMatrixError(
                    f"row {lineno}: expected {width} entries, got {len(row)}"
                )
            rows.append(row)
    if not rows:
        raise PermutationMatrixError("file contains no rows")
    if any(v != 1 for v in rows[0]):
        raise PermutationMatrixError("row 1 must be the identity (all +1)")
    return RandomizationPlan(kind="sign-flip", patterns=np.array(rows, dtype=np.int64))


@dataclass
class RunConfig:
    """Resolved `infer` configuration; serialized into the run manifest."""

    inputs: list
    mask: str | None
    connectivity: int
    E: float
    H: float
    h0: float
    n_perm: int
    seed: int
    exhaustive: bool
    perm_matrix: str | None
    tails: str
    statistics: list
    cdt: float | None
    mass: str
    design: str
    labels: list | None
    out_dir: str
    workers: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# input loading


def _mask_from_volume(vol: NiftiVolume):
    if vol.data.ndim != 3:
        raise ValueError("mask volume must be 3D")
    return build_mask(GridShape(vol.data.shape, vol.voxel_sizes), vol.data != 0)


def _load_subject_stack(inputs: list) -> tuple[np.ndarray, NiftiVolume]:
    """Load a 4D stack or a list of 3D maps into (subject, x, y, z)."""
    if len(inputs) == 1:
        vol = read_nifti(inputs[0])
        if vol.data.ndim == 4:
            return np.moveaxis(vol.data, -1, 0), vol
        return vol.data[np.newaxis], vol
    first = read_nifti(inputs[0])
    stack = [first.data]
    for p in inputs[1:]:
        v = read_nifti(p)
        if v.data.shape != first.data.shape:
            raise ValueError(f"{p}: shape {v.data.shape} != {first.data.shape}")
        stack.append(v.data)
    return np.stack(stack, axis=0), first


def _expand_inputs(args) -> list:
    if args.subject_list:
        with open(args.subject_list) as fh:
            listed = [ln.strip() for ln in fh if ln.strip()]
        if not listed:
            raise ValueError(f"{args.subject_list}: empty subject list")
        base = os.path.dirname(os.path.abspath(args.subject_list))
        return [p if os.path.isabs(p) else os.path.join(base, p) for p in listed]
    return args.inputs


def _default_mask(stack: np.ndarray):
    # in-mask: finite and nonzero for every subject
    ok = np.all(np.isfinite(stack), axis=0) & np.all(stack != 0, axis=0)
    return ok


def _connectivity(n: int) -> Connectivity:
    return Connectivity.from_neighbor_count(n)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_tfce(args) -> int:
    vol = read_nifti(args.input)
    if vol.data.ndim != 3:
        raise ValueError(f"`tfce` expects a 3D map, got {vol.data.ndim}D")
    if args.mask:
        mask = _mask_from_volume(read_nifti(args.mask))
        if mask.shape.dims != vol.data.shape:
            raise ValueError("mask dims do not match the input map")
    else:
        mask = build_mask(GridShape(vol.data.shape, vol.voxel_sizes), np.isfinite(vol.data))
    grid = np.where(np.isfinite(vol.data), vol.data, 0.0)
    stat_map = StatisticMap.from_grid(grid, mask)
    params = EnhanceParams(E=args.E, H=args.H, h0=args.h0)
    conn = _connectivity(args.conn)
    if args.discretized:
        enhanced = discretized_tfce(
            stat_map, conn, params, DiscretizationScheme(n=args.discretized)
        )
    else:
        forest = build_forest(rank_order(stat_map, params.h0), mask, conn)
        enhanced = exact_tfce(forest, params)
    write_nifti(
        NiftiVolume(enhanced.to_grid(), vol.voxel_sizes, vol.spatial_bytes), args.out
    )
    return 0


def _cluster_table_dict(table, p_extent=None, p_mass=None, mask=None) -> dict:
    clusters = []
    for i, c in enumerate(table.clusters):
        entry = {
            "root_rank": c.root,
            "extent": c.extent,
            "mass": c.mass,
            "members_linear": mask.dense_to_linear[c.members].tolist(),
        }
        if p_extent is not None:
            entry["p_extent"] = float(p_extent[i])
        if p_mass is not None:
            entry["p_mass"] = float(p_mass[i])
        clusters.append(entry)
    return {"cdt": table.cdt, "n_clusters": len(table), "clusters": clusters}


def _cmd_cluster(args) -> int:
    vol = read_nifti(args.input)
    if vol.data.ndim != 3:
        raise ValueError(f"`cluster` expects a 3D map, got {vol.data.ndim}D")
    mask = build_mask(GridShape(vol.data.shape, vol.voxel_sizes), np.isfinite(vol.data))
    stat_map = StatisticMap.from_grid(np.where(np.isfinite(vol.data), vol.data, 0.0), mask)
    conn = _connectivity(args.conn)
    forest = build_forest(rank_order(stat_map, 0.0), mask, conn)
    table = clusters_at_threshold(forest, stat_map, args.cdt, mass=args.mass)
    doc = _cluster_table_dict(table, mask=mask)
    doc["connectivity"] = args.conn
    doc["mass_kind"] = args.mass
    _write_json(doc, args.out)
    return 0


def _cmd_compare(args) -> int:
    vol_a = read_nifti(args.map_a)
    vol_b = read_nifti(args.map_b)
    if vol_a.data.shape != vol_b.data.shape:
        raise ValueError("p-value maps have different dims")
    shape = GridShape(vol_a.data.shape, vol_a.voxel_sizes)
    in_mask = (vol_a.data > 0) & (vol_b.data > 0)
    mask = build_mask(shape, in_mask)
    a = PValueMap(mask, mask.extract(vol_a.data))
    b = PValueMap(mask, mask.extract(vol_b.data))
    report = compare_pvalue_maps(a, b, alpha=args.alpha)
    doc = report.to_dict()
    doc["map_a"] = args.map_a
    doc["map_b"] = args.map_b
    _write_json(doc, args.out)
    if args.d_out:
        write_nifti(NiftiVolume(mask.embed(report.d), vol_a.voxel_sizes), args.d_out)
    return 0


def _write_json(doc: dict, path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _write_null_csv(path, tail_results) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["b", "statistic", "max_value"])
        for tail in sorted(tail_results):
            res = tail_results[tail]
            for null in (res.null_tfce, res.null_extent, res.null_mass):
                if null is None:
                    continue
                for b, value in enumerate(null.maxima):
                    writer.writerow([b, null.statistic, repr(float(value))])


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_from_args(args) -> RunConfig:
    inputs = _expand_inputs(args)
    stats = [s.strip() for s in args.stats.split(",") if s.strip()]
    return RunConfig(
        inputs=[os.path.abspath(p) for p in inputs],
        mask=os.path.abspath(args.mask) if args.mask else None,
        connectivity=args.conn,
        E=args.E,
        H=args.H,
        h0=args.h0,
        n_perm=args.n_perm,
        seed=args.seed,
        exhaustive=args.exhaustive,
        perm_matrix=os.path.abspath(args.perm_matrix) if args.perm_matrix else None,
        tails=args.tails,
        statistics=stats,
        cdt=args.cdt,
        mass=args.mass,
        design=args.design,
        labels=args.labels,
        out_dir=os.path.abspath(args.out_dir),
        workers=args.workers if args.workers is not None
        else int(os.environ.get(WORKERS_ENV_VAR, "1")),
    )


_STAT_ALIASES = {
    "tfce": "tfce",
    "extent": "cluster-extent",
    "cluster-extent": "cluster-extent",
    "mass": "cluster-mass",
    "cluster-mass": "cluster-mass",
}


def run_infer_config(config: RunConfig) -> dict:
    """Execute an `infer` configuration; returns the manifest dict."""
    t_start = time.perf_counter()
    stack, ref_vol = _load_subject_stack(config.inputs)
    if config.mask:
        mask_grid = read_nifti(config.mask).data
        if mask_grid.shape != stack.shape[1:]:
            raise ValueError("mask dims do not match the subject maps")
        membership = mask_grid != 0
    else:
        membership = _default_mask(stack)
    shape = GridShape(stack.shape[1:], ref_vol.voxel_sizes)
    mask = build_mask(shape, membership)
    matrix = stack.reshape(stack.shape[0], -1)[:, mask.dense_to_linear]
    data = SubjectData(mask, matrix)

    requested = []
    for s in config.statistics:
        if s not in _STAT_ALIASES:
            raise ValueError(f"unknown statistic {s!r}")
        requested.append(_STAT_ALIASES[s])

    if config.perm_matrix:
        plan = read_permutation_matrix(config.perm_matrix)
    elif config.design == "two-sample":
        if config.labels is None:
            raise ValueError("two-sample design requires --labels")
        plan = RandomizationPlan(
            kind="two-sample-permutation",
            n_perm=config.n_perm,
            seed=config.seed,
            group_labels=np.array(config.labels),
            exhaustive=config.exhaustive,
        )
    else:
        plan = RandomizationPlan(
            kind="sign-flip",
            n_perm=config.n_perm,
            seed=config.seed,
            exhaustive=config.exhaustive,
        )

    result = run_inference(
        data,
        _connectivity(config.connectivity),
        EnhanceParams(E=config.E, H=config.H, h0=config.h0),
        plan,
        requested=tuple(requested),
        cdt=config.cdt,
        tails=config.tails,
        n_workers=config.workers,
        mass=config.mass,
    )

    os.makedirs(config.out_dir, exist_ok=True)
    out = lambda name: os.path.join(config.out_dir, name)  # noqa: E731
    vox = ref_vol.voxel_sizes
    spatial = ref_vol.spatial_bytes

    write_nifti(NiftiVolume(result.t_observed.to_grid(), vox, spatial), out("tstat.nii.gz"))
    if result.p_tfce is not None:
        write_nifti(NiftiVolume(result.p_tfce.to_grid(), vox, spatial), out("p_tfce.nii.gz"))
    for tail, res in result.tail_results.items():
        if res.tfce is not None:
            write_nifti(
                NiftiVolume(res.tfce.to_grid(), vox, spatial), out(f"tfce_{tail}.nii.gz")
            )
        if res.p_tfce is not None and result.tails == "two-sided":
            write_nifti(
                NiftiVolume(res.p_tfce.to_grid(), vox, spatial), out(f"p_tfce_{tail}.nii.gz")
            )
        if res.clusters is not None:
            doc = _cluster_table_dict(
                res.clusters, res.p_cluster_extent, res.p_cluster_mass, mask
            )
            doc["tail"] = tail
            doc["mass_kind"] = config.mass
            _write_json(doc, out(f"clusters_{tail}.json"))
    _write_null_csv(out("null_distributions.csv"), result.tail_results)

    manifest = {
        "tool": "tfcekit infer",
        "version": __version__,
        "config": config.to_dict(),
        "input_sha256": {p: _file_sha256(p) for p in config.inputs},
        "n_randomizations": result.n_randomizations,
        "warnings": result.warnings,
        "timings": {
            "wall_seconds": time.perf_counter() - t_start,
            "per_randomization": result.timings.per_randomization(),
        },
    }
    _write_json(manifest, out("manifest.json"))
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return manifest


def _cmd_infer(args) -> int:
    if args.replay_manifest:
        with open(args.replay_manifest) as fh:
            manifest = json.load(fh)
        config = RunConfig.from_dict(manifest["config"])
        for p, digest in manifest.get("input_sha256", {}).items():
            if _file_sha256(p) != digest:
                raise ValueError(f"input {p} changed since the manifest was written")
        if args.out_dir != ".":
            config.out_dir = os.path.abspath(args.out_dir)
    else:
        if not (args.inputs or args.subject_list):
            raise ValueError("`infer` needs input maps (positional) or --list")
        config = _config_from_args(args)
    run_infer_config(config)
    return 0


# ---------------------------------------------------------------------------
# bench


def make_phantom(size: int, n_subjects: int, seed: int, signal: float = 0.0) -> SubjectData:
    """Smooth random subject stack on a full cubic mask (optionally with a
    planted central blob of the given amplitude)."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    shape = GridShape((size, size, size))
    mask = build_mask(shape, np.ones(shape.dims, bool))
    rows = []
    blob = None
    if signal:
        coords = np.indices(shape.dims, dtype=float)
        center = (size - 1) / 2.0
        r2 = sum((c - center) ** 2 for c in coords)
        blob = signal * np.exp(-r2 / (2.0 * (size / 6.0) ** 2))
    for _ in range(n_subjects):
        noise = gaussian_filter(rng.normal(size=shape.dims), sigma=1.5)
        noise /= noise.std()
        rows.append((noise + blob if blob is not None else noise).reshape(-1))
    return SubjectData(mask, np.asarray(rows))


def run_bench(
    size: int = 64,
    n_subjects: int = 10,
    n_perm: int = 10,
    seed: int = 0,
    conn: int = 26,
    cdt: float = 2.0,
    workers: int = 1,
) -> dict:
    """Time the pipeline stages on a synthetic phantom.

    Runs the inference engine twice — TFCE alone, then TFCE plus cluster
    extent and mass from the same forest — and reports per-randomization
    stage times for both, plus the relative cost of adding the cluster
    statistics.
    """
    data = make_phantom(size, n_subjects, seed)
    connectivity = _connectivity(conn)
    params = EnhanceParams()
    plan = RandomizationPlan(kind="sign-flip", n_perm=n_perm, seed=seed)

    def timed(requested, use_cdt):
        t0 = time.perf_counter()
        result = run_inference(
            data, connectivity, params, plan,
            requested=requested, cdt=use_cdt, n_workers=workers,
        )
        wall = time.perf_counter() - t0
        per = result.timings.per_randomization()
        per["wall_per_randomization"] = wall / result.n_randomizations
        return per

    tfce_only = timed(("tfce",), None)
    unified = timed(("tfce", "cluster-extent", "cluster-mass"), cdt)
    added = (unified["total"] - tfce_only["total"]) / tfce_only["total"]
    return {
        "size": size,
        "n_subjects": n_subjects,
        "n_perm": n_perm,
        "connectivity": conn,
        "cdt": cdt,
        "tfce_only": tfce_only,
        "unified": unified,
        "cluster_added_fraction": added,
    }


def _cmd_bench(args) -> int:
    report = run_bench(
        size=args.size,
        n_subjects=args.subjects,
        n_perm=args.n_perm,
        seed=args.seed,
        conn=args.conn,
        cdt=args.cdt,
        workers=args.workers or 1,
    )
    print(f"phantom {args.size}^3, {args.subjects} subjects, "
          f"{args.n_perm} randomizations, conn {args.conn}")
    header = f"{'mode':<12}{'total':>10}{'stat':>10}{'forest':>10}{'tfce':>10}{'cluster':>10}"
    print(header)
    for name, key in (("tfce-only", "tfce_only"), ("unified", "unified")):
        per = report[key]
        print(
            f"{name:<12}{per['total']:>10.4f}{per['statistic']:>10.4f}"
            f"{per['forest']:>10.4f}{per['tfce']:>10.4f}{per['cluster']:>10.4f}"
        )
    print(f"cluster statistics add {100 * report['cluster_added_fraction']:+.1f}% "
          "over TFCE alone (per randomization, seconds)")
    if args.out:
        _write_json(report, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tfcekit",
        description="Exact TFCE scoring and nonparametric max-statistic inference",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tfce", help="enhance one statistic map")
    p.add_argument("--in", dest="input", required=True, help="input 3D .nii/.nii.gz map")
    p.add_argument("--mask", help="mask volume (nonzero = in mask)")
    p.add_argument("-E", type=float, default=0.5, help="extent exponent (default 0.5)")
    p.add_argument("-H", type=float, default=2.0, help="height exponent (default 2)")
    p.add_argument("--h0", type=float, default=0.0, help="integration floor (default 0)")
    p.add_argument("--conn", type=int, default=26, choices=(4, 8, 6, 18, 26))
    p.add_argument("--discretized", type=int, metavar="N",
                   help="use the N-threshold fixed-step approximation instead")
    p.add_argument("--out", required=True, help="output map path")
    p.set_defaults(func=_cmd_tfce)

    p = sub.add_parser("infer", help="full resampling inference")
    p.add_argument("inputs", nargs="*", help="4D stack or one 3D map per subject")
    p.add_argument("--list", dest="subject_list", help="text file listing 3D maps")
    p.add_argument("--mask", help="mask volume; default: finite and nonzero in all subjects")
    p.add_argument("--conn", type=int, default=26, choices=(4, 8, 6, 18, 26))
    p.add_argument("-E", type=float, default=0.5)
    p.add_argument("-H", type=float, default=2.0)
    p.add_argument("--h0", type=float, default=0.0)
    p.add_argument("--n-perm", type=int, default=999, help="random draws beyond the identity")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exhaustive", action="store_true", help="enumerate all randomizations")
    p.add_argument("--perm-matrix", help="external +/-1 sign-flip matrix (identity row first)")
    p.add_argument("--tails", default="positive",
                   choices=("positive", "negative", "two-sided"))
    p.add_argument("--stats", default="tfce",
                   help="comma list: tfce,extent,mass (default tfce)")
    p.add_argument("--cdt", type=float, help="cluster-defining threshold for extent/mass")
    p.add_argument("--mass", default="raw", choices=("raw", "excess"),
                   help="cluster mass convention (default raw sum of values)")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--workers", type=int,
                   help=f"worker threads (default ${WORKERS_ENV_VAR} or 1)")
    p.add_argument("--design", default="one-sample", choices=("one-sample", "two-sample"))
    p.add_argument("--labels", type=int, nargs="+", help="0/1 group label per subject")
    p.add_argument("--replay-manifest", help="re-run an earlier manifest.json")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("cluster", help="cluster table at a fixed threshold")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--cdt", type=float, required=True)
    p.add_argument("--conn", type=int, default=26, choices=(4, 8, 6, 18, 26))
    p.add_argument("--mass", default="raw", choices=("raw", "excess"))
    p.add_argument("--out", help="output JSON (stdout when omitted)")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("compare", help="compare two corrected p-value maps")
    p.add_argument("map_a", help="first p-map (the 'gain' side)")
    p.add_argument("map_b", help="second p-map")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", help="report JSON (stdout when omitted)")
    p.add_argument("--d-out", help="optional per-voxel log10 difference map")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("bench", help="stage timings on a synthetic phantom")
    p.add_argument("--size", type=int, default=64, help="cube edge length (default 64)")
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--n-perm", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conn", type=int, default=26, choices=(4, 8, 6, 18, 26))
    p.add_argument("--cdt", type=float, default=2.0)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="write the timing report as JSON")
    p.set_defaults(func=_cmd_bench)

    return parser


def cli_dispatch(argv) -> int:
    """Parse and run; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))
