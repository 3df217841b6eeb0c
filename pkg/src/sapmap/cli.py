"""Command-line interface.

Subcommands mirror the pipeline stages: ``georef fit``, ``register``,
``skeletonize``, ``segment``, ``traits``, ``registry add|diff``, ``synth``
and ``pipeline run``. Data goes to stdout (or the requested output files),
errors go to stderr; exit codes are 0 on success, 1 on data errors, 2 on
usage errors.
"""

import argparse
import sys
from pathlib import Path

from . import __version__
from .core import float_repr
from .errors import SapmapError
from .georef import (associate, fit_earth_transform, format_earth_transform,
                     load_earth_transform, save_earth_transform)
from .io import (load_gnss, load_ply, load_trajectory, save_ply,
                 save_trajectory)
from .leafwood import LeafWoodParams, leaf_wood_ratio, segment_leaf_wood
from .pipeline import MAP_FRAME, load_config, parse_manifest, pipeline_run
from .registration import extract_subtrajectory, register_sfm, transform_cloud
from .registry import ARTIFACT_NAMES, Registry
from .skeleton import (ContractionParams, TopologyParams, load_skeleton,
                       save_skeleton, skeletonize)
from .synth import generate, generate_plot, parse_sapling_spec
from .traits import compute_traits, load_profile, load_report, save_report


def _fail(message):
    print(f"error: {message}", file=sys.stderr)
    return 1


def _cmd_georef_fit(args):
    traj = load_trajectory(args.traj, frame_id=MAP_FRAME)
    track = load_gnss(args.gnss)
    pairs = associate(traj, track, u=args.u, max_gap=args.max_gap,
                      time_offset=args.time_offset)
    earth = fit_earth_transform(pairs)
    text = format_earth_transform(earth)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"pairs: {len(pairs)}  rms_m: {earth.rms_residual:.6f}",
          file=sys.stderr)
    return 0


def _cmd_register(args):
    slam = load_trajectory(args.slam, frame_id=MAP_FRAME)
    rows = parse_manifest(Path(args.manifest).read_text(),
                          base_dir=Path(args.manifest).parent)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for row in rows:
        tag = f"{row.session_id}/{row.sapling_id}"
        try:
            frame = f"F_{row.session_id}_{row.sapling_id}"
            sub = extract_subtrajectory(slam, row.t_start, row.t_end,
                                        row.sapling_id, row.session_id)
            sfm = load_trajectory(row.sfm_traj_path, frame_id=frame)
            reg = register_sfm(sfm, sub, max_gap=args.max_gap)
            cloud = load_ply(row.cloud_path, frame_id=frame)
            aligned_cloud = transform_cloud(cloud, reg.transform, MAP_FRAME)

            stem = f"{row.session_id}_{row.sapling_id}"
            save_trajectory(reg.aligned, out_dir / f"{stem}_aligned.tum")
            save_ply(aligned_cloud, out_dir / f"{stem}_cloud.ply")
            t = reg.transform
            lines = [
                f"scale: {float_repr(t.scale)}",
                f"qw: {float_repr(t.rotation[0])}",
                f"qx: {float_repr(t.rotation[1])}",
                f"qy: {float_repr(t.rotation[2])}",
                f"qz: {float_repr(t.rotation[3])}",
                f"tx: {float_repr(t.translation[0])}",
                f"ty: {float_repr(t.translation[1])}",
                f"tz: {float_repr(t.translation[2])}",
                f"rms_m: {float_repr(reg.rms_residual)}",
                f"pairs: {reg.pair_count}",
            ]
            (out_dir / f"{stem}_transform.txt").write_text(
                "\n".join(lines) + "\n")
            print(f"{tag}: scale={t.scale:.6g} rms={reg.rms_residual:.4g} "
                  f"pairs={reg.pair_count}")
        except SapmapError as exc:
            failures += 1
            print(f"error: {tag}: {exc}", file=sys.stderr)
    return 1 if failures else 0


def _skeleton_params(args):
    contraction = ContractionParams()
    topology = TopologyParams()
    if args.params:
        overrides = {}
        for lineno, line in enumerate(
                Path(args.params).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            overrides[key.strip()] = val.strip()
        c_kwargs, t_kwargs = {}, {}
        c_fields = ContractionParams.__dataclass_fields__
        t_fields = TopologyParams.__dataclass_fields__
        for key, val in overrides.items():
            if key in c_fields:
                kind = int if c_fields[key].type == "int" else float
                c_kwargs[key] = kind(val)
            elif key in t_fields:
                t_kwargs[key] = float(val)
            else:
                raise SapmapError(f"unknown skeleton parameter {key!r}")
        contraction = ContractionParams(**c_kwargs)
        topology = TopologyParams(**t_kwargs)
    return contraction, topology


def _cmd_skeletonize(args):
    cloud = load_ply(args.cloud)
    contraction, topology = _skeleton_params(args)
    voxel = args.voxel if args.voxel > 0 else None
    skel = skeletonize(cloud, voxel=voxel, contraction=contraction,
                       topology=topology, prune_graph=not args.no_prune)
    save_skeleton(skel, args.out)
    print(f"vertices: {len(skel)}  edges: {len(skel.edges)}")
    return 0


def _cmd_segment(args):
    cloud = load_ply(args.cloud)
    skel = load_skeleton(args.skel)
    params = LeafWoodParams(terminal_hops=args.hops,
                            terminal_radius=args.radius)
    seg = segment_leaf_wood(cloud, skel, params)
    save_ply(seg.leaf, args.out_leaf)
    save_ply(seg.wood, args.out_wood)
    lwr = seg.n_leaf / seg.n_wood if seg.n_wood else float("inf")
    print(f"{seg.n_leaf} {seg.n_wood} {lwr:.6g}")
    return 0


def _cmd_traits(args):
    cloud = load_ply(args.cloud, frame_id=MAP_FRAME)
    skel = load_skeleton(args.skel)
    leaf = load_ply(args.leaf, frame_id=MAP_FRAME)
    wood = load_ply(args.wood, frame_id=MAP_FRAME)
    earth = load_earth_transform(args.earth) if args.earth else None

    import numpy as np

    from .leafwood import Segmentation
    n_leaf, n_wood = len(leaf), len(wood)
    seg = Segmentation(
        leaf=leaf, wood=wood,
        leaf_indices=np.arange(n_leaf),
        wood_indices=np.arange(n_leaf, n_leaf + n_wood),
    )
    report = compute_traits(cloud, skel, seg, earth,
                            sapling_id=args.sapling_id,
                            session_id=args.session_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "report.txt", out / "profile.csv")
    print(f"height_m: {report.height:.4f}  bifurcations: "
          f"{report.bifurcations}  lwr: {report.lwr:.4f}")
    return 0


def _cmd_registry_add(args):
    root = Path(args.root)
    try:
        registry = Registry.load(root)
    except SapmapError:
        registry = Registry(root)
    report_values = load_report(args.report)
    profile = load_profile(args.profile)

    from .traits import TraitReport
    report = TraitReport(
        sapling_id=args.sapling, session_id=args.session,
        height=report_values["height_m"],
        bifurcations=report_values["bifurcations"],
        lwr=report_values["lwr"],
        leaf_profile=profile,
        n_leaf=report_values.get("n_leaf", 0),
        n_wood=report_values.get("n_wood", 0),
        geo=(report_values.get("lat", float("nan")),
             report_values.get("lon", float("nan"))),
    )
    registry.ingest(
        sapling_id=args.sapling,
        session_id=args.session,
        capture_date=args.date,
        geo=report.geo,
        map_position=tuple(args.map_position),
        report=report,
        artifact_paths={
            "cloud.ply": args.cloud, "skel.txt": args.skel,
            "leaf.ply": args.leaf, "wood.ply": args.wood,
            "report.txt": args.report, "profile.csv": args.profile,
        },
    )
    registry.save()
    print(f"records: {len(registry)}")
    return 0


def _cmd_registry_diff(args):
    registry = Registry.load(args.root)
    change = registry.change_report(args.sapling, args.session_a,
                                    args.session_b)
    print(f"sapling_id: {change.sapling_id}")
    print(f"sessions: {change.session_pair[0]} -> {change.session_pair[1]}")
    print(f"delta_height_m: {change.delta_height!r}")
    print(f"delta_bifurcations: {change.delta_bifurcations}")
    print(f"delta_lwr: {change.delta_lwr!r}")
    print(f"profile_distance: {change.profile_distance!r}")
    print(f"position_drift_m: {change.position_drift!r}")
    return 0


def _cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "sapling":
        spec = parse_sapling_spec(Path(args.spec).read_text()) if args.spec \
            else parse_sapling_spec("")
        result = generate(spec)
        save_ply(result.cloud, out / "cloud.ply")
        save_skeleton(result.true_skeleton, out / "true_skeleton.txt")
        import numpy as np
        np.savetxt(out / "labels.txt", result.is_leaf.astype(int), fmt="%d")
        print(f"points: {len(result.cloud)}  height_m: "
              f"{result.true_height:.4f}  bifurcations: "
              f"{result.true_bifurcations}  lwr: {result.true_lwr:.4f}")
        return 0
    truth = generate_plot(out, n_saplings=args.n_saplings, seed=args.seed,
                          session_id=args.session_id, date=args.date)
    print(f"session: {truth.session_id}  saplings: {len(truth.saplings)}  "
          f"manifest: {truth.manifest_path}")
    return 0


def _cmd_pipeline_run(args):
    config = load_config(args.config)
    registry, outcomes = pipeline_run(config, jobs=args.jobs)
    failed = [o for o in outcomes if not o.ok]
    for o in outcomes:
        if o.ok:
            print(f"{o.session_id}/{o.sapling_id}: ok")
        else:
            print(f"error: {o.session_id}/{o.sapling_id}: {o.error}",
                  file=sys.stderr)
    print(f"processed {len(outcomes)} saplings, {len(failed)} failed, "
          f"registry has {len(registry)} records")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sapmap",
        description="Geo-localised sapling reconstruction and trait "
                    "monitoring from point clouds and trajectory exports.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    georef = sub.add_parser("georef", help="map-to-Earth alignment")
    georef_sub = georef.add_subparsers(dest="subcommand", required=True)
    fit = georef_sub.add_parser("fit", help="fit the planar Earth transform")
    fit.add_argument("--traj", required=True, help="SLAM trajectory (TUM)")
    fit.add_argument("--gnss", required=True, help="GNSS track (CSV)")
    fit.add_argument("--u", type=int, default=None,
                     help="use only the first N GNSS fixes (default: all)")
    fit.add_argument("--max-gap", type=float, default=0.5,
                     help="max timestamp gap in seconds (default 0.5)")
    fit.add_argument("--time-offset", type=float, default=0.0,
                     help="constant offset added to GNSS timestamps")
    fit.add_argument("--out", default=None,
                     help="output file (default: stdout)")
    fit.set_defaults(func=_cmd_georef_fit)

    register = sub.add_parser(
        "register", help="register SfM exports into the map frame")
    register.add_argument("--manifest", required=True)
    register.add_argument("--slam", required=True)
    register.add_argument("--out-dir", required=True)
    register.add_argument("--max-gap", type=float, default=0.05)
    register.set_defaults(func=_cmd_register)

    skel = sub.add_parser("skeletonize", help="extract a branch skeleton")
    skel.add_argument("--cloud", required=True)
    skel.add_argument("--voxel", type=float, default=0.005,
                      help="downsampling voxel in metres; 0 disables "
                           "(over-skeletonisation)")
    skel.add_argument("--out", required=True)
    skel.add_argument("--params", default=None,
                      help="key=value file of contraction/topology overrides")
    skel.add_argument("--no-prune", action="store_true",
                      help="keep short terminal branches")
    skel.set_defaults(func=_cmd_skeletonize)

    segment = sub.add_parser("segment", help="split a cloud into leaf/wood")
    segment.add_argument("--cloud", required=True)
    segment.add_argument("--skel", required=True,
                         help="over-skeletonised (full resolution) skeleton")
    segment.add_argument("--out-leaf", required=True)
    segment.add_argument("--out-wood", required=True)
    segment.add_argument("--hops", type=int, default=1)
    segment.add_argument("--radius", type=float, default=None,
                         help="metric terminal dilation radius (overrides "
                              "hop dilation)")
    segment.set_defaults(func=_cmd_segment)

    traits = sub.add_parser("traits", help="compute the trait report")
    traits.add_argument("--cloud", required=True)
    traits.add_argument("--skel", required=True, help="pruned skeleton")
    traits.add_argument("--leaf", required=True)
    traits.add_argument("--wood", required=True)
    traits.add_argument("--earth", default=None)
    traits.add_argument("--out", required=True, help="output directory")
    traits.add_argument("--sapling-id", default="")
    traits.add_argument("--session-id", default="")
    traits.set_defaults(func=_cmd_traits)

    registry = sub.add_parser("registry", help="multi-session record store")
    registry_sub = registry.add_subparsers(dest="subcommand", required=True)
    add = registry_sub.add_parser("add", help="file one sapling capture")
    add.add_argument("--root", required=True)
    add.add_argument("--sapling", required=True)
    add.add_argument("--session", required=True)
    add.add_argument("--date", required=True, help="ISO date (YYYY-MM-DD)")
    add.add_argument("--cloud", required=True)
    add.add_argument("--skel", required=True)
    add.add_argument("--leaf", required=True)
    add.add_argument("--wood", required=True)
    add.add_argument("--report", required=True)
    add.add_argument("--profile", required=True)
    add.add_argument("--map-position", type=float, nargs=3, required=True,
                     metavar=("X", "Y", "Z"))
    add.set_defaults(func=_cmd_registry_add)
    diff = registry_sub.add_parser("diff", help="change report between "
                                                "two sessions")
    diff.add_argument("--root", required=True)
    diff.add_argument("--sapling", required=True)
    diff.add_argument("--session-a", required=True)
    diff.add_argument("--session-b", required=True)
    diff.set_defaults(func=_cmd_registry_diff)

    synth = sub.add_parser("synth", help="generate synthetic data")
    synth.add_argument("kind", choices=["sapling", "plot"])
    synth.add_argument("--spec", default=None,
                       help="sapling spec file (key=value plus branch lines)")
    synth.add_argument("--out", required=True)
    synth.add_argument("--n-saplings", type=int, default=5)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--session-id", default="S1")
    synth.add_argument("--date", default="2025-07-15")
    synth.set_defaults(func=_cmd_synth)

    pipeline = sub.add_parser("pipeline", help="manifest-driven end-to-end run")
    pipeline_sub = pipeline.add_subparsers(dest="subcommand", required=True)
    run = pipeline_sub.add_parser("run")
    run.add_argument("--config", required=True)
    run.add_argument("--jobs", type=int, default=1)
    run.set_defaults(func=_cmd_pipeline_run)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SapmapError as exc:
        return _fail(str(exc))
    except FileNotFoundError as exc:
        return _fail(f"file not found: {exc.filename}")


if __name__ == "__main__":
    sys.exit(main())
