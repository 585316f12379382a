"""Command-line front end.

Thin argparse plumbing over the library: volume inspection, the two
registration solvers, pivot calibration from a pose file, a standalone
tracker server, phantom generation/streaming, and the scripted end-to-end
demo plus the HTTP service.
"""

import argparse
import json
import sys
import time

import numpy as np

from .igtl import TrackerServer, tracker_port
from .landmarks import LandmarkPair, register_landmarks
from .mireg import RegistrationConfig, register_bspline_mi, register_rigid_mi
from .phantom import (PhantomConfig, config_from_dict, config_to_dict,
                      generate_phantom, linear_insertion, pivot_sweep,
                      save_truth, stream_needle_poses)
from .pivot import PoseBuffer, PoseSample, accumulate_pose, pivot_calibrate
from .transforms import RigidTransform
from .volume import load_volume, save_volume


def _fmt_transform(t: RigidTransform) -> str:
    nums = np.hstack([t.rotation, t.translation[:, None]]).ravel()
    return " ".join("%.17g" % v for v in nums)


def _print_transform(t: RigidTransform, out=sys.stdout):
    m = np.hstack([t.rotation, t.translation[:, None]])
    for row in m:
        print("  " + "  ".join(f"{v: .9f}" for v in row), file=out)


def cmd_volume(args) -> int:
    vol = load_volume(args.path)
    print(f"dims     {vol.dims[0]} {vol.dims[1]} {vol.dims[2]}")
    print(f"spacing  {vol.spacing[0]:g} {vol.spacing[1]:g} {vol.spacing[2]:g}")
    print(f"origin   {vol.origin[0]:g} {vol.origin[1]:g} {vol.origin[2]:g}")
    print(f"modality {vol.modality.value}")
    return 0


def cmd_register(args) -> int:
    fixed = load_volume(args.fixed)
    moving = load_volume(args.moving)
    cfg = RegistrationConfig()
    report = register_rigid_mi(fixed, moving, RigidTransform.identity(), cfg)
    print(f"rigid: MI {report.initial_mi:.4f} -> {report.final_mi:.4f} bits "
          f"({report.iterations} iterations, converged={report.converged})")
    final = report
    if args.deformable:
        final = register_bspline_mi(fixed, moving, report.final_transform, cfg)
        print(f"deformable: MI {final.initial_mi:.4f} -> {final.final_mi:.4f} bits "
              f"({final.iterations} iterations, converged={final.converged})")
    _print_transform(report.final_transform)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(_fmt_transform(report.final_transform) + "\n")
        if args.deformable and final.grid is not None:
            g = final.grid
            np.savez(args.out + ".grid.npz", grid_dims=np.array(g.grid_dims),
                     grid_origin=g.grid_origin, grid_spacing=g.grid_spacing,
                     displacements=g.displacements)
        print(f"wrote {args.out}")
    return 0 if final.converged else 1


def cmd_register_landmarks(args) -> int:
    rows = np.loadtxt(args.pairs, ndmin=2)
    if rows.shape[1] != 6:
        print(f"expected 6 numbers per line (image xyz, tracker xyz), "
              f"got {rows.shape[1]}", file=sys.stderr)
        return 2
    pairs = [LandmarkPair(image_point=r[:3], tracker_point=r[3:]) for r in rows]
    result = register_landmarks(pairs)
    print(f"{len(pairs)} pairs, rmse {result.rmse:.6g} mm")
    _print_transform(result.transform)
    return 0


def cmd_pivot_calibrate(args) -> int:
    rows = np.loadtxt(args.poses, ndmin=2)
    if rows.shape[1] not in (12, 13):
        print(f"expected 12 or 13 numbers per line, got {rows.shape[1]}",
              file=sys.stderr)
        return 2
    buf = PoseBuffer()
    for r in rows:
        accumulate_pose(buf, PoseSample(r[:9].reshape(3, 3), r[9:12],
                                        r[12] if rows.shape[1] > 12 else 0.0))
    result = pivot_calibrate(buf)
    print(f"tip offset   {result.tip_offset[0]:.6f} {result.tip_offset[1]:.6f} "
          f"{result.tip_offset[2]:.6f}")
    print(f"pivot point  {result.pivot_point[0]:.6f} {result.pivot_point[1]:.6f} "
          f"{result.pivot_point[2]:.6f}")
    print(f"rms residual {result.rms_residual:.6g} mm over {result.n_poses} poses")
    return 0


def _load_config(path) -> PhantomConfig:
    if path is None:
        return PhantomConfig()
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def _builtin_trajectory(name, truth):
    if name == "pivot":
        return pivot_sweep((10.0, 5.0, -20.0), duration=5.0), 5.0
    if name == "insertion":
        lesion = np.asarray(truth.lesion_image)
        entry = lesion + np.array([0.0, -50.0, 0.0])
        return linear_insertion(entry, lesion, duration=10.0), 10.0
    rows = np.loadtxt(name, ndmin=2)
    if rows.shape[1] != 6:
        raise SystemExit("trajectory file needs 6 numbers per line: "
                         "tip xyz, axis xyz")

    def trajectory(t, rows=rows):
        k = min(int(t * 40.0), len(rows) - 1)   # one row per tick, hold last
        return rows[k, :3], rows[k, 3:]

    return trajectory, len(rows) / 40.0


def cmd_phantom_generate(args) -> int:
    from pathlib import Path
    cfg = _load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ct, pet, inter, truth = generate_phantom(cfg)
    save_volume(ct, out / "comp_ct.nrrd")
    save_volume(pet, out / "comp_pet.nrrd")
    save_volume(inter, out / "interventional.nrrd")
    save_truth(truth, out / "truth.txt")
    with open(out / "config.json", "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
    print(f"wrote comp_ct.nrrd comp_pet.nrrd interventional.nrrd truth.txt "
          f"config.json -> {out}")
    return 0


def cmd_phantom_stream(args) -> int:
    cfg = _load_config(args.config)
    _, _, _, truth = generate_phantom(cfg)
    trajectory, duration = _builtin_trajectory(args.trajectory, truth)
    port = args.port if args.port is not None else tracker_port()
    with TrackerServer(port=port) as server:
        print(f"streaming '{args.trajectory}' poses on port {server.port} "
              f"at {cfg.stream_rate:g} Hz (Ctrl-C to stop)")
        try:
            while True:
                stream_needle_poses(cfg, truth, trajectory, duration, server,
                                    respire=args.respire, realtime=True,
                                    start_time=time.time())
                if args.once:
                    return 0
        except KeyboardInterrupt:
            return 0


def cmd_tracker_serve(args) -> int:
    port = args.port if args.port is not None else tracker_port()
    if args.source == "file":
        if not args.poses:
            print("--source file requires --poses FILE", file=sys.stderr)
            return 2
        rows = np.loadtxt(args.poses, ndmin=2)
        with TrackerServer(port=port) as server:
            print(f"replaying {len(rows)} poses on port {server.port} (Ctrl-C to stop)")
            try:
                while True:
                    t0 = time.time()
                    for i, r in enumerate(rows):
                        ts = r[12] if rows.shape[1] > 12 else i / 40.0
                        server.push("needle", t0 + ts,
                                    RigidTransform(r[:9].reshape(3, 3), r[9:12]))
                        time.sleep(1.0 / 40.0)
                    if args.once:
                        return 0
            except KeyboardInterrupt:
                return 0
    # sim: tiny phantom is enough, the stream only needs the truth transforms
    cfg = PhantomConfig(volume_dims=(16, 16, 16), comp_ct_spacing=(8.0, 8.0, 8.0),
                        interventional_spacing=(8.0, 8.0, 8.0))
    args.config, args.trajectory, args.respire = None, "insertion", True
    args.port = port
    return cmd_phantom_stream(args)


def cmd_session_run_demo(args) -> int:
    from .demo import run_demo
    reports = run_demo(work_dir=args.work_dir, noise_sigma=args.noise_sigma,
                       seeds=range(args.seeds))
    tres = [r.tre for r in reports]
    return 0 if float(np.median(tres)) <= (1.0 if args.noise_sigma == 0 else 3.0) else 1


def cmd_session_serve(args) -> int:
    import uvicorn

    from .server import build_app, http_port
    from .workflow import create_session

    port = args.port if args.port is not None else http_port()
    with create_session() as session:
        print(f"navigation service on http://127.0.0.1:{port}")
        uvicorn.run(build_app(session), host=args.host, port=port,
                    log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="petnav",
                                description="PET/CT needle-biopsy navigation tools")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("volume", help="inspect volume files")
    vsub = v.add_subparsers(dest="action", required=True)
    vi = vsub.add_parser("info", help="print dims/spacing/origin")
    vi.add_argument("path")
    vi.set_defaults(func=cmd_volume)

    r = sub.add_parser("register", help="intensity registration between two volumes")
    r.add_argument("--fixed", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--deformable", action="store_true")
    r.add_argument("--out", help="write rigid transform (12 numbers, row-major)")
    r.set_defaults(func=cmd_register)

    rl = sub.add_parser("register-landmarks",
                        help="point-based registration from a pair file")
    rl.add_argument("--pairs", required=True,
                    help="6 numbers per line: image xyz, tracker xyz")
    rl.set_defaults(func=cmd_register_landmarks)

    pc = sub.add_parser("pivot-calibrate", help="tip offset from a pose file")
    pc.add_argument("--poses", required=True,
                    help="12 or 13 numbers per line: rotation row-major, "
                         "position, [timestamp]")
    pc.set_defaults(func=cmd_pivot_calibrate)

    ts = sub.add_parser("tracker-serve", help="stream tracked poses over TCP")
    ts.add_argument("--port", type=int, default=None,
                    help="default NAV_TRACKER_PORT or 18944")
    ts.add_argument("--source", choices=("sim", "file"), default="sim")
    ts.add_argument("--poses", help="pose file for --source file")
    ts.add_argument("--once", action="store_true", help="one pass, then exit")
    ts.set_defaults(func=cmd_tracker_serve)

    ph = sub.add_parser("phantom", help="synthetic phantom data")
    phsub = ph.add_subparsers(dest="action", required=True)
    pg = phsub.add_parser("generate", help="write volumes + ground truth")
    pg.add_argument("--config", help="JSON config file (defaults when omitted)")
    pg.add_argument("--out-dir", required=True)
    pg.set_defaults(func=cmd_phantom_generate)
    pstr = phsub.add_parser("stream", help="stream phantom poses over TCP")
    pstr.add_argument("--config", help="JSON config file")
    pstr.add_argument("--port", type=int, default=None)
    pstr.add_argument("--trajectory", default="insertion",
                      help="'insertion', 'pivot', or a waypoint file")
    pstr.add_argument("--respire", action="store_true")
    pstr.add_argument("--once", action="store_true", help="one pass, then exit")
    pstr.set_defaults(func=cmd_phantom_stream)

    se = sub.add_parser("session", help="workflow service")
    sesub = se.add_subparsers(dest="action", required=True)
    rd = sesub.add_parser("run-demo", help="scripted full workflow on the phantom")
    rd.add_argument("--noise-sigma", type=float, default=0.0)
    rd.add_argument("--seeds", type=int, default=1, help="number of runs")
    rd.add_argument("--work-dir", default=None)
    rd.set_defaults(func=cmd_session_run_demo)
    sv = sesub.add_parser("serve", help="HTTP + WebSocket navigation service")
    sv.add_argument("--port", type=int, default=None,
                    help="default NAV_HTTP_PORT or 8080")
    sv.add_argument("--host", default="127.0.0.1")
    sv.set_defaults(func=cmd_session_serve)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
