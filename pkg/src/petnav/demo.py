"""Scripted end-to-end biopsy run on the digital phantom.

One narrative, every subsystem: generate a phantom whose interventional
scan sits at a known rigid offset from the compensated CT/PET pair, recover
that offset by registration, calibrate the needle tip, register the patient
by touching skin fiducials over a live tracker socket, aim at the hottest
PET region, then drive a scripted insertion while the guidance loop watches
the depth shrink.  Ground truth is consulted only to emit tracker poses and
to score the final targeting error.

The tracker-to-image transform, fiducials, and tip offset are quarter-
millimeter grid values with an axis-aligned rotation, so the float32 wire
encoding is exact and a noise-free run can hit micrometer fiducial rmse
over a real socket.  Pivot poses go through the float64 batch path instead;
their rotations do not survive float32 quantization.
"""

import dataclasses
import tempfile
import time
from pathlib import Path

import numpy as np

from .igtl import TrackerServer
from .phantom import (PhantomConfig, fiducial_touch_sequence, generate_phantom,
                      needle_poses, pivot_sweep, pose_for_tip, save_truth)
from .transforms import RigidTransform, rigid_apply
from .volume import save_volume
from .workflow import WorkflowSession, create_session, load_session, save_session

DEMO_OFFSET = RigidTransform.from_axis_angle([0.0, 0.0, 1.0], np.deg2rad(2.0),
                                             (4.5, -3.0, 2.0))
DEMO_T2I = RigidTransform(np.array([[0.0, -1.0, 0.0],
                                    [1.0, 0.0, 0.0],
                                    [0.0, 0.0, 1.0]]), (12.25, -7.5, 30.0))
DEMO_FIDUCIALS = ((55.0, 0.0, 0.0), (0.0, 45.0, 0.0), (0.0, 0.0, 58.0),
                  (-55.0, 0.0, 0.0), (0.0, -45.0, 0.0))
APPROACH = np.array([0.0, -50.0, 0.0])   # entry sits 50 mm anterior of the target
STEP_LIMIT = 1.5                         # mm per guidance tick
STOP_DEPTH = 0.05                        # mm of remaining depth that counts as arrived
MAX_TICKS = 200


def demo_config(noise_sigma: float = 0.0, seed: int = 0) -> PhantomConfig:
    return PhantomConfig(interventional_offset=DEMO_OFFSET,
                         tracker_to_image=DEMO_T2I, fiducials=DEMO_FIDUCIALS,
                         pose_noise_sigma=noise_sigma, seed=seed)


@dataclasses.dataclass(frozen=True)
class DemoReport:
    """Stage metrics for one scripted run; distances in mm."""
    noise_sigma: float
    seed: int
    registration_corner_error: float
    pivot_tip_error: float
    fiducial_rmse: float
    target_image: tuple
    target_truth_error: float
    n_ticks: int
    final_depth: float
    depths: tuple
    tre: float


def pet_hot_target(pet, fraction: float = 0.5) -> np.ndarray:
    """Center of mass of the PET region above fraction * max, world coords."""
    data = np.asarray(pet.data, dtype=float)
    thr = float(data.min()) + fraction * float(data.max() - data.min())
    idx = np.argwhere(data > thr)
    if idx.size == 0:
        raise ValueError("no voxels above threshold")
    w = data[idx[:, 0], idx[:, 1], idx[:, 2]] - thr
    pts = pet.origin + (idx * pet.spacing) @ pet.direction.T
    return (w[:, None] * pts).sum(axis=0) / w.sum()


def _corner_error(vol, recovered: RigidTransform, truth_t: RigidTransform) -> float:
    lo, hi = vol.world_bounds()
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    err = np.linalg.norm(rigid_apply(recovered, corners)
                         - rigid_apply(truth_t, corners), axis=1)
    return float(err.max())


def _wait_for_client(server, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if server.client_count >= 1:
            return
        time.sleep(0.005)
    raise RuntimeError("tracker client never connected")


def _wait_for_timestamp(session, ts, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        p = session.latest_pose()
        if p is not None and abs(p.timestamp - ts) < 1e-6:
            return p
        time.sleep(0.001)
    raise RuntimeError(f"pose with timestamp {ts} never arrived")


def prepare_demo(work_dir, cfg: PhantomConfig, verbose: bool = True):
    """Generate the phantom, register, pivot-calibrate, save the session.

    Returns (session_path, truth, corner_error, pivot_tip_error).  The saved
    session carries the expensive registration so per-seed runs can reload
    it instead of re-solving.
    """
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    ct, pet, inter, truth = generate_phantom(cfg)
    save_volume(ct, work_dir / "comp_ct.nrrd")
    save_volume(pet, work_dir / "comp_pet.nrrd")
    save_volume(inter, work_dir / "interventional.nrrd")
    save_truth(truth, work_dir / "truth.txt")
    if verbose:
        print(f"[demo] phantom: {'x'.join(map(str, cfg.volume_dims))} comp CT/PET "
              f"+ offset interventional scan -> {work_dir}")

    s = create_session()
    s.set_volumes(work_dir / "comp_ct.nrrd", work_dir / "comp_pet.nrrd",
                  work_dir / "interventional.nrrd")
    report = s.run_registration("rigid")
    corner = _corner_error(s.volumes["comp_ct"], report.final_transform,
                           truth.interventional_offset)
    if verbose:
        print(f"[demo] registration: corner error {corner:.3g} mm "
              f"(voxel {max(cfg.comp_ct_spacing):g} mm), "
              f"MI {report.initial_mi:.3f} -> {report.final_mi:.3f} "
              f"in {report.iterations} iterations")

    # float64 batch path on purpose; see module docstring
    poses = needle_poses(cfg, truth, pivot_sweep((10.0, 5.0, -20.0), duration=3.0),
                         duration=3.0, noise_sigma=0.0)
    s.add_calibration_poses(poses)
    pivot = s.run_pivot_calibration()
    pivot_err = float(np.linalg.norm(np.asarray(pivot.tip_offset) - truth.tip_offset))
    if verbose:
        print(f"[demo] pivot calibration: tip offset error {pivot_err:.3g} mm, "
              f"rms residual {pivot.rms_residual:.3g} mm over {pivot.n_poses} poses")

    session_path = work_dir / "session.json"
    save_session(s, session_path)
    s.close()
    return session_path, truth, corner, pivot_err


def run_case(session_path, truth, cfg: PhantomConfig, noise_sigma: float,
             seed: int, stats, verbose: bool = True) -> DemoReport:
    """Touch fiducials, plan to the PET-hot spot, insert; score against truth."""
    corner, pivot_err = stats
    s = load_session(session_path)
    rng = np.random.default_rng([seed, 3])
    try:
        with TrackerServer() as server:
            s.connect_tracking("127.0.0.1", server.port)
            _wait_for_client(server)

            touch_cfg = dataclasses.replace(cfg, seed=seed)
            tracker_pts = fiducial_touch_sequence(touch_cfg, truth,
                                                  noise_sigma=noise_sigma)
            for (label, pt), f_img in zip(tracker_pts, truth.fiducials_image):
                exact = pose_for_tip(truth, f_img, timestamp=time.time())
                # tip lands at the (possibly noisy) tracker point; noise rides
                # on the sensor position, like every streamed pose
                pos = np.asarray(pt) - exact.rotation @ truth.tip_offset
                ts = exact.timestamp
                server.push("needle", ts, RigidTransform(exact.rotation, pos))
                _wait_for_timestamp(s, ts)
                s.record_fiducial_pair(f_img, now=ts, label=label)
            rmse = s.landmark_result.rmse
            if verbose:
                print(f"[demo] patient registration: rmse {rmse:.3g} mm "
                      f"over {len(tracker_pts)} fiducials")

            target_comp = pet_hot_target(s.volumes["comp_pet"])
            target_img = rigid_apply(s.registration_report.final_transform,
                                     target_comp)
            entry_img = target_img + APPROACH
            plan = s.set_plan(entry_img, target_img)
            if verbose:
                print(f"[demo] plan: entry {np.round(entry_img, 2).tolist()} -> "
                      f"PET-hot target {np.round(target_img, 2).tolist()}, "
                      f"length {plan.length:.1f} mm")

            tip_true = np.array(plan.entry, dtype=float)
            depths = []
            t0 = time.time()
            for k in range(MAX_TICKS):
                ts = t0 + k * 0.025
                pose = pose_for_tip(truth, tip_true, axis_image=plan.direction,
                                    timestamp=ts)
                pos = pose.position
                if noise_sigma > 0:
                    pos = pos + rng.normal(scale=noise_sigma / np.sqrt(3.0), size=3)
                server.push("needle", ts, RigidTransform(pose.rotation, pos))
                _wait_for_timestamp(s, ts)
                state = s.guidance_tick(now=ts)
                depths.append(state.depth_remaining)
                if state.depth_remaining < STOP_DEPTH:
                    break
                tip_true = tip_true + min(STEP_LIMIT, state.depth_remaining) \
                    * np.asarray(plan.direction)
    finally:
        s.close()

    tre = float(np.linalg.norm(tip_true - np.asarray(truth.lesion_image)))
    report = DemoReport(
        noise_sigma=noise_sigma, seed=seed,
        registration_corner_error=corner, pivot_tip_error=pivot_err,
        fiducial_rmse=float(rmse),
        target_image=tuple(float(x) for x in target_img),
        target_truth_error=float(np.linalg.norm(
            target_img - np.asarray(truth.lesion_image))),
        n_ticks=len(depths), final_depth=float(depths[-1]),
        depths=tuple(float(d) for d in depths), tre=tre)
    if verbose:
        print(f"[demo] insertion seed {seed}: {report.n_ticks} ticks, "
              f"final depth {report.final_depth:.3g} mm, TRE {tre:.3g} mm")
    return report


def run_demo(work_dir=None, noise_sigma: float = 0.0, seeds=(0,),
             verbose: bool = True):
    """Full scripted run; returns one DemoReport per seed.

    The phantom, registration, and pivot calibration are shared across
    seeds through a saved session; each seed re-touches the fiducials and
    re-runs the insertion with its own noise stream.
    """
    if work_dir is None:
        with tempfile.TemporaryDirectory(prefix="navdemo_") as d:
            return run_demo(d, noise_sigma=noise_sigma, seeds=seeds,
                            verbose=verbose)
    cfg = demo_config(noise_sigma=noise_sigma)
    session_path, truth, corner, pivot_err = prepare_demo(work_dir, cfg, verbose)
    reports = [run_case(session_path, truth, cfg, noise_sigma, seed,
                        (corner, pivot_err), verbose)
               for seed in seeds]
    if verbose:
        med = float(np.median([r.tre for r in reports]))
        print(f"[demo] TRE median over {len(reports)} runs: {med:.3g} mm")
    return reports
