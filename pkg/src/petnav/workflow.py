"""Seven-step navigation workflow: state machine, session state, persistence.

Step order is advisory; the dependency graph is the law.  GUIDANCE may run
only once REGISTRATION, TRACKING, PATIENT_REGISTRATION and PATH_PLANNING are
all complete.  TOOL_CALIBRATION is optional: skipping it records a zero tip
offset.  Invalidating an upstream step (reloading volumes, clearing fiducial
pairs) resets every transitive dependent and clears its artifacts.

Sessions serialize to a canonical JSON document: keys sorted, floats printed
as decimal text with 17 significant digits, so save -> load -> save is byte
identical.  Live tracking state never persists; TRACKING reverts to pending
in the file.
"""

import dataclasses
import enum
import json
import threading
import time
import uuid
from collections import deque

import numpy as np

from .guidance import GuidanceState, compute_guidance, make_plan
from .igtl import TrackerClient
from .landmarks import LandmarkPair, register_landmarks
from .mireg import RegistrationConfig, RegistrationReport, register_bspline_mi, register_rigid_mi
from .pivot import PoseBuffer, PoseSample, accumulate_pose, pivot_calibrate
from .transforms import BSplineGrid, RigidTransform
from .volume import Modality, load_volume

SCHEMA_VERSION = 1
STALENESS_THRESHOLD = 0.5  # seconds; matches guidance


class WorkflowError(Exception):
    pass


class GatingError(WorkflowError):
    pass


class StalePoseError(WorkflowError):
    pass


class SchemaVersionError(WorkflowError):
    pass


class WorkflowStep(enum.Enum):
    DATA_LOADING = "DATA_LOADING"
    REGISTRATION = "REGISTRATION"
    TRACKING = "TRACKING"
    TOOL_CALIBRATION = "TOOL_CALIBRATION"
    PATIENT_REGISTRATION = "PATIENT_REGISTRATION"
    PATH_PLANNING = "PATH_PLANNING"
    GUIDANCE = "GUIDANCE"


PENDING = "pending"
IN_PROGRESS = "in_progress"
COMPLETE = "complete"
SKIPPED = "skipped"
STATUSES = (PENDING, IN_PROGRESS, COMPLETE, SKIPPED)

DEPENDENCIES = {
    WorkflowStep.REGISTRATION: (WorkflowStep.DATA_LOADING,),
    WorkflowStep.PATIENT_REGISTRATION: (WorkflowStep.DATA_LOADING, WorkflowStep.TRACKING),
    WorkflowStep.PATH_PLANNING: (WorkflowStep.DATA_LOADING,),
    WorkflowStep.GUIDANCE: (WorkflowStep.REGISTRATION, WorkflowStep.TRACKING,
                            WorkflowStep.PATIENT_REGISTRATION, WorkflowStep.PATH_PLANNING),
}
SKIPPABLE = frozenset({WorkflowStep.TOOL_CALIBRATION})


class StepGraph:
    """Pure step-status machine enforcing dependency gating and cascades.

    Transitions are validated (a step cannot start or complete unless its
    dependencies are complete); stored statuses themselves may describe a
    partially-invalidated state, e.g. a loaded session whose TRACKING has
    reverted to pending while downstream artifacts are retained.
    """

    def __init__(self):
        self.status = {s: PENDING for s in WorkflowStep}

    def deps_satisfied(self, step: WorkflowStep) -> bool:
        return all(self.status[d] == COMPLETE for d in DEPENDENCIES.get(step, ()))

    def _require_deps(self, step):
        if not self.deps_satisfied(step):
            missing = [d.value for d in DEPENDENCIES.get(step, ())
                       if self.status[d] != COMPLETE]
            raise GatingError(f"{step.value} blocked by incomplete {missing}")

    def start(self, step: WorkflowStep):
        self._require_deps(step)
        self.status[step] = IN_PROGRESS

    def complete(self, step: WorkflowStep):
        self._require_deps(step)
        self.status[step] = COMPLETE

    def skip(self, step: WorkflowStep):
        if step not in SKIPPABLE:
            raise GatingError(f"{step.value} cannot be skipped")
        self.status[step] = SKIPPED

    def dependents(self, step: WorkflowStep):
        """Transitive closure of steps depending on `step`."""
        out, frontier = set(), {step}
        while frontier:
            nxt = {s for s, deps in DEPENDENCIES.items()
                   if any(d in frontier for d in deps)} - out
            out |= nxt
            frontier = nxt
        return out

    def reset(self, step: WorkflowStep):
        """Invalidate a step and everything downstream; returns affected steps."""
        affected = {step} | self.dependents(step)
        for s in affected:
            self.status[s] = PENDING
        return affected


def _fmt(x) -> str:
    return "%.17g" % float(x)


def _fmt_vec(v):
    return [_fmt(x) for x in np.asarray(v, dtype=float).ravel()]


def _parse_vec(items, shape=None):
    a = np.array([float(x) for x in items])
    return a.reshape(shape) if shape is not None else a


def _fmt_rigid(t: RigidTransform):
    return _fmt_vec(np.hstack([t.rotation, t.translation[:, None]]))


def _parse_rigid(items) -> RigidTransform:
    m = _parse_vec(items, (3, 4))
    return RigidTransform(m[:, :3], m[:, 3])


VOLUME_ROLES = ("comp_ct", "comp_pet", "interventional")
_ROLE_MODALITY = {"comp_ct": Modality.CT, "comp_pet": Modality.PET,
                  "interventional": Modality.INTERVENTIONAL_CT}


class WorkflowSession:
    """One navigation case: step statuses plus every step's artifacts.

    All mutations are serialized behind one reentrant lock (single-writer);
    the tracking client only writes the latest-pose slot.  Reads hand out
    snapshots.
    """

    def __init__(self, config: dict = None, session_id: str = None, clock=time.time):
        self.id = session_id if session_id else uuid.uuid4().hex
        self.config = dict(config) if config else {}
        self.graph = StepGraph()
        self.events = []
        self._clock = clock
        self._lock = threading.RLock()

        self.volume_paths = None
        self.volumes = {}
        self.registration_mode = None
        self.registration_report = None
        self.pivot_result = None
        self.tip_offset = None          # set by calibration or explicit skip
        self.calibration_buffer = PoseBuffer()
        self.fiducial_pairs = []
        self.landmark_result = None
        self.plan = None
        self.guidance_history = deque(maxlen=512)

        self._client = None
        self._tracker_endpoint = None
        self._latest_pose = None
        self._log("session created")

    # -- internals ---------------------------------------------------------

    def _log(self, text: str):
        self.events.append((float(self._clock()), str(text)))

    def _clear_artifacts(self, steps):
        if WorkflowStep.DATA_LOADING in steps:
            self.volumes = {}
            self.volume_paths = None
        if WorkflowStep.REGISTRATION in steps:
            self.registration_report = None
            self.registration_mode = None
        if WorkflowStep.PATIENT_REGISTRATION in steps:
            self.fiducial_pairs = []
            self.landmark_result = None
        if WorkflowStep.PATH_PLANNING in steps:
            self.plan = None
        if WorkflowStep.GUIDANCE in steps:
            self.guidance_history.clear()

    def _reset_cascade(self, step: WorkflowStep):
        affected = self.graph.reset(step)
        self._clear_artifacts(affected)
        self._log(f"invalidated {step.value}; reset "
                  f"{sorted(s.value for s in affected)}")
        return affected

    # -- step 1: data loading ----------------------------------------------

    def set_volumes(self, comp_ct, comp_pet, interventional):
        with self._lock:
            if self.graph.status[WorkflowStep.DATA_LOADING] != PENDING:
                self._reset_cascade(WorkflowStep.DATA_LOADING)
            paths = {"comp_ct": str(comp_ct), "comp_pet": str(comp_pet),
                     "interventional": str(interventional)}
            self.graph.start(WorkflowStep.DATA_LOADING)
            loaded = {}
            for role in VOLUME_ROLES:
                try:
                    vol = load_volume(paths[role])
                except Exception as exc:
                    self.graph.status[WorkflowStep.DATA_LOADING] = PENDING
                    self._log(f"volume load failed for {role}: {exc}")
                    raise WorkflowError(f"failed to load {role}: {exc}") from exc
                loaded[role] = dataclasses.replace(vol, modality=_ROLE_MODALITY[role])
            self.volumes = loaded
            self.volume_paths = paths
            self.graph.complete(WorkflowStep.DATA_LOADING)
            self._log("volumes loaded: " + ", ".join(
                f"{r} {loaded[r].dims}" for r in VOLUME_ROLES))
            return self

    # -- step 2: image registration ----------------------------------------

    def run_registration(self, mode: str = "rigid", cfg: RegistrationConfig = None):
        if mode not in ("rigid", "deformable"):
            raise WorkflowError(f"mode must be rigid or deformable, got {mode!r}")
        with self._lock:
            if self.graph.status[WorkflowStep.DATA_LOADING] != COMPLETE:
                raise GatingError("registration requires loaded volumes")
            if self.graph.status[WorkflowStep.REGISTRATION] != PENDING:
                self._reset_cascade(WorkflowStep.REGISTRATION)
            self.graph.start(WorkflowStep.REGISTRATION)
            cfg = cfg if cfg is not None else RegistrationConfig()
            fixed = self.volumes["comp_ct"]
            moving = self.volumes["interventional"]
        # The solve itself runs unlocked; it is pure and can take seconds.
        try:
            report = register_rigid_mi(fixed, moving, RigidTransform.identity(), cfg)
            if mode == "deformable":
                report = register_bspline_mi(fixed, moving, report.final_transform, cfg)
        except Exception as exc:
            with self._lock:
                self._log(f"registration failed: {exc}")
            raise WorkflowError(f"registration failed: {exc}") from exc
        with self._lock:
            self.registration_mode = mode
            self.registration_report = report
            if report.converged:
                self.graph.complete(WorkflowStep.REGISTRATION)
                self._log(f"registration ({mode}) converged: "
                          f"MI {report.initial_mi:.4f} -> {report.final_mi:.4f}")
            else:
                self._log(f"registration ({mode}) did not converge")
            return report

    # -- step 3: tracking --------------------------------------------------

    def connect_tracking(self, host: str, port: int):
        # stop() joins the reader thread, which may itself be waiting on the
        # session lock inside _on_pose, so never stop while holding it.
        with self._lock:
            old, self._client = self._client, None
        if old is not None:
            old.stop()
        with self._lock:
            self._tracker_endpoint = (str(host), int(port))
            self.graph.start(WorkflowStep.TRACKING)
            self._log(f"tracking: connecting to {host}:{port}")
            self._client = TrackerClient(str(host), int(port),
                                         on_pose=self._on_pose)
            return self

    def _on_pose(self, msg):
        t = msg.transform()
        sample = PoseSample(t.rotation, t.translation, msg.timestamp)
        with self._lock:
            self._latest_pose = sample
            if self.graph.status[WorkflowStep.TRACKING] == IN_PROGRESS:
                self.graph.complete(WorkflowStep.TRACKING)
                self._log(f"tracking: first pose from {msg.device_name!r}")

    def disconnect_tracking(self):
        with self._lock:
            old, self._client = self._client, None
        if old is not None:
            old.stop()
        with self._lock:
            self.graph.status[WorkflowStep.TRACKING] = PENDING
            self._log("tracking: disconnected")

    def latest_pose(self):
        with self._lock:
            return self._latest_pose

    def wait_for_tracking(self, timeout: float = 10.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                if self.graph.status[WorkflowStep.TRACKING] == COMPLETE:
                    return True
            time.sleep(0.01)
        return False

    # -- step 4: tool calibration ------------------------------------------

    def add_calibration_poses(self, poses):
        with self._lock:
            for p in poses:
                if not isinstance(p, PoseSample):
                    p = np.asarray(p, dtype=float).ravel()
                    p = PoseSample(p[:9].reshape(3, 3), p[9:12],
                                   p[12] if p.size > 12 else 0.0)
                accumulate_pose(self.calibration_buffer, p)
            self._log(f"calibration: buffer at {len(self.calibration_buffer)} poses")
            return len(self.calibration_buffer)

    def run_pivot_calibration(self):
        with self._lock:
            self.graph.status[WorkflowStep.TOOL_CALIBRATION] = IN_PROGRESS
            result = pivot_calibrate(self.calibration_buffer)
            self.pivot_result = result
            self.tip_offset = np.array(result.tip_offset, dtype=float)
            self.graph.status[WorkflowStep.TOOL_CALIBRATION] = COMPLETE
            self._log(f"pivot calibration: rms {result.rms_residual:.6g} mm "
                      f"over {result.n_poses} poses")
            return result

    def skip_step(self, step: WorkflowStep):
        with self._lock:
            self.graph.skip(step)
            if step is WorkflowStep.TOOL_CALIBRATION:
                self.pivot_result = None
                self.tip_offset = np.zeros(3)
            self._log(f"{step.value} skipped")

    # -- step 5: patient registration --------------------------------------

    def record_fiducial_pair(self, image_point, now: float = None, label: str = ""):
        with self._lock:
            if self.graph.status[WorkflowStep.TRACKING] != COMPLETE:
                raise GatingError("fiducial capture requires live tracking")
            if self.graph.status[WorkflowStep.TOOL_CALIBRATION] not in (COMPLETE, SKIPPED):
                raise GatingError("calibrate the tool or skip calibration first")
            pose = self._latest_pose
            now = self._clock() if now is None else float(now)
            if pose is None or now - pose.timestamp > STALENESS_THRESHOLD:
                age = None if pose is None else now - pose.timestamp
                raise StalePoseError(
                    f"no fresh pose (age {age}); hold the tip still and retry")
            tip_tracker = pose.rotation @ self.tip_offset + pose.position
            pair = LandmarkPair(image_point=image_point, tracker_point=tip_tracker,
                                label=label or f"F{len(self.fiducial_pairs) + 1}")
            self.fiducial_pairs.append(pair)
            self.graph.start(WorkflowStep.PATIENT_REGISTRATION)
            self._log(f"fiducial pair {len(self.fiducial_pairs)} recorded")
            if len(self.fiducial_pairs) >= 4:
                result = register_landmarks(self.fiducial_pairs)
                self.landmark_result = result
                self.graph.complete(WorkflowStep.PATIENT_REGISTRATION)
                self._log(f"patient registration: rmse {result.rmse:.6g} mm "
                          f"over {len(self.fiducial_pairs)} pairs")
            return len(self.fiducial_pairs)

    def clear_fiducial_pairs(self):
        with self._lock:
            self._reset_cascade(WorkflowStep.PATIENT_REGISTRATION)

    # -- step 6: path planning ---------------------------------------------

    def set_plan(self, entry, target):
        with self._lock:
            if self.graph.status[WorkflowStep.DATA_LOADING] != COMPLETE:
                raise GatingError("planning requires loaded volumes")
            plan = make_plan(entry, target)   # degenerate input raises, state unchanged
            replaced = self.plan is not None
            self.plan = plan
            self.graph.complete(WorkflowStep.PATH_PLANNING)
            self._log(("plan replaced" if replaced else "plan set")
                      + f": entry {np.round(plan.entry, 3).tolist()}"
                      + f" target {np.round(plan.target, 3).tolist()}")
            return plan

    # -- step 7: guidance --------------------------------------------------

    def guidance_tick(self, now: float = None) -> GuidanceState:
        with self._lock:
            if not self.graph.deps_satisfied(WorkflowStep.GUIDANCE):
                missing = [d.value for d in DEPENDENCIES[WorkflowStep.GUIDANCE]
                           if self.graph.status[d] != COMPLETE]
                raise GatingError(f"guidance blocked by incomplete {missing}")
            pose = self._latest_pose
            if pose is None:
                raise GatingError("no pose received yet")
            now = self._clock() if now is None else float(now)
            tip_offset = self.tip_offset if self.tip_offset is not None else np.zeros(3)
            state = compute_guidance(self.plan, pose, tip_offset,
                                     self.landmark_result.transform, now)
            if self.graph.status[WorkflowStep.GUIDANCE] != IN_PROGRESS:
                self.graph.start(WorkflowStep.GUIDANCE)
                self._log("guidance started")
            self.guidance_history.append(state)
            return state

    # -- introspection -----------------------------------------------------

    def step_status(self) -> dict:
        with self._lock:
            return {s.value: self.graph.status[s] for s in WorkflowStep}

    def snapshot(self) -> dict:
        with self._lock:
            reg = None
            if self.registration_report is not None:
                r = self.registration_report
                reg = {"mode": self.registration_mode, "converged": r.converged,
                       "initial_mi": r.initial_mi, "final_mi": r.final_mi,
                       "iterations": r.iterations, "deformable": r.grid is not None}
            pose_age = None
            if self._latest_pose is not None:
                pose_age = float(self._clock()) - self._latest_pose.timestamp
            geom = None
            if self.volumes:
                # Viewers need the grid metadata to map slice pixels to mm.
                geom = {name: {"dims": [int(d) for d in v.dims],
                               "spacing": [float(x) for x in v.spacing],
                               "origin": [float(x) for x in v.origin],
                               "direction": [[float(x) for x in row]
                                             for row in v.direction]}
                        for name, v in self.volumes.items()}
            return {
                "id": self.id,
                "steps": {s.value: self.graph.status[s] for s in WorkflowStep},
                "volume_paths": dict(self.volume_paths) if self.volume_paths else None,
                "volumes": geom,
                "registration": reg,
                "tracker": {"endpoint": self._tracker_endpoint, "pose_age": pose_age},
                "calibration_poses": len(self.calibration_buffer),
                "tip_offset": (None if self.tip_offset is None
                               else [float(x) for x in self.tip_offset]),
                "pivot_rms": (None if self.pivot_result is None
                              else self.pivot_result.rms_residual),
                "fiducial_pairs": len(self.fiducial_pairs),
                "landmark_rmse": (None if self.landmark_result is None
                                  else self.landmark_result.rmse),
                "plan": (None if self.plan is None else
                         {"entry": [float(x) for x in self.plan.entry],
                          "target": [float(x) for x in self.plan.target],
                          "length": self.plan.length}),
                "events": len(self.events),
            }

    def close(self):
        with self._lock:
            old, self._client = self._client, None
        if old is not None:
            old.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def create_session(config: dict = None, clock=time.time) -> WorkflowSession:
    return WorkflowSession(config=config, clock=clock)


# -- persistence -----------------------------------------------------------


def session_document(s: WorkflowSession) -> dict:
    """Canonical dict form: floats as 17-significant-digit decimal text."""
    with s._lock:
        steps = {}
        for step in WorkflowStep:
            status = s.graph.status[step]
            # Live state never persists.
            if step is WorkflowStep.TRACKING:
                status = PENDING
            elif step is WorkflowStep.GUIDANCE and status == IN_PROGRESS:
                status = PENDING
            steps[step.value] = status

        reg = None
        if s.registration_report is not None:
            r = s.registration_report
            grid = None
            if r.grid is not None:
                grid = {"dims": list(r.grid.grid_dims),
                        "origin": _fmt_vec(r.grid.grid_origin),
                        "spacing": _fmt_vec(r.grid.grid_spacing),
                        "displacements": _fmt_vec(r.grid.displacements)}
            reg = {"mode": s.registration_mode,
                   "transform": _fmt_rigid(r.final_transform),
                   "initial_mi": _fmt(r.initial_mi), "final_mi": _fmt(r.final_mi),
                   "iterations": int(r.iterations), "converged": bool(r.converged),
                   "grid": grid}

        pivot = None
        if s.pivot_result is not None:
            p = s.pivot_result
            pivot = {"tip_offset": _fmt_vec(p.tip_offset),
                     "pivot_point": _fmt_vec(p.pivot_point),
                     "rms_residual": _fmt(p.rms_residual), "n_poses": int(p.n_poses)}

        landmark = None
        if s.landmark_result is not None:
            lm = s.landmark_result
            landmark = {"transform": _fmt_rigid(lm.transform), "rmse": _fmt(lm.rmse),
                        "residuals": _fmt_vec(lm.per_pair_residuals)}

        return {
            "schema_version": SCHEMA_VERSION,
            "id": s.id,
            "config": s.config,
            "steps": steps,
            "volume_paths": dict(s.volume_paths) if s.volume_paths else None,
            "registration": reg,
            "pivot": pivot,
            "tip_offset": None if s.tip_offset is None else _fmt_vec(s.tip_offset),
            "fiducial_pairs": [{"image": _fmt_vec(p.image_point),
                                "tracker": _fmt_vec(p.tracker_point),
                                "label": p.label} for p in s.fiducial_pairs],
            "landmark": landmark,
            "plan": (None if s.plan is None else
                     {"entry": _fmt_vec(s.plan.entry), "target": _fmt_vec(s.plan.target)}),
            "events": [[_fmt(t), text] for t, text in s.events],
        }


def save_session(s: WorkflowSession, path) -> None:
    doc = session_document(s)
    text = json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=True) + "\n"
    with open(path, "w") as fh:
        fh.write(text)


def load_session(path, clock=time.time) -> WorkflowSession:
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"session schema {version} not supported (expected {SCHEMA_VERSION})")

    s = WorkflowSession(config=doc.get("config") or {}, session_id=doc["id"],
                        clock=clock)
    s.events = [(float(t), text) for t, text in doc.get("events", [])]

    for name, status in doc["steps"].items():
        step = WorkflowStep(name)
        if status not in STATUSES:
            raise WorkflowError(f"bad status {status!r} for {name}")
        s.graph.status[step] = status
    s.graph.status[WorkflowStep.TRACKING] = PENDING

    paths = doc.get("volume_paths")
    if paths and s.graph.status[WorkflowStep.DATA_LOADING] == COMPLETE:
        s.volume_paths = dict(paths)
        try:
            s.volumes = {role: dataclasses.replace(load_volume(paths[role]),
                                                   modality=_ROLE_MODALITY[role])
                         for role in VOLUME_ROLES}
        except Exception as exc:
            s.volumes = {}
            s.graph.status[WorkflowStep.DATA_LOADING] = PENDING
            s._log(f"volume reload failed: {exc}")

    reg = doc.get("registration")
    if reg is not None:
        grid = None
        if reg.get("grid") is not None:
            g = reg["grid"]
            dims = tuple(int(d) for d in g["dims"])
            grid = BSplineGrid(dims, _parse_vec(g["origin"]), _parse_vec(g["spacing"]),
                               _parse_vec(g["displacements"], dims + (3,)))
        s.registration_mode = reg["mode"]
        s.registration_report = RegistrationReport(
            final_transform=_parse_rigid(reg["transform"]),
            initial_mi=float(reg["initial_mi"]), final_mi=float(reg["final_mi"]),
            iterations=int(reg["iterations"]), converged=bool(reg["converged"]),
            grid=grid)

    pivot = doc.get("pivot")
    if pivot is not None:
        from .pivot import PivotResult
        s.pivot_result = PivotResult(
            tip_offset=_parse_vec(pivot["tip_offset"]),
            pivot_point=_parse_vec(pivot["pivot_point"]),
            rms_residual=float(pivot["rms_residual"]), n_poses=int(pivot["n_poses"]))
    if doc.get("tip_offset") is not None:
        s.tip_offset = _parse_vec(doc["tip_offset"])

    s.fiducial_pairs = [LandmarkPair(image_point=_parse_vec(p["image"]),
                                     tracker_point=_parse_vec(p["tracker"]),
                                     label=p.get("label", ""))
                        for p in doc.get("fiducial_pairs", [])]
    landmark = doc.get("landmark")
    if landmark is not None:
        from .landmarks import LandmarkRegistrationResult
        s.landmark_result = LandmarkRegistrationResult(
            transform=_parse_rigid(landmark["transform"]),
            rmse=float(landmark["rmse"]),
            per_pair_residuals=_parse_vec(landmark["residuals"]))

    plan = doc.get("plan")
    if plan is not None:
        s.plan = make_plan(_parse_vec(plan["entry"]), _parse_vec(plan["target"]))
    return s
