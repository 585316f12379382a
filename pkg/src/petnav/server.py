"""HTTP + WebSocket service around one workflow session.

One session per service instance.  JSON in and out everywhere except
GET /slice, which returns a rendered PNG (grayscale base, optional hot PET
overlay carried through the session's registration transform).  The
/guidance WebSocket pushes guidance states at a fixed tick rate independent
of the tracker rate; a gating failure is reported in-band so the client can
show why guidance is not live yet.
"""

import asyncio
import io
import os
import threading
import time
from typing import List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Response, WebSocket, WebSocketDisconnect
from pydantic import BaseModel

from .guidance import GuidanceState, PlanError
from .volume import (VolumeError, WindowLevel, blend_overlay, extract_slice,
                     sample_trilinear_many, slice_geometry)
from .transforms import rigid_invert
from .workflow import (COMPLETE, GatingError, StalePoseError, WorkflowError,
                       WorkflowSession, WorkflowStep)

DEFAULT_HTTP_PORT = 8080
GUIDANCE_TICK_HZ = 20.0


def http_port() -> int:
    """Service port: NAV_HTTP_PORT environment variable or 8080."""
    return int(os.environ.get("NAV_HTTP_PORT", DEFAULT_HTTP_PORT))


class VolumesRequest(BaseModel):
    comp_ct: str
    comp_pet: str
    interventional: str


class RegistrationRequest(BaseModel):
    mode: str = "rigid"


class TrackingRequest(BaseModel):
    host: str
    port: int


class PosesRequest(BaseModel):
    poses: List[List[float]]  # 12 or 13 numbers: rotation row-major, position[, t]


class FiducialRequest(BaseModel):
    image_point: List[float]
    label: str = ""


class PlanRequest(BaseModel):
    entry: List[float]
    target: List[float]


def _http_error(exc) -> HTTPException:
    if isinstance(exc, (PlanError, VolumeError, ValueError)):
        return HTTPException(status_code=422, detail=str(exc))
    if isinstance(exc, (GatingError, StalePoseError)):
        return HTTPException(status_code=409, detail=str(exc))
    return HTTPException(status_code=400, detail=str(exc))


def guidance_json(state: GuidanceState) -> dict:
    return {
        "tip_image": [float(x) for x in state.tip_image],
        "depth_remaining": state.depth_remaining,
        "lateral_deviation": state.lateral_deviation,
        "angle_deviation": state.angle_deviation,
        "pose_age": state.pose_age,
        "valid": state.valid,
    }


def _render_slice(session: WorkflowSession, volume: str, axis: str, index: int,
                  window: Optional[float], level: Optional[float],
                  overlay: Optional[str], opacity: float) -> bytes:
    vols = session.volumes
    if volume not in vols:
        raise HTTPException(status_code=404, detail=f"volume {volume!r} not loaded")
    vol = vols[volume]
    data = vol.data
    if window is None or level is None:
        lo, hi = float(data.min()), float(data.max())
        window = window if window is not None else max(hi - lo, 1e-6)
        level = level if level is not None else (hi + lo) / 2.0
    base = extract_slice(vol, axis, index, WindowLevel(window, level))

    if overlay:
        if overlay not in vols:
            raise HTTPException(status_code=404, detail=f"overlay {overlay!r} not loaded")
        over_vol = vols[overlay]
        origin, row_step, col_step, (nr, nc) = slice_geometry(vol, axis, index)
        rr, cc = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
        pts = (origin[None, :] + rr.reshape(-1, 1) * row_step[None, :]
               + cc.reshape(-1, 1) * col_step[None, :])
        # PET lives in the compensated frame; the registration transform maps
        # that frame into the interventional one, so pull points back through
        # its inverse when the base image is the interventional scan.
        if (volume == "interventional"
                and session.step_status()["REGISTRATION"] == COMPLETE):
            inv = rigid_invert(session.registration_report.final_transform)
            pts = pts @ inv.rotation.T + inv.translation
        vals, inside = sample_trilinear_many(over_vol, pts)
        od = over_vol.data
        o_lo, o_hi = float(od.min()), float(od.max())
        norm = np.clip((vals - o_lo) / max(o_hi - o_lo, 1e-6), 0.0, 1.0)
        norm = np.where(inside, norm, 0.0).reshape(nr, nc)
        rgb = blend_overlay(base, norm, opacity)
    else:
        rgb = np.repeat(base[:, :, None], 3, axis=2)

    from PIL import Image
    img = Image.fromarray((np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def build_app(session: WorkflowSession) -> FastAPI:
    app = FastAPI(title="petnav", docs_url=None, redoc_url=None)

    @app.get("/session")
    def get_session():
        return session.snapshot()

    @app.post("/session/volumes")
    def post_volumes(req: VolumesRequest):
        try:
            session.set_volumes(req.comp_ct, req.comp_pet, req.interventional)
        except Exception as exc:
            raise _http_error(exc) from exc
        return session.snapshot()

    @app.post("/session/registration")
    def post_registration(req: RegistrationRequest):
        try:
            report = session.run_registration(req.mode)
        except Exception as exc:
            raise _http_error(exc) from exc
        return {"converged": report.converged, "initial_mi": report.initial_mi,
                "final_mi": report.final_mi, "iterations": report.iterations,
                "deformable": report.grid is not None}

    @app.post("/session/tracking")
    def post_tracking(req: TrackingRequest):
        try:
            session.connect_tracking(req.host, req.port)
        except Exception as exc:
            raise _http_error(exc) from exc
        return session.snapshot()

    @app.post("/session/calibration/poses")
    def post_calibration_poses(req: PosesRequest):
        try:
            rows = [np.asarray(r, dtype=float) for r in req.poses]
            for r in rows:
                if r.size not in (12, 13):
                    raise ValueError(f"pose rows need 12 or 13 numbers, got {r.size}")
            n = session.add_calibration_poses(rows)
        except Exception as exc:
            raise _http_error(exc) from exc
        return {"buffered": n}

    @app.post("/session/calibration/run")
    def post_calibration_run():
        try:
            result = session.run_pivot_calibration()
        except Exception as exc:
            raise _http_error(exc) from exc
        return {"tip_offset": [float(x) for x in result.tip_offset],
                "pivot_point": [float(x) for x in result.pivot_point],
                "rms_residual": result.rms_residual, "n_poses": result.n_poses}

    @app.post("/session/calibration/skip")
    def post_calibration_skip():
        session.skip_step(WorkflowStep.TOOL_CALIBRATION)
        return session.snapshot()

    @app.post("/session/fiducial")
    def post_fiducial(req: FiducialRequest):
        try:
            n = session.record_fiducial_pair(req.image_point, label=req.label)
        except Exception as exc:
            raise _http_error(exc) from exc
        rmse = None if session.landmark_result is None else session.landmark_result.rmse
        return {"pairs": n, "rmse": rmse,
                "complete": session.step_status()["PATIENT_REGISTRATION"] == COMPLETE}

    @app.post("/session/plan")
    def post_plan(req: PlanRequest):
        try:
            plan = session.set_plan(req.entry, req.target)
        except Exception as exc:
            raise _http_error(exc) from exc
        return {"entry": [float(x) for x in plan.entry],
                "target": [float(x) for x in plan.target],
                "direction": [float(x) for x in plan.direction],
                "length": plan.length}

    @app.get("/slice")
    def get_slice(volume: str = "interventional", axis: str = "axial", index: int = 0,
                  window: Optional[float] = None, level: Optional[float] = None,
                  overlay: Optional[str] = None, opacity: float = 0.4):
        try:
            png = _render_slice(session, volume, axis, index, window, level,
                                overlay, opacity)
        except HTTPException:
            raise
        except Exception as exc:
            raise _http_error(exc) from exc
        return Response(content=png, media_type="image/png")

    @app.websocket("/guidance")
    async def ws_guidance(ws: WebSocket):
        await ws.accept()
        period = 1.0 / GUIDANCE_TICK_HZ
        try:
            while True:
                try:
                    state = session.guidance_tick()
                except (GatingError, WorkflowError) as exc:
                    await ws.send_json({"error": str(exc)})
                else:
                    payload = guidance_json(state)
                    payload["timestamp"] = time.time()
                    await ws.send_json(payload)
                await asyncio.sleep(period)
        except WebSocketDisconnect:
            pass

    return app


class ServiceHandle:
    """uvicorn running on a daemon thread; stop() shuts it down."""

    def __init__(self, server, thread):
        self.server = server
        self.thread = thread

    def stop(self, timeout: float = 5.0):
        self.server.should_exit = True
        self.thread.join(timeout=timeout)


def serve_api(session: WorkflowSession, port: int = None,
              host: str = "127.0.0.1") -> ServiceHandle:
    import uvicorn

    port = http_port() if port is None else int(port)
    config = uvicorn.Config(build_app(session), host=host, port=port,
                            log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    return ServiceHandle(server, thread)
