"""Drive the HTTP service the way a UI would.

Starts the navigation service on a spare port, walks a session through
volumes, registration, calibration skip, tracking, fiducials, and planning
over plain HTTP, pulls a fused slice PNG, then watches three guidance
frames on the WebSocket while poses stream in.
"""

import json
import tempfile
import threading
import time
import urllib.request
from pathlib import Path

import numpy as np

from petnav.demo import demo_config
from petnav.igtl import TrackerServer
from petnav.phantom import generate_phantom, pose_for_tip, save_truth
from petnav.server import serve_api
from petnav.transforms import RigidTransform
from petnav.volume import save_volume
from petnav.workflow import create_session

PORT = 8123
BASE = f"http://127.0.0.1:{PORT}"


def post(path, payload):
    req = urllib.request.Request(BASE + path, data=json.dumps(payload).encode(),
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req) as resp:
        return json.loads(resp.read())


def get(path):
    with urllib.request.urlopen(BASE + path) as resp:
        return resp.read()


work = Path(tempfile.mkdtemp(prefix="nav_http_"))
cfg = demo_config()
ct, pet, inter, truth = generate_phantom(cfg)
for vol, name in ((ct, "comp_ct"), (pet, "comp_pet"), (inter, "interventional")):
    save_volume(vol, work / f"{name}.nrrd")
save_truth(truth, work / "truth.txt")

session = create_session()
handle = serve_api(session, port=PORT)
time.sleep(0.5)   # uvicorn bind
try:
    print("steps:", json.loads(get("/session"))["steps"])
    post("/session/volumes", {k: str(work / f"{k}.nrrd")
                              for k in ("comp_ct", "comp_pet", "interventional")})
    reg = post("/session/registration", {"mode": "rigid"})
    print(f"registration over HTTP: MI {reg['initial_mi']:.3f} -> "
          f"{reg['final_mi']:.3f} bits")
    post("/session/calibration/skip", {})

    png = get("/slice?volume=comp_ct&axis=axial&index=26&overlay=comp_pet&opacity=0.5")
    (work / "fused.png").write_bytes(png)
    print(f"fused slice: {len(png)} PNG bytes -> {work / 'fused.png'}")

    with TrackerServer() as tracker:
        post("/session/tracking", {"host": "127.0.0.1", "port": tracker.port})
        deadline = time.monotonic() + 5.0
        while tracker.client_count < 1 and time.monotonic() < deadline:
            time.sleep(0.01)

        for f in truth.fiducials_image:
            pose = pose_for_tip(truth, f, timestamp=time.time())
            # calibration skipped -> zero tip offset; aim the sensor itself
            tracker.push("needle", pose.timestamp,
                         RigidTransform(pose.rotation,
                                        pose.position
                                        + pose.rotation @ truth.tip_offset))
            time.sleep(0.05)
            r = post("/session/fiducial", {"image_point": [float(x) for x in f]})
        print(f"fiducials over HTTP: {r['pairs']} pairs, rmse {r['rmse']:.2e} mm")

        target = np.asarray(truth.lesion_image)
        post("/session/plan", {"entry": list(target + [0.0, -50.0, 0.0]),
                               "target": list(target)})

        stop = threading.Event()

        def pusher():
            t0 = time.monotonic()
            while not stop.is_set():
                s = min((time.monotonic() - t0) / 1.5, 1.0)
                tip = target + (1.0 - s) * np.array([0.0, -50.0, 0.0])
                pose = pose_for_tip(truth, tip, timestamp=time.time())
                tracker.push("needle", pose.timestamp,
                             RigidTransform(pose.rotation,
                                            pose.position
                                            + pose.rotation @ truth.tip_offset))
                time.sleep(0.025)

        th = threading.Thread(target=pusher, daemon=True)
        th.start()
        try:
            from websockets.sync.client import connect as ws_connect
            with ws_connect(f"ws://127.0.0.1:{PORT}/guidance") as ws:
                for _ in range(3):
                    frame = json.loads(ws.recv())
                    print(f"guidance: depth {frame['depth_remaining']:7.2f} mm, "
                          f"lateral {frame['lateral_deviation']:.3f} mm, "
                          f"valid={frame['valid']}")
        except ImportError:
            print("websockets package not installed; polled /session instead:")
            for _ in range(3):
                print("  tracker pose_age:",
                      json.loads(get("/session"))["tracker"]["pose_age"])
                time.sleep(0.2)
        finally:
            stop.set()
            th.join(timeout=2.0)
finally:
    handle.stop()
    session.close()
print("service stopped")
