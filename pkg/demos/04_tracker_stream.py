"""Wire protocol: stream phantom needle poses over a real TCP socket.

A tracker server pushes TRANSFORM messages (big-endian framing, CRC-64
trailers) while a client decodes them back into poses.  The respiring
phantom provides the motion; the printout shows the tip rising and falling
with the breathing cycle.
"""

import threading
import time

import numpy as np

from petnav.igtl import TrackerClient, TrackerServer
from petnav.phantom import (PhantomConfig, generate_phantom, linear_insertion,
                            stream_needle_poses)
from petnav.transforms import rigid_apply

cfg = PhantomConfig(volume_dims=(16, 16, 16), comp_ct_spacing=(8.0, 8.0, 8.0),
                    interventional_spacing=(8.0, 8.0, 8.0), stream_rate=40.0)
_, _, _, truth = generate_phantom(cfg)

received = []
got_some = threading.Event()


def on_pose(msg):
    received.append(msg)
    if len(received) >= 60:
        got_some.set()


with TrackerServer() as server:
    client = TrackerClient("127.0.0.1", server.port, on_pose=on_pose)
    try:
        deadline = time.monotonic() + 5.0
        while server.client_count < 1 and time.monotonic() < deadline:
            time.sleep(0.01)

        lesion = np.asarray(truth.lesion_image)
        trajectory = linear_insertion(lesion + [0.0, -50.0, 0.0], lesion,
                                      duration=2.0)
        # realtime pacing: pushing faster than the socket drains would let
        # the latest-wins buffer drop frames, which is the policy, not a bug
        stream_needle_poses(cfg, truth, trajectory, duration=2.0, out=server,
                            respire=True, realtime=True)
        server.drain(timeout=10.0)
        got_some.wait(timeout=5.0)
    finally:
        client.stop()

print(f"received {len(received)} TRANSFORM messages over TCP")
for msg in received[:: max(len(received) // 8, 1)]:
    t = msg.transform()
    tip = rigid_apply(truth.tracker_to_image,
                      t.rotation @ truth.tip_offset + t.translation)
    print(f"  t={msg.timestamp % 1000:6.2f} s  tip {np.round(tip, 2).tolist()} "
          f"(z includes respiration)")
