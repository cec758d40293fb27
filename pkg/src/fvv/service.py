"""HTTP render service consumed by the interactive viewer.

Loads a packed container once, then answers:
  GET /meta                         -> scene metadata JSON
  GET /render?frame=&pose=&w=&h=    -> PNG render (pose: 12 comma-separated
                                       floats, row-major rotation then translation)
State is immutable after load; requests never mutate it, so concurrent
requests behave like serial ones.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image

from . import codec, field as fieldmod, renderer
from .scene import Camera

DEFAULT_FOV_DEG = 50.0
DEFAULT_IMAGE_SIZE = 256
FPS_HINT = 10


class RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


@dataclass
class ServeState:
    container: codec.DecodedContainer
    occupancy: list
    step: float
    bg: np.ndarray
    orbit_radius: float

    @property
    def frame_count(self) -> int:
        return self.container.n_frames


def load_serve_state(container_path, bg=(1.0, 1.0, 1.0)) -> ServeState:
    data = Path(container_path).read_bytes()
    dec = codec.unpack_container(data)
    lam = dec.metadata.get("lambda_th", 1e-4)
    occupancy = [fieldmod.update_occupancy(f.sigma, lam) for f in dec.frame_fields]
    step = renderer.default_step(dec.frame_fields[0])
    extent = dec.frame_fields[0].bbox.extent
    return ServeState(
        container=dec, occupancy=occupancy, step=step,
        bg=np.asarray(bg, dtype=np.float64),
        orbit_radius=1.4 * float(extent.max()),
    )


def encode_png(img: np.ndarray) -> bytes:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def camera_from_pose(pose, width: int, height: int, focal: float | None = None) -> Camera:
    """Camera for a 12-float pose (row-major rotation, then translation).

    Intrinsics default to a fixed vertical field of view with a centered
    principal point, so the offline renderer and the service agree exactly.
    """
    vals = [float(v) for v in pose]
    if len(vals) != 12:
        raise ValueError(f"pose needs 12 floats, got {len(vals)}")
    R = np.array(vals[:9], dtype=np.float64).reshape(3, 3)
    t = np.array(vals[9:], dtype=np.float64)
    if focal is None:
        focal = 0.5 * height / math.tan(math.radians(DEFAULT_FOV_DEG) / 2.0)
    return Camera(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                  rotation=R, translation=t, width=width, height=height)


def render_frame(state: ServeState, frame: int, cam: Camera) -> np.ndarray:
    if not 0 <= frame < state.frame_count:
        raise RequestError(404, f"frame {frame} out of range [0, {state.frame_count})")
    f = state.container.frame_fields[frame]
    mlp = state.container.mlp_for_frame(frame)
    return renderer.render_image(cam, f, state.occupancy[frame], mlp, state.step, bg=state.bg)


def handle_render_request(state: ServeState, frame: int, pose, width: int, height: int) -> bytes:
    try:
        cam = camera_from_pose(pose, width, height)
    except ValueError as e:
        raise RequestError(400, str(e)) from e
    return encode_png(render_frame(state, frame, cam))


def meta_json(state: ServeState) -> dict:
    return {
        "frame_count": state.frame_count,
        "bbox": state.container.frame_fields[0].bbox.to_json(),
        "fps_hint": FPS_HINT,
        "orbit_radius": state.orbit_radius,
    }


class _Handler(BaseHTTPRequestHandler):
    state: ServeState = None

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send(self, status: int, content_type: str, body: bytes):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, obj: dict):
        self._send(status, "application/json", json.dumps(obj).encode())

    def do_GET(self):
        url = urlparse(self.path)
        try:
            if url.path == "/meta":
                self._send_json(200, meta_json(self.state))
            elif url.path == "/render":
                q = parse_qs(url.query)
                try:
                    frame = int(q["frame"][0])
                    pose = q["pose"][0].split(",")
                    width = int(q.get("w", [DEFAULT_IMAGE_SIZE])[0])
                    height = int(q.get("h", [DEFAULT_IMAGE_SIZE])[0])
                except (KeyError, ValueError, IndexError) as e:
                    raise RequestError(400, f"bad render query: {e}") from e
                if not (1 <= width <= 2048 and 1 <= height <= 2048):
                    raise RequestError(400, "image size out of range")
                png = handle_render_request(self.state, frame, pose, width, height)
                self._send(200, "image/png", png)
            else:
                raise RequestError(404, f"unknown path {url.path}")
        except RequestError as e:
            self._send_json(e.status, {"error": str(e)})


def make_server(state: ServeState, port: int = 0, host: str = "127.0.0.1") -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"state": state})
    return ThreadingHTTPServer((host, port), handler)


def serve(container_path, port: int, host: str = "127.0.0.1") -> None:
    state = load_serve_state(container_path)
    httpd = make_server(state, port, host)
    actual_port = httpd.server_address[1]
    print(f"serving {container_path} on http://{host}:{actual_port}", flush=True)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
