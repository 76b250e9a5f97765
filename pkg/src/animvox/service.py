"""Long-running frame server for interactive posing.

One WebSocket session per viewer at ``/session``: JSON control messages in
(pose, camera, options, frame requests), ``frame_meta`` + binary PNG out.
Frame requests coalesce: while a render is in flight, only the newest
pending request survives; the ones it displaced are answered with
``superseded`` so every ``request_frame`` gets exactly one terminal
response. ``/healthz`` on the same port reports the served asset as JSON,
and ``--ui-dir`` optionally serves a static viewer next to it.
"""

from __future__ import annotations

import asyncio
import concurrent.futures
import contextlib
import hashlib
import json
import os
import time
from dataclasses import dataclass

from websockets.asyncio.server import serve as ws_serve
from websockets.datastructures import Headers
from websockets.exceptions import ConnectionClosed
from websockets.http11 import Response

from .assetio import (
    camera_from_doc,
    encode_png,
    frame_to_straight_rgba,
    load_asset,
    pose_from_doc,
)
from .errors import AnimvoxError, ContractViolation
from .geometry import Camera
from .render import CharacterAsset, RenderOptions, timed_render_frame
from .rigging import Pose
from .synthetic import orbit_camera

_IDENTITY_ROOT = ([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0])

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


def _json_response(status: int, reason: str, doc: dict) -> Response:
    body = (json.dumps(doc) + "\n").encode()
    headers = Headers(
        [
            ("Content-Type", "application/json"),
            ("Content-Length", str(len(body))),
        ]
    )
    return Response(status, reason, headers, body)


def _need(doc: dict, key: str, what: str):
    if key not in doc:
        raise ContractViolation(f"{what} is missing {key!r}")
    return doc[key]


@dataclass(frozen=True)
class RenderState:
    """Immutable snapshot a render works from; taken when the render starts
    so it never observes a half-applied message sequence."""

    pose: Pose | None
    camera: Camera
    options: RenderOptions


class RenderService:
    """Owns the loaded asset, the shared render worker, and the endpoints.

    A single-worker pool serializes renders across sessions: per-session
    coalescing keeps each session's queue at depth one, so one worker
    bounds total backlog while sessions stay responsive to state updates.
    """

    def __init__(
        self,
        asset_path: str | os.PathLike,
        *,
        lambda_th: float = 0.01,
        base_size: int = 512,
        ui_dir: str | os.PathLike | None = None,
    ):
        with open(asset_path, "rb") as f:  # load failure refuses to start
            data = f.read()
        self.asset: CharacterAsset = load_asset(data)
        self.asset_id = hashlib.sha256(data).hexdigest()[:16]
        if base_size < 1:
            raise ContractViolation("preview size must be at least 1 pixel")
        self.base_size = int(base_size)
        self.default_options = RenderOptions(
            lambda_th=float(lambda_th),
            image_size=(self.base_size, self.base_size),
        )
        self.default_camera = orbit_camera(
            0.6, 0.35, 3.2, image_size=(self.base_size, self.base_size)
        )
        self.ui_dir = os.path.abspath(ui_dir) if ui_dir is not None else None
        if self.ui_dir is not None and not os.path.isdir(self.ui_dir):
            raise ContractViolation(f"ui dir {self.ui_dir} is not a directory")
        self.pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
        self.render_delay_s = 0.0  # artificial pre-render stall (tests, demos)

    # -- rendering (runs on the worker thread) ------------------------------

    def render_png(self, state: RenderState) -> tuple[bytes, float]:
        """(PNG bytes, render milliseconds) for one state snapshot."""
        if self.render_delay_s:
            time.sleep(self.render_delay_s)
        t0 = time.perf_counter()
        frame, _ = timed_render_frame(
            self.asset, state.pose, state.camera, state.options
        )
        png = encode_png(frame_to_straight_rgba(frame.features, frame.alpha))
        return png, (time.perf_counter() - t0) * 1e3

    # -- metadata ------------------------------------------------------------

    def metadata(self) -> dict:
        skel = self.asset.skeleton
        return {
            "asset_id": self.asset_id,
            "voxel_count": len(self.asset.voxels),
            "resolution": self.asset.voxels.resolution,
            "channels": self.asset.flut.channels,
            "joints": list(skel.names) if skel is not None else [],
            "base_image_size": self.base_size,
        }

    # -- HTTP (healthz + optional static viewer) -----------------------------

    def _process_request(self, connection, request) -> Response | None:
        path = request.path.split("?", 1)[0]
        if path == "/session":
            return None  # continue the WebSocket handshake
        if path == "/healthz":
            return _json_response(
                200,
                "OK",
                {"asset_id": self.asset_id, "voxel_count": len(self.asset.voxels)},
            )
        if self.ui_dir is not None:
            return self._static_response(path)
        return _json_response(404, "Not Found", {"error": "unknown path"})

    def _static_response(self, path: str) -> Response:
        rel = path.lstrip("/") or "index.html"
        full = os.path.normpath(os.path.join(self.ui_dir, rel))
        inside = full == self.ui_dir or full.startswith(self.ui_dir + os.sep)
        if not inside or not os.path.isfile(full):
            return _json_response(404, "Not Found", {"error": "unknown path"})
        with open(full, "rb") as f:
            body = f.read()
        ctype = _CONTENT_TYPES.get(
            os.path.splitext(full)[1].lower(), "application/octet-stream"
        )
        headers = Headers(
            [("Content-Type", ctype), ("Content-Length", str(len(body)))]
        )
        return Response(200, "OK", headers, body)

    # -- serving --------------------------------------------------------------

    async def _handler(self, ws) -> None:
        await Session(self, ws).handle()

    def serve(self, host: str = "127.0.0.1", port: int = 8765):
        """Bind and return the server (use as ``async with service.serve(...)
        as server``); ``port=0`` picks an ephemeral port."""
        return ws_serve(
            self._handler, host, port, process_request=self._process_request
        )


class Session:
    """One connected viewer: its pose/camera/options and frame sequencing.

    State is mutated only on the message-handling task; a render works from
    a RenderState snapshot, so sessions never see each other and renders
    never see a half-updated pose.
    """

    def __init__(self, service: RenderService, ws):
        self.service = service
        self.ws = ws
        self.pose: Pose | None = None
        self.camera = service.default_camera
        self.options = service.default_options
        self.scale = 1.0
        self.last_seq: int | None = None
        self._pending: int | None = None
        self._render_task: asyncio.Task | None = None
        # keeps frame_meta and its PNG adjacent across concurrent replies
        self._send_lock = asyncio.Lock()

    # -- outbound -------------------------------------------------------------

    async def _send_json(self, doc: dict) -> None:
        async with self._send_lock:
            with contextlib.suppress(ConnectionClosed):
                await self.ws.send(json.dumps(doc))

    async def _send_frame(self, seq: int, png: bytes, render_ms: float) -> None:
        meta = {"type": "frame_meta", "seq": seq, "render_ms": render_ms}
        async with self._send_lock:
            with contextlib.suppress(ConnectionClosed):
                await self.ws.send(json.dumps(meta))
                await self.ws.send(png)

    async def _send_error(self, message: str, seq: int | None = None) -> None:
        doc: dict = {"type": "error", "message": message}
        if seq is not None:
            doc["seq"] = seq
        await self._send_json(doc)

    # -- message loop ----------------------------------------------------------

    async def handle(self) -> None:
        try:
            await self._send_json({"type": "metadata", **self.service.metadata()})
            async for raw in self.ws:
                await self._dispatch(raw)
        except ConnectionClosed:
            pass
        finally:
            if self._render_task is not None:
                self._render_task.cancel()
                with contextlib.suppress(asyncio.CancelledError):
                    await self._render_task

    async def _dispatch(self, raw) -> None:
        if isinstance(raw, (bytes, bytearray)):
            await self._send_error("binary messages are not part of the protocol")
            return
        try:
            doc = json.loads(raw)
        except ValueError:
            await self._send_error("message is not valid JSON")
            return
        if not isinstance(doc, dict) or not isinstance(doc.get("type"), str):
            await self._send_error('message must be an object with a string "type"')
            return
        handler = _HANDLERS.get(doc["type"])
        if handler is None:
            await self._send_error(f"unknown message type {doc['type']!r}")
            return
        try:
            await handler(self, doc)
        except (AnimvoxError, TypeError, ValueError) as exc:
            # malformed payloads keep the session alive and the state as-was
            await self._send_error(str(exc))

    # -- state messages ----------------------------------------------------------

    async def _set_pose(self, doc: dict) -> None:
        root_rot, root_tr = _IDENTITY_ROOT
        pose = pose_from_doc(
            {
                "rotations": _need(doc, "rotations", "set_pose"),
                "root_rotation": doc.get("root_rotation", root_rot),
                "root_translation": doc.get("root_translation", root_tr),
            }
        )
        asset = self.service.asset
        if asset.rigged:
            want = asset.skeleton.n_joints
            got = pose.joint_rotations.shape[0]
            if got != want:
                raise ContractViolation(f"pose has {got} joints, the rig has {want}")
        elif not pose.is_canonical:
            raise ContractViolation(
                "asset has no rig; only the canonical pose renders"
            )
        self.pose = pose

    async def _set_camera(self, doc: dict) -> None:
        orbit, raw = doc.get("orbit"), doc.get("camera")
        if (orbit is None) == (raw is None):
            raise ContractViolation(
                'set_camera needs exactly one of "orbit" or "camera"'
            )
        if raw is not None:
            self.camera = camera_from_doc(raw)
            return
        if not isinstance(orbit, dict):
            raise ContractViolation('"orbit" must be an object')
        size = (self.service.base_size, self.service.base_size)
        self.camera = orbit_camera(
            azimuth=float(_need(orbit, "azimuth", "orbit")),
            elevation=float(_need(orbit, "elevation", "orbit")),
            radius=float(_need(orbit, "radius", "orbit")),
            target=orbit.get("target", (0.0, 0.0, 0.0)),
            image_size=size,
        )

    async def _set_options(self, doc: dict) -> None:
        lam = float(doc.get("lambda_th", self.options.lambda_th))
        scale = float(doc.get("scale", self.scale))
        side = int(round(self.service.base_size * scale))
        if side < 1:
            raise ContractViolation(f"scale {scale} leaves no pixels")
        options = RenderOptions(lambda_th=lam, image_size=(side, side))
        self.scale, self.options = scale, options

    async def _get_metadata(self, doc: dict) -> None:
        await self._send_json({"type": "metadata", **self.service.metadata()})

    # -- frames ---------------------------------------------------------------

    async def _request_frame(self, doc: dict) -> None:
        seq = _need(doc, "seq", "request_frame")
        if not isinstance(seq, int) or isinstance(seq, bool):
            raise ContractViolation('request_frame "seq" must be an integer')
        if self.last_seq is not None and seq <= self.last_seq:
            await self._send_error(
                f"seq must strictly increase (last {self.last_seq}, got {seq})",
                seq=seq,
            )
            return
        self.last_seq = seq
        if self._render_task is not None and not self._render_task.done():
            if self._pending is not None:  # newest request wins
                await self._send_json({"type": "superseded", "seq": self._pending})
            self._pending = seq
        else:
            self._pending = None
            self._render_task = asyncio.create_task(self._render_loop(seq))

    async def _render_loop(self, seq: int) -> None:
        loop = asyncio.get_running_loop()
        while True:
            state = RenderState(self.pose, self.camera, self.options)
            try:
                png, render_ms = await loop.run_in_executor(
                    self.service.pool, self.service.render_png, state
                )
            except asyncio.CancelledError:
                raise
            except AnimvoxError as exc:
                await self._send_error(str(exc), seq=seq)
            except Exception as exc:  # render bug: answer, keep the session
                await self._send_error(f"internal render failure: {exc}", seq=seq)
            else:
                await self._send_frame(seq, png, render_ms)
            if self._pending is None:
                return
            seq, self._pending = self._pending, None


_HANDLERS = {
    "set_pose": Session._set_pose,
    "set_camera": Session._set_camera,
    "set_options": Session._set_options,
    "get_metadata": Session._get_metadata,
    "request_frame": Session._request_frame,
}


def run_server(
    asset_path: str | os.PathLike,
    *,
    host: str = "127.0.0.1",
    port: int = 8765,
    lambda_th: float = 0.01,
    image_size: int = 512,
    ui_dir: str | os.PathLike | None = None,
    log=None,
) -> None:
    """Serve ``asset_path`` until interrupted. Asset and bind failures raise
    before the first connection is accepted."""
    service = RenderService(
        asset_path, lambda_th=lambda_th, base_size=image_size, ui_dir=ui_dir
    )

    async def main() -> None:
        async with service.serve(host, port) as server:
            bound = server.sockets[0].getsockname()
            if log is not None:
                log.event(
                    "serving",
                    host=bound[0],
                    port=bound[1],
                    asset_id=service.asset_id,
                    voxels=len(service.asset.voxels),
                )
            await asyncio.get_running_loop().create_future()

    with contextlib.suppress(KeyboardInterrupt):
        asyncio.run(main())
