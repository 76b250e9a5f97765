"""Frame-server behavior: endpoints, wire protocol, coalescing, isolation.

Every scenario runs a real server on an ephemeral loopback port and speaks
the JSON/PNG protocol through a real WebSocket client. Frame bytes are
checked against the command-line renderer, which shares no service code.
"""

from __future__ import annotations

import asyncio
import contextlib
import hashlib
import io
import json
import queue
import random
import threading
import urllib.error
import urllib.request
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image
from websockets.asyncio.client import connect

from animvox.assetio import (
    camera_to_doc,
    encode_png,
    frame_to_straight_rgba,
    pose_from_doc,
    save_asset_file,
)
from animvox.cli import run as cli_run
from animvox.errors import AnimvoxError, ContractViolation
from animvox.render import CharacterAsset, RenderOptions, timed_render_frame
from animvox.rigging import Skeleton, SkinWeights
from animvox.service import RenderService, run_server
from animvox.synthetic import orbit_camera
from animvox.volume import FLUT, Bounds, VoxelSet

from animvox.geometry import RigidTransform


# ---------------------------------------------------------------------------
# harness


def _run(coro, timeout: float = 60.0):
    return asyncio.run(asyncio.wait_for(coro, timeout))


@contextlib.asynccontextmanager
async def _serving(service: RenderService):
    async with service.serve("127.0.0.1", 0) as server:
        port = server.sockets[0].getsockname()[1]
        yield f"127.0.0.1:{port}"


def _session(addr: str):
    return connect(f"ws://{addr}/session")


async def _handshake(ws) -> dict:
    doc = json.loads(await ws.recv())
    assert doc["type"] == "metadata"
    return doc


async def _recv_json(ws) -> dict:
    msg = await ws.recv()
    assert isinstance(msg, str), "expected a text message"
    return json.loads(msg)


async def _recv_frame(ws) -> tuple[dict, bytes]:
    meta = await _recv_json(ws)
    assert meta["type"] == "frame_meta", meta
    png = await ws.recv()
    assert isinstance(png, (bytes, bytearray))
    return meta, bytes(png)


async def _request(ws, seq: int) -> None:
    await ws.send(json.dumps({"type": "request_frame", "seq": seq}))


async def _fetch(url: str) -> bytes:
    return await asyncio.to_thread(lambda: urllib.request.urlopen(url).read())


async def _raw_get(addr: str, path: str) -> tuple[int, bytes]:
    """HTTP GET with the path sent verbatim (no client-side normalization)."""
    host, port = addr.rsplit(":", 1)
    reader, writer = await asyncio.open_connection(host, int(port))
    req = f"GET {path} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n\r\n"
    writer.write(req.encode())
    await writer.drain()
    data = await reader.read()
    writer.close()
    await writer.wait_closed()
    status = int(data.split(b" ", 2)[1])
    return status, data.partition(b"\r\n\r\n")[2]


def _expected_png(asset, pose, camera, options) -> bytes:
    frame, _ = timed_render_frame(asset, pose, camera, options)
    return encode_png(frame_to_straight_rgba(frame.features, frame.alpha))


def _png_size(png: bytes) -> tuple[int, int]:
    with Image.open(io.BytesIO(png)) as im:
        return im.size


def _cam32(azimuth=0.6, elevation=0.35, radius=3.2):
    return orbit_camera(azimuth, elevation, radius, image_size=(32, 32))


def _opts32():
    return RenderOptions(lambda_th=0.01, image_size=(32, 32))


# ---------------------------------------------------------------------------
# assets under test


def _varied_flut(vox: VoxelSet, rng: np.random.Generator) -> FLUT:
    flut = FLUT.initialize(len(vox), 1, 3, float(np.min(vox.cell_size)), rng)
    flut.data[:, :-1] += rng.uniform(-0.3, 0.3, flut.data[:, :-1].shape)
    flut.data[:, -1] = np.abs(rng.normal(3.0, 1.0, len(vox)))
    return flut


@pytest.fixture(scope="module")
def plain_asset(tmp_path_factory):
    rng = np.random.default_rng(11)
    cells = np.argwhere(rng.random((8, 8, 8)) < 0.4)
    bounds = Bounds(np.full(3, -1.0), np.full(3, 1.0))
    vox = VoxelSet(resolution=8, bounds=bounds, cells=cells)
    asset = CharacterAsset(vox, _varied_flut(vox, rng))
    path = tmp_path_factory.mktemp("plain") / "plain.nvo"
    save_asset_file(asset, path)
    return SimpleNamespace(path=str(path), asset=asset)


@pytest.fixture(scope="module")
def rigged_asset(tmp_path_factory):
    rng = np.random.default_rng(12)
    grid = np.stack(np.meshgrid(*[np.arange(2, 6)] * 3, indexing="ij"), axis=-1)
    cells = grid.reshape(-1, 3)
    bounds = Bounds(np.full(3, -1.0), np.full(3, 1.0))
    vox = VoxelSet(resolution=8, bounds=bounds, cells=cells)

    def shift(z):
        return RigidTransform(
            rotation=np.array([1.0, 0.0, 0.0, 0.0]),
            translation=np.array([0.0, 0.0, z]),
        )

    skeleton = Skeleton(
        names=("lower", "upper"),
        parents=(-1, 0),
        bind_local=(shift(-0.5), shift(1.0)),
    )
    joint = np.where(vox.centers()[:, 2] < 0.0, 0, 1).astype(np.int32)
    weights = SkinWeights(joint.reshape(-1, 1), np.ones((len(vox), 1)))
    asset = CharacterAsset(vox, _varied_flut(vox, rng), skeleton, weights)
    path = tmp_path_factory.mktemp("rigged") / "rigged.nvo"
    save_asset_file(asset, path)
    return SimpleNamespace(path=str(path), asset=asset)


# ---------------------------------------------------------------------------
# endpoints


class TestEndpoints:
    def test_healthz_reports_asset_identity(self, plain_asset):
        async def scenario():
            service = RenderService(plain_asset.path, base_size=32)
            async with _serving(service) as addr:
                return json.loads(await _fetch(f"http://{addr}/healthz"))

        doc = _run(scenario())
        with open(plain_asset.path, "rb") as f:
            want_id = hashlib.sha256(f.read()).hexdigest()[:16]
        assert doc == {
            "asset_id": want_id,
            "voxel_count": len(plain_asset.asset.voxels),
        }

    def test_unknown_path_is_404(self, plain_asset):
        async def scenario():
            service = RenderService(plain_asset.path, base_size=32)
            async with _serving(service) as addr:
                with pytest.raises(urllib.error.HTTPError) as err:
                    await _fetch(f"http://{addr}/nope")
                return err.value.code

        assert _run(scenario()) == 404

    def test_metadata_greets_each_connection(self, rigged_asset):
        async def scenario():
            service = RenderService(rigged_asset.path, base_size=48)
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    greeting = await _handshake(ws)
                    await ws.send(json.dumps({"type": "get_metadata"}))
                    again = await _recv_json(ws)
                    return greeting, again

        greeting, again = _run(scenario())
        assert greeting["joints"] == ["lower", "upper"]
        assert greeting["voxel_count"] == len(rigged_asset.asset.voxels)
        assert greeting["resolution"] == 8
        assert greeting["channels"] == 3
        assert greeting["base_image_size"] == 48
        assert again == greeting

    def test_run_server_binds_and_serves(self, plain_asset):
        events: queue.Queue = queue.Queue()

        class Capture:
            def event(self, name, **fields):
                events.put((name, fields))

        threading.Thread(
            target=run_server,
            args=(plain_asset.path,),
            kwargs=dict(host="127.0.0.1", port=0, image_size=32, log=Capture()),
            daemon=True,  # serves until process exit; nothing to join
        ).start()
        name, fields = events.get(timeout=20)
        assert name == "serving"
        assert fields["voxels"] == len(plain_asset.asset.voxels)
        body = urllib.request.urlopen(
            f"http://{fields['host']}:{fields['port']}/healthz"
        ).read()
        assert json.loads(body)["asset_id"] == fields["asset_id"]


class TestStaticViewer:
    @pytest.fixture()
    def ui_dir(self, tmp_path):
        ui = tmp_path / "ui"
        (ui / "sub").mkdir(parents=True)
        (ui / "index.html").write_text("<!doctype html><p>viewer</p>")
        (ui / "app.js").write_text("export {};")
        (ui / "sub" / "style.css").write_text("body {}")
        (tmp_path / "secret.txt").write_text("outside the ui dir")
        return ui

    def test_serves_files_with_content_types(self, plain_asset, ui_dir):
        async def scenario():
            service = RenderService(plain_asset.path, base_size=32, ui_dir=ui_dir)
            async with _serving(service) as addr:
                root = await _raw_get(addr, "/")
                js = await _raw_get(addr, "/app.js")
                css = await _raw_get(addr, "/sub/style.css")
                missing = await _raw_get(addr, "/missing.js")
                escape = await _raw_get(addr, "/../secret.txt")
                return root, js, css, missing, escape

        root, js, css, missing, escape = _run(scenario())
        assert root[0] == 200 and b"viewer" in root[1]
        assert js[0] == 200 and js[1] == b"export {};"
        assert css[0] == 200
        assert missing[0] == 404
        assert escape[0] == 404, "paths may not escape the ui dir"

    def test_ui_dir_must_exist(self, plain_asset, tmp_path):
        with pytest.raises(ContractViolation, match="ui dir"):
            RenderService(plain_asset.path, ui_dir=tmp_path / "absent")


# ---------------------------------------------------------------------------
# frame delivery


class TestFrameDelivery:
    def test_canonical_frame_equals_cli_render(self, plain_asset, tmp_path):
        out = tmp_path / "cli.png"
        code = cli_run(
            [
                "render", "--asset", plain_asset.path,
                "--orbit", "0.6", "0.35", "3.2", "--scale", "0.0625",
                "--out", str(out),
            ]
        )
        assert code == 0

        async def scenario():
            service = RenderService(plain_asset.path)  # base 512, like the CLI
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    await _handshake(ws)
                    await ws.send(json.dumps({
                        "type": "set_camera",
                        "orbit": {"azimuth": 0.6, "elevation": 0.35, "radius": 3.2},
                    }))
                    await ws.send(json.dumps({"type": "set_options", "scale": 0.0625}))
                    await ws.send(json.dumps({"type": "set_pose", "rotations": []}))
                    await _request(ws, 1)
                    meta, png = await _recv_frame(ws)
                    assert meta["seq"] == 1
                    assert meta["render_ms"] > 0
                    return png

        assert _run(scenario()) == out.read_bytes()

    def test_hundred_pose_updates_then_one_frame(self, rigged_asset, tmp_path):
        rng = random.Random(5)

        def random_pose_doc():
            quat = [rng.gauss(0, 1) for _ in range(4)]
            norm = sum(c * c for c in quat) ** 0.5
            return {
                # bounded so every random pose keeps voxels inside the volume
                "rotations": [[rng.uniform(-0.8, 0.8) for _ in range(3)]
                              for _ in range(2)],
                "root_rotation": [c / norm for c in quat],
                "root_translation": [rng.uniform(-0.2, 0.2) for _ in range(3)],
            }

        docs = [random_pose_doc() for _ in range(100)]

        async def scenario():
            service = RenderService(rigged_asset.path, base_size=32)
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    await _handshake(ws)
                    for doc in docs:
                        await ws.send(json.dumps({"type": "set_pose", **doc}))
                    await _request(ws, 1)
                    _, png = await _recv_frame(ws)
                    return png

        served = _run(scenario())

        clip = tmp_path / "final.clip.json"
        clip.write_text(json.dumps({"fps": 1.0, "frames": [docs[-1]]}))
        out = tmp_path / "fresh.png"
        code = cli_run(
            [
                "render", "--asset", rigged_asset.path,
                "--clip", str(clip), "--frame", "0",
                "--orbit", "0.6", "0.35", "3.2", "--size", "32", "32",
                "--out", str(out),
            ]
        )
        assert code == 0
        assert served == out.read_bytes(), "served frame must match the final pose"

    def test_newest_request_wins_while_rendering(self, plain_asset):
        async def scenario():
            service = RenderService(plain_asset.path, base_size=32)
            service.render_delay_s = 0.5
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    await _handshake(ws)
                    for seq in (10, 11, 12):
                        await _request(ws, seq)
                    first = await _recv_json(ws)
                    meta_a, png_a = await _recv_frame(ws)
                    meta_b, png_b = await _recv_frame(ws)
                    with pytest.raises(asyncio.TimeoutError):
                        await asyncio.wait_for(ws.recv(), 0.25)
                    return first, meta_a, png_a, meta_b, png_b

        first, meta_a, png_a, meta_b, png_b = _run(scenario())
        assert first == {"type": "superseded", "seq": 11}
        assert meta_a["seq"] == 10
        assert meta_b["seq"] == 12
        assert png_a == png_b  # same state, same pixels

    def test_raw_camera_doc_accepted(self, plain_asset):
        camera = orbit_camera(1.1, -0.25, 2.6, image_size=(32, 32))
        doc = camera_to_doc(camera)

        async def scenario():
            service = RenderService(plain_asset.path, base_size=32)
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    await _handshake(ws)
                    await ws.send(json.dumps({"type": "set_camera", "camera": doc}))
                    await _request(ws, 1)
                    _, png = await _recv_frame(ws)
                    return png

        want = _expected_png(plain_asset.asset, None, camera, _opts32())
        assert _run(scenario()) == want

    def test_options_rescale_output(self, plain_asset):
        async def scenario():
            service = RenderService(plain_asset.path, base_size=32)
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    await _handshake(ws)
                    await ws.send(json.dumps({"type": "set_options", "scale": 0.5}))
                    await _request(ws, 1)
                    _, small = await _recv_frame(ws)
                    # partial update: lambda_th changes, scale must survive
                    await ws.send(json.dumps(
                        {"type": "set_options", "lambda_th": 0.2}))
                    await _request(ws, 2)
                    _, still_small = await _recv_frame(ws)
                    return small, still_small

        small, still_small = _run(scenario())
        assert _png_size(small) == (16, 16)
        assert _png_size(still_small) == (16, 16)


# ---------------------------------------------------------------------------
# protocol errors


class TestProtocolErrors:
    def test_malformed_messages_keep_the_session_alive(self, rigged_asset):
        bad = [
            "not json",
            json.dumps(["no", "object"]),
            json.dumps({"no": "type"}),
            json.dumps({"type": "bogus"}),
            json.dumps({"type": "set_pose"}),
            json.dumps({"type": "set_pose", "rotations": "x"}),
            json.dumps({"type": "set_camera"}),
            json.dumps({"type": "set_camera", "orbit": {"azimuth": 0.0}}),
            json.dumps({"type": "set_camera", "orbit": 7}),
            json.dumps({"type": "set_options", "scale": 0.0}),
            json.dumps({"type": "set_options", "lambda_th": "x"}),
            json.dumps({"type": "request_frame"}),
            json.dumps({"type": "request_frame", "seq": "one"}),
            json.dumps({"type": "request_frame", "seq": True}),
        ]

        async def scenario():
            service = RenderService(rigged_asset.path, base_size=32)
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    await _handshake(ws)
                    replies = []
                    for msg in bad:
                        await ws.send(msg)
                        replies.append(await _recv_json(ws))
                    await ws.send(b"\x00\x01binary")
                    replies.append(await _recv_json(ws))
                    await _request(ws, 1)
                    meta, _ = await _recv_frame(ws)
                    return replies, meta

        replies, meta = _run(scenario())
        assert [r["type"] for r in replies] == ["error"] * (len(bad) + 1)
        assert meta["seq"] == 1, "session must survive every malformed message"

    def test_sequence_numbers_must_strictly_increase(self, plain_asset):
        async def scenario():
            service = RenderService(plain_asset.path, base_size=32)
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    await _handshake(ws)
                    await _request(ws, 5)
                    first, _ = await _recv_frame(ws)
                    await _request(ws, 5)
                    repeat = await _recv_json(ws)
                    await _request(ws, 4)
                    lower = await _recv_json(ws)
                    await _request(ws, 6)
                    after, _ = await _recv_frame(ws)
                    return first, repeat, lower, after

        first, repeat, lower, after = _run(scenario())
        assert first["seq"] == 5
        assert repeat["type"] == "error" and repeat["seq"] == 5
        assert lower["type"] == "error" and lower["seq"] == 4
        assert after["seq"] == 6

    def test_rejected_pose_leaves_state_unchanged(self, rigged_asset):
        async def scenario():
            service = RenderService(rigged_asset.path, base_size=32)
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    await _handshake(ws)
                    await ws.send(json.dumps({
                        "type": "set_pose",
                        "rotations": [[0.1, 0.0, 0.0]] * 5,  # rig has 2 joints
                    }))
                    err = await _recv_json(ws)
                    await _request(ws, 1)
                    _, png = await _recv_frame(ws)
                    return err, png

        err, png = _run(scenario())
        assert err["type"] == "error" and "joints" in err["message"]
        want = _expected_png(rigged_asset.asset, None, _cam32(), _opts32())
        assert png == want, "a rejected pose must not change the rendered state"

    def test_pose_on_unrigged_asset_rejected(self, plain_asset):
        async def scenario():
            service = RenderService(plain_asset.path, base_size=32)
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    await _handshake(ws)
                    await ws.send(json.dumps(
                        {"type": "set_pose", "rotations": [[0.2, 0.0, 0.0]]}))
                    err = await _recv_json(ws)
                    await ws.send(json.dumps({"type": "set_pose", "rotations": []}))
                    await ws.send(json.dumps({"type": "get_metadata"}))
                    ok = await _recv_json(ws)
                    return err, ok

        err, ok = _run(scenario())
        assert err["type"] == "error" and "rig" in err["message"]
        assert ok["type"] == "metadata", "the canonical pose is always accepted"


# ---------------------------------------------------------------------------
# sessions

class TestSessions:
    def test_sessions_are_isolated(self, rigged_asset):
        fold = {"rotations": [[0.5, 0.0, 0.0], [0.0, 0.7, 0.0]]}

        async def scenario():
            service = RenderService(rigged_asset.path, base_size=32)
            async with _serving(service) as addr:
                async with _session(addr) as a, _session(addr) as b:
                    await _handshake(a)
                    await _handshake(b)
                    await a.send(json.dumps({"type": "set_pose", **fold}))
                    await a.send(json.dumps({
                        "type": "set_camera",
                        "orbit": {"azimuth": 1.0, "elevation": -0.2,
                                  "radius": 2.8, "target": [0.0, 0.0, 0.2]},
                    }))
                    await a.send(json.dumps({"type": "set_options", "scale": 0.5}))
                    await _request(a, 1)
                    _, png_a = await _recv_frame(a)
                    await _request(b, 1)
                    _, png_b = await _recv_frame(b)
                    return png_a, png_b

        png_a, png_b = _run(scenario())
        pose = pose_from_doc({**fold, "root_rotation": [1.0, 0.0, 0.0, 0.0],
                              "root_translation": [0.0, 0.0, 0.0]})
        cam_a = orbit_camera(1.0, -0.2, 2.8, target=(0.0, 0.0, 0.2),
                             image_size=(32, 32))
        want_a = _expected_png(rigged_asset.asset, pose, cam_a,
                               RenderOptions(lambda_th=0.01, image_size=(16, 16)))
        want_b = _expected_png(rigged_asset.asset, None, _cam32(), _opts32())
        assert png_a == want_a
        assert png_b == want_b, "one session's messages must not leak into another"

    def test_every_request_gets_exactly_one_terminal_response(self, rigged_asset):
        n = 25
        rng = random.Random(7)

        async def scenario():
            service = RenderService(rigged_asset.path, base_size=32)
            service.render_delay_s = 0.015
            async with _serving(service) as addr:
                async with _session(addr) as ws:
                    await _handshake(ws)

                    async def send_all():
                        for seq in range(1, n + 1):
                            await _request(ws, seq)
                            await asyncio.sleep(rng.uniform(0.0, 0.03))

                    async def collect():
                        outcomes: dict[int, list[str]] = {}
                        binaries = 0
                        while sum(len(v) for v in outcomes.values()) < n:
                            msg = await ws.recv()
                            if isinstance(msg, (bytes, bytearray)):
                                binaries += 1
                                continue
                            doc = json.loads(msg)
                            outcomes.setdefault(doc["seq"], []).append(doc["type"])
                        with contextlib.suppress(asyncio.TimeoutError):
                            while True:
                                msg = await asyncio.wait_for(ws.recv(), 0.3)
                                if isinstance(msg, (bytes, bytearray)):
                                    binaries += 1
                                    continue
                                doc = json.loads(msg)
                                outcomes.setdefault(doc["seq"], []).append(
                                    doc["type"])
                        return outcomes, binaries

                    _, (outcomes, binaries) = await asyncio.gather(
                        send_all(), collect())
                    return outcomes, binaries

        outcomes, binaries = _run(scenario())
        assert set(outcomes) == set(range(1, n + 1))
        for seq, types in outcomes.items():
            assert len(types) == 1, f"seq {seq} answered {types}"
            assert types[0] in ("frame_meta", "superseded")
        assert outcomes[n] == ["frame_meta"], "the newest request always renders"
        frames = sum(1 for t in outcomes.values() if t == ["frame_meta"])
        assert binaries == frames, "every frame_meta is paired with one PNG"


# ---------------------------------------------------------------------------
# startup


class TestStartup:
    def test_missing_asset_refuses_to_start(self, tmp_path):
        with pytest.raises(OSError):
            RenderService(tmp_path / "absent.nvo")

    def test_corrupt_asset_refuses_to_start(self, plain_asset, tmp_path):
        with open(plain_asset.path, "rb") as f:
            head = f.read(40)
        bad = tmp_path / "truncated.nvo"
        bad.write_bytes(head)
        with pytest.raises(AnimvoxError):
            RenderService(bad)

    def test_cli_serve_reports_startup_failure(self, tmp_path, capsys):
        code = cli_run(["serve", "--asset", str(tmp_path / "absent.nvo")])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error [io]")
