"""HTTP facade over a live mapping session.

A single mapping thread owns the training state; request handlers talk to
it through a command queue and read published parameter snapshots. Views
are rendered from the latest snapshot, so no endpoint ever blocks training
for longer than one snapshot copy.
"""

from __future__ import annotations

import io
import json
import threading
import time
from collections import deque
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel
from PIL import Image

from . import mapper as mp
from . import renderer as rnd
from . import scene_field as sf
from . import semantics as sem
from .errors import CapacityError, InputError
from .runner import _dataset_frame_to_mapper, load_click_script
from .simio import load_dataset

PHASES = ("idle", "running", "paused", "finished")

# fixed 16-color palette; class id indexes it so screenshots reproduce
PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (230, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
]


class ControlRequest(BaseModel):
    action: str


class ClickRequest(BaseModel):
    keyframe_id: int
    u: int
    v: int
    name: str = ""


class ClickResponse(BaseModel):
    class_id: int


class StateResponse(BaseModel):
    phase: str
    frame_index: int
    n_frames: int
    n_keyframes: int
    n_active_classes: int
    snapshot_id: int
    step: int
    class_names: list[str]
    dropped_frames: int


class KeyframeInfo(BaseModel):
    frame_id: int
    pose: list[float]


class KeyframesResponse(BaseModel):
    keyframes: list[KeyframeInfo]


@dataclass
class Snapshot:
    snapshot_id: int
    params: sf.SceneParams
    n_active: int
    class_names: list[str]
    keyframes: list[tuple[int, np.ndarray]]  # (frame_id, 4x4 pose)
    frame_index: int
    step: int


@dataclass
class _Command:
    apply: callable
    done: threading.Event = dc_field(default_factory=threading.Event)
    result: object = None
    error: Exception | None = None


class LiveSession:
    """Owns the mapping thread for one dataset playback."""

    def __init__(self, dataset_dir, mode: str = "fused", steps_per_frame: int = 10,
                 seed: int = 0, clicks_path=None, metrics_tail: int = 512):
        self.ds = load_dataset(dataset_dir)
        self.mcfg = sem.ablation_mode(
            mp.MapperConfig(steps_per_frame=steps_per_frame), mode)
        k = int(self.ds.manifest.get("oracle", {}).get("dim")
                or self.ds.frame(0).features.dim)
        self.state = mp.make_train_state(self.ds.cam, self.ds.bounds,
                                         target_feature_dim=k, seed=seed)
        self.script = load_click_script(clicks_path) if clicks_path else []
        self._script_pos = 0
        self.queue = mp.FrameQueue(capacity=4)
        self.phase = "idle"
        self.frame_index = 0
        self.metrics: deque = deque(maxlen=metrics_tail)
        self._snapshot: Optional[Snapshot] = None
        self._snapshot_id = 0
        self._commands: deque[_Command] = deque()
        self._lock = threading.Lock()
        self._wake = threading.Event()
        self._step_once = False
        self._stop = False
        self._thread: Optional[threading.Thread] = None

    # -- thread-side -------------------------------------------------------

    def _publish(self) -> None:
        snap = Snapshot(
            snapshot_id=self._snapshot_id + 1,
            params=self.state.params.snapshot(),
            n_active=self.state.registry.n_active_classes,
            class_names=self.state.registry.class_names,
            keyframes=[(kf.frame_id, kf.pose.matrix()) for kf in self.state.keyframes],
            frame_index=self.frame_index,
            step=self.state.step,
        )
        with self._lock:
            self._snapshot_id += 1
            self._snapshot = snap

    def _drain_commands(self) -> None:
        while True:
            with self._lock:
                cmd = self._commands.popleft() if self._commands else None
            if cmd is None:
                return
            try:
                cmd.result = cmd.apply()
            except Exception as e:  # surfaced to the submitting handler
                cmd.error = e
            cmd.done.set()

    def _apply_scripted_clicks(self) -> None:
        while (self._script_pos < len(self.script)
               and self.script[self._script_pos]["at_frame"] <= self.frame_index - 1):
            e = self.script[self._script_pos]
            self._register_click(e["keyframe_id"], e["u"], e["v"], e.get("name", ""))
            self._script_pos += 1

    def _register_click(self, keyframe_id: int, u: int, v: int, name: str) -> int:
        kf = next((k for k in self.state.keyframes if k.frame_id == keyframe_id), None)
        if kf is None:
            raise KeyError(f"keyframe {keyframe_id} not in the keyframe set")
        cls = sem.add_click(self.state.registry, keyframe_id, u, v, name)
        kf.clicks.append((u, v, cls))
        return cls

    def _loop(self) -> None:
        while not self._stop:
            self._drain_commands()
            if self.phase == "running":
                if self.frame_index < self.ds.n_frames:
                    frame = _dataset_frame_to_mapper(self.ds, self.frame_index)
                    self.queue.push(frame)
                    queued = self.queue.pop()
                    if queued is not None:
                        mp.ingest_frame(self.state, queued, self.mcfg)
                    self.frame_index += 1
                    self._apply_scripted_clicks()
                    for _ in range(self.mcfg.steps_per_frame):
                        self._drain_commands()
                        m = mp.mapping_step(self.state, self.mcfg)
                        self.metrics.append(m.record())
                    self._publish()
                else:
                    self.phase = "finished"
                    self._publish()
            elif self.phase == "paused" and self._step_once:
                self._step_once = False
                if self.state.keyframes:
                    m = mp.mapping_step(self.state, self.mcfg)
                    self.metrics.append(m.record())
                self._publish()
            else:
                self._wake.wait(timeout=0.02)
                self._wake.clear()

    # -- handler-side ------------------------------------------------------

    def start_thread(self) -> None:
        if self._thread is None:
            self._thread = threading.Thread(target=self._loop, daemon=True)
            self._thread.start()

    def stop(self) -> None:
        self._stop = True
        self._wake.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def submit(self, fn, timeout: float = 10.0):
        cmd = _Command(apply=fn)
        with self._lock:
            self._commands.append(cmd)
        self._wake.set()
        if not cmd.done.wait(timeout):
            raise TimeoutError("mapping thread did not acknowledge the command")
        if cmd.error is not None:
            raise cmd.error
        return cmd.result

    def control(self, action: str) -> None:
        def do():
            if action == "start":
                if self.phase != "idle":
                    raise ValueError(f"cannot start from {self.phase}")
                self.phase = "running"
            elif action == "pause":
                if self.phase != "running":
                    raise ValueError(f"cannot pause from {self.phase}")
                self.phase = "paused"
            elif action == "resume":
                if self.phase != "paused":
                    raise ValueError(f"cannot resume from {self.phase}")
                self.phase = "running"
            elif action == "step":
                if self.phase != "paused":
                    raise ValueError(f"step only while paused, not {self.phase}")
                self._step_once = True
            else:
                raise KeyError(f"unknown action {action!r}")

        self.submit(do)

    def click(self, keyframe_id: int, u: int, v: int, name: str) -> int:
        return self.submit(lambda: self._register_click(keyframe_id, u, v, name))

    def snapshot(self) -> Optional[Snapshot]:
        with self._lock:
            return self._snapshot

    def state_view(self) -> StateResponse:
        snap = self.snapshot()
        return StateResponse(
            phase=self.phase,
            frame_index=self.frame_index,
            n_frames=self.ds.n_frames,
            n_keyframes=len(self.state.keyframes),
            n_active_classes=self.state.registry.n_active_classes,
            snapshot_id=snap.snapshot_id if snap else 0,
            step=self.state.step,
            class_names=list(self.state.registry.class_names),
            dropped_frames=self.queue.dropped,
        )


def _depth_png(depth: np.ndarray) -> bytes:
    mm = np.clip(depth * 1000.0, 0, 65535).astype(np.uint16)
    img = Image.fromarray(mm, mode="I;16")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _semantic_png(labels: np.ndarray) -> bytes:
    idx = np.where(labels == rnd.VOID_LABEL, 255, labels % 16).astype(np.uint8)
    img = Image.fromarray(idx, mode="P")
    palette = []
    for c in PALETTE:
        palette.extend(c)
    palette.extend([0] * (256 * 3 - len(palette)))
    palette[255 * 3 : 255 * 3 + 3] = [0, 0, 0]
    img.putpalette(palette)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _feature_png(latent: np.ndarray) -> bytes:
    chans = latent[..., :3].astype(np.float64)
    lo = chans.min(axis=(0, 1), keepdims=True)
    hi = chans.max(axis=(0, 1), keepdims=True)
    span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    rgb = ((chans - lo) / span * 255.0).astype(np.uint8)
    img = Image.fromarray(rgb, mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def create_app(session: LiveSession) -> FastAPI:
    app = FastAPI(title="frnf live session")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
    )
    app.state.session = session
    session.start_thread()
    basis = sf.make_basis("axes_plus_icosahedron", 6)

    @app.get("/state", response_model=StateResponse)
    def get_state():
        return session.state_view()

    @app.post("/control", response_model=StateResponse)
    def post_control(req: ControlRequest):
        try:
            session.control(req.action)
        except KeyError as e:
            raise HTTPException(status_code=400, detail=str(e))
        except ValueError as e:
            raise HTTPException(status_code=409, detail=str(e))
        return session.state_view()

    @app.post("/clicks", response_model=ClickResponse)
    def post_clicks(req: ClickRequest):
        if session.phase not in ("running", "paused"):
            raise HTTPException(status_code=409, detail=f"session is {session.phase}")
        try:
            cls = session.click(req.keyframe_id, req.u, req.v, req.name)
        except KeyError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except CapacityError as e:
            raise HTTPException(status_code=409, detail=str(e))
        except InputError as e:
            raise HTTPException(status_code=400, detail=str(e))
        return ClickResponse(class_id=cls)

    @app.get("/render")
    def get_render(mode: str = Query("depth"), stride: int = Query(4),
                   pose: str | None = Query(None)):
        snap = session.snapshot()
        if snap is None:
            raise HTTPException(status_code=503, detail="no snapshot published yet")
        if pose is not None:
            try:
                vals = [float(x) for x in pose.replace(",", " ").split()]
                if len(vals) != 16:
                    raise ValueError(f"pose needs 16 values, got {len(vals)}")
                render_pose = rnd.Pose.from_matrix(np.array(vals).reshape(4, 4))
            except Exception as e:
                raise HTTPException(status_code=400, detail=f"bad pose: {e}")
        elif snap.keyframes:
            render_pose = rnd.Pose.from_matrix(snap.keyframes[-1][1])
        else:
            raise HTTPException(status_code=503, detail="no keyframe pose available")
        cam, bounds = session.ds.cam, session.ds.bounds
        cfg = session.state.field_cfg
        if mode == "depth":
            raster = rnd.render_view(snap.params, cfg, basis, cam, render_pose,
                                     "depth", bounds, stride=stride)
            payload = _depth_png(raster)
        elif mode == "semantic":
            if snap.n_active == 0:
                h = int(np.ceil(cam.height / stride))
                w = int(np.ceil(cam.width / stride))
                labels = np.full((h, w), rnd.VOID_LABEL, dtype=np.int64)
            else:
                seg = sem.segment_view(snap.params, cfg, basis, cam, render_pose,
                                       snap.n_active, bounds, stride=stride)
                labels = seg.labels
            payload = _semantic_png(labels)
        elif mode == "feature":
            latent = rnd.render_view(snap.params, cfg, basis, cam, render_pose,
                                     "feature_latent", bounds, stride=stride)
            payload = _feature_png(latent)
        else:
            raise HTTPException(status_code=400, detail=f"unknown mode {mode!r}")
        return Response(content=payload, media_type="image/png",
                        headers={"X-Snapshot-Id": str(snap.snapshot_id)})

    @app.get("/keyframes", response_model=KeyframesResponse)
    def get_keyframes():
        snap = session.snapshot()
        frames = snap.keyframes if snap else []
        return KeyframesResponse(keyframes=[
            KeyframeInfo(frame_id=fid, pose=[float(x) for x in mat.ravel()])
            for fid, mat in frames
        ])

    @app.get("/metrics")
    def get_metrics():
        lines = "".join(json.dumps(m) + "\n" for m in list(session.metrics))
        return Response(content=lines, media_type="application/x-ndjson")

    return app
