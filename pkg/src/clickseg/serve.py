"""Session-oriented segmentation service.

Sessions hold an append-only click list against one scene; every click is
snapped to the nearest scene point and the mask is recomputed from the full
list, so replaying the clicks through `segment` reproduces the stored mask
exactly. Model parameters are shared read-only across sessions.
"""

import base64
import struct
import threading
import uuid
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .decoder import SegmentationResult
from .errors import ClickSegError, InputError, ProtocolError
from .evaluation import iou
from .queries import Click


def rle_encode(mask) -> dict:
    """Run lengths of alternating values, starting with a False run.

    A mask beginning with True gets a leading zero-length False run.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return {"counts": [], "size": 0}
    change = np.flatnonzero(mask[1:] != mask[:-1]) + 1
    bounds = np.concatenate([[0], change, [mask.size]])
    counts = np.diff(bounds).tolist()
    if mask[0]:
        counts = [0] + counts
    return {"counts": counts, "size": int(mask.size)}


def rle_decode(rle: dict) -> np.ndarray:
    values = np.zeros(len(rle["counts"]), dtype=bool)
    values[1::2] = True
    out = np.repeat(values, rle["counts"])
    if out.size != rle["size"]:
        raise InputError(f"rle counts sum to {out.size}, expected {rle['size']}")
    return out


def quantize_scores(scores) -> str:
    """Scores packed to 8 bits and base64; bounds payload size on big scenes."""
    q = np.round(np.asarray(scores) * 255.0).astype(np.uint8)
    return base64.b64encode(q.tobytes()).decode("ascii")


@dataclass
class Session:
    session_id: str
    scene_id: str
    clicks: list = field(default_factory=list)
    result: Optional[SegmentationResult] = None
    gt_mask: Optional[np.ndarray] = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class SegmentationService:
    """In-process core the HTTP layer and tests drive."""

    def __init__(self, model, scenes: dict):
        self.model = model
        self.scenes = dict(scenes)
        self.sessions = {}
        self._caches = {}
        self._lock = threading.Lock()

    def _scene(self, scene_id: str):
        if scene_id not in self.scenes:
            raise KeyError(scene_id)
        return self.scenes[scene_id]

    def _cache(self, scene_id: str):
        with self._lock:
            if scene_id not in self._caches:
                self._caches[scene_id] = self.model.prepare_scene(
                    self.scenes[scene_id].cloud)
            return self._caches[scene_id]

    def create_session(self, scene_id: str, gt_instance: Optional[int] = None) -> Session:
        scene = self._scene(scene_id)
        gt = None
        if gt_instance is not None:
            if gt_instance not in scene.categories:
                raise KeyError(f"instance {gt_instance}")
            gt = scene.instance_ids == gt_instance
        session = Session(session_id=uuid.uuid4().hex[:12], scene_id=scene_id, gt_mask=gt)
        with self._lock:
            self.sessions[session.session_id] = session
        return session

    def _session(self, session_id: str) -> Session:
        with self._lock:
            if session_id not in self.sessions:
                raise KeyError(session_id)
            return self.sessions[session_id]

    def add_click(self, session_id: str, position, sign: int) -> Session:
        session = self._session(session_id)
        scene = self._scene(session.scene_id)
        with session.lock:
            if not session.clicks and sign != 1:
                raise ProtocolError("first click must be positive")
            pos = np.asarray(position, dtype=np.float64).reshape(1, 3)
            if not np.all(np.isfinite(pos)):
                raise InputError("click position must be finite")
            _, idx = kernels.min_dist_to_set(pos, scene.cloud.positions)
            snapped = scene.cloud.positions[int(idx[0])].copy()
            session.clicks.append(Click(snapped, sign))
            self._recompute(session, scene)
            return session

    def undo_click(self, session_id: str):
        session = self._session(session_id)
        scene = self._scene(session.scene_id)
        with session.lock:
            if not session.clicks:
                return session, "nothing to undo"
            session.clicks.pop()
            self._recompute(session, scene)
            return session, None

    def reset(self, session_id: str) -> Session:
        session = self._session(session_id)
        with session.lock:
            session.clicks.clear()
            session.result = None
            return session

    def _recompute(self, session: Session, scene):
        if session.clicks:
            session.result = self.model.segment(
                scene.cloud, session.clicks, cache=self._cache(session.scene_id))
        else:
            session.result = None

    def session_summary(self, session: Session, include_scores: bool = True) -> dict:
        out = {
            "session_id": session.session_id,
            "scene_id": session.scene_id,
            "n_clicks": len(session.clicks),
            "clicks": [{"pos": [float(x) for x in c.position], "sign": c.sign}
                       for c in session.clicks],
            "mask": None,
            "iou": None,
        }
        if session.result is not None:
            out["mask"] = rle_encode(session.result.binary_mask)
            if include_scores:
                out["scores_q8"] = quantize_scores(session.result.scores)
            if session.gt_mask is not None:
                out["iou"] = iou(session.result.binary_mask, session.gt_mask)
        return out


def points_payload(cloud) -> bytes:
    """Count-prefixed little-endian float32 xyz triples."""
    xyz = np.ascontiguousarray(cloud.positions, dtype="<f4")
    return struct.pack("<I", cloud.n_points) + xyz.tobytes()


def create_app(model, scenes: dict):
    """FastAPI wiring over SegmentationService."""
    from fastapi import FastAPI, Response
    from fastapi.responses import JSONResponse
    from fastapi.staticfiles import StaticFiles
    import os

    service = SegmentationService(model, scenes)
    app = FastAPI(title="clickseg")
    app.state.service = service

    @app.exception_handler(KeyError)
    async def not_found(request, exc):
        return JSONResponse(status_code=404, content={"error": f"not found: {exc}"})

    @app.exception_handler(ProtocolError)
    async def protocol_error(request, exc):
        return JSONResponse(status_code=409, content={"error": str(exc)})

    @app.exception_handler(ClickSegError)
    async def bad_request(request, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/scenes")
    def list_scenes():
        out = []
        for sid, scene in sorted(service.scenes.items()):
            out.append({
                "id": sid,
                "n_points": scene.cloud.n_points,
                "instances": {str(i): {"category": c, "kind": scene.kinds[c]}
                              for i, c in scene.categories.items()},
            })
        return {"scenes": out}

    @app.get("/scenes/{scene_id}/points")
    def scene_points(scene_id: str):
        scene = service._scene(scene_id)
        return Response(content=points_payload(scene.cloud),
                        media_type="application/octet-stream")

    @app.post("/sessions")
    def create_session(body: dict):
        if "scene_id" not in body:
            raise InputError("body must contain scene_id")
        session = service.create_session(str(body["scene_id"]), body.get("gt_instance"))
        return service.session_summary(session)

    @app.post("/sessions/{session_id}/clicks")
    def add_click(session_id: str, body: dict):
        if "pos" not in body or "sign" not in body:
            raise InputError("body must contain pos and sign")
        session = service.add_click(session_id, body["pos"], int(body["sign"]))
        return service.session_summary(session)

    @app.post("/sessions/{session_id}/undo")
    def undo(session_id: str):
        session, notice = service.undo_click(session_id)
        out = service.session_summary(session)
        if notice:
            out["notice"] = notice
        return out

    @app.post("/sessions/{session_id}/reset")
    def reset(session_id: str):
        return service.session_summary(service.reset(session_id))

    @app.get("/sessions/{session_id}/mask")
    def mask(session_id: str):
        session = service._session(session_id)
        return service.session_summary(session)

    pkg_root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    ui_dir = os.path.join(pkg_root, "frontend", "dist")
    if os.path.isdir(ui_dir):
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
