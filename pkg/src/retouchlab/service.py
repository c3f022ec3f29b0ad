"""Interactive HTTP session service for the browser UI.

One session = one uploaded image. Click updates recompute the retouched
result from scratch; an empty click set means "no guidance" and routes to
the automatic branch. The model snapshot is shared read-only; per-session
locks serialize in-flight inference so concurrent updates on one session
queue instead of racing.
"""

from __future__ import annotations

import base64
import hashlib
import io
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, JSONResponse
from PIL import Image
from pydantic import BaseModel

from . import tensor as tc
from .checkpoint import load_tensors
from .errors import CheckpointError, InvalidInputError
from .guidance import ClickSet
from .model import RetouchNet
from .tensor import Tensor


class ClicksBody(BaseModel):
    positive: List[List[int]] = []
    negative: List[List[int]] = []


class SessionBody(BaseModel):
    image_png_b64: str


@dataclass
class Session:
    id: str
    image: np.ndarray          # [3,H,W] original size
    padded: np.ndarray         # [3,H16,W16]
    height: int
    width: int
    lock: threading.Lock = field(default_factory=threading.Lock)
    last_clicks: Optional[ClickSet] = None
    last_result: Optional[dict] = None
    created: float = field(default_factory=time.time)
    updated: float = field(default_factory=time.time)


def _png_b64(img: np.ndarray) -> str:
    """[3,H,W] float in [0,1] -> base64 PNG."""
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_image(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except Exception as e:
        raise InvalidInputError(f"undecodable image: {e}") from e
    return (arr / 255.0).transpose(2, 0, 1)


def _pad_to_16(img: np.ndarray) -> np.ndarray:
    _, h, w = img.shape
    ph = (16 - h % 16) % 16
    pw = (16 - w % 16) % 16
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return img


def create_app(checkpoint_path, tau: float = 1.0,
               static_dir: Optional[str] = None) -> FastAPI:
    state = load_tensors(checkpoint_path)
    model = RetouchNet(seed=0, temperature=tau)
    model.load_state_dict(state)
    checkpoint_id = hashlib.sha256(Path(checkpoint_path).read_bytes()).hexdigest()[:12]

    app = FastAPI(title="retouchlab", version="0.1.0")
    sessions: Dict[str, Session] = {}
    registry_lock = threading.Lock()

    def _get(session_id: str) -> Session:
        with registry_lock:
            s = sessions.get(session_id)
        if s is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return s

    def _run(session: Session, clicks: ClickSet) -> dict:
        t0 = time.perf_counter()
        x = Tensor(session.padded[None])
        with tc.no_grad():
            if len(clicks) == 0:
                out = model.forward_automatic(x)
            else:
                out = model.forward_interactive(x, clicks)
        h, w = session.height, session.width
        image = out.image.data[0][:, :h, :w]
        mask = out.mask.data[0][:, :h, :w]
        residual = np.abs(image - session.image).mean(axis=0, keepdims=True)
        return {
            "output_png_b64": _png_b64(image),
            "residual_png_b64": _png_b64(np.repeat(np.clip(residual * 4.0, 0.0, 1.0),
                                                   3, axis=0)),
            "mask_png_b64": _png_b64(np.repeat(mask, 3, axis=0)),
            "timing_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        }

    @app.get("/api/health")
    def health():
        return {"status": "ok", "checkpoint_id": checkpoint_id}

    @app.post("/api/session")
    def create_session(body: SessionBody):
        try:
            img = _decode_image(body.image_png_b64)
        except InvalidInputError as e:
            raise HTTPException(status_code=422, detail=str(e))
        sid = uuid.uuid4().hex
        session = Session(id=sid, image=img, padded=_pad_to_16(img),
                          height=img.shape[1], width=img.shape[2])
        with registry_lock:
            sessions[sid] = session
        return {"session_id": sid, "width": session.width,
                "height": session.height}

    @app.post("/api/session/{session_id}/clicks")
    def update_clicks(session_id: str, body: ClicksBody):
        session = _get(session_id)
        clicks = ClickSet()
        for name, dest in (("positive", clicks.positive),
                           ("negative", clicks.negative)):
            for item in getattr(body, name):
                if len(item) != 2:
                    raise HTTPException(status_code=400,
                                        detail=f"bad {name} click {item}")
                r, c = int(item[0]), int(item[1])
                if not (0 <= r < session.height and 0 <= c < session.width):
                    raise HTTPException(
                        status_code=400,
                        detail=f"click ({r},{c}) outside "
                               f"{session.height}x{session.width} image")
                dest.append((r, c))
        with session.lock:
            result = _run(session, clicks)
            session.last_clicks = clicks
            session.last_result = result
            session.updated = time.time()
        return result

    @app.get("/api/session/{session_id}")
    def last_result(session_id: str):
        session = _get(session_id)
        with session.lock:
            if session.last_result is None:
                # nothing posted yet: automatic-branch appearance
                session.last_result = _run(session, ClickSet())
                session.last_clicks = ClickSet()
            return session.last_result

    @app.delete("/api/session/{session_id}")
    def delete_session(session_id: str):
        with registry_lock:
            if sessions.pop(session_id, None) is None:
                raise HTTPException(status_code=404, detail="unknown session")
        return JSONResponse({"deleted": session_id})

    if static_dir:
        root = Path(static_dir)

        @app.get("/")
        def index():
            return FileResponse(root / "index.html")

        @app.get("/{asset_path:path}")
        def asset(asset_path: str):
            target = (root / asset_path).resolve()
            if not str(target).startswith(str(root.resolve())) \
                    or not target.is_file():
                raise HTTPException(status_code=404, detail="not found")
            return FileResponse(target)

    return app
