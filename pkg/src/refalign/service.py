"""HTTP service backing the interactive mask/refine UI.

Sessions are in-memory (optional write-through persistence via the
REFINE_ALIGN_DATA_DIR environment variable, one folder per session, files
named by role). Uploaded images are immutable; only the mask and job state
change. Correspondence extraction is synchronous (a single forward pass);
refinement runs on a small worker pool, one job per session at a time.
"""

from __future__ import annotations

import base64
import binascii
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .alignment import PostprocessParams, align_single
from .errors import DataError, EmptyRegionError, RefalignError
from .images import (
    image_to_png_bytes,
    mask_to_png_bytes,
    overlay_region,
    png_bytes_to_image,
    png_bytes_to_mask,
)
from .model import RefinerModel
from .pipeline import RefineConfig, refine

MAX_IMAGE_BYTES = 4 * 1024 * 1024


def encode_rle(region: np.ndarray) -> list[list[int]]:
    """Row-major runs of (start, length) over the flattened token grid."""
    flat = region.reshape(-1)
    runs = []
    start = None
    for i, v in enumerate(flat):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append([int(start), int(i - start)])
            start = None
    if start is not None:
        runs.append([int(start), int(flat.size - start)])
    return runs


def decode_rle(runs: list[list[int]], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], bool)
    for start, length in runs:
        flat[start : start + length] = True
    return flat.reshape(shape)


@dataclass
class Session:
    session_id: str
    generated: np.ndarray
    reference: np.ndarray
    mask: np.ndarray | None = None
    running_job: str | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


@dataclass
class Job:
    job_id: str
    session_id: str
    state: str = "queued"  # queued | running | done | error
    result_png: bytes | None = None
    region_rle: list[list[int]] | None = None
    error: str | None = None


class SessionBody(BaseModel):
    generated: str
    reference: str


class MaskBody(BaseModel):
    mask: str


class RefineBody(BaseModel):
    seed: int = 0
    guidance: float | None = None


def _decode_b64(data: str, what: str) -> bytes:
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError):
        raise HTTPException(400, f"{what} is not valid base64")
    if len(raw) > MAX_IMAGE_BYTES:
        raise HTTPException(400, f"{what} exceeds {MAX_IMAGE_BYTES} bytes")
    return raw


def create_app(model: RefinerModel, static_dir: str | None = None, workers: int = 2) -> FastAPI:
    app = FastAPI(title="refalign service")
    sessions: dict[str, Session] = {}
    jobs: dict[str, Job] = {}
    store_lock = threading.Lock()
    executor = ThreadPoolExecutor(max_workers=workers)
    base_cfg = RefineConfig()
    size = model.cfg.encoder.image_size
    data_dir = os.environ.get("REFINE_ALIGN_DATA_DIR")

    def _persist(session: Session) -> None:
        if not data_dir:
            return
        folder = Path(data_dir) / session.session_id
        folder.mkdir(parents=True, exist_ok=True)
        (folder / "generated.png").write_bytes(image_to_png_bytes(session.generated))
        (folder / "reference.png").write_bytes(image_to_png_bytes(session.reference))
        if session.mask is not None:
            (folder / "mask.png").write_bytes(mask_to_png_bytes(session.mask))

    def _restore() -> None:
        if not data_dir or not Path(data_dir).is_dir():
            return
        for folder in Path(data_dir).iterdir():
            gen_path = folder / "generated.png"
            ref_path = folder / "reference.png"
            if not (gen_path.exists() and ref_path.exists()):
                continue
            session = Session(
                session_id=folder.name,
                generated=png_bytes_to_image(gen_path.read_bytes()),
                reference=png_bytes_to_image(ref_path.read_bytes()),
            )
            mask_path = folder / "mask.png"
            if mask_path.exists():
                session.mask = png_bytes_to_mask(mask_path.read_bytes())
            sessions[session.session_id] = session

    _restore()

    def _get_session(session_id: str) -> Session:
        with store_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(404, f"unknown session {session_id}")
        return session

    def _decode_image(b64: str, what: str) -> np.ndarray:
        raw = _decode_b64(b64, what)
        try:
            img = png_bytes_to_image(raw)
        except Exception:
            raise HTTPException(400, f"{what} is not a decodable image")
        if img.shape[0] != size or img.shape[1] != size:
            raise HTTPException(400, f"{what} must be {size}x{size}, got {img.shape[1]}x{img.shape[0]}")
        return img

    @app.get("/api/model")
    def model_info():
        g_h, g_w = model.token_grid
        return {
            "token_grid": [g_h, g_w],
            "T": model.schedule.T,
            "L": model.unet.n_xattn_blocks,
            "default_t": base_cfg.t_align,
            "default_l": base_cfg.l_align,
            "image_size": size,
        }

    @app.post("/api/session")
    def create_session(body: SessionBody):
        session = Session(
            session_id=uuid.uuid4().hex[:12],
            generated=_decode_image(body.generated, "generated"),
            reference=_decode_image(body.reference, "reference"),
        )
        with store_lock:
            sessions[session.session_id] = session
        _persist(session)
        return {"session_id": session.session_id}

    @app.put("/api/session/{session_id}/mask")
    def put_mask(session_id: str, body: MaskBody):
        session = _get_session(session_id)
        raw = _decode_b64(body.mask, "mask")
        try:
            mask = png_bytes_to_mask(raw)
        except Exception:
            raise HTTPException(400, "mask is not a decodable image")
        if mask.shape != session.generated.shape[:2]:
            raise HTTPException(400, f"mask shape {mask.shape} does not match the image")
        if not mask.any():
            raise HTTPException(422, "mask is empty")
        with session.lock:
            session.mask = mask
        _persist(session)
        return Response(status_code=204)

    @app.get("/api/session/{session_id}/mask")
    def get_mask(session_id: str):
        session = _get_session(session_id)
        if session.mask is None:
            raise HTTPException(404, "no mask committed")
        return {"mask": base64.b64encode(mask_to_png_bytes(session.mask)).decode()}

    @app.get("/api/session/{session_id}/correspondence")
    def correspondence(session_id: str, t: int | None = None, l: int | None = None):
        session = _get_session(session_id)
        if session.mask is None or not session.mask.any():
            raise HTTPException(422, "mask is empty")
        t = base_cfg.t_align if t is None else t
        l = base_cfg.l_align if l is None else l
        if not (0 <= t < model.schedule.T):
            raise HTTPException(400, f"t outside [0, {model.schedule.T})")
        if not (0 <= l < model.unet.n_xattn_blocks):
            raise HTTPException(400, f"l outside [0, {model.unet.n_xattn_blocks})")
        try:
            region, cmap = align_single(
                session.generated, session.mask, session.reference, model,
                t, l, PostprocessParams(threshold_frac=base_cfg.threshold_frac), seed=base_cfg.seed,
            )
        except EmptyRegionError:
            raise HTTPException(422, "no correspondence region found")
        overlay = overlay_region(session.reference, region.region)
        return {
            "heat": [[float(v) for v in row] for row in cmap.heat],
            "region": encode_rle(region.region),
            "overlay": base64.b64encode(image_to_png_bytes(overlay)).decode(),
            "t": t,
            "l": l,
        }

    def _run_refine(job: Job, session: Session, seed: int, guidance: float) -> None:
        job.state = "running"
        try:
            cfg = RefineConfig(
                t_align=base_cfg.t_align,
                l_align=base_cfg.l_align,
                guidance_scale=guidance,
                seed=seed,
            )
            result = refine(session.generated, session.mask, session.reference, model, cfg)
            job.result_png = image_to_png_bytes(result.image)
            job.region_rle = encode_rle(result.region.region) if result.region is not None else []
            job.state = "done"
        except RefalignError as exc:
            job.state = "error"
            job.error = str(exc)
        except Exception as exc:  # defensive: job must always resolve
            job.state = "error"
            job.error = f"internal error: {exc}"
        finally:
            with session.lock:
                session.running_job = None

    @app.post("/api/session/{session_id}/refine")
    def start_refine(session_id: str, body: RefineBody):
        session = _get_session(session_id)
        if session.mask is None or not session.mask.any():
            raise HTTPException(422, "mask is empty")
        guidance = base_cfg.guidance_scale if body.guidance is None else body.guidance
        if guidance < 1.0:
            raise HTTPException(400, "guidance must be >= 1")
        with session.lock:
            if session.running_job is not None:
                raise HTTPException(409, "a refine job is already running for this session")
            job = Job(job_id=uuid.uuid4().hex[:12], session_id=session_id)
            session.running_job = job.job_id
        with store_lock:
            jobs[job.job_id] = job
        executor.submit(_run_refine, job, session, body.seed, guidance)
        return {"job_id": job.job_id}

    @app.get("/api/job/{job_id}")
    def job_state(job_id: str):
        with store_lock:
            job = jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        payload: dict = {"state": job.state}
        if job.state == "done":
            payload["result"] = base64.b64encode(job.result_png).decode()
            payload["region"] = job.region_rle
        if job.state == "error":
            payload["error"] = job.error
        return payload

    @app.exception_handler(DataError)
    def data_error_handler(_, exc: DataError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    if static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
