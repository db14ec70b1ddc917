"""HTTP service: retrieval queries, the study workflow, media delivery.

Every endpoint is a thin adapter over the in-process operations, so a
response body always equals the corresponding library call. State is
limited to the session registry and the append-only vote log; stores
are immutable after startup. Errors are JSON ``{error, code}``.
"""

from __future__ import annotations

import hashlib
import json
import mimetypes
import os
import time
from dataclasses import dataclass, field

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, JSONResponse, Response
from pydantic import BaseModel
from starlette.exceptions import HTTPException as StarletteHTTPException

from . import __version__
from .errors import (
    BadArgs,
    BadConfig,
    DuplicateId,
    DuplicateVote,
    IoFailure,
    PoolTooSmall,
    UnknownComparison,
)
from .index import top_k
from .store import EmbeddingStore, load_store
from .study import (
    SESSION_SIZE,
    PoolEntry,
    StudyStore,
    Vote,
    load_study_config,
    make_session,
    resolve_choice,
)

API_VERSION = "v1"
MAX_K = 100


class ApiError(Exception):
    """Carries an HTTP status plus a machine-readable error code."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass(frozen=True)
class ServiceConfig:
    """Startup paths; relative entries resolve against the config file."""

    frame_store: str
    audio_store: str
    bind: str = "127.0.0.1:8000"
    media_root: str | None = None
    study_config: str | None = None
    vote_log: str = "votes.jsonl"


def load_service_config(path: str | os.PathLike) -> ServiceConfig:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            rec = json.load(f)
    except OSError as exc:
        raise IoFailure(f"cannot read service config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadConfig(f"{path}: invalid JSON: {exc}") from exc
    for key in ("frame_store", "audio_store"):
        if key not in rec:
            raise BadConfig(f"{path}: missing required key {key!r}")
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str | None) -> str | None:
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.join(base, p)

    cfg = ServiceConfig(
        frame_store=resolve(rec["frame_store"]),
        audio_store=resolve(rec["audio_store"]),
        bind=rec.get("bind", "127.0.0.1:8000"),
        media_root=resolve(rec.get("media_root")),
        study_config=resolve(rec.get("study_config")),
        vote_log=resolve(rec.get("vote_log", "votes.jsonl")),
    )
    for label, p in (("frame_store", cfg.frame_store),
                     ("audio_store", cfg.audio_store),
                     ("study_config", cfg.study_config)):
        if p is not None and not os.path.isfile(p):
            raise BadConfig(f"{path}: {label} {p!r} does not exist")
    if cfg.media_root is not None and not os.path.isdir(cfg.media_root):
        raise BadConfig(f"{path}: media_root {cfg.media_root!r} is not a "
                        f"directory")
    log_dir = os.path.dirname(os.path.abspath(cfg.vote_log))
    if not os.path.isdir(log_dir):
        raise BadConfig(f"{path}: vote_log directory {log_dir!r} missing")
    return cfg


def load_media_manifest(media_root: str | None) -> dict[str, dict[str, str]]:
    """Id-to-relative-path lookup from ``<media_root>/manifest.json``.

    Media is only ever served through this table, never from
    client-supplied paths.
    """
    empty = {"frame": {}, "audio": {}}
    if media_root is None:
        return empty
    manifest_path = os.path.join(media_root, "manifest.json")
    if not os.path.isfile(manifest_path):
        return empty
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            rec = json.load(f)
    except OSError as exc:
        raise IoFailure(f"cannot read {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadConfig(f"{manifest_path}: invalid JSON: {exc}") from exc
    out = {"frame": dict(rec.get("frame", {})),
           "audio": dict(rec.get("audio", {}))}
    return out


@dataclass
class ServiceState:
    """Everything a running service needs, independent of HTTP."""

    frame_store: EmbeddingStore
    audio_store: EmbeddingStore
    study: StudyStore
    pool: list[PoolEntry] = field(default_factory=list)
    session_size: int = SESSION_SIZE
    pool_seed: int = 0
    media_root: str | None = None
    media_manifest: dict[str, dict[str, str]] = field(
        default_factory=lambda: {"frame": {}, "audio": {}})

    @classmethod
    def from_config(cls, cfg: ServiceConfig) -> "ServiceState":
        frame_store = load_store(cfg.frame_store)
        audio_store = load_store(cfg.audio_store)
        pool: list[PoolEntry] = []
        session_size = SESSION_SIZE
        pool_seed = 0
        if cfg.study_config is not None:
            study_cfg = load_study_config(cfg.study_config)
            pool = study_cfg.build()
            session_size = study_cfg.session_size
            pool_seed = study_cfg.pool_seed
        return cls(
            frame_store=frame_store,
            audio_store=audio_store,
            study=StudyStore(cfg.vote_log),
            pool=pool,
            session_size=session_size,
            pool_seed=pool_seed,
            media_root=cfg.media_root,
            media_manifest=load_media_manifest(cfg.media_root),
        )

    def next_session_seed(self, rater_id: str) -> int:
        """Deterministic fresh seed: advances with the session count."""
        key = f"{self.pool_seed}\x00{len(self.study.sessions)}\x00{rater_id}"
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")


class SessionRequest(BaseModel):
    rater_id: str
    seed: int | None = None


class VoteRequest(BaseModel):
    session_id: str
    comparison_id: str
    choice: str


def _media_url(kind: str, item_id: str) -> str:
    return f"/{API_VERSION}/media/{kind}/{item_id}"


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="avmatch service", version=__version__)
    app.state.service = state

    @app.exception_handler(ApiError)
    async def api_error_handler(_req: Request, exc: ApiError):
        return JSONResponse({"error": exc.message, "code": exc.code},
                            status_code=exc.status)

    @app.exception_handler(StarletteHTTPException)
    async def http_error_handler(_req: Request, exc: StarletteHTTPException):
        codes = {400: "bad_request", 404: "not_found", 405: "bad_method",
                 409: "conflict"}
        return JSONResponse(
            {"error": str(exc.detail), "code": codes.get(exc.status_code,
                                                         "error")},
            status_code=exc.status_code)

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_req: Request, exc: RequestValidationError):
        return JSONResponse({"error": str(exc.errors()[:1]),
                             "code": "bad_request"}, status_code=400)

    @app.get(f"/{API_VERSION}/health")
    def health():
        return {
            "status": "ok",
            "versions": {"api": API_VERSION, "package": __version__},
            "stores": {"frames": len(state.frame_store),
                       "audio": len(state.audio_store)},
        }

    @app.get(f"/{API_VERSION}/retrieve")
    def retrieve(frame_id: str, k: int = 10):
        if not 1 <= k <= MAX_K:
            raise ApiError(400, "bad_k",
                           f"k must be in 1..{MAX_K}, got {k}")
        if frame_id not in state.frame_store:
            raise ApiError(404, "unknown_frame",
                           f"frame {frame_id!r} not found")
        ranked = top_k(state.audio_store, state.frame_store.vector(frame_id),
                       k)
        results = [
            {"audio_id": audio_id, "score": score,
             "category": state.audio_store.meta_of(audio_id).category}
            for audio_id, score in ranked.entries
        ]
        return {"frame_id": frame_id, "k": k, "results": results}

    @app.post(f"/{API_VERSION}/study/session")
    def study_session(req: SessionRequest):
        if len(state.pool) < state.session_size:
            raise ApiError(409, "pool_too_small",
                           f"pool has {len(state.pool)} frames, need "
                           f"{state.session_size}")
        seed = req.seed if req.seed is not None \
            else state.next_session_seed(req.rater_id)
        try:
            session = make_session(state.pool, req.rater_id, seed,
                                   state.session_size)
            state.study.add_session(session)
        except PoolTooSmall as exc:
            raise ApiError(409, "pool_too_small", str(exc)) from exc
        except DuplicateId as exc:
            raise ApiError(409, "duplicate_session", str(exc)) from exc
        # blinded payload: no system identities, no presentation order
        return {
            "session_id": session.session_id,
            "rater_id": session.rater_id,
            "items": [
                {
                    "comparison_id": item.comparison_id,
                    "frame_id": item.frame_id,
                    "frame_url": _media_url("frame", item.frame_id),
                    "left_audio_url": _media_url("audio",
                                                 item.side_audio("left")),
                    "right_audio_url": _media_url("audio",
                                                  item.side_audio("right")),
                }
                for item in session.items
            ],
        }

    @app.post(f"/{API_VERSION}/study/vote", status_code=204)
    def study_vote(req: VoteRequest):
        if req.choice not in ("left", "right"):
            raise ApiError(400, "bad_choice",
                           f"choice must be left or right, got "
                           f"{req.choice!r}")
        session = state.study.get_session(req.session_id)
        item = state.study.comparisons.get(req.comparison_id)
        if session is None or item is None or item not in session.items:
            raise ApiError(404, "unknown_comparison",
                           f"no comparison {req.comparison_id!r} in session "
                           f"{req.session_id!r}")
        system_choice = resolve_choice(item.presentation_order, req.choice)
        vote = Vote(req.session_id, req.comparison_id, system_choice,
                    time.time())
        try:
            state.study.record_vote(vote)
        except DuplicateVote as exc:
            raise ApiError(409, "duplicate_vote", str(exc)) from exc
        except UnknownComparison as exc:
            raise ApiError(404, "unknown_comparison", str(exc)) from exc
        except BadArgs as exc:
            raise ApiError(400, "bad_request", str(exc)) from exc
        return Response(status_code=204)

    @app.get(f"/{API_VERSION}/study/results")
    def study_results():
        return state.study.result().to_dict()

    @app.get(f"/{API_VERSION}/media/frame/{{item_id}}")
    def media_frame(item_id: str):
        return _serve_media(state, "frame", item_id)

    @app.get(f"/{API_VERSION}/media/audio/{{item_id}}")
    def media_audio(item_id: str):
        return _serve_media(state, "audio", item_id)

    return app


def _serve_media(state: ServiceState, kind: str, item_id: str):
    if "/" in item_id or "\\" in item_id or ".." in item_id \
            or item_id.startswith("."):
        raise ApiError(400, "bad_id", f"illegal media id {item_id!r}")
    rel = state.media_manifest.get(kind, {}).get(item_id)
    if rel is None or state.media_root is None:
        raise ApiError(404, "unknown_media",
                       f"no {kind} media for {item_id!r}")
    root = os.path.realpath(state.media_root)
    resolved = os.path.realpath(os.path.join(root, rel))
    if not (resolved == root or resolved.startswith(root + os.sep)):
        raise ApiError(400, "bad_path",
                       f"media path for {item_id!r} escapes the media root")
    if not os.path.isfile(resolved):
        raise ApiError(404, "unknown_media",
                       f"media file missing for {item_id!r}")
    content_type = mimetypes.guess_type(resolved)[0] \
        or "application/octet-stream"
    return FileResponse(resolved, media_type=content_type)


def run_service(cfg: ServiceConfig) -> None:
    """Blocking uvicorn server (CLI `serve` entry point)."""
    import uvicorn

    host, _, port = cfg.bind.partition(":")
    app = create_app(ServiceState.from_config(cfg))
    uvicorn.run(app, host=host or "127.0.0.1",
                port=int(port) if port else 8000, log_level="warning")
