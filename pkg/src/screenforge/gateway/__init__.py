"""HTTP gateway: bearer-authenticated JSON API over the platform modules.

All endpoints live under /api/v1 except the unauthenticated /healthz. Every
business rule stays in the registry/pacs/ingest modules; the gateway only
translates HTTP to module calls, maps typed errors onto a stable envelope,
and replays idempotent retries.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from contextlib import asynccontextmanager

from fastapi import Depends, FastAPI, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from ..config import Settings
from ..deid import Vault, default_policy, load_policy
from ..dicom import get_value, parse, render_preview, stored_pixels, tag, to_png
from ..errors import ScreenforgeError
from ..ingest import SOURCES, Connector
from ..pacs import PacsRouter
from ..qlog import QueueLog
from ..registry import Registry

API_PREFIX = "/api/v1"

_WINDOW_CENTER = tag(0x0028, 0x1050)
_WINDOW_WIDTH = tag(0x0028, 0x1051)

_STATUS_BY_CODE = {
    "UNKNOWN_CASE": 404,
    "UNKNOWN_STUDY": 404,
    "UNKNOWN_TASK": 404,
    "PACS_NOT_FOUND": 404,
    "ILLEGAL_TRANSITION": 409,
    "ALREADY_FINALIZED": 409,
    "BAD_CATEGORY": 422,
    "BAD_NODULE": 422,
    "CATEGORY_NODULE_MISMATCH": 422,
    "INGEST": 422,
    "DEID_REFUSED": 422,
    "BAD_WINDOW": 422,
    "UNSUPPORTED_PIXELS": 422,
}


class ApiError(Exception):
    def __init__(self, http_status: int, code: str, message: str,
                 detail: dict | None = None):
        super().__init__(message)
        self.http_status = http_status
        self.code = code
        self.message = message
        self.detail = detail or {}

    def to_body(self) -> dict:
        return {"error": {
            "http_status": self.http_status,
            "code": self.code,
            "message": self.message,
            "detail": self.detail,
        }}


class NoduleIn(BaseModel):
    lobe: str
    composition: str
    mean_diameter_mm: float


class ProtocolIn(BaseModel):
    reader_id: str = Field(min_length=1)
    lungrads_category: str
    nodules: list[NoduleIn] = []
    finalize: bool = True


class SecondOpinionIn(BaseModel):
    expert_id: str = Field(min_length=1)


class TaskCloseIn(BaseModel):
    note: str = ""


class Platform:
    """Owns the module graph behind the API; one instance per data root."""

    def __init__(self, settings: Settings):
        settings.data_root.mkdir(parents=True, exist_ok=True)
        self.settings = settings
        self.queue = QueueLog(settings.data_root / "queue")
        self.vault = Vault(settings.data_root / "vault", settings.deid_key)
        if settings.policy_path is not None:
            self.policy = load_policy(settings.policy_path)
        else:
            self.policy = default_policy()
        self.connectors = {
            source: Connector(source, settings.data_root, self.queue,
                              self.vault, self.policy, settings.eligibility)
            for source in SOURCES
        }
        self.pacs = PacsRouter(settings.data_root, self.queue, self.vault,
                               self.policy,
                               quiet_period_seconds=settings.quiet_period_seconds)
        self.registry = Registry(settings.data_root, self.queue,
                                 rules=settings.eligibility,
                                 follow_up_days=settings.follow_up_days,
                                 retry_horizon=settings.retry_horizon)

    def refresh(self) -> dict:
        """Emits due STUDY_READY events and drains all topics."""
        self.pacs.finalize_ready()
        return self.registry.consume_available()

    def poll_sources(self) -> dict:
        reports = {}
        for source, connector in self.connectors.items():
            report = connector.poll_once()
            connector.flush_retries()
            reports[source.lower()] = report
        reports["pacs"] = self.pacs.poll_inbox()
        self.refresh()
        return reports

    def roles_for(self, token: str) -> frozenset:
        roles = set()
        for configured, role in (
                (self.settings.reader_token, "reader"),
                (self.settings.expert_token, "expert")):
            if configured and hmac.compare_digest(token, configured):
                roles.add(role)
        if self.settings.api_token and \
                hmac.compare_digest(token, self.settings.api_token):
            roles.update(("reader", "expert"))
        return frozenset(roles)

    def close(self) -> None:
        self.registry.close()
        self.queue.close()


def create_app(settings: Settings) -> FastAPI:
    platform = Platform(settings)
    if not (settings.api_token or settings.reader_token
            or settings.expert_token):
        platform.close()
        from .errors import ConfigError
        raise ConfigError("no API token configured; set SCREENFORGE_API_TOKEN")

    @asynccontextmanager
    async def lifespan(app):
        yield
        platform.close()

    app = FastAPI(title="screening data platform", lifespan=lifespan,
                  docs_url=None, redoc_url=None, openapi_url=None)
    app.state.platform = platform
    # the web UI is a static bundle served from elsewhere
    app.add_middleware(
        CORSMiddleware, allow_origins=list(settings.cors_origins),
        allow_methods=["*"], allow_headers=["*"])

    def auth(request: Request) -> frozenset:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise ApiError(401, "UNAUTHORIZED", "missing bearer token")
        roles = platform.roles_for(header[7:].strip())
        if not roles:
            raise ApiError(401, "UNAUTHORIZED", "unknown token")
        return roles

    def require(roles: frozenset, role: str) -> None:
        if role not in roles:
            raise ApiError(403, "FORBIDDEN", f"requires the {role} role")

    @app.exception_handler(ApiError)
    async def on_api_error(request, exc: ApiError):
        return JSONResponse(exc.to_body(), status_code=exc.http_status)

    @app.exception_handler(ScreenforgeError)
    async def on_domain_error(request, exc: ScreenforgeError):
        status = _STATUS_BY_CODE.get(exc.code, 500)
        err = ApiError(status, exc.code, str(exc), getattr(exc, "detail", {}))
        return JSONResponse(err.to_body(), status_code=status)

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request, exc: RequestValidationError):
        err = ApiError(422, "VALIDATION", "request body failed validation",
                       {"errors": exc.errors()})
        return JSONResponse(err.to_body(), status_code=422)

    def idempotent(request: Request, body_hash: str, run) -> JSONResponse:
        """Replays a stored response when the same key and body retry."""
        key = request.headers.get("idempotency-key")
        if not key:
            status, payload = run()
            return JSONResponse(payload, status_code=status)
        request_hash = hashlib.sha256(
            f"{request.method} {request.url.path} {body_hash}".encode()
        ).hexdigest()
        found = platform.registry.idempotency_lookup(
            key, request_hash, settings.idempotency_ttl_hours)
        if found == "mismatch":
            raise ApiError(409, "IDEMPOTENCY_MISMATCH",
                           "idempotency key reused with a different request")
        if found is not None:
            return JSONResponse(json.loads(found[1]), status_code=200)
        status, payload = run()
        platform.registry.idempotency_store(key, request_hash, status,
                                            json.dumps(payload))
        return JSONResponse(payload, status_code=status)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "topics": platform.queue.topics()}

    @app.post(API_PREFIX + "/ingest/{source}")
    async def ingest_push(source: str, request: Request,
                          format: str | None = Query(default=None),
                          roles: frozenset = Depends(auth)):
        source = source.upper()
        if source not in SOURCES:
            raise ApiError(404, "UNKNOWN_SOURCE", f"no source {source}")
        connector = platform.connectors[source]
        fmt = (format or {"CRM": "csv", "RIS": "csv", "EHR": "json"}[source])
        body = await request.body()
        report = connector.ingest_bytes(fmt.upper(), body, "http-push")
        connector.flush_retries()
        platform.refresh()
        return {
            "files": report.files,
            "duplicate_files": report.duplicate_files,
            "rows": report.rows,
            "published": report.published,
            "quarantined": report.quarantined,
            "reasons": report.reasons,
        }

    @app.post(API_PREFIX + "/pacs/instances")
    async def pacs_push(request: Request, roles: frozenset = Depends(auth)):
        body = await request.body()
        result = platform.pacs.route(body, origin="http-push")
        platform.refresh()
        payload = {"status": result.status, "study_uid": result.study_uid,
                   "series_uid": result.series_uid, "sop_uid": result.sop_uid,
                   "reason": result.reason}
        if result.status == "quarantined":
            raise ApiError(422, "PACS_QUARANTINED",
                           f"instance quarantined: {result.reason}", payload)
        status = 201 if result.status == "stored" else 200
        return JSONResponse(payload, status_code=status)

    @app.get(API_PREFIX + "/worklist")
    def worklist(roles: frozenset = Depends(auth)):
        platform.refresh()
        entries = []
        for row in platform.registry.worklist():
            entries.append({
                "study_uid": row["study_uid"],
                "pseudonym": row["pseudonym"],
                "state": row["state"],
                "assigned_reader": row["second_opinion_expert"],
                "waiting_since": row["ready_at"],
                "second_opinion": row["state"] == "SECOND_OPINION_PENDING",
                "modality": row["modality"],
                "study_date": row["study_date"],
                "instance_count": row["instance_count"],
                "read_count": row["read_count"],
            })
        return {"entries": entries}

    @app.get(API_PREFIX + "/studies/{study_uid}")
    def study_detail(study_uid: str, roles: frozenset = Depends(auth)):
        platform.refresh()
        study = platform.registry.study(study_uid)
        if study is None:
            raise ApiError(404, "UNKNOWN_STUDY", f"no study {study_uid}")
        study["instances"] = platform.pacs.instances(study_uid)
        return study

    @app.get(API_PREFIX + "/studies/{study_uid}/instances/{sop_uid}")
    def instance_bytes(study_uid: str, sop_uid: str,
                       roles: frozenset = Depends(auth)):
        data = platform.pacs.retrieve(sop_uid)
        return Response(content=data, media_type="application/dicom")

    @app.get(API_PREFIX + "/studies/{study_uid}/preview/{sop_uid}")
    def instance_preview(study_uid: str, sop_uid: str,
                         wc: float | None = Query(default=None),
                         ww: float | None = Query(default=None),
                         roles: frozenset = Depends(auth)):
        data = platform.pacs.retrieve(sop_uid)
        f = parse(data)
        if wc is None:
            raw = get_value(f.dataset, _WINDOW_CENTER)
            if raw:
                wc = float(str(raw).split("\\")[0])
        if ww is None:
            raw = get_value(f.dataset, _WINDOW_WIDTH)
            if raw:
                ww = float(str(raw).split("\\")[0])
        if wc is None or ww is None:
            pixels = stored_pixels(f)
            low, high = float(pixels.min()), float(pixels.max())
            if wc is None:
                wc = (low + high) / 2.0
            if ww is None:
                ww = max(high - low, 1.0)
        image = render_preview(f, wc, ww)
        return Response(content=to_png(image), media_type="image/png")

    @app.post(API_PREFIX + "/studies/{study_uid}/protocol")
    def submit_protocol(study_uid: str, body: ProtocolIn, request: Request,
                        roles: frozenset = Depends(auth)):
        require(roles, "reader")
        platform.refresh()

        def run():
            protocol = platform.registry.submit_protocol(
                study_uid, body.reader_id,
                [n.model_dump() for n in body.nodules],
                body.lungrads_category, finalize=body.finalize)
            return 201, protocol

        return idempotent(request, body.model_dump_json(), run)

    @app.post(API_PREFIX + "/studies/{study_uid}/second-opinion")
    def request_second_opinion(study_uid: str, body: SecondOpinionIn,
                               request: Request,
                               roles: frozenset = Depends(auth)):
        require(roles, "reader")
        platform.refresh()

        def run():
            case = platform.registry.request_second_opinion(
                study_uid, body.expert_id)
            return 201, case

        return idempotent(request, body.model_dump_json(), run)

    @app.post(API_PREFIX + "/studies/{study_uid}/second-opinion/protocol")
    def submit_second_opinion(study_uid: str, body: ProtocolIn,
                              request: Request,
                              roles: frozenset = Depends(auth)):
        require(roles, "expert")
        platform.refresh()

        def run():
            protocol = platform.registry.submit_protocol(
                study_uid, body.reader_id,
                [n.model_dump() for n in body.nodules],
                body.lungrads_category, is_second_opinion=True,
                finalize=body.finalize)
            return 201, protocol

        return idempotent(request, body.model_dump_json(), run)

    @app.get(API_PREFIX + "/participants/{pseudonym}/timeline")
    def timeline(pseudonym: str, roles: frozenset = Depends(auth)):
        platform.refresh()
        entries = platform.registry.timeline(pseudonym)
        case = platform.registry.get_case(pseudonym)
        return {"pseudonym": pseudonym, "state": case["state"],
                "entries": entries}

    @app.get(API_PREFIX + "/contact-tasks")
    def contact_tasks(status: str | None = Query(default=None),
                      roles: frozenset = Depends(auth)):
        platform.refresh()
        return {"tasks": platform.registry.contact_tasks(status=status)}

    @app.post(API_PREFIX + "/contact-tasks/{task_id}/close")
    def close_contact_task(task_id: str, body: TaskCloseIn,
                           roles: frozenset = Depends(auth)):
        require(roles, "reader")
        platform.refresh()
        return platform.registry.close_contact_task(task_id, body.note)

    @app.get(API_PREFIX + "/stats")
    def stats(roles: frozenset = Depends(auth)):
        platform.refresh()
        return platform.registry.stats()

    @app.get(API_PREFIX + "/export")
    def export_csv(roles: frozenset = Depends(auth)):
        platform.refresh()
        data, _ = platform.registry.export_csv()
        return Response(content=data, media_type="text/csv; charset=utf-8")

    @app.get(API_PREFIX + "/export/manifest")
    def export_manifest(roles: frozenset = Depends(auth)):
        platform.refresh()
        _, manifest = platform.registry.export_csv()
        return manifest

    return app
