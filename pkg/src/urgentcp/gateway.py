"""HTTP surface for decision makers and sensors.

All endpoints live under ``/api`` and require ``Authorization: Bearer
<token>``.  Live updates flow through ``GET /api/events`` as server-sent
events with strictly increasing per-stream sequence numbers; everything
shown by a client is also fetchable with plain GETs.  Visualization of
results is handed off, not proxied: the ``viz`` endpoint returns the
host, port, and token needed to connect external tooling directly.
"""

import hashlib
import json
from pathlib import Path

from fastapi import FastAPI, Header, HTTPException, Request
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles

from .errors import (ControlPlaneError, CyclicWorkflow, InvalidArgument,
                     NotFound, PredicateSyntax, UnknownSensorType)
from .store import JobStatus
from .workflow import WorkflowDefinition


def create_app(cp) -> FastAPI:
    """Build the FastAPI app around a ControlPlane."""
    app = FastAPI(title="urgent computing control plane", docs_url=None, redoc_url=None)
    token = cp.config.api.token

    def require_auth(authorization):
        if authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="bad or missing bearer token")

    async def read_json(request: Request) -> dict:
        try:
            body = json.loads(await request.body() or b"null")
        except ValueError:
            raise HTTPException(status_code=400, detail="malformed JSON body")
        if not isinstance(body, dict):
            raise HTTPException(status_code=400, detail="JSON object body required")
        return body

    @app.post("/api/activities", status_code=201)
    async def create_activity(request: Request, authorization: str = Header(None)):
        require_auth(authorization)
        body = await read_json(request)
        workflow_id = body.get("workflow_id")
        if not workflow_id:
            raise HTTPException(status_code=400, detail="workflow_id required")
        try:
            activity_id = cp.engine.start_activity(
                workflow_id, body.get("context") or {}, origin="MANUAL")
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {"activity_id": activity_id}

    @app.get("/api/activities")
    def list_activities(authorization: str = Header(None)):
        require_auth(authorization)
        return [cp.store.activity_dict(a) for a in cp.store.list_activities()]

    @app.get("/api/activities/{activity_id}")
    def get_activity(activity_id: str, authorization: str = Header(None)):
        require_auth(authorization)
        try:
            return cp.store.activity_dict(cp.store.get_activity(activity_id))
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.post("/api/activities/{activity_id}/cancel", status_code=202)
    def cancel_activity(activity_id: str, authorization: str = Header(None)):
        require_auth(authorization)
        try:
            cp.engine.cancel_activity(activity_id)
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {"status": "cancelling"}

    @app.get("/api/activities/{activity_id}/jobs")
    def activity_jobs(activity_id: str, authorization: str = Header(None)):
        require_auth(authorization)
        try:
            cp.store.get_activity(activity_id)
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return [cp.store.job_dict(j) for j in cp.store.query_jobs(activity_id=activity_id)]

    @app.get("/api/machines")
    def list_machines(authorization: str = Header(None)):
        require_auth(authorization)
        out = []
        for machine in cp.store.list_machines():
            entry = cp.store.machine_dict(machine)
            report = cp.status.reliability(machine.machine_id)
            entry["reliability_report"] = {
                "window_polls": report.window_polls, "ok_polls": report.ok_polls,
                "reliability": report.reliability}
            try:
                est = cp.status.estimate_wait(
                    machine.machine_id, cp.config.api.reference_nodes,
                    cp.config.api.reference_walltime_s)
                entry["wait_estimate"] = {
                    "wait_s": est.wait_s, "ratio_used": est.ratio_used,
                    "sample_size": est.sample_size,
                    "nodes": est.nodes, "walltime_req_s": est.walltime_req_s}
            except ControlPlaneError:
                entry["wait_estimate"] = None
            out.append(entry)
        return out

    @app.post("/api/sensors/{sensor_type}", status_code=202)
    async def push_sensor(sensor_type: str, request: Request,
                          authorization: str = Header(None)):
        require_auth(authorization)
        payload = await request.body()
        source_id = request.headers.get("X-Source-Id", "anonymous")
        geo = None
        if "X-Geo-Lat" in request.headers and "X-Geo-Lon" in request.headers:
            try:
                geo = (float(request.headers["X-Geo-Lat"]),
                       float(request.headers["X-Geo-Lon"]))
            except ValueError:
                raise HTTPException(status_code=400, detail="bad geolocation headers")
        try:
            envelope_id = cp.sensors.ingest_push(sensor_type, source_id, payload, geo)
        except UnknownSensorType as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {"envelope_id": envelope_id}

    @app.post("/api/workflows", status_code=201)
    async def register_workflow(request: Request, authorization: str = Header(None)):
        require_auth(authorization)
        body = await read_json(request)
        try:
            definition = WorkflowDefinition.from_dict(body)
            workflow_id = cp.engine.register_workflow(definition)
        except PredicateSyntax as exc:
            return JSONResponse(status_code=400, content={
                "detail": {"error": "PredicateSyntax", "message": str(exc),
                           "offset": exc.offset}})
        except CyclicWorkflow as exc:
            return JSONResponse(status_code=400, content={
                "detail": {"error": "CyclicWorkflow", "message": str(exc)}})
        except InvalidArgument as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"workflow_id": workflow_id}

    @app.get("/api/workflows")
    def list_workflows(authorization: str = Header(None)):
        require_auth(authorization)
        return [json.loads(cp.store.get_workflow_json(wid))
                for wid in cp.store.list_workflow_ids()]

    @app.get("/api/events")
    def event_stream(since: int = 0, authorization: str = Header(None)):
        require_auth(authorization)

        def stream():
            for event in cp.bus.subscribe(since):
                if event is None:
                    yield ": keepalive\n\n"
                    continue
                data = json.dumps({"seq": event.seq, "kind": event.kind,
                                   "body": event.body, "at": event.at},
                                  sort_keys=True)
                yield f"id: {event.seq}\nevent: {event.kind}\ndata: {data}\n\n"

        return StreamingResponse(stream(), media_type="text/event-stream", headers={
            "Cache-Control": "no-cache", "X-Accel-Buffering": "no"})

    @app.get("/api/activities/{activity_id}/viz")
    def viz_handoff(activity_id: str, authorization: str = Header(None)):
        require_auth(authorization)
        try:
            cp.store.get_activity(activity_id)
        except NotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        jobs = [j for j in cp.store.query_jobs(activity_id=activity_id)
                if j.status == JobStatus.COMPLETED and j.result_handles]
        if not jobs:
            raise HTTPException(status_code=404, detail="no results yet")
        latest = max(jobs, key=lambda j: (j.ended_at or 0))
        machine = cp.store.get_machine(latest.machine_id)
        endpoint = cp.endpoint_for(machine.machine_id)
        viz_token = hashlib.sha256(
            f"{activity_id}:{token}".encode()).hexdigest()[:16]
        return {"host": endpoint.endpoint or machine.name,
                "port": endpoint.viz_port, "token": viz_token}

    console_dir = cp.config.console_dir
    if console_dir and Path(console_dir).is_dir():
        app.mount("/", StaticFiles(directory=console_dir, html=True), name="console")

    return app
