"""HTTP gateway over one live deployment runtime.

The runtime lives on its own scheduler thread (wall-clock paced); every
handler marshals its work onto that thread and waits for the answer, so HTTP
callers never touch simulation state concurrently.  When the gateway has not
been started, calls run inline, which is what deterministic tests use: advance
the virtual clock by hand, then query.
"""

from __future__ import annotations

import dataclasses
import logging
import threading
from concurrent.futures import Future
from pathlib import Path
from typing import Any, Callable, Optional

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import HTMLResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from flowledger.events import SeqTooOld
from flowledger.intent import NoFeasiblePolicy, UnknownTarget
from flowledger.scheduler import US_PER_S
from flowledger.simnet.scenario import (
    ScenarioRuntime,
    ScenarioSpec,
    load_scenario,
    run_scenario,
    scenario_names,
)

log = logging.getLogger(__name__)

MAX_RUN_DURATION_S = 300.0
DEFAULT_SCENARIO = "quiet"


class Gateway:
    """Owns the live runtime and its scheduler thread."""

    def __init__(self, spec: Optional[ScenarioSpec] = None,
                 rate: float = 1.0) -> None:
        self.spec = spec or load_scenario(DEFAULT_SCENARIO)
        self.runtime = ScenarioRuntime(self.spec)
        self.rate = rate
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(
            target=lambda: self.runtime.scheduler.run_paced(rate=self.rate),
            daemon=True, name="flowledger-runtime")
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self.runtime.scheduler.call_soon_threadsafe(self.runtime.scheduler.stop)
        self._thread.join(timeout=5.0)
        self._thread = None

    def call(self, fn: Callable[[], Any]) -> Any:
        """Run fn on the scheduler thread (inline when not started)."""
        if self._thread is None or not self._thread.is_alive():
            return fn()
        fut: Future = Future()

        def wrapped() -> None:
            try:
                fut.set_result(fn())
            except BaseException as exc:  # marshalled back to the caller
                fut.set_exception(exc)

        self.runtime.scheduler.call_soon_threadsafe(wrapped)
        return fut.result(timeout=10.0)


class IntentRequest(BaseModel):
    verb: str
    target: str
    preference: str = "none"


class RemapRequest(BaseModel):
    switch_id: str
    controller_id: str


class EvictRequest(BaseModel):
    reason: str = "operator request"


class CaptureRequest(BaseModel):
    policy: str


class RunRequest(BaseModel):
    scenario: Any = Field(description="bundled name or inline scenario document")
    seed: Optional[int] = None
    defense: Optional[str] = None
    duration_s: Optional[float] = None
    out_dir: Optional[str] = None


def _resolve_run_spec(req: RunRequest) -> ScenarioSpec:
    try:
        if isinstance(req.scenario, str):
            spec = load_scenario(req.scenario)
        elif isinstance(req.scenario, dict):
            spec = ScenarioSpec.from_doc(req.scenario)
        else:
            raise HTTPException(422,
                                "scenario must be a name or a scenario document")
    except FileNotFoundError as exc:
        raise HTTPException(404, str(exc)) from None
    except (KeyError, ValueError) as exc:
        raise HTTPException(422, f"bad scenario document: {exc}") from None
    overrides = {}
    if req.seed is not None:
        overrides["seed"] = req.seed
    if req.defense is not None:
        overrides["defense"] = req.defense
    if req.duration_s is not None:
        overrides["duration_s"] = req.duration_s
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    if spec.duration_s > MAX_RUN_DURATION_S:
        raise HTTPException(422, f"duration_s is capped at {MAX_RUN_DURATION_S}")
    return spec


def create_app(gateway: Gateway, frontend_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="flowledger gateway", version="0.1.0")
    rt = gateway.runtime

    @app.get("/health")
    def health() -> dict:
        return gateway.call(lambda: {
            "ok": True,
            "scenario": gateway.spec.name,
            "now_s": rt.scheduler.now_us / US_PER_S,
            "chain_height": rt.chain.head().height,
            "paused": gateway._thread is None,
        })

    # -- chain -------------------------------------------------------------------------

    @app.get("/chain/head")
    def chain_head() -> dict:
        def view():
            head = rt.chain.head()
            return {"height": head.height,
                    "block_hash": head.block_hash.hex(),
                    "timestamp_us": head.timestamp_us,
                    "n_txs": len(head.txs)}
        return gateway.call(view)

    @app.get("/chain/blocks/{height}")
    def chain_block(height: int) -> dict:
        def view():
            ledger = rt.chain.state(0).ledger
            if height < 0 or height > ledger.height:
                raise HTTPException(404, f"no block at height {height}")
            return ledger.get_block(height).to_record()
        return gateway.call(view)

    @app.get("/chain/tx/{tx_hash}")
    def chain_tx(tx_hash: str) -> dict:
        def view():
            try:
                digest = bytes.fromhex(tx_hash)
            except ValueError:
                raise HTTPException(422, "tx_hash must be hex") from None
            found = rt.chain.state(0).ledger.get_tx(digest)
            if found is None:
                raise HTTPException(404, "unknown transaction")
            tx, height = found
            return {"height": height, **tx.to_record()}
        return gateway.call(view)

    # -- network views -----------------------------------------------------------------

    @app.get("/registry")
    def registry() -> dict:
        return gateway.call(lambda: {
            "elements": [rec.to_doc() for rec in rt.chain.state(0).registry.view()],
        })

    @app.get("/topology")
    def topology() -> dict:
        return gateway.call(rt.topology.view)

    @app.get("/mapping")
    def mapping() -> dict:
        return gateway.call(rt.middleware.mapping_view)

    @app.get("/metrics")
    def metrics(last: int = Query(default=120, ge=1, le=10_000)) -> dict:
        return gateway.call(lambda: {
            "columns": list(ScenarioRuntime.TRACE_COLUMNS),
            "rows": rt.rows[-last:],
        })

    @app.get("/summary")
    def summary() -> dict:
        return gateway.call(rt.summary)

    # -- events ------------------------------------------------------------------------

    @app.get("/events")
    def events(from_seq: int = Query(default=0, ge=0),
               limit: int = Query(default=500, ge=1, le=5000)) -> dict:
        def view():
            try:
                batch = rt.events.since(from_seq, limit=limit)
            except SeqTooOld as exc:
                raise HTTPException(410, str(exc)) from None
            return {"events": [e.to_doc() for e in batch],
                    "head_seq": rt.events.head_seq}
        return gateway.call(view)

    # -- intents -----------------------------------------------------------------------

    @app.get("/intents")
    def intents() -> dict:
        return gateway.call(lambda: {"intents": rt.engine.list_intents()})

    @app.post("/intents", status_code=202)
    def submit_intent(req: IntentRequest) -> dict:
        def act():
            try:
                intent_id = rt.engine.submit(req.verb, req.target, req.preference)
            except UnknownTarget as exc:
                raise HTTPException(404, f"unknown target: {exc}") from None
            except (NoFeasiblePolicy, ValueError) as exc:
                raise HTTPException(422, str(exc)) from None
            return {"intent_id": intent_id}
        return gateway.call(act)

    @app.get("/intents/{intent_id}/report")
    def intent_report(intent_id: str) -> dict:
        def view():
            try:
                return rt.engine.report(intent_id)
            except KeyError:
                raise HTTPException(404, f"unknown intent {intent_id}") from None
        return gateway.call(view)

    # -- operator actions ---------------------------------------------------------------

    @app.post("/mapping/remap")
    def remap(req: RemapRequest) -> dict:
        def act():
            try:
                rt.middleware.remap(req.switch_id, req.controller_id)
            except ValueError as exc:
                raise HTTPException(409, str(exc)) from None
            return rt.middleware.mapping_view()
        return gateway.call(act)

    @app.post("/elements/{element_id}/evict")
    def evict(element_id: str, req: EvictRequest) -> dict:
        def act():
            try:
                tx = rt.middleware.evict(element_id, req.reason)
            except ValueError as exc:
                raise HTTPException(404, str(exc)) from None
            return {"evicted": element_id, "tx_hash": tx.hex()}
        return gateway.call(act)

    @app.post("/capture")
    def capture(req: CaptureRequest) -> dict:
        def act():
            try:
                rt.middleware.set_capture_policy(req.policy)
            except ValueError as exc:
                raise HTTPException(422, str(exc)) from None
            return {"capture_policy": req.policy}
        return gateway.call(act)

    # -- scenario runs ------------------------------------------------------------------

    @app.get("/scenarios")
    def scenarios() -> dict:
        return {"scenarios": scenario_names()}

    @app.post("/scenarios/run")
    def run(req: RunRequest) -> dict:
        spec = _resolve_run_spec(req)
        # a fresh runtime on a fresh virtual clock; the live one is untouched
        result = run_scenario(spec)
        doc = result.summary()
        if req.out_dir:
            doc["outputs"] = {k: str(Path(v)) for k, v in
                              result.write_outputs(req.out_dir).items()}
        return doc

    @app.get("/export/chain", response_class=PlainTextResponse)
    def export_chain_ndjson() -> str:
        import io

        from flowledger.chain.ledger import export_chain

        def view():
            buf = io.StringIO()
            export_chain(rt.chain.state(0).ledger, buf)
            return buf.getvalue()
        return gateway.call(view)

    @app.get("/export/events", response_class=PlainTextResponse)
    def export_events_ndjson() -> str:
        return gateway.call(rt.events.to_ndjson)

    if frontend_dir and Path(frontend_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=frontend_dir, html=True),
                  name="ui")

        @app.get("/", response_class=HTMLResponse, include_in_schema=False)
        def index() -> str:
            return '<meta http-equiv="refresh" content="0; url=/ui/">'

    return app
