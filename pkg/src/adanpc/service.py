"""HTTP surface for prediction, neighbor inspection, and human curation.

Curation is session-scoped and non-destructive: excluding a neighbor hides it
from one query's vote without touching the bank, so several clients can curate
concurrently. Only commit mutates the bank, under a single writer lock, and
each commit is appended to an audit log whose replay reproduces the bank.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .classifier import Prediction, default_margin, predict_excluding
from .errors import AdanpcError
from .memory_bank import MemoryBank, Source, Target


@dataclass
class QueryState:
    feature: np.ndarray
    k: int
    excluded: set[int] = field(default_factory=set)
    bank_version: int = -1
    prediction: Prediction | None = None


def _neighbor_payload(bank: MemoryBank, pred: Prediction) -> list[dict]:
    out = []
    for entry_id, sim in pred.neighbors:
        prov = bank.entry(entry_id).provenance
        out.append(
            {
                "entry_id": int(entry_id),
                "similarity": float(sim),
                "label": int(bank.label_of(entry_id)),
                "provenance": "source" if isinstance(prov, Source) else "target",
            }
        )
    return out


def _prediction_payload(bank: MemoryBank, query_id: str, pred: Prediction) -> dict:
    return {
        "query_id": query_id,
        "label": pred.label,
        "confidence": pred.confidence,
        "probs": [float(p) for p in pred.probs],
        "neighbors": _neighbor_payload(bank, pred),
    }


def _parse_feature(body: dict, dim: int) -> np.ndarray:
    raw = body.get("feature")
    if not isinstance(raw, list) or not raw or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw
    ):
        raise HTTPException(400, detail="feature must be a non-empty number array")
    if len(raw) != dim:
        raise HTTPException(400, detail=f"feature has {len(raw)} values, bank dim is {dim}")
    return np.asarray(raw, dtype=np.float64)


def _parse_k(body: dict, default: int) -> int:
    k = body.get("k", default)
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise HTTPException(400, detail="k must be a positive integer")
    return k


def create_app(
    bank: MemoryBank,
    k_default: int = 10,
    margin: float | None = None,
    readonly: bool = False,
) -> FastAPI:
    app = FastAPI(title="feature-memory service")
    # the browser frontend is served from its own origin (file:// or a static
    # host); the service carries no credentials, so a wildcard is safe here
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    state_lock = threading.Lock()
    queries: dict[str, QueryState] = {}
    audit: list[dict] = []
    counter = {"n": 0}
    resolved_margin = margin if margin is not None else default_margin(bank.num_classes)

    app.state.bank = bank
    app.state.audit = audit
    app.state.margin = resolved_margin
    app.state.readonly = readonly

    @app.exception_handler(RequestValidationError)
    async def _bad_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": "malformed body"})

    @app.exception_handler(AdanpcError)
    async def _engine_error(request: Request, exc: AdanpcError):
        return JSONResponse(
            status_code=400, content={"detail": str(exc), "code": exc.code}
        )

    def run_query(qs: QueryState) -> Prediction:
        pred = predict_excluding(bank, qs.feature, qs.k, qs.excluded)
        qs.prediction = pred
        qs.bank_version = bank.version
        return pred

    def get_query(query_id) -> QueryState:
        qs = queries.get(query_id)
        if qs is None:
            raise HTTPException(404, detail=f"unknown query_id {query_id!r}")
        return qs

    @app.post("/v1/predict")
    def predict_endpoint(body: dict = Body(...)):
        feature = _parse_feature(body, bank.dim)
        k = _parse_k(body, k_default)
        with state_lock:
            counter["n"] += 1
            query_id = f"q-{counter['n']}"
            qs = QueryState(feature=feature, k=k)
            pred = run_query(qs)
            queries[query_id] = qs
        return _prediction_payload(bank, query_id, pred)

    @app.post("/v1/curate")
    def curate_endpoint(body: dict = Body(...)):
        query_id = body.get("query_id")
        exclude = body.get("exclude")
        if not isinstance(exclude, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in exclude
        ):
            raise HTTPException(400, detail="exclude must be a list of entry ids")
        with state_lock:
            qs = get_query(query_id)
            for entry_id in exclude:
                try:
                    bank.entry(entry_id)
                except KeyError:
                    raise HTTPException(404, detail=f"unknown entry_id {entry_id}")
            qs.excluded.update(exclude)
            pred = run_query(qs)
            audit.append(
                {"event": "curate", "query_id": query_id, "exclude": sorted(qs.excluded)}
            )
        return _prediction_payload(bank, query_id, pred)

    @app.post("/v1/curate/clear")
    def curate_clear_endpoint(body: dict = Body(...)):
        query_id = body.get("query_id")
        with state_lock:
            qs = get_query(query_id)
            qs.excluded.clear()
            pred = run_query(qs)
            audit.append({"event": "curate_clear", "query_id": query_id})
        return _prediction_payload(bank, query_id, pred)

    @app.post("/v1/commit")
    def commit_endpoint(body: dict = Body(...)):
        if readonly:
            raise HTTPException(403, detail="service is read-only")
        query_id = body.get("query_id")
        with state_lock:
            qs = get_query(query_id)
            if qs.bank_version != bank.version:
                raise HTTPException(
                    409, detail="bank changed since this query's last prediction; re-predict"
                )
            pred = qs.prediction
            if pred.confidence <= resolved_margin:
                return {"inserted": False, "margin": resolved_margin}
            entry_id = bank.insert(qs.feature, pred.label, Target(pred.confidence))
            audit.append(
                {
                    "event": "commit",
                    "query_id": query_id,
                    "entry_id": entry_id,
                    "label": pred.label,
                    "confidence": pred.confidence,
                    "feature": [float(v) for v in qs.feature],
                }
            )
        return {"inserted": True, "entry_id": entry_id, "margin": resolved_margin}

    def adapt_endpoint(body: dict = Body(...)):
        if readonly:
            raise HTTPException(403, detail="service is read-only")
        feature = _parse_feature(body, bank.dim)
        k = _parse_k(body, k_default)
        with state_lock:
            pred = predict_excluding(bank, feature, k, set())
            inserted = pred.confidence > resolved_margin
            entry_id = None
            if inserted:
                entry_id = bank.insert(feature, pred.label, Target(pred.confidence))
                audit.append(
                    {
                        "event": "adapt",
                        "entry_id": entry_id,
                        "label": pred.label,
                        "confidence": pred.confidence,
                        "feature": [float(v) for v in feature],
                    }
                )
        payload = _prediction_payload(bank, "", pred)
        del payload["query_id"]
        payload.update({"inserted": inserted, "entry_id": entry_id})
        return payload

    # one gated predict-and-insert step; registered unversioned as well since
    # probes of the write surface commonly hit the bare path
    app.post("/v1/adapt")(adapt_endpoint)
    app.post("/adapt")(adapt_endpoint)

    @app.get("/v1/memory/stats")
    def stats_endpoint():
        return {
            "size": len(bank),
            "source_count": bank.source_count(),
            "target_count": bank.target_count(),
            "dim": bank.dim,
            "classes": bank.num_classes,
        }

    @app.get("/v1/entries/{entry_id}")
    def entry_endpoint(entry_id: int, include_feature: int = 0):
        try:
            entry = bank.entry(entry_id)
        except KeyError:
            raise HTTPException(404, detail=f"unknown entry_id {entry_id}")
        prov = entry.provenance
        payload = {
            "entry_id": entry.id,
            "label": entry.label,
            "provenance": "source" if isinstance(prov, Source) else "target",
        }
        if isinstance(prov, Source):
            payload["domain_id"] = prov.domain_id
        else:
            payload["confidence"] = prov.confidence
        if include_feature:
            payload["feature"] = [float(v) for v in entry.feature]
        return payload

    @app.get("/v1/audit")
    def audit_endpoint():
        return {"events": list(audit)}

    return app


def replay_audit(bank: MemoryBank, events: list[dict]) -> MemoryBank:
    """Apply the log's bank mutations, in order, to a bank.

    Starting from a copy of the bank the service was launched with, this
    reproduces the served bank exactly: inserts quantize the same way and ids
    are assigned in the same sequence.
    """
    for event in events:
        if event.get("event") in ("commit", "adapt"):
            bank.insert(
                np.asarray(event["feature"], dtype=np.float64),
                int(event["label"]),
                Target(float(event["confidence"])),
            )
    return bank
