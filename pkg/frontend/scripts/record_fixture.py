"""Record demo-bank service traffic for the frontend test suite.

Drives the real HTTP app in-process against a seeded two-class 2-D bank and
writes every request/response pair, in order, to test/fixtures/demo.json.
The vitest suite replays this script verbatim, so regenerate it after any
service change:

    python3 scripts/record_fixture.py
"""

import json
from pathlib import Path

import numpy as np
from fastapi.testclient import TestClient

from adanpc.classifier import predict_excluding
from adanpc.memory_bank import MemoryBank, Source
from adanpc.service import create_app

MARGIN = 0.8
K = 7
SEED = 20240816
CENTER_0 = -0.10  # class centers as angles on the unit circle
CENTER_1 = 0.55


def build_bank() -> MemoryBank:
    rng = np.random.default_rng(SEED)
    bank = MemoryBank(dim=2, num_classes=2)
    for label, center in ((0, CENTER_0), (1, CENTER_1)):
        for theta in rng.normal(center, 0.16, size=20):
            bank.insert([np.cos(theta), np.sin(theta)], label, Source(domain_id=0))
    return bank


def on_circle(theta: float) -> list[float]:
    return [float(np.cos(theta)), float(np.sin(theta))]


def pick_contested(bank: MemoryBank) -> list[float]:
    # walk the arc between the class centers until the vote splits and the
    # confidence sits below the commit margin with some headroom
    for t in np.linspace(0.15, 0.85, 57):
        probe = on_circle(CENTER_0 * (1 - t) + CENTER_1 * t)
        pred = predict_excluding(bank, probe, K, set())
        labels = {bank.entry(i).label for i in pred.neighbors.ids()}
        if len(labels) > 1 and 0.55 < pred.confidence < MARGIN - 0.03:
            return probe
    raise SystemExit("no contested probe found; retune the demo geometry")


class Recorder:
    """TestClient wrapper that appends every exchange to a step list."""

    def __init__(self, client: TestClient):
        self.client = client
        self.steps: list[dict] = []

    def get(self, path: str) -> dict:
        resp = self.client.get(path)
        self.steps.append(
            {"method": "GET", "path": path, "status": resp.status_code, "response": resp.json()}
        )
        return resp.json()

    def post(self, path: str, body: dict) -> dict:
        resp = self.client.post(path, json=body)
        self.steps.append(
            {
                "method": "POST",
                "path": path,
                "body": body,
                "status": resp.status_code,
                "response": resp.json(),
            }
        )
        return resp.json()

    def take(self) -> list[dict]:
        steps, self.steps = self.steps, []
        return steps


def main() -> None:
    bank = build_bank()
    client = TestClient(create_app(bank, k_default=K, margin=MARGIN))
    rec = Recorder(client)
    probe = pick_contested(bank)

    # scenario 1: a contested prediction is refused by the commit gate
    rec.get("/v1/memory/stats")
    pred = rec.post("/v1/predict", {"feature": probe, "k": K})
    assert pred["confidence"] < MARGIN
    blocked = rec.post("/v1/commit", {"query_id": pred["query_id"]})
    assert blocked == {"inserted": False, "margin": MARGIN}
    below_margin = {"steps": rec.take()}

    # scenario 2: exclude every dissenting neighbor, one click at a time,
    # then commit the curated prediction
    rec.get("/v1/memory/stats")
    pred = rec.post("/v1/predict", {"feature": probe, "k": K})
    label0 = pred["label"]
    baseline_confidence = pred["confidence"]
    current = pred
    click_order: list[int] = []
    excluded: set[int] = set()
    while True:
        wrong = [n for n in current["neighbors"] if n["label"] != label0]
        if not wrong:
            break
        target = wrong[0]["entry_id"]  # cards render similarity-descending
        click_order.append(target)
        excluded.add(target)
        current = rec.post(
            "/v1/curate", {"query_id": pred["query_id"], "exclude": [target]}
        )
    oracle = predict_excluding(bank, probe, K, excluded)
    assert oracle.confidence == current["confidence"]
    assert oracle.confidence > baseline_confidence
    assert oracle.confidence > MARGIN, "curated vote should clear the commit gate"
    committed = rec.post("/v1/commit", {"query_id": pred["query_id"]})
    assert committed["inserted"] is True
    raise_confidence = {
        "steps": rec.take(),
        "click_order": click_order,
        "baseline_confidence": baseline_confidence,
        "oracle_confidence": oracle.confidence,
        "final_label": label0,
    }

    # scenario 3: toggling one neighbor off and back on lands exactly where
    # it started (the bank now holds the entry committed above)
    rec.get("/v1/memory/stats")
    pred = rec.post("/v1/predict", {"feature": probe, "k": K})
    toggle_id = pred["neighbors"][0]["entry_id"]
    rec.post("/v1/curate", {"query_id": pred["query_id"], "exclude": [toggle_id]})
    restored = rec.post("/v1/curate/clear", {"query_id": pred["query_id"]})
    assert restored == pred
    involution = {"steps": rec.take(), "toggle_id": toggle_id}

    # scenario 4: the bank mutates between predict and commit, so the commit
    # is refused and the client must re-predict
    deep = on_circle(CENTER_1)
    rec.get("/v1/memory/stats")
    pred = rec.post("/v1/predict", {"feature": deep, "k": K})
    assert pred["confidence"] > MARGIN
    out_of_band = client.post("/v1/adapt", json={"feature": on_circle(CENTER_0)})
    assert out_of_band.json()["inserted"] is True
    rec.post("/v1/commit", {"query_id": pred["query_id"]})
    assert rec.steps[-1]["status"] == 409
    fresh = rec.post("/v1/predict", {"feature": deep, "k": K})
    committed = rec.post("/v1/commit", {"query_id": fresh["query_id"]})
    assert committed["inserted"] is True
    stale_commit = {"steps": rec.take()}

    # immutable per-entry lookups, served unordered to the scatter preview
    entries = {}
    size = client.get("/v1/memory/stats").json()["size"]
    for entry_id in range(size):
        resp = client.get(f"/v1/entries/{entry_id}?include_feature=1")
        assert resp.status_code == 200
        entries[str(entry_id)] = resp.json()

    fixture = {
        "margin": MARGIN,
        "k": K,
        "probe": probe,
        "scenarios": {
            "below_margin": below_margin,
            "raise_confidence": raise_confidence,
            "involution": involution,
            "stale_commit": stale_commit,
        },
        "entries": entries,
    }
    out = Path(__file__).resolve().parent.parent / "test" / "fixtures" / "demo.json"
    out.write_text(json.dumps(fixture, indent=1) + "\n")
    print(
        f"wrote {out}: baseline {baseline_confidence:.4f} -> curated "
        f"{oracle.confidence:.4f} over {len(click_order)} exclusions, "
        f"{size} entries"
    )


if __name__ == "__main__":
    main()
