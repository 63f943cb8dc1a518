import json
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from stationflow.scenario import ScenarioEngine
from stationflow.service import schemas
from stationflow.service.app import create_app


@pytest.fixture(scope="module")
def client(small_city, small_mgat):
    engine = ScenarioEngine(small_mgat, small_city.stations, small_city.layers,
                            samples=small_city.samples)
    return TestClient(create_app(engine))


@pytest.fixture(scope="module")
def month(small_city):
    return str(small_city.months[-1])


def test_health(client, small_city):
    doc = client.get("/health").json()
    assert doc["status"] == "ok"
    assert doc["variant"] == "mgat"
    assert str(small_city.months[0]) in doc["months"]


def test_stations_endpoint(client, month, small_city):
    res = client.get("/stations", params={"month": month})
    assert res.status_code == 200
    doc = res.json()
    assert doc["month"] == month
    assert len(doc["stations"]) == len(small_city.active_ids(small_city.months[-1]))
    for row in doc["stations"]:
        assert row["y_out"] >= 0.0
        assert row["y_out"] == max(0.0, row["raw_out"])


def test_stations_bad_month(client):
    assert client.get("/stations", params={"month": "202-xx"}).status_code == 422
    assert client.get("/stations", params={"month": "1990-01"}).status_code == 404


def test_scenario_roundtrip(client, month):
    res = client.post("/scenarios", json={
        "base_month": month,
        "additions": [{"id": "WEB1", "lat": 40.734, "lon": -73.989}],
        "removals": [],
    })
    assert res.status_code == 201
    sid = res.json()["id"]
    doc = client.get(f"/scenarios/{sid}/result").json()
    assert doc["scenario_id"] == sid
    cands = [s for s in doc["stations"] if s["is_candidate"]]
    assert len(cands) == 1
    assert cands[0]["station_id"] == "WEB1"
    assert len(doc["candidate_attention"]) == 10    # 2 kinds x k=5


def test_scenario_rejections(client, month):
    res = client.post("/scenarios", json={
        "base_month": month,
        "additions": [{"id": "FAR", "lat": 10.0, "lon": 10.0}],
    })
    assert res.status_code == 422
    assert "outside" in res.json()["detail"]
    assert client.get("/scenarios/nope/result").status_code == 404


def test_attention_endpoint(client, month, small_city):
    sid = small_city.active_ids(small_city.months[-1])[0]
    doc = client.get(f"/stations/{sid}/attention", params={"month": month}).json()
    assert len(doc["edges"]) == 10
    by_kind = {}
    for e in doc["edges"]:
        by_kind.setdefault(e["graph_kind"], []).append(e["weight"])
    for kind, weights in by_kind.items():
        assert sum(weights) == pytest.approx(1.0, abs=1e-6)
    assert client.get("/stations/GHOST/attention",
                      params={"month": month}).status_code == 404


def test_attribution_endpoint(client, month, small_city):
    sid = small_city.active_ids(small_city.months[-1])[0]
    res = client.get(f"/stations/{sid}/attribution",
                     params={"month": month, "n_coalitions": 128})
    assert res.status_code == 200
    doc = res.json()
    out_entries = [e for e in doc["entries"] if e["flow_direction"] == "out"]
    assert len(out_entries) == 45
    total = doc["base_out"] + sum(e["shap_value"] for e in out_entries)
    stations = client.get("/stations", params={"month": month}).json()["stations"]
    raw_out = next(s["raw_out"] for s in stations if s["station_id"] == sid)
    assert total == pytest.approx(raw_out, abs=1e-3)


def test_json_schema_docs_current(client):
    """The committed schema files must match the live pydantic models."""
    schema_dir = Path(__file__).resolve().parents[1] / "docs" / "schemas"
    schema_dir.mkdir(parents=True, exist_ok=True)
    models = {
        "health": schemas.HealthOut,
        "stations": schemas.StationsOut,
        "scenario_request": schemas.ScenarioIn,
        "scenario_created": schemas.ScenarioCreatedOut,
        "scenario_result": schemas.ScenarioResultOut,
        "attention": schemas.AttentionOut,
        "attribution": schemas.AttributionOut,
    }
    for name, model in models.items():
        path = schema_dir / f"{name}.schema.json"
        current = json.dumps(model.model_json_schema(), indent=2, sort_keys=True)
        if not path.exists() or path.read_text() != current:
            path.write_text(current)
        assert json.loads(path.read_text())["title"] == model.__name__
