"""FastAPI wrapper around the scenario engine."""

from __future__ import annotations

import logging

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from ..common import DataError, Month
from ..scenario import Scenario, ScenarioEngine, ScenarioError
from . import schemas

log = logging.getLogger(__name__)


def _parse_month(text: str) -> Month:
    try:
        return Month.parse(text)
    except (DataError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))


def create_app(engine: ScenarioEngine) -> FastAPI:
    app = FastAPI(title="stationflow", version="0.1.0")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    @app.get("/health", response_model=schemas.HealthOut)
    def health():
        return schemas.HealthOut(status="ok", variant=engine.trained.variant,
                                 months=[str(m) for m in engine.months()])

    @app.get("/stations", response_model=schemas.StationsOut)
    def stations(month: str):
        m = _parse_month(month)
        try:
            state = engine.baseline(m)
        except DataError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        rows = []
        for i, sid in enumerate(state.ids):
            raw_out, raw_in = state.raw_pred[i]
            rows.append(schemas.StationOut(
                station_id=sid, lat=float(state.lats[i]), lon=float(state.lons[i]),
                y_out=max(0.0, float(raw_out)), y_in=max(0.0, float(raw_in)),
                raw_out=float(raw_out), raw_in=float(raw_in)))
        return schemas.StationsOut(month=str(m), stations=rows)

    @app.post("/scenarios", response_model=schemas.ScenarioCreatedOut, status_code=201)
    def create_scenario(body: schemas.ScenarioIn):
        scenario = Scenario.from_dict({
            "base_month": body.base_month,
            "additions": [c.model_dump() for c in body.additions],
            "removals": body.removals,
            "age_override": body.age_override,
        })
        try:
            engine.predict_scenario(scenario)
        except (ScenarioError, DataError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return schemas.ScenarioCreatedOut(id=scenario.id)

    @app.get("/scenarios/{scenario_id}/result",
             response_model=schemas.ScenarioResultOut)
    def scenario_result(scenario_id: str):
        result = engine.store.get_result(scenario_id)
        if result is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown scenario {scenario_id!r}")
        return schemas.ScenarioResultOut(**result)

    @app.get("/stations/{station_id}/attention", response_model=schemas.AttentionOut)
    def station_attention(station_id: str, month: str):
        m = _parse_month(month)
        try:
            edges = engine.station_attention(station_id, m)
        except DataError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return schemas.AttentionOut(
            station_id=station_id, month=str(m),
            edges=[schemas.AttentionEdgeOut(**vars(e)) for e in edges])

    @app.get("/stations/{station_id}/attribution",
             response_model=schemas.AttributionOut)
    def station_attribution(station_id: str, month: str,
                            n_coalitions: int = 2048, seed: int = 0):
        m = _parse_month(month)
        try:
            attrs = engine.station_attribution(station_id, m,
                                               n_coalitions=n_coalitions, seed=seed)
        except DataError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        base_out = next(a.base_value for a in attrs if a.flow_direction == "out")
        base_in = next(a.base_value for a in attrs if a.flow_direction == "in")
        return schemas.AttributionOut(
            station_id=station_id, month=str(m), base_out=base_out, base_in=base_in,
            entries=[schemas.AttributionEntryOut(
                feature_name=a.feature_name, flow_direction=a.flow_direction,
                shap_value=a.shap_value, feature_value=a.feature_value)
                for a in attrs])

    return app
