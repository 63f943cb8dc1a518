"""Pydantic request/response models for the HTTP API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthOut(BaseModel):
    status: str
    variant: str
    months: list[str]


class StationOut(BaseModel):
    station_id: str
    lat: float
    lon: float
    y_out: float = Field(description="served prediction, trips/day, clipped at 0")
    y_in: float
    raw_out: float
    raw_in: float


class StationsOut(BaseModel):
    month: str
    stations: list[StationOut]


class CandidateIn(BaseModel):
    id: str
    lat: float
    lon: float


class ScenarioIn(BaseModel):
    base_month: str
    additions: list[CandidateIn] = []
    removals: list[str] = []
    age_override: int = 0


class ScenarioCreatedOut(BaseModel):
    id: str


class ScenarioStationOut(BaseModel):
    station_id: str
    lat: float
    lon: float
    is_candidate: bool
    y_out: float
    y_in: float
    raw_out: float
    raw_in: float
    delta_out: float
    delta_in: float


class AttentionEdgeOut(BaseModel):
    center: str
    neighbor: str
    graph_kind: str
    score: float
    weight: float


class ScenarioResultOut(BaseModel):
    scenario_id: str
    base_month: str
    sigma_changed: bool
    recompute_seconds: float
    warnings: list[str]
    stations: list[ScenarioStationOut]
    candidate_attention: list[AttentionEdgeOut]


class AttentionOut(BaseModel):
    station_id: str
    month: str
    edges: list[AttentionEdgeOut]


class AttributionEntryOut(BaseModel):
    feature_name: str
    flow_direction: str
    shap_value: float
    feature_value: float


class AttributionOut(BaseModel):
    station_id: str
    month: str
    base_out: float
    base_in: float
    entries: list[AttributionEntryOut]
