// API payload shapes (mirrors the server's JSON schemas in docs/schemas/).

export interface StationOut {
  station_id: string;
  lat: number;
  lon: number;
  y_out: number;
  y_in: number;
  raw_out: number;
  raw_in: number;
}

export interface StationsOut {
  month: string;
  stations: StationOut[];
}

export interface HealthOut {
  status: string;
  variant: string;
  months: string[];
}

export interface CandidateIn {
  id: string;
  lat: number;
  lon: number;
}

export interface ScenarioIn {
  base_month: string;
  additions: CandidateIn[];
  removals: string[];
  age_override?: number;
}

export interface ScenarioStationOut {
  station_id: string;
  lat: number;
  lon: number;
  is_candidate: boolean;
  y_out: number;
  y_in: number;
  raw_out: number;
  raw_in: number;
  delta_out: number;
  delta_in: number;
}

export interface AttentionEdgeOut {
  center: string;
  neighbor: string;
  graph_kind: string;
  score: number;
  weight: number;
}

export interface ScenarioResultOut {
  scenario_id: string;
  base_month: string;
  sigma_changed: boolean;
  recompute_seconds: number;
  warnings: string[];
  stations: ScenarioStationOut[];
  candidate_attention: AttentionEdgeOut[];
}

export interface AttentionOut {
  station_id: string;
  month: string;
  edges: AttentionEdgeOut[];
}

export interface AttributionEntryOut {
  feature_name: string;
  flow_direction: string;
  shap_value: number;
  feature_value: number;
}

export interface AttributionOut {
  station_id: string;
  month: string;
  base_out: number;
  base_in: number;
  entries: AttributionEntryOut[];
}
