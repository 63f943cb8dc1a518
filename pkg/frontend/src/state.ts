// Session state and its transitions, kept framework-free so the logic is
// unit-testable. The candidate list is the client-side mirror of the
// scenario body; results only ever come back from the server.

import type { CandidateIn, ScenarioIn, ScenarioResultOut } from "./types.js";

export interface SessionState {
  month: string;
  candidates: CandidateIn[];
  lastResult: ScenarioResultOut | null;
  selectedStation: string | null;
  requestSeq: number; // latest-wins: only the newest in-flight request may land
  appliedSeq: number;
}

export function initialState(month: string): SessionState {
  return {
    month,
    candidates: [],
    lastResult: null,
    selectedStation: null,
    requestSeq: 0,
    appliedSeq: 0,
  };
}

let counter = 0;

export function nextCandidateId(existing: CandidateIn[]): string {
  counter += 1;
  let id = `cand-${counter}`;
  while (existing.some((c) => c.id === id)) {
    counter += 1;
    id = `cand-${counter}`;
  }
  return id;
}

export function addCandidate(
  state: SessionState,
  lat: number,
  lon: number,
): SessionState {
  const candidate = { id: nextCandidateId(state.candidates), lat, lon };
  return { ...state, candidates: [...state.candidates, candidate] };
}

export function removeCandidate(state: SessionState, id: string): SessionState {
  return { ...state, candidates: state.candidates.filter((c) => c.id !== id) };
}

export function setMonth(state: SessionState, month: string): SessionState {
  return { ...state, month, lastResult: null, selectedStation: null };
}

export function toScenarioRequest(state: SessionState): ScenarioIn {
  return {
    base_month: state.month,
    additions: state.candidates.map((c) => ({ ...c })),
    removals: [],
  };
}

export function beginRequest(state: SessionState): [SessionState, number] {
  const seq = state.requestSeq + 1;
  return [{ ...state, requestSeq: seq }, seq];
}

/** Apply a server result only if no newer request has been issued since. */
export function applyResult(
  state: SessionState,
  seq: number,
  result: ScenarioResultOut,
): SessionState {
  if (seq < state.requestSeq || seq <= state.appliedSeq) {
    return state; // superseded by a newer edit
  }
  return { ...state, lastResult: result, appliedSeq: seq };
}

export function clearResult(state: SessionState): SessionState {
  return { ...state, lastResult: null };
}

export function selectStation(
  state: SessionState,
  stationId: string | null,
): SessionState {
  return { ...state, selectedStation: stationId };
}
