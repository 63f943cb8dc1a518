// Planner entry point: wires the map, month selector, scenario round trips
// and the inspection panel to the HTTP API. The service base URL comes from
// the ?api= query parameter (default: same-origin port 8000).

import { ApiClient, ApiError } from "./api.js";
import { renderAttribution } from "./attribution.js";
import {
  clearAttentionEdges,
  renderAttentionEdges,
  renderMap,
  viewportFor,
  type Viewport,
} from "./map.js";
import {
  addCandidate,
  applyResult,
  beginRequest,
  initialState,
  removeCandidate,
  selectStation,
  setMonth,
  toScenarioRequest,
  type SessionState,
} from "./state.js";
import type { StationOut } from "./types.js";

function baseUrl(): string {
  const param = new URLSearchParams(window.location.search).get("api");
  if (param) return param;
  return `${window.location.protocol}//${window.location.hostname}:8000`;
}

function toast(message: string): void {
  const box = document.getElementById("toast")!;
  box.textContent = message;
  box.classList.add("visible");
  setTimeout(() => box.classList.remove("visible"), 5000);
}

async function boot(): Promise<void> {
  const api = new ApiClient(baseUrl());
  const svg = document.getElementById("map") as unknown as SVGSVGElement;
  const monthSelect = document.getElementById("month") as HTMLSelectElement;
  const candidateList = document.getElementById("candidates")!;
  const panel = document.getElementById("panel")!;

  const health = await api.health();
  for (const month of health.months) {
    const option = document.createElement("option");
    option.value = month;
    option.textContent = month;
    monthSelect.appendChild(option);
  }
  const latest = health.months[health.months.length - 1];
  monthSelect.value = latest;

  let state: SessionState = initialState(latest);
  let baseline: StationOut[] = [];
  let viewport: Viewport | null = null;

  const locate = (stationId: string) => {
    const fromResult = state.lastResult?.stations.find(
      (s) => s.station_id === stationId,
    );
    if (fromResult) return { lat: fromResult.lat, lon: fromResult.lon };
    const fromBaseline = baseline.find((s) => s.station_id === stationId);
    return fromBaseline
      ? { lat: fromBaseline.lat, lon: fromBaseline.lon }
      : undefined;
  };

  function redraw(): void {
    const rows = state.lastResult ? state.lastResult.stations : baseline;
    if (!viewport) viewport = viewportFor(rows);
    renderMap(svg, viewport, rows, {
      onMapClick: (lat, lon) => void placeCandidate(lat, lon),
      onStationClick: (id) => void inspect(id),
    });
    candidateList.innerHTML = "";
    for (const c of state.candidates) {
      const item = document.createElement("li");
      item.textContent = `${c.id} (${c.lat.toFixed(4)}, ${c.lon.toFixed(4)}) `;
      const remove = document.createElement("button");
      remove.textContent = "remove";
      remove.addEventListener("click", () => void dropCandidate(c.id));
      item.appendChild(remove);
      candidateList.appendChild(item);
    }
  }

  async function loadBaseline(): Promise<void> {
    baseline = (await api.stations(state.month)).stations;
    viewport = viewportFor(baseline);
    redraw();
  }

  async function submitScenario(): Promise<void> {
    if (state.candidates.length === 0) {
      state = { ...state, lastResult: null };
      redraw();
      return;
    }
    const [next, seq] = beginRequest(state);
    state = next;
    try {
      const id = await api.createScenario(toScenarioRequest(state));
      const result = await api.scenarioResult(id);
      state = applyResult(state, seq, result);
      redraw();
    } catch (err) {
      // the candidate stays in the pending list; surface the server message
      toast(err instanceof ApiError ? err.message : String(err));
      redraw();
    }
  }

  async function placeCandidate(lat: number, lon: number): Promise<void> {
    state = addCandidate(state, lat, lon);
    redraw();
    await submitScenario();
  }

  async function dropCandidate(id: string): Promise<void> {
    state = removeCandidate(state, id);
    redraw();
    await submitScenario();
  }

  async function inspect(stationId: string): Promise<void> {
    state = selectStation(state, stationId);
    try {
      const attention = await api.attention(stationId, state.month);
      if (viewport) renderAttentionEdges(svg, viewport, attention.edges, locate);
      if (attention.edges.length === 0) {
        toast("this model variant has no attention weights to show");
      }
      const attribution = await api.attribution(stationId, state.month);
      renderAttribution(panel as HTMLElement, attribution);
    } catch (err) {
      toast(err instanceof ApiError ? err.message : String(err));
    }
  }

  monthSelect.addEventListener("change", async () => {
    state = setMonth(state, monthSelect.value);
    clearAttentionEdges(svg);
    await loadBaseline();
    await submitScenario();
  });

  await loadBaseline();
}

boot().catch((err) => {
  document.body.insertAdjacentHTML(
    "beforeend",
    `<p class="boot-error">service unreachable: ${String(err)}</p>`,
  );
});
