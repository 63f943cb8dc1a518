// Thin typed client over the scenario service. All demand numbers come
// from the server; nothing is computed client-side.

import type {
  AttentionOut,
  AttributionOut,
  HealthOut,
  ScenarioIn,
  ScenarioResultOut,
  StationsOut,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function getJson<T>(url: string): Promise<T> {
  const res = await fetch(url);
  if (!res.ok) {
    const body = await res.text();
    throw new ApiError(res.status, body || res.statusText);
  }
  return (await res.json()) as T;
}

export class ApiClient {
  constructor(public baseUrl: string) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  health(): Promise<HealthOut> {
    return getJson(`${this.baseUrl}/health`);
  }

  stations(month: string): Promise<StationsOut> {
    return getJson(`${this.baseUrl}/stations?month=${encodeURIComponent(month)}`);
  }

  async createScenario(body: ScenarioIn): Promise<string> {
    const res = await fetch(`${this.baseUrl}/scenarios`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) {
      let detail = res.statusText;
      try {
        detail = (await res.json()).detail ?? detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(res.status, detail);
    }
    return ((await res.json()) as { id: string }).id;
  }

  scenarioResult(id: string): Promise<ScenarioResultOut> {
    return getJson(`${this.baseUrl}/scenarios/${id}/result`);
  }

  attention(stationId: string, month: string): Promise<AttentionOut> {
    return getJson(
      `${this.baseUrl}/stations/${encodeURIComponent(stationId)}/attention` +
        `?month=${encodeURIComponent(month)}`,
    );
  }

  attribution(
    stationId: string,
    month: string,
    nCoalitions = 512,
  ): Promise<AttributionOut> {
    return getJson(
      `${this.baseUrl}/stations/${encodeURIComponent(stationId)}/attribution` +
        `?month=${encodeURIComponent(month)}&n_coalitions=${nCoalitions}`,
    );
  }
}
