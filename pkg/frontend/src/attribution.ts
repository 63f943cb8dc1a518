// Horizontal bar panel for per-feature attributions of one station-month.

import type { AttributionOut } from "./types.js";

export function renderAttribution(
  container: HTMLElement,
  payload: AttributionOut,
  direction: "out" | "in" = "out",
  top = 12,
): void {
  container.innerHTML = "";
  const rows = payload.entries
    .filter((e) => e.flow_direction === direction)
    .sort((a, b) => Math.abs(b.shap_value) - Math.abs(a.shap_value))
    .slice(0, top);
  const maxAbs = Math.max(...rows.map((r) => Math.abs(r.shap_value)), 1e-9);

  const heading = document.createElement("h3");
  heading.textContent =
    `${payload.station_id} ${payload.month} — ${direction}flow drivers`;
  container.appendChild(heading);

  for (const row of rows) {
    const item = document.createElement("div");
    item.className = "attr-row";
    item.dataset.feature = row.feature_name;
    item.dataset.shap = String(row.shap_value);

    const label = document.createElement("span");
    label.className = "attr-label";
    label.textContent = row.feature_name;

    const bar = document.createElement("span");
    bar.className = "attr-bar " + (row.shap_value >= 0 ? "positive" : "negative");
    bar.style.width = `${(100 * Math.abs(row.shap_value)) / maxAbs}%`;

    const value = document.createElement("span");
    value.className = "attr-value";
    value.textContent = row.shap_value.toFixed(3);

    item.append(label, bar, value);
    container.appendChild(item);
  }
}
