// SVG station map: circles sized/colored by predicted daily trips, delta
// badges on affected stations, candidate markers and dashed attention-edge
// overlays. Exact server values ride along in data-* attributes; only the
// visible labels are formatted.

import type { AttentionEdgeOut, ScenarioStationOut, StationOut } from "./types.js";

export interface Viewport {
  latMin: number;
  latMax: number;
  lonMin: number;
  lonMax: number;
  width: number;
  height: number;
}

export function viewportFor(
  points: { lat: number; lon: number }[],
  width = 800,
  height = 600,
): Viewport {
  const lats = points.map((p) => p.lat);
  const lons = points.map((p) => p.lon);
  const padLat = (Math.max(...lats) - Math.min(...lats)) * 0.05 || 0.01;
  const padLon = (Math.max(...lons) - Math.min(...lons)) * 0.05 || 0.01;
  return {
    latMin: Math.min(...lats) - padLat,
    latMax: Math.max(...lats) + padLat,
    lonMin: Math.min(...lons) - padLon,
    lonMax: Math.max(...lons) + padLon,
    width,
    height,
  };
}

export function project(v: Viewport, lat: number, lon: number): [number, number] {
  const x = ((lon - v.lonMin) / (v.lonMax - v.lonMin)) * v.width;
  const y = ((v.latMax - lat) / (v.latMax - v.latMin)) * v.height;
  return [x, y];
}

export function unproject(v: Viewport, x: number, y: number): [number, number] {
  const lon = v.lonMin + (x / v.width) * (v.lonMax - v.lonMin);
  const lat = v.latMax - (y / v.height) * (v.latMax - v.latMin);
  return [lat, lon];
}

export function radiusFor(trips: number, maxTrips: number): number {
  if (maxTrips <= 0) return 4;
  return 4 + 10 * Math.sqrt(Math.max(trips, 0) / maxTrips);
}

export function colorFor(trips: number, maxTrips: number): string {
  const t = maxTrips > 0 ? Math.min(Math.max(trips, 0) / maxTrips, 1) : 0;
  const hue = 210 - 170 * t; // blue (low) to red (high)
  return `hsl(${Math.round(hue)}, 75%, 48%)`;
}

/** Edge stroke width grows linearly with the attention weight. */
export function edgeWidth(weight: number): number {
  return 0.5 + 7.5 * weight;
}

const SVG_NS = "http://www.w3.org/2000/svg";

type StationRow = StationOut | ScenarioStationOut;

function isScenarioRow(row: StationRow): row is ScenarioStationOut {
  return (row as ScenarioStationOut).is_candidate !== undefined;
}

export interface MapHandlers {
  onMapClick?: (lat: number, lon: number) => void;
  onStationClick?: (stationId: string) => void;
}

export function renderMap(
  svg: SVGSVGElement,
  viewport: Viewport,
  stations: StationRow[],
  handlers: MapHandlers = {},
): void {
  svg.innerHTML = "";
  svg.setAttribute("viewBox", `0 0 ${viewport.width} ${viewport.height}`);

  const backdrop = document.createElementNS(SVG_NS, "rect");
  backdrop.setAttribute("width", String(viewport.width));
  backdrop.setAttribute("height", String(viewport.height));
  backdrop.setAttribute("fill", "#f4f2ec");
  backdrop.setAttribute("data-role", "backdrop");
  if (handlers.onMapClick) {
    backdrop.addEventListener("click", (ev) => {
      const rect = svg.getBoundingClientRect();
      const scaleX = rect.width > 0 ? viewport.width / rect.width : 1;
      const scaleY = rect.height > 0 ? viewport.height / rect.height : 1;
      const [lat, lon] = unproject(
        viewport,
        (ev.clientX - rect.left) * scaleX,
        (ev.clientY - rect.top) * scaleY,
      );
      handlers.onMapClick!(lat, lon);
    });
  }
  svg.appendChild(backdrop);

  const edgeLayer = document.createElementNS(SVG_NS, "g");
  edgeLayer.setAttribute("data-role", "edges");
  svg.appendChild(edgeLayer);

  const maxTrips = Math.max(...stations.map((s) => s.y_out), 1);
  const stationLayer = document.createElementNS(SVG_NS, "g");
  stationLayer.setAttribute("data-role", "stations");
  for (const s of stations) {
    const [x, y] = project(viewport, s.lat, s.lon);
    const node = document.createElementNS(SVG_NS, "circle");
    node.setAttribute("cx", String(x));
    node.setAttribute("cy", String(y));
    node.setAttribute("r", String(radiusFor(s.y_out, maxTrips)));
    node.setAttribute("fill", colorFor(s.y_out, maxTrips));
    node.setAttribute("data-station-id", s.station_id);
    node.setAttribute("data-y-out", String(s.y_out));
    node.setAttribute("data-y-in", String(s.y_in));
    node.classList.add("station");
    if (isScenarioRow(s)) {
      if (s.is_candidate) {
        node.classList.add("candidate");
        node.setAttribute("stroke", "#222");
        node.setAttribute("stroke-width", "2");
      }
      node.setAttribute("data-delta-out", String(s.delta_out));
      node.setAttribute("data-delta-in", String(s.delta_in));
      if (!s.is_candidate && (s.delta_out !== 0 || s.delta_in !== 0)) {
        const badge = document.createElementNS(SVG_NS, "text");
        badge.setAttribute("x", String(x + 6));
        badge.setAttribute("y", String(y - 6));
        badge.setAttribute("class", "delta-badge");
        badge.setAttribute("data-station-id", s.station_id);
        badge.setAttribute("data-delta-out", String(s.delta_out));
        badge.textContent = `${s.delta_out >= 0 ? "+" : ""}${s.delta_out.toFixed(2)}`;
        stationLayer.appendChild(badge);
      }
    }
    const title = document.createElementNS(SVG_NS, "title");
    title.textContent =
      `${s.station_id}: out ${s.y_out.toFixed(2)} / in ${s.y_in.toFixed(2)} trips/day`;
    node.appendChild(title);
    if (handlers.onStationClick) {
      node.addEventListener("click", (ev) => {
        ev.stopPropagation();
        handlers.onStationClick!(s.station_id);
      });
    }
    stationLayer.appendChild(node);
  }
  svg.appendChild(stationLayer);
}

/** Draw dashed attention edges; stroke width follows the server weights. */
export function renderAttentionEdges(
  svg: SVGSVGElement,
  viewport: Viewport,
  edges: AttentionEdgeOut[],
  locate: (stationId: string) => { lat: number; lon: number } | undefined,
): void {
  const layer = svg.querySelector('g[data-role="edges"]');
  if (!layer) return;
  layer.innerHTML = "";
  for (const edge of edges) {
    const from = locate(edge.center);
    const to = locate(edge.neighbor);
    if (!from || !to) continue;
    const [x1, y1] = project(viewport, from.lat, from.lon);
    const [x2, y2] = project(viewport, to.lat, to.lon);
    const line = document.createElementNS(SVG_NS, "line");
    line.setAttribute("x1", String(x1));
    line.setAttribute("y1", String(y1));
    line.setAttribute("x2", String(x2));
    line.setAttribute("y2", String(y2));
    line.setAttribute("stroke", edge.graph_kind === "proximity" ? "#3566c2" : "#b0462a");
    line.setAttribute("stroke-dasharray", "6 4");
    line.setAttribute("stroke-width", String(edgeWidth(edge.weight)));
    line.setAttribute("data-kind", edge.graph_kind);
    line.setAttribute("data-neighbor", edge.neighbor);
    line.setAttribute("data-weight", String(edge.weight));
    line.classList.add("attention-edge");
    layer.appendChild(line);
  }
}

export function clearAttentionEdges(svg: SVGSVGElement): void {
  const layer = svg.querySelector('g[data-role="edges"]');
  if (layer) layer.innerHTML = "";
}
