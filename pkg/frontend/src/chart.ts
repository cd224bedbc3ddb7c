/**
 * SVG line chart for per-bus voltage magnitude, before and after dispatch.
 *
 * Pure string generation so it can be tested without a DOM. Every plotted
 * value comes straight out of the parsed CSV table, the chart only maps
 * them onto pixels.
 */

import type { VoltageTable } from "./csv.js";

export interface ChartOptions {
  width?: number;
  height?: number;
  /** horizontal guide lines, e.g. the 0.95 / 1.05 band */
  guides?: number[];
}

const MARGIN = { top: 12, right: 16, bottom: 24, left: 48 };

function scale(value: number, lo: number, hi: number, outLo: number, outHi: number): number {
  if (hi === lo) {
    return (outLo + outHi) / 2;
  }
  return outLo + ((value - lo) / (hi - lo)) * (outHi - outLo);
}

function fmt(x: number): string {
  return String(Math.round(x * 100) / 100);
}

export function buildVoltageChart(table: VoltageTable, options: ChartOptions = {}): string {
  if (table.series.length === 0 || table.T === 0) {
    throw new Error("cannot chart an empty voltage table");
  }
  const width = options.width ?? 640;
  const height = options.height ?? 280;
  const guides = options.guides ?? [];

  const values: number[] = [];
  for (const s of table.series) {
    values.push(...s.before, ...s.after);
  }
  values.push(...guides);
  let yLo = Math.min(...values);
  let yHi = Math.max(...values);
  const pad = Math.max((yHi - yLo) * 0.08, 0.005);
  yLo -= pad;
  yHi += pad;

  const x0 = MARGIN.left;
  const x1 = width - MARGIN.right;
  const y0 = height - MARGIN.bottom;
  const y1 = MARGIN.top;
  const xOf = (t: number) => scale(t, 0, Math.max(table.T - 1, 1), x0, x1);
  const yOf = (v: number) => scale(v, yLo, yHi, y0, y1);

  const parts: string[] = [];
  parts.push(
    `<svg class="voltage-chart" viewBox="0 0 ${width} ${height}" ` +
      `xmlns="http://www.w3.org/2000/svg" role="img" aria-label="bus voltage before and after dispatch">`,
  );
  parts.push(`<rect x="${x0}" y="${y1}" width="${x1 - x0}" height="${y0 - y1}" class="plot-area"/>`);

  for (const g of guides) {
    const y = fmt(yOf(g));
    parts.push(`<line class="guide" x1="${x0}" y1="${y}" x2="${x1}" y2="${y}"/>`);
    parts.push(`<text class="guide-label" x="${x0 - 6}" y="${y}" text-anchor="end">${g}</text>`);
  }

  for (const s of table.series) {
    for (const kind of ["before", "after"] as const) {
      const series = s[kind];
      if (table.T === 1) {
        // a single time slice has nothing to connect, draw markers
        const cx = fmt(xOf(0));
        const cy = fmt(yOf(series[0]!));
        parts.push(`<circle class="${kind}" data-bus="${s.bus}" cx="${cx}" cy="${cy}" r="3"/>`);
      } else {
        const points = series.map((v, t) => `${fmt(xOf(t))},${fmt(yOf(v))}`).join(" ");
        parts.push(`<polyline class="${kind}" data-bus="${s.bus}" fill="none" points="${points}"/>`);
      }
    }
  }

  // y extent labels and step ticks along the bottom
  parts.push(
    `<text class="axis-label" x="${x0 - 6}" y="${fmt(yOf(yLo))}" text-anchor="end">${fmt(yLo)}</text>`,
  );
  parts.push(
    `<text class="axis-label" x="${x0 - 6}" y="${fmt(yOf(yHi))}" text-anchor="end">${fmt(yHi)}</text>`,
  );
  const tickEvery = Math.max(1, Math.ceil(table.T / 12));
  for (let t = 0; t < table.T; t += tickEvery) {
    parts.push(
      `<text class="axis-label" x="${fmt(xOf(t))}" y="${y0 + 16}" text-anchor="middle">${t}</text>`,
    );
  }

  parts.push("</svg>");
  return parts.join("");
}
