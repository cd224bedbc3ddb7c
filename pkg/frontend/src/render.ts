/**
 * Pure HTML renderers for the console panels.
 *
 * Each function maps gateway documents to markup strings; the DOM layer in
 * main.ts just assigns innerHTML. Nothing here computes physics, the
 * numbers shown are the gateway's own.
 */

import type { RunView, StageRecordDoc, StrategyResponse } from "./api.js";

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}

function fmtNumber(x: number): string {
  if (Number.isInteger(x)) {
    return String(x);
  }
  const abs = Math.abs(x);
  if (abs !== 0 && (abs < 1e-3 || abs >= 1e6)) {
    return x.toExponential(3);
  }
  return x.toFixed(4).replace(/0+$/, "").replace(/\.$/, "");
}

export function renderStageTimeline(run: RunView | null): string {
  if (!run) {
    return `<p class="placeholder">no active run</p>`;
  }
  const stages = run.trace?.stages ?? [];
  if (stages.length === 0) {
    return `<p class="placeholder">stage: ${escapeHtml(run.stage)} (${escapeHtml(run.status)})</p>`;
  }
  const chips = stages.map((s) => {
    const label = s.round ? `${s.stage} ${s.round}` : s.stage;
    const detail = s.detail ? ` title="${escapeHtml(s.detail)}"` : "";
    return `<li class="stage-chip stage-${escapeHtml(s.status)}"${detail}>${escapeHtml(label)}</li>`;
  });
  return `<ul class="stage-timeline">${chips.join("")}</ul>`;
}

function extractionRecord(run: RunView): StageRecordDoc | undefined {
  return run.trace?.stages.find((s) => s.stage === "extraction");
}

export function renderExtractionPanel(run: RunView | null): string {
  if (!run) {
    return `<p class="placeholder">submit a request to begin</p>`;
  }
  if (run.status === "awaiting_review" && run.extraction) {
    return `<pre class="decorated">${escapeHtml(run.extraction)}</pre>`;
  }
  if (run.error && run.error.startsWith("extraction:")) {
    return `<p class="stage-error">${escapeHtml(run.error)}</p>`;
  }
  const record = extractionRecord(run);
  if (record && record.outputs.length > 0) {
    return `<pre class="decorated">${escapeHtml(record.outputs[record.outputs.length - 1]!)}</pre>`;
  }
  if (record) {
    return `<p class="placeholder">${escapeHtml(record.detail || record.status)}</p>`;
  }
  return `<p class="placeholder">waiting for extraction</p>`;
}

export function renderFormulationPanel(run: RunView | null): string {
  if (!run?.trace) {
    return `<p class="placeholder">waiting for formulation</p>`;
  }
  const rounds = run.trace.stages.filter((s) => s.stage === "formulation");
  if (rounds.length === 0) {
    return `<p class="placeholder">no formulation rounds</p>`;
  }
  const items = rounds.map((s) => {
    const label = s.round ? `round ${s.round}` : s.status;
    const body =
      s.outputs.length > 0
        ? `<details><summary>${escapeHtml(label)}: ${escapeHtml(s.detail)}</summary>` +
          `<pre>${escapeHtml(s.outputs[s.outputs.length - 1]!)}</pre></details>`
        : `<span>${escapeHtml(label)}: ${escapeHtml(s.detail || s.status)}</span>`;
    return `<li>${body}</li>`;
  });
  return `<ol class="formulation-rounds">${items.join("")}</ol>`;
}

export function renderModelPanel(run: RunView | null): string {
  const code = run?.trace?.stages.find((s) => s.stage === "code");
  if (!code || code.outputs.length === 0) {
    return `<p class="placeholder">no model yet</p>`;
  }
  const text = code.outputs[code.outputs.length - 1]!;
  const header = text.split("\n", 1)[0] ?? "";
  return (
    `<p class="model-name">${escapeHtml(header)}</p>` +
    `<pre class="model-script">${escapeHtml(text)}</pre>`
  );
}

function kpiCard(label: string, value: string, extraClass = ""): string {
  return (
    `<div class="kpi-card ${extraClass}"><span class="kpi-value">${escapeHtml(value)}</span>` +
    `<span class="kpi-label">${escapeHtml(label)}</span></div>`
  );
}

export function renderKpiCards(resp: StrategyResponse): string {
  const kpis = resp.strategy.kpis;
  const cards: string[] = [];
  cards.push(kpiCard("objective", fmtNumber(resp.strategy.objective_value)));
  if (kpis.losses !== undefined) {
    cards.push(kpiCard("losses (p.u.)", fmtNumber(kpis.losses)));
  }
  if (resp.baseline && kpis.losses !== undefined && resp.baseline.losses > 0) {
    const pct = ((resp.baseline.losses - kpis.losses) / resp.baseline.losses) * 100;
    cards.push(kpiCard("loss reduction vs baseline", `${pct.toFixed(1)}%`, "kpi-delta"));
  }
  if (kpis.energy_cost !== undefined) {
    cards.push(kpiCard("energy cost", fmtNumber(kpis.energy_cost)));
  }
  if (kpis.max_voltage_deviation !== undefined) {
    cards.push(kpiCard("max voltage deviation", fmtNumber(kpis.max_voltage_deviation)));
  }
  return `<div class="kpi-row">${cards.join("")}</div>`;
}

export function renderDeviceTables(resp: StrategyResponse): string {
  const devices = resp.strategy.devices;
  if (devices.length === 0) {
    return `<p class="placeholder">no controllable devices in this strategy</p>`;
  }
  const tables = devices.map((dev) => {
    const first = dev.schedule[0] ?? { t: 0 };
    const columns = Object.keys(first);
    const head = columns.map((c) => `<th>${escapeHtml(c)}</th>`).join("");
    const rows = dev.schedule
      .map((row) => {
        const cells = columns
          .map((c) => `<td>${fmtNumber(row[c] ?? 0)}</td>`)
          .join("");
        return `<tr>${cells}</tr>`;
      })
      .join("");
    return (
      `<div class="device-table"><h4>${escapeHtml(dev.kind)} @ bus ${dev.bus}</h4>` +
      `<table><thead><tr>${head}</tr></thead><tbody>${rows}</tbody></table></div>`
    );
  });
  return tables.join("");
}

export function renderStrategyHeader(resp: StrategyResponse): string {
  return (
    `<p class="strategy-title">strategy <code>${escapeHtml(resp.strategy.model)}</code>` +
    ` &middot; solve ${escapeHtml(resp.strategy.status)}</p>`
  );
}

export function renderErrorBanner(message: string | null): string {
  if (!message) {
    return "";
  }
  return `<div class="error-banner">${escapeHtml(message)}</div>`;
}
