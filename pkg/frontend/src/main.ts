/**
 * DOM entry point: wires the form and panels to the console controller.
 * All markup comes from the pure renderers; this file only touches the
 * document.
 */

import { GatewayClient } from "./api.js";
import { parseVoltageCsv } from "./csv.js";
import { buildVoltageChart } from "./chart.js";
import {
  renderDeviceTables,
  renderErrorBanner,
  renderExtractionPanel,
  renderFormulationPanel,
  renderKpiCards,
  renderModelPanel,
  renderStageTimeline,
  renderStrategyHeader,
} from "./render.js";
import { BUNDLED_CASES, ConsoleController, ConsoleState } from "./state.js";

const VOLTAGE_GUIDES = [0.95, 1.05]; // visual band guides, not recomputed limits

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function renderStrategy(state: ConsoleState): string {
  if (!state.strategy) {
    if (state.run?.status === "failed") {
      return `<p class="stage-error">run failed: ${state.run.error ?? "see trace"}</p>`;
    }
    return `<p class="placeholder">no strategy yet</p>`;
  }
  let chart = "";
  if (state.strategy.voltage_csv) {
    chart = buildVoltageChart(parseVoltageCsv(state.strategy.voltage_csv), {
      guides: VOLTAGE_GUIDES,
    });
  }
  return (
    renderStrategyHeader(state.strategy) +
    renderKpiCards(state.strategy) +
    chart +
    renderDeviceTables(state.strategy)
  );
}

function main(): void {
  const gatewayInput = el<HTMLInputElement>("gateway-url");
  const caseSelect = el<HTMLSelectElement>("case-select");
  const requestInput = el<HTMLTextAreaElement>("request-text");
  const modeSelect = el<HTMLSelectElement>("mode-select");
  const ablationSelect = el<HTMLSelectElement>("ablation-select");
  const submitButton = el<HTMLButtonElement>("submit-button");
  const banner = el<HTMLDivElement>("error-banner");
  const stagesPanel = el<HTMLDivElement>("stages-panel");
  const extractionPanel = el<HTMLDivElement>("extraction-panel");
  const reviewArea = el<HTMLTextAreaElement>("review-buffer");
  const approveButton = el<HTMLButtonElement>("approve-button");
  const resumeButton = el<HTMLButtonElement>("resume-button");
  const formulationPanel = el<HTMLDivElement>("formulation-panel");
  const modelPanel = el<HTMLDivElement>("model-panel");
  const strategyPanel = el<HTMLDivElement>("strategy-panel");

  for (const caseId of BUNDLED_CASES) {
    const option = document.createElement("option");
    option.value = caseId;
    option.textContent = caseId;
    caseSelect.appendChild(option);
  }

  let controller = new ConsoleController(new GatewayClient(gatewayInput.value));
  let unsubscribe = controller.subscribe(draw);

  function rebuildClient(): void {
    unsubscribe();
    controller = new ConsoleController(new GatewayClient(gatewayInput.value.replace(/\/$/, "")));
    unsubscribe = controller.subscribe(draw);
    draw(controller.snapshot());
  }
  gatewayInput.addEventListener("change", rebuildClient);

  function draw(state: ConsoleState): void {
    banner.innerHTML = renderErrorBanner(state.error);
    stagesPanel.innerHTML = renderStageTimeline(state.run);
    extractionPanel.innerHTML = renderExtractionPanel(state.run);
    formulationPanel.innerHTML = renderFormulationPanel(state.run);
    modelPanel.innerHTML = renderModelPanel(state.run);
    strategyPanel.innerHTML = renderStrategy(state);

    const reviewing = controller.reviewEnabled;
    reviewArea.disabled = !reviewing;
    approveButton.disabled = !reviewing;
    resumeButton.disabled = !reviewing;
    if (reviewing && document.activeElement !== reviewArea) {
      reviewArea.value = state.reviewBuffer;
    }
    if (!reviewing) {
      reviewArea.value = state.reviewBuffer;
    }
    submitButton.disabled = state.busy;
  }

  submitButton.addEventListener("click", () => {
    const text = requestInput.value.trim();
    if (!text) {
      return;
    }
    void controller.submit(
      caseSelect.value,
      text,
      modeSelect.value || undefined,
      ablationSelect.value === "full" ? undefined : ablationSelect.value,
    );
  });

  reviewArea.addEventListener("input", () => {
    controller.setReviewBuffer(reviewArea.value);
  });
  approveButton.addEventListener("click", () => {
    void controller.approve();
  });
  resumeButton.addEventListener("click", () => {
    void controller.resumeWithEdits();
  });

  draw(controller.snapshot());
}

main();
