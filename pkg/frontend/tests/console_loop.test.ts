/**
 * Full console loop against a real gateway process: submit, stop at the
 * review gate, edit the objective, resume, and read the strategy back.
 * Requires the Python package to be installed (`adnopt` on PATH).
 */

import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { spawn, ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { GatewayClient } from "../src/api.js";
import { ConsoleController } from "../src/state.js";
import { parseVoltageCsv } from "../src/csv.js";
import { buildVoltageChart } from "../src/chart.js";
import { renderExtractionPanel, renderKpiCards, renderModelPanel } from "../src/render.js";

const PORT = 8200 + (process.pid % 500);
const BASE = `http://127.0.0.1:${PORT}`;
const REQUEST =
  "minimize network losses in the valley district with rooftop solar" +
  " and the static var compensator, keep voltages in band";

let child: ChildProcess | null = null;
let workDir = "";
let serverLog = "";

async function waitForGateway(): Promise<void> {
  for (let i = 0; i < 120; i++) {
    try {
      const resp = await fetch(`${BASE}/api/runs/absent`);
      if (resp.status === 404) {
        return;
      }
    } catch {
      // not listening yet
    }
    await new Promise((r) => setTimeout(r, 250));
  }
  throw new Error(`gateway did not come up on ${BASE}\n${serverLog}`);
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "console-loop-"));
  const config = join(workDir, "service.json");
  writeFileSync(
    config,
    JSON.stringify({ port: PORT, review_gate: true, data_dir: join(workDir, "data") }),
  );
  child = spawn("adnopt", ["serve", "--config", config], {
    stdio: ["ignore", "pipe", "pipe"],
  });
  child.stdout?.on("data", (chunk) => (serverLog += chunk));
  child.stderr?.on("data", (chunk) => (serverLog += chunk));
  await waitForGateway();
}, 60_000);

afterAll(() => {
  child?.kill();
  if (workDir) {
    rmSync(workDir, { recursive: true, force: true });
  }
});

describe("console loop", () => {
  it(
    "review gate edit changes the solved objective",
    async () => {
      const controller = new ConsoleController(new GatewayClient(BASE), { pollMs: 250 });

      await controller.submit("valley33", REQUEST);
      let state = controller.snapshot();
      expect(state.error).toBeNull();
      expect(state.run?.status).toBe("awaiting_review");
      expect(controller.reviewEnabled).toBe(true);
      expect(state.reviewBuffer).toContain("<objective>min_loss</objective>");
      expect(state.reviewBuffer).toContain("<district>valley33</district>");

      controller.setReviewBuffer(state.reviewBuffer.replace("min_loss", "min_cost"));
      await controller.resumeWithEdits();

      state = controller.snapshot();
      expect(state.error).toBeNull();
      expect(state.run?.status).toBe("succeeded");
      expect(controller.reviewEnabled).toBe(false);

      // the rendered model and strategy carry the edited objective
      expect(state.strategy?.strategy.model).toBe("valley33_min_cost");
      const modelHtml = renderModelPanel(state.run);
      expect(modelHtml).toContain("problem valley33_min_cost");

      const review = state.run?.trace?.stages.find((s) => s.stage === "review");
      expect(review?.detail).toBe("requirements edited by operator");

      // voltage chart straight from the CSV table
      const table = parseVoltageCsv(state.strategy!.voltage_csv!);
      expect(table.buses).toHaveLength(33);
      expect(table.T).toBe(24);
      const svg = buildVoltageChart(table, { guides: [0.95, 1.05] });
      expect(svg.match(/<polyline/g)).toHaveLength(66);

      // KPI cards include a positive loss reduction vs the passive baseline
      const kpiHtml = renderKpiCards(state.strategy!);
      const match = kpiHtml.match(/([\d.]+)%/);
      expect(match).not.toBeNull();
      expect(Number(match![1])).toBeGreaterThan(0);
    },
    120_000,
  );

  it(
    "validation violations land in the extraction panel",
    async () => {
      const controller = new ConsoleController(new GatewayClient(BASE), { pollMs: 250 });
      // hour 9 is outside the campus horizon (T=4), so validation rejects it
      await controller.submit(
        "campus",
        "fix the undervoltage at hour 9 on the campus feeder",
      );
      const state = controller.snapshot();
      expect(state.run?.status).toBe("failed");
      expect(state.run?.error).toMatch(/^extraction:/);
      expect(state.strategy).toBeNull();
      const panel = renderExtractionPanel(state.run);
      expect(panel).toContain("stage-error");
    },
    60_000,
  );
});
