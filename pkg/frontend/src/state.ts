/**
 * Console state machine: one active run per tab, polling as the only
 * background activity.
 *
 * The controller owns every transition the UI can cause (submit, approve,
 * resume with edits) and exposes a snapshot the render layer draws from.
 * Polling stops on terminal states and pauses while a run waits at the
 * review gate.
 */

import { GatewayClient, GatewayError, RunView, StrategyResponse } from "./api.js";

export const BUNDLED_CASES = ["campus", "riverside", "valley33"];

const SETTLED = new Set(["succeeded", "failed", "awaiting_review"]);
const TERMINAL = new Set(["succeeded", "failed"]);

export interface ConsoleState {
  caseIds: string[];
  run: RunView | null;
  strategy: StrategyResponse | null;
  reviewBuffer: string;
  error: string | null;
  busy: boolean;
}

export interface ControllerOptions {
  pollMs?: number;
  sleep?: (ms: number) => Promise<void>;
  maxPolls?: number;
}

const defaultSleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export class ConsoleController {
  private state: ConsoleState = {
    caseIds: [...BUNDLED_CASES],
    run: null,
    strategy: null,
    reviewBuffer: "",
    error: null,
    busy: false,
  };

  private listeners: Array<(state: ConsoleState) => void> = [];
  private epoch = 0;
  private readonly pollMs: number;
  private readonly sleep: (ms: number) => Promise<void>;
  private readonly maxPolls: number;

  constructor(
    private readonly client: GatewayClient,
    options: ControllerOptions = {},
  ) {
    this.pollMs = options.pollMs ?? 500;
    this.sleep = options.sleep ?? defaultSleep;
    this.maxPolls = options.maxPolls ?? 600;
  }

  snapshot(): ConsoleState {
    return { ...this.state, caseIds: [...this.state.caseIds] };
  }

  get reviewEnabled(): boolean {
    return this.state.run?.status === "awaiting_review";
  }

  subscribe(listener: (state: ConsoleState) => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private update(patch: Partial<ConsoleState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) {
      listener(this.snapshot());
    }
  }

  setReviewBuffer(text: string): void {
    this.update({ reviewBuffer: text });
  }

  addCase(caseId: string): void {
    if (!this.state.caseIds.includes(caseId)) {
      this.update({ caseIds: [...this.state.caseIds, caseId] });
    }
  }

  private fail(err: unknown): void {
    const message =
      err instanceof GatewayError
        ? `gateway: ${err.message}`
        : err instanceof Error
          ? `cannot reach gateway: ${err.message}`
          : String(err);
    this.update({ error: message, busy: false });
  }

  async submit(caseId: string, request: string, mode?: string, ablation?: string): Promise<void> {
    const epoch = ++this.epoch;
    this.update({ error: null, strategy: null, run: null, reviewBuffer: "", busy: true });
    let runId: string;
    try {
      const accepted = await this.client.submitRun({
        case_id: caseId,
        request,
        ...(mode ? { mode } : {}),
        ...(ablation ? { ablation } : {}),
      });
      runId = accepted.run_id;
    } catch (err) {
      // no phantom run: the panels stay empty on a failed submit
      this.fail(err);
      return;
    }
    await this.pollUntilSettled(runId, epoch);
  }

  /** One GET of the run view; returns the fresh view or null on error. */
  private async refresh(runId: string, epoch: number): Promise<RunView | null> {
    try {
      const view = await this.client.getRun(runId);
      if (epoch !== this.epoch) {
        return null;
      }
      this.update({ run: view });
      return view;
    } catch (err) {
      if (epoch === this.epoch) {
        this.fail(err);
      }
      return null;
    }
  }

  private async pollUntilSettled(runId: string, epoch: number): Promise<void> {
    for (let i = 0; i < this.maxPolls; i++) {
      const view = await this.refresh(runId, epoch);
      if (!view) {
        return;
      }
      if (SETTLED.has(view.status)) {
        await this.settle(view, epoch);
        return;
      }
      await this.sleep(this.pollMs);
      if (epoch !== this.epoch) {
        return;
      }
    }
    if (epoch === this.epoch) {
      this.update({ error: "polling gave up before the run settled", busy: false });
    }
  }

  private async settle(view: RunView, epoch: number): Promise<void> {
    if (view.status === "awaiting_review") {
      // the edit buffer opens pre-filled with the extracted requirements
      this.update({ reviewBuffer: view.extraction ?? "", busy: false });
      return;
    }
    if (view.status === "succeeded" && view.has_strategy) {
      try {
        const strategy = await this.client.getStrategy(view.run_id);
        if (epoch === this.epoch) {
          this.update({ strategy, busy: false });
        }
      } catch (err) {
        if (epoch === this.epoch) {
          this.fail(err);
        }
      }
      return;
    }
    this.update({ busy: false });
  }

  async approve(): Promise<void> {
    await this.resume({ approve: true });
  }

  async resumeWithEdits(): Promise<void> {
    await this.resume({ requirements: this.state.reviewBuffer });
  }

  private async resume(body: { approve: true } | { requirements: string }): Promise<void> {
    const run = this.state.run;
    if (!run || run.status !== "awaiting_review") {
      this.update({ error: "no run is waiting for review" });
      return;
    }
    const epoch = this.epoch;
    // downstream panels refill from the resumed run
    this.update({ error: null, strategy: null, busy: true });
    try {
      await this.client.review(run.run_id, body);
    } catch (err) {
      if (err instanceof GatewayError && err.status === 409) {
        // state advanced under us; re-fetch and show where it actually is
        this.update({ error: `review rejected: ${err.message}` });
        await this.refresh(run.run_id, epoch);
        this.update({ busy: false });
        return;
      }
      this.fail(err);
      return;
    }
    await this.pollUntilSettled(run.run_id, epoch);
  }
}

export function isTerminal(status: string): boolean {
  return TERMINAL.has(status);
}
