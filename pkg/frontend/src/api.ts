/**
 * Typed client for the dispatch gateway's REST routes.
 *
 * The console talks to the gateway and to nothing else; every number it
 * renders comes out of these responses.
 */

export interface StageRecordDoc {
  stage: string;
  status: string;
  detail: string;
  prompts: string[];
  outputs: string[];
  round?: number | null;
  wall_time_ms: number;
}

export interface TraceDoc {
  request: string;
  mode: string;
  ablation: string;
  seed: number | null;
  district: string | null;
  stages: StageRecordDoc[];
  solve: Record<string, number | string> | null;
  error: string | null;
}

export interface RunView {
  run_id: string;
  case_id: string;
  request: string;
  mode: string;
  ablation: string;
  seed: number | null;
  status: string;
  stage: string;
  created_at: number;
  updated_at: number;
  extraction?: string;
  error?: string;
  trace?: TraceDoc;
  has_strategy?: boolean;
}

export interface StrategyDoc {
  model: string;
  status: string;
  objective_value: number;
  horizon: { T: number; dt_hours: number };
  import_schedule: Array<Record<string, number>>;
  voltages: Record<string, number[]>;
  branch_flows: Array<Record<string, unknown>>;
  devices: Array<{ kind: string; bus: number; schedule: Array<Record<string, number>> }>;
  kpis: Record<string, number>;
}

export interface StrategyResponse {
  strategy: StrategyDoc;
  voltage_csv?: string;
  baseline?: { losses: number; v_min: number; v_max: number };
}

export interface SubmitBody {
  case_id: string;
  request: string;
  mode?: string;
  ablation?: string;
  seed?: number;
}

export class GatewayError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "GatewayError";
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class GatewayClient {
  private readonly fetchImpl: FetchLike;

  constructor(
    readonly baseUrl: string,
    fetchImpl?: FetchLike,
  ) {
    // bind: the global fetch throws when called with a bare reference
    this.fetchImpl = fetchImpl ?? ((url, init) => globalThis.fetch(url, init));
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    const text = await resp.text();
    let doc: unknown = null;
    if (text) {
      try {
        doc = JSON.parse(text);
      } catch {
        doc = null;
      }
    }
    if (!resp.ok) {
      const detail =
        doc && typeof doc === "object" && "detail" in doc
          ? String((doc as { detail: unknown }).detail)
          : `${resp.status} ${resp.statusText}`;
      throw new GatewayError(resp.status, detail);
    }
    return doc as T;
  }

  submitRun(body: SubmitBody): Promise<{ run_id: string; status: string }> {
    return this.request("POST", "/api/runs", body);
  }

  getRun(runId: string): Promise<RunView> {
    return this.request("GET", `/api/runs/${runId}`);
  }

  review(
    runId: string,
    body: { approve: true } | { requirements: string },
  ): Promise<{ run_id: string; status: string }> {
    return this.request("POST", `/api/runs/${runId}/review`, body);
  }

  getStrategy(runId: string): Promise<StrategyResponse> {
    return this.request("GET", `/api/runs/${runId}/strategy`);
  }

  uploadCase(doc: unknown): Promise<{ case_id: string }> {
    return this.request("POST", "/api/cases", doc);
  }
}
