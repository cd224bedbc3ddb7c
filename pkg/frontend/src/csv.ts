/**
 * Parser for the gateway's voltage comparison table.
 *
 * Format: header line `bus,t,v_before,v_after`, then one row per bus and
 * step. The chart consumes the per-bus series verbatim.
 */

export interface VoltageSeries {
  bus: number;
  before: number[];
  after: number[];
}

export interface VoltageTable {
  buses: number[];
  T: number;
  series: VoltageSeries[];
}

const HEADER = "bus,t,v_before,v_after";

export function parseVoltageCsv(text: string): VoltageTable {
  const lines = text.split("\n").filter((line) => line.trim() !== "");
  if (lines[0] !== HEADER) {
    throw new Error(`voltage table must start with "${HEADER}", got "${lines[0] ?? ""}"`);
  }
  const byBus = new Map<number, { t: number; before: number; after: number }[]>();
  for (const line of lines.slice(1)) {
    const parts = line.split(",");
    if (parts.length !== 4) {
      throw new Error(`voltage row needs 4 fields: "${line}"`);
    }
    const [busRaw, tRaw, beforeRaw, afterRaw] = parts as [string, string, string, string];
    const bus = Number(busRaw);
    const t = Number(tRaw);
    const before = Number(beforeRaw);
    const after = Number(afterRaw);
    if (![bus, t, before, after].every(Number.isFinite)) {
      throw new Error(`voltage row is not numeric: "${line}"`);
    }
    let rows = byBus.get(bus);
    if (!rows) {
      rows = [];
      byBus.set(bus, rows);
    }
    rows.push({ t, before, after });
  }
  if (byBus.size === 0) {
    throw new Error("voltage table has no data rows");
  }

  const buses = [...byBus.keys()].sort((a, b) => a - b);
  const series: VoltageSeries[] = [];
  let T: number | null = null;
  for (const bus of buses) {
    const rows = byBus.get(bus)!;
    rows.sort((a, b) => a.t - b.t);
    rows.forEach((row, i) => {
      if (row.t !== i) {
        throw new Error(`bus ${bus} is missing step ${i}`);
      }
    });
    if (T === null) {
      T = rows.length;
    } else if (rows.length !== T) {
      throw new Error(`bus ${bus} has ${rows.length} steps, expected ${T}`);
    }
    series.push({
      bus,
      before: rows.map((r) => r.before),
      after: rows.map((r) => r.after),
    });
  }
  return { buses, T: T ?? 0, series };
}
