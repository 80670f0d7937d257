/**
 * Reading and aggregating trainer metrics CSVs.
 *
 * The CSV contract: one header row naming the columns, one row per logged
 * event, empty cells for values that were not recorded at that event.
 * Evaluation rows are the ones where the requested metric column is
 * non-empty; their x coordinate is `env_steps`.
 */

export type MetricsRow = Record<string, number | null>;

export interface EvalPoint {
  step: number;
  value: number;
}

export interface AggregateSeries {
  steps: number[];
  mean: number[];
  std: number[];
}

/** Parse a metrics CSV. Throws on an empty document or a malformed cell. */
export function parseMetricsCsv(text: string): MetricsRow[] {
  const lines = text.split(/\r?\n/).filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new Error("empty metrics file");
  }
  const header = lines[0].split(",");
  const rows: MetricsRow[] = [];
  for (let i = 1; i < lines.length; i++) {
    const cells = lines[i].split(",");
    if (cells.length !== header.length) {
      throw new Error(
        `row ${i + 1} has ${cells.length} cells, header has ${header.length}`,
      );
    }
    const row: MetricsRow = {};
    for (let j = 0; j < header.length; j++) {
      if (cells[j] === "") {
        row[header[j]] = null;
      } else {
        const v = Number(cells[j]);
        if (Number.isNaN(v)) {
          throw new Error(`row ${i + 1}, column ${header[j]}: not a number: ${cells[j]}`);
        }
        row[header[j]] = v;
      }
    }
    rows.push(row);
  }
  return rows;
}

/** Extract the evaluation series of one metric column, in file order. */
export function evalSeries(rows: MetricsRow[], metric: string): EvalPoint[] {
  if (rows.length > 0 && !(metric in rows[0])) {
    throw new Error(`missing column ${metric}`);
  }
  if (rows.length > 0 && !("env_steps" in rows[0])) {
    throw new Error("missing column env_steps");
  }
  const points: EvalPoint[] = [];
  for (const row of rows) {
    const v = row[metric];
    if (v !== null) {
      points.push({ step: row.env_steps as number, value: v });
    }
  }
  return points;
}

/**
 * Mean and population standard deviation across seeds, per evaluation point.
 * Runs of a label share an evaluation schedule but not exact step counts:
 * an episodic trainer evaluates at the first step at or past each interval
 * boundary, so the recorded steps drift by an episode's tail between seeds.
 * Points are therefore aligned by evaluation ordinal and plotted at their
 * mean step. A differing number of evaluations means the runs do not share
 * a schedule at all; that is a caller error, not something to truncate.
 */
export function aggregateSeries(runs: EvalPoint[][]): AggregateSeries {
  if (runs.length === 0) {
    throw new Error("no runs to aggregate");
  }
  const count = runs[0].length;
  for (const run of runs) {
    if (run.length !== count) {
      throw new Error(
        `runs record different numbers of evaluations (${run.length} vs ${count})`,
      );
    }
  }
  const steps: number[] = [];
  const mean: number[] = [];
  const std: number[] = [];
  for (let i = 0; i < count; i++) {
    const vals = runs.map((r) => r[i].value);
    const m = vals.reduce((a, b) => a + b, 0) / vals.length;
    const varSum = vals.reduce((a, b) => a + (b - m) * (b - m), 0) / vals.length;
    steps.push(runs.reduce((a, r) => a + r[i].step, 0) / runs.length);
    mean.push(m);
    std.push(Math.sqrt(varSum));
  }
  return { steps, mean, std };
}

/**
 * Centered moving average. At each index the window covers up to
 * floor(window/2) neighbours on each side, shrinking at the boundaries so
 * the output has the same length as the input.
 */
export function movingAverage(values: number[], window: number): number[] {
  if (window < 1) {
    throw new Error(`window must be >= 1, got ${window}`);
  }
  const half = Math.floor(window / 2);
  const out: number[] = [];
  for (let i = 0; i < values.length; i++) {
    const lo = Math.max(0, i - half);
    const hi = Math.min(values.length - 1, i + half);
    let sum = 0;
    for (let j = lo; j <= hi; j++) {
      sum += values[j];
    }
    out.push(sum / (hi - lo + 1));
  }
  return out;
}
