/**
 * Parsing matrix-game report files.
 *
 * The report contract: lines starting with `#` are a human-readable
 * rendering; the remaining lines form a machine block of `key = <JSON>`
 * pairs with keys `algo`, `states`, `n_actions`, and per state k the keys
 * `s{k}.qtot`, `s{k}.util`, `s{k}.greedy`, `s{k}.greedy_payoff`,
 * `s{k}.payoff`, and (for learners with a central critic) `s{k}.qstar`.
 */

export interface StateTables {
  qtot: number[][];
  util: number[][];
  greedy: number[];
  greedyPayoff: number;
  payoff: number[][];
  qstar?: number[][];
}

export interface MatrixReport {
  algo: string;
  states: number;
  nActions: number;
  /** Indexed 0..states-1 for report states s1..sN. */
  perState: StateTables[];
}

function parseMachineBlock(text: string): Map<string, unknown> {
  const values = new Map<string, unknown>();
  for (const rawLine of text.split(/\r?\n/)) {
    const line = rawLine.trim();
    if (line === "" || line.startsWith("#")) {
      continue;
    }
    const eq = line.indexOf("=");
    if (eq < 0) {
      throw new Error(`malformed report line: ${line}`);
    }
    const key = line.slice(0, eq).trim();
    const raw = line.slice(eq + 1).trim();
    try {
      values.set(key, JSON.parse(raw));
    } catch {
      throw new Error(`malformed report value for ${key}: ${raw}`);
    }
  }
  return values;
}

function requireKey<T>(values: Map<string, unknown>, key: string): T {
  if (!values.has(key)) {
    throw new Error(`report is missing key ${key}`);
  }
  return values.get(key) as T;
}

function requireGrid(values: Map<string, unknown>, key: string, n: number): number[][] {
  const grid = requireKey<number[][]>(values, key);
  if (!Array.isArray(grid) || grid.length === 0 || grid.some((r) => !Array.isArray(r))) {
    throw new Error(`report key ${key} is not a table`);
  }
  if (grid.some((r) => r.length !== n) ) {
    throw new Error(`report key ${key} rows should have ${n} entries`);
  }
  return grid;
}

export function parseReport(text: string): MatrixReport {
  const values = parseMachineBlock(text);
  const algo = requireKey<string>(values, "algo");
  const states = requireKey<number>(values, "states");
  const nActions = requireKey<number>(values, "n_actions");
  const perState: StateTables[] = [];
  for (let k = 1; k <= states; k++) {
    const greedy = requireKey<number[]>(values, `s${k}.greedy`);
    if (!Array.isArray(greedy) || greedy.length !== 2) {
      throw new Error(`report key s${k}.greedy should be a joint action pair`);
    }
    const tables: StateTables = {
      qtot: requireGrid(values, `s${k}.qtot`, nActions),
      util: requireGrid(values, `s${k}.util`, nActions),
      greedy,
      greedyPayoff: requireKey<number>(values, `s${k}.greedy_payoff`),
      payoff: requireGrid(values, `s${k}.payoff`, nActions),
    };
    if (values.has(`s${k}.qstar`)) {
      tables.qstar = requireGrid(values, `s${k}.qstar`, nActions);
    }
    perState.push(tables);
  }
  return { algo, states, nActions, perState };
}

/** Cells holding the maximal payoff (the optimal joint actions). */
export function optimalCells(payoff: number[][]): Array<[number, number]> {
  let best = -Infinity;
  for (const row of payoff) {
    for (const v of row) {
      best = Math.max(best, v);
    }
  }
  const cells: Array<[number, number]> = [];
  payoff.forEach((row, i) =>
    row.forEach((v, j) => {
      if (v === best) {
        cells.push([i, j]);
      }
    }),
  );
  return cells;
}
