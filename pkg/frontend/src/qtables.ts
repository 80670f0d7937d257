/**
 * Matrix-game Q-table renderings.
 *
 * One row of tables per state: the factored joint values with per-agent
 * marginal utilities, and (when the report carries one) the unrestricted
 * critic's table.  The greedy joint action's cell is outlined, green when
 * it sits on a maximal-payoff cell and red otherwise, and carries
 * machine-readable data attributes so the outcome can be asserted.
 */

import { MatrixReport, StateTables, optimalCells } from "./report.js";
import { fmt, svgDocument, text } from "./svg.js";

const CELL = 46;
const PAD = 14;
const HEADER = 22;

function fmt1(v: number): string {
  const s = (Math.round(v * 10) / 10).toFixed(1);
  return s === "-0.0" ? "0.0" : s;
}

interface TableSpec {
  title: string;
  grid: number[][];
  /** [agent-0 utilities (rows), agent-1 utilities (columns)] or null. */
  marginals: number[][] | null;
  highlight: { cell: [number, number]; optimal: boolean; state: number } | null;
}

function renderTable(spec: TableSpec, ox: number, oy: number): string {
  const n = spec.grid.length;
  const parts: string[] = [];
  parts.push(text(ox, oy - 6, spec.title, { "font-size": 12, "font-weight": "bold" }));

  const x0 = ox + HEADER;
  const y0 = oy + HEADER;
  for (let i = 0; i < n; i++) {
    parts.push(text(ox + HEADER - 8, y0 + i * CELL + CELL / 2 + 4, `u1=${i}`, {
      "text-anchor": "end",
      "font-size": 10,
    }));
    parts.push(text(x0 + i * CELL + CELL / 2, oy + HEADER - 8, `u2=${i}`, {
      "text-anchor": "middle",
      "font-size": 10,
    }));
  }
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      const x = x0 + j * CELL;
      const y = y0 + i * CELL;
      parts.push(
        `<rect x="${fmt(x)}" y="${fmt(y)}" width="${CELL}" height="${CELL}" ` +
          `fill="white" stroke="#999" stroke-width="0.7"/>`,
      );
      parts.push(text(x + CELL / 2, y + CELL / 2 + 4, fmt1(spec.grid[i][j]), {
        "text-anchor": "middle",
      }));
    }
  }

  if (spec.marginals) {
    const [rowUtil, colUtil] = spec.marginals;
    for (let i = 0; i < n; i++) {
      parts.push(text(x0 + n * CELL + 10, y0 + i * CELL + CELL / 2 + 4, fmt1(rowUtil[i]), {
        "font-size": 10,
        fill: "#555",
      }));
      parts.push(text(x0 + i * CELL + CELL / 2, y0 + n * CELL + 14, fmt1(colUtil[i]), {
        "text-anchor": "middle",
        "font-size": 10,
        fill: "#555",
      }));
    }
    parts.push(text(x0 + n * CELL + 10, oy + HEADER - 8, "q1", { "font-size": 10, fill: "#555" }));
    parts.push(text(ox + HEADER - 8, y0 + n * CELL + 14, "q2", {
      "text-anchor": "end",
      "font-size": 10,
      fill: "#555",
    }));
  }

  if (spec.highlight) {
    const [i, j] = spec.highlight.cell;
    const color = spec.highlight.optimal ? "#009e73" : "#d64545";
    parts.push(
      `<rect x="${fmt(x0 + j * CELL + 1.5)}" y="${fmt(y0 + i * CELL + 1.5)}" ` +
        `width="${CELL - 3}" height="${CELL - 3}" fill="none" stroke="${color}" ` +
        `stroke-width="3" data-greedy="1" data-state="${spec.highlight.state}" ` +
        `data-row="${i}" data-col="${j}" data-optimal="${spec.highlight.optimal ? 1 : 0}"/>`,
    );
  }
  return parts.join("\n");
}

function tableWidth(n: number, withMarginals: boolean): number {
  return HEADER + n * CELL + (withMarginals ? 34 : 10);
}

function tableHeight(n: number, withMarginals: boolean): number {
  return HEADER + n * CELL + (withMarginals ? 22 : 6) + 18;
}

export function buildQTableFigure(report: MatrixReport): string {
  const n = report.nActions;
  const rows: string[] = [];
  const qtotW = tableWidth(n, true);
  const blockH = tableHeight(n, true);
  const hasQstar = report.perState.some((s) => s.qstar !== undefined);
  const width = PAD + qtotW + (hasQstar ? tableWidth(n, false) + PAD : 0) + PAD;
  const height = 30 + report.perState.length * (blockH + PAD);

  rows.push(text(PAD, 20, `${report.algo}: matrix-game value tables`, {
    "font-size": 14,
    "font-weight": "bold",
  }));

  report.perState.forEach((tables: StateTables, idx: number) => {
    const oy = 30 + idx * (blockH + PAD) + 16;
    const state = idx + 1;
    const greedy: [number, number] = [tables.greedy[0], tables.greedy[1]];
    const optimal = optimalCells(tables.payoff).some(
      ([i, j]) => i === greedy[0] && j === greedy[1],
    );
    rows.push(
      renderTable(
        {
          title: `s${state}: Q_tot (greedy payoff ${fmt1(tables.greedyPayoff)})`,
          grid: tables.qtot,
          marginals: tables.util,
          highlight: { cell: greedy, optimal, state },
        },
        PAD,
        oy,
      ),
    );
    if (tables.qstar) {
      rows.push(
        renderTable(
          {
            title: `s${state}: unrestricted critic`,
            grid: tables.qstar,
            marginals: null,
            highlight: null,
          },
          PAD + qtotW + PAD,
          oy,
        ),
      );
    }
  });

  return svgDocument(width, height, rows.join("\n"));
}

/** Greedy-highlight facts extracted back out of a rendered figure. */
export interface HighlightFact {
  state: number;
  cell: [number, number];
  optimal: boolean;
}

export function readHighlights(svg: string): HighlightFact[] {
  const facts: HighlightFact[] = [];
  const re =
    /data-greedy="1" data-state="(\d+)" data-row="(\d+)" data-col="(\d+)" data-optimal="([01])"/g;
  for (const m of svg.matchAll(re)) {
    facts.push({
      state: Number(m[1]),
      cell: [Number(m[2]), Number(m[3])],
      optimal: m[4] === "1",
    });
  }
  return facts;
}
