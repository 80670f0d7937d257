#!/usr/bin/env node
/**
 * Figure generation from trainer outputs.
 *
 *   plot-curves <out_dir> <label=metrics.csv>... [--window N]
 *       One learning-curve figure per metric that has data (test return,
 *       win rate): per-label mean across runs with a +/- std band, centered
 *       moving-average smoothing (default window 5 evaluation points).
 *
 *   render-qtables <report> <out.svg>
 *       Matrix-game value tables with the greedy joint action highlighted.
 *
 * Exit codes: 0 success, 1 runtime failure (unreadable/invalid input),
 * 2 usage error.
 */

import { mkdirSync, readFileSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { buildCurveFigure, LabeledSeries } from "./curves.js";
import { aggregateSeries, evalSeries, parseMetricsCsv } from "./metrics.js";
import { buildQTableFigure } from "./qtables.js";
import { parseReport } from "./report.js";

export const EXIT_OK = 0;
export const EXIT_RUNTIME = 1;
export const EXIT_USAGE = 2;

const USAGE = `usage:
  plot-curves <out_dir> <label=metrics.csv>... [--window N]
  render-qtables <report> <out.svg>`;

/** Metrics drawn by plot-curves when at least one run logs them. */
const CURVE_METRICS: Array<{ column: string; title: string; yLabel: string; file: string }> = [
  {
    column: "test_return_mean",
    title: "evaluation return",
    yLabel: "mean test return",
    file: "test_return.svg",
  },
  {
    column: "test_win_rate",
    title: "evaluation win rate",
    yLabel: "mean test win rate",
    file: "win_rate.svg",
  },
];

interface CurveArgs {
  outDir: string;
  runs: Array<{ label: string; path: string }>;
  window: number;
}

export function parseCurveArgs(argv: string[]): CurveArgs {
  const positional: string[] = [];
  let window = 5;
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--window") {
      const raw = argv[++i];
      window = Number(raw);
      if (!Number.isInteger(window) || window < 1) {
        throw new UsageError(`--window expects a positive integer, got ${raw}`);
      }
    } else if (argv[i].startsWith("--")) {
      throw new UsageError(`unknown flag ${argv[i]}`);
    } else {
      positional.push(argv[i]);
    }
  }
  if (positional.length < 2) {
    throw new UsageError("plot-curves needs an output directory and at least one label=path");
  }
  const [outDir, ...pairs] = positional;
  const runs = pairs.map((pair) => {
    const eq = pair.indexOf("=");
    if (eq <= 0) {
      throw new UsageError(`expected label=path, got ${pair}`);
    }
    return { label: pair.slice(0, eq), path: pair.slice(eq + 1) };
  });
  return { outDir, runs, window };
}

export class UsageError extends Error {}

function groupByLabel(runs: CurveArgs["runs"]): Map<string, string[]> {
  const groups = new Map<string, string[]>();
  for (const { label, path } of runs) {
    const paths = groups.get(label) ?? [];
    paths.push(path);
    groups.set(label, paths);
  }
  return groups;
}

export function cmdPlotCurves(argv: string[]): number {
  const args = parseCurveArgs(argv);
  const groups = groupByLabel(args.runs);
  const parsed = new Map<string, ReturnType<typeof parseMetricsCsv>[]>();
  for (const [label, paths] of groups) {
    parsed.set(
      label,
      paths.map((p) => parseMetricsCsv(readFileSync(p, "utf8"))),
    );
  }

  mkdirSync(args.outDir, { recursive: true });
  const written: string[] = [];
  for (const metric of CURVE_METRICS) {
    const labeled: LabeledSeries[] = [];
    for (const [label, runs] of parsed) {
      const series = runs.map((rows) => evalSeries(rows, metric.column));
      if (series.some((s) => s.length === 0)) {
        continue; // metric not recorded for this environment
      }
      labeled.push({ label, series: aggregateSeries(series) });
    }
    if (labeled.length === 0) {
      continue;
    }
    if (labeled.length < parsed.size) {
      const have = labeled.map((l) => l.label);
      throw new Error(
        `column ${metric.column} is recorded for [${have}] but not the other labels`,
      );
    }
    const out = join(args.outDir, metric.file);
    writeFileSync(
      out,
      buildCurveFigure(labeled, {
        title: metric.title,
        yLabel: metric.yLabel,
        window: args.window,
      }),
    );
    written.push(out);
  }
  if (written.length === 0) {
    throw new Error("no evaluation data found in any input CSV");
  }
  for (const path of written) {
    process.stdout.write(`${path}\n`);
  }
  return EXIT_OK;
}

export function cmdRenderQTables(argv: string[]): number {
  if (argv.length !== 2) {
    throw new UsageError("render-qtables needs a report path and an output path");
  }
  const [reportPath, outPath] = argv;
  const report = parseReport(readFileSync(reportPath, "utf8"));
  writeFileSync(outPath, buildQTableFigure(report));
  process.stdout.write(`${outPath}\n`);
  return EXIT_OK;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    switch (command) {
      case "plot-curves":
        return cmdPlotCurves(rest);
      case "render-qtables":
        return cmdRenderQTables(rest);
      default:
        process.stderr.write(`unknown command: ${command ?? "(none)"}\n${USAGE}\n`);
        return EXIT_USAGE;
    }
  } catch (err) {
    if (err instanceof UsageError) {
      process.stderr.write(`${err.message}\n${USAGE}\n`);
      return EXIT_USAGE;
    }
    process.stderr.write(`${err instanceof Error ? err.message : err}\n`);
    return EXIT_RUNTIME;
  }
}

const isDirectRun =
  process.argv[1] !== undefined &&
  import.meta.url === new URL(`file://${process.argv[1]}`).href;
if (isDirectRun) {
  process.exit(main(process.argv.slice(2)));
}
