/** Learning-curve figures: per-label mean across seeds with a +/- std band. */

import { AggregateSeries, movingAverage } from "./metrics.js";
import { polygon, polyline, svgDocument, text, tickLabel, ticks } from "./svg.js";

export interface LabeledSeries {
  label: string;
  series: AggregateSeries;
}

export interface CurveOptions {
  title: string;
  yLabel: string;
  /** Centered moving-average window, in evaluation points. */
  window: number;
}

const PALETTE = ["#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9"];

const WIDTH = 640;
const HEIGHT = 400;
const MARGIN = { left: 58, right: 16, top: 34, bottom: 42 };

interface Smoothed {
  label: string;
  color: string;
  steps: number[];
  mean: number[];
  lo: number[];
  hi: number[];
}

function smooth(labeled: LabeledSeries[], window: number): Smoothed[] {
  return labeled.map((ls, i) => {
    const mean = movingAverage(ls.series.mean, window);
    const std = movingAverage(ls.series.std, window);
    return {
      label: ls.label,
      color: PALETTE[i % PALETTE.length],
      steps: ls.series.steps,
      mean,
      lo: mean.map((m, k) => m - std[k]),
      hi: mean.map((m, k) => m + std[k]),
    };
  });
}

export function buildCurveFigure(labeled: LabeledSeries[], opts: CurveOptions): string {
  if (labeled.length === 0) {
    throw new Error("no series to plot");
  }
  const curves = smooth(labeled, opts.window);

  const xs = curves.flatMap((c) => c.steps);
  const ys = curves.flatMap((c) => [...c.lo, ...c.hi]);
  const xLo = Math.min(...xs);
  const xHi = Math.max(...xs);
  let yLo = Math.min(...ys);
  let yHi = Math.max(...ys);
  if (yHi === yLo) {
    yLo -= 1;
    yHi += 1;
  }
  const yPad = 0.05 * (yHi - yLo);
  yLo -= yPad;
  yHi += yPad;

  const plotW = WIDTH - MARGIN.left - MARGIN.right;
  const plotH = HEIGHT - MARGIN.top - MARGIN.bottom;
  const px = (v: number) =>
    MARGIN.left + (xHi === xLo ? 0.5 : (v - xLo) / (xHi - xLo)) * plotW;
  const py = (v: number) => MARGIN.top + (1 - (v - yLo) / (yHi - yLo)) * plotH;

  const parts: string[] = [];

  // frame and gridlines
  parts.push(
    `<rect x="${MARGIN.left}" y="${MARGIN.top}" width="${plotW}" height="${plotH}" ` +
      `fill="none" stroke="#444" stroke-width="1"/>`,
  );
  for (const t of ticks(yLo, yHi)) {
    const y = py(t);
    parts.push(polyline([[MARGIN.left, y], [MARGIN.left + plotW, y]], "#ddd", 0.5));
    parts.push(text(MARGIN.left - 6, y + 4, tickLabel(t), { "text-anchor": "end" }));
  }
  for (const t of ticks(xLo, xHi)) {
    const x = px(t);
    parts.push(polyline([[x, MARGIN.top + plotH], [x, MARGIN.top + plotH + 4]], "#444", 1));
    parts.push(text(x, MARGIN.top + plotH + 16, tickLabel(t), { "text-anchor": "middle" }));
  }

  // bands first so every mean line stays visible
  for (const c of curves) {
    const upper: Array<[number, number]> = c.steps.map((s, i) => [px(s), py(c.hi[i])]);
    const lower: Array<[number, number]> = c.steps
      .map((s, i): [number, number] => [px(s), py(c.lo[i])])
      .reverse();
    parts.push(polygon([...upper, ...lower], c.color, 0.18));
  }
  for (const c of curves) {
    parts.push(polyline(c.steps.map((s, i) => [px(s), py(c.mean[i])]), c.color, 1.8));
  }

  // labels and legend
  parts.push(text(WIDTH / 2, 18, opts.title, { "text-anchor": "middle", "font-size": 14 }));
  parts.push(text(14, MARGIN.top + plotH / 2, opts.yLabel, {
    "text-anchor": "middle",
    transform: `rotate(-90 14 ${MARGIN.top + plotH / 2})`,
  }));
  parts.push(text(MARGIN.left + plotW / 2, HEIGHT - 8, "environment steps", {
    "text-anchor": "middle",
  }));
  curves.forEach((c, i) => {
    const y = MARGIN.top + 14 + 16 * i;
    const x = MARGIN.left + 10;
    parts.push(polyline([[x, y - 4], [x + 22, y - 4]], c.color, 2.5));
    parts.push(text(x + 28, y, c.label));
  });

  return svgDocument(WIDTH, HEIGHT, parts.join("\n"));
}
