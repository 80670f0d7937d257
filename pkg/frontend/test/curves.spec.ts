import { describe, expect, it } from "vitest";

import { buildCurveFigure } from "../src/curves.js";

const series = (mean: number[], std: number[]) => ({
  steps: mean.map((_, i) => i * 1000),
  mean,
  std,
});

describe("buildCurveFigure", () => {
  it("draws one band and one mean line per label, plus the legend", () => {
    const svg = buildCurveFigure(
      [
        { label: "pac", series: series([0, 2, 4], [0.5, 0.5, 0.5]) },
        { label: "qmix", series: series([0, 1, 2], [0.2, 0.2, 0.2]) },
      ],
      { title: "evaluation return", yLabel: "return", window: 1 },
    );
    expect(svg.startsWith("<svg ")).toBe(true);
    expect(svg.match(/<polygon /g)).toHaveLength(2);
    // 2 mean lines + axis tick marks; count only the thick curve strokes
    expect(svg.match(/stroke-width="1\.8"/g)).toHaveLength(2);
    expect(svg).toContain(">pac</text>");
    expect(svg).toContain(">qmix</text>");
    expect(svg).toContain("evaluation return");
    expect(svg).toContain("environment steps");
  });

  it("collapses the band onto the curve when the spread is zero", () => {
    const svg = buildCurveFigure(
      [{ label: "solo", series: series([1, 2, 3], [0, 0, 0]) }],
      { title: "t", yLabel: "y", window: 1 },
    );
    const polygon = svg.match(/<polygon points="([^"]+)"/)![1];
    const line = svg.match(/<polyline points="([^"]+)" fill="none" stroke="#0072b2"/)![1];
    const linePts = line.split(" ");
    const bandPts = polygon.split(" ");
    expect(bandPts).toEqual([...linePts, ...[...linePts].reverse()]);
  });

  it("applies the smoothing window to the drawn mean", () => {
    // A spike at the middle point: with window 3 the drawn center value is
    // the average of its neighbourhood, so its y coordinate moves strictly
    // toward the neighbours' level.
    const raw = buildCurveFigure(
      [{ label: "a", series: series([0, 9, 0], [0, 0, 0]) }],
      { title: "t", yLabel: "y", window: 1 },
    );
    const smoothed = buildCurveFigure(
      [{ label: "a", series: series([0, 9, 0], [0, 0, 0]) }],
      { title: "t", yLabel: "y", window: 3 },
    );
    const midY = (svg: string) =>
      Number(svg.match(/<polyline points="[^"]*? (\d+\.?\d*),(\d+\.?\d*) /)![2]);
    // larger y pixel = lower value; the smoothed spike sits lower
    expect(midY(smoothed)).toBeGreaterThan(midY(raw));
  });

  it("rejects an empty label set", () => {
    expect(() => buildCurveFigure([], { title: "t", yLabel: "y", window: 5 })).toThrow(
      /no series/,
    );
  });
});
