/** Minimal SVG string builders; no DOM, deterministic output. */

export function esc(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function tag(
  name: string,
  attrs: Record<string, string | number>,
  body = "",
): string {
  const parts = Object.entries(attrs)
    .map(([k, v]) => `${k}="${typeof v === "number" ? fmt(v) : esc(v)}"`)
    .join(" ");
  return body === ""
    ? `<${name} ${parts}/>`
    : `<${name} ${parts}>${body}</${name}>`;
}

/** Round coordinates to 2 decimals so output is compact and stable. */
export function fmt(v: number): string {
  const r = Math.round(v * 100) / 100;
  return Object.is(r, -0) ? "0" : String(r);
}

export function svgDocument(width: number, height: number, body: string): string {
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
    `viewBox="0 0 ${width} ${height}" font-family="sans-serif">\n${body}\n</svg>\n`
  );
}

export function polyline(points: Array<[number, number]>, stroke: string, width = 1.5): string {
  const pts = points.map(([x, y]) => `${fmt(x)},${fmt(y)}`).join(" ");
  return `<polyline points="${pts}" fill="none" stroke="${stroke}" stroke-width="${width}"/>`;
}

export function polygon(points: Array<[number, number]>, fill: string, opacity: number): string {
  const pts = points.map(([x, y]) => `${fmt(x)},${fmt(y)}`).join(" ");
  return `<polygon points="${pts}" fill="${fill}" fill-opacity="${fmt(opacity)}" stroke="none"/>`;
}

export function text(
  x: number,
  y: number,
  content: string,
  attrs: Record<string, string | number> = {},
): string {
  return tag("text", { x: fmt(x), y: fmt(y), "font-size": 11, ...attrs }, esc(content));
}

/** Evenly spaced axis tick values covering [lo, hi]. */
export function ticks(lo: number, hi: number, count = 5): number[] {
  if (!(hi > lo)) {
    return [lo];
  }
  const rawStep = (hi - lo) / (count - 1);
  const mag = Math.pow(10, Math.floor(Math.log10(rawStep)));
  const step = [1, 2, 2.5, 5, 10].map((m) => m * mag).find((s) => s >= rawStep) ?? rawStep;
  const first = Math.ceil(lo / step) * step;
  const out: number[] = [];
  for (let v = first; v <= hi + 1e-9 * step; v += step) {
    out.push(Math.round(v / step) * step);
  }
  return out;
}

/** Compact tick labels: 300000 -> "300k", 2000000 -> "2M". */
export function tickLabel(v: number): string {
  if (Math.abs(v) >= 1e6 && Number.isInteger(v / 1e5)) {
    return `${v / 1e6}M`;
  }
  if (Math.abs(v) >= 1e3 && Number.isInteger(v / 1e2)) {
    return `${v / 1e3}k`;
  }
  return String(Math.round(v * 1000) / 1000);
}
