/** Synthetic inputs matching the trainer's CSV and report contracts. */

export function metricsCsv(evalReturns: Array<[number, number]>, winRate = false): string {
  const header =
    "env_steps,episodes,test_return_mean,test_return_std,test_win_rate,loss_qtot,wall_clock_s";
  const lines = [header];
  for (const [step, ret] of evalReturns) {
    const win = winRate ? (ret / 10).toFixed(3) : "";
    lines.push(`${step},${step},${ret},0.25,${win},,${step / 1000}`);
    lines.push(`${step + 50},${step + 50},,,,${(0.5 + step / 1e5).toFixed(3)},${step / 1000 + 0.5}`);
  }
  return lines.join("\n") + "\n";
}

export function matrixReport(opts: {
  algo: string;
  greedy: Array<[number, number]>;
  qstar: boolean;
}): string {
  // Payoffs of the two-state coordination game: the optimum sits at (0,0)
  // in state 1 and at (1,0) in state 2.
  const payoffs = [
    [
      [4, -2, -2],
      [-2, 0, 0],
      [-2, 0, 0],
    ],
    [
      [-2, 0, 0],
      [4, -2, -2],
      [-2, 0, 0],
    ],
  ];
  const lines = [
    "# matrix game report",
    `# algo = ${opts.algo}`,
    `algo = ${JSON.stringify(opts.algo)}`,
    "states = 2",
    "n_actions = 3",
  ];
  opts.greedy.forEach(([g1, g2], idx) => {
    const k = idx + 1;
    const payoff = payoffs[idx];
    const qtot = payoff.map((row) => row.map((v) => v * 0.9 + 0.05));
    lines.push(`s${k}.qtot = ${JSON.stringify(qtot)}`);
    lines.push(`s${k}.util = ${JSON.stringify([[0.3, -3.5, -3.6], [0.2, -3.4, -3.7]])}`);
    lines.push(`s${k}.greedy = ${JSON.stringify([g1, g2])}`);
    lines.push(`s${k}.greedy_payoff = ${payoff[g1][g2]}`);
    lines.push(`s${k}.payoff = ${JSON.stringify(payoff)}`);
    if (opts.qstar) {
      lines.push(`s${k}.qstar = ${JSON.stringify(payoff.map((r) => r.map((v) => v + 0.01)))}`);
    }
  });
  return lines.join("\n") + "\n";
}
