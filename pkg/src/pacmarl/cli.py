"""Command-line surface: train, evaluate, report, and gradient self-check.

Exit codes are a stable contract: 0 success, 1 runtime failure (training
crash, unreadable checkpoint, mismatched shapes, gradient-check breach),
2 usage or configuration error (argparse also exits 2 on unknown flags).
Flag precedence is CLI > config file > environment preset defaults; the
PAC_SEED environment variable supplies the seed when --seed is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, build_config, parse_config_text, preset_defaults
from .trainer import (
    CheckpointError,
    evaluate,
    load_checkpoint,
    matrix_game_report,
    resolve_eval_action_source,
    train,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _parse_set_items(items: list[str]) -> dict:
    """--set KEY=VALUE overrides; VALUE is JSON, falling back to a bare string."""
    values = {}
    for item in items:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        raw = raw.strip()
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    return values


def _env_seed() -> int | None:
    raw = os.environ.get("PAC_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"PAC_SEED must be an integer, got '{raw}'") from exc


def _read_config_file(path: str | None) -> dict | None:
    if path is None:
        return None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file '{path}': {exc}") from exc
    return parse_config_text(text)


def _cli_values(args) -> dict:
    values = _parse_set_items(args.set or [])
    for key in ("algo", "env", "out", "workers"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    seed = args.seed if args.seed is not None else _env_seed()
    if seed is not None:
        values["seed"] = seed
    return values


def cmd_train(args) -> int:
    cfg = build_config(_read_config_file(args.config), _cli_values(args))
    result = train(cfg)
    print(f"out = {json.dumps(result['out'])}")
    print(f"env_steps = {result['env_steps']}")
    print(f"episodes = {result['episodes']}")
    for key, value in sorted(result["evaluation"].items()):
        if value is not None:
            print(f"eval_{key} = {json.dumps(value)}")
    return EXIT_OK


def _load_or_fail(path: str):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from exc


def cmd_eval(args) -> int:
    ckpt = _load_or_fail(args.ckpt)
    overrides = _parse_set_items(args.set or [])
    overrides["env"] = args.env
    cfg = build_config(None, overrides)
    env = cfg.make_env_instance()
    if env.info != ckpt.info:
        print(f"error: checkpoint/environment shape mismatch:\n"
              f"  checkpoint: {ckpt.info}\n"
              f"  env '{args.env}': {env.info}", file=sys.stderr)
        return EXIT_RUNTIME
    cfg.algo = ckpt.algo
    seed = args.seed if args.seed is not None else _env_seed()
    if seed is None:
        seed = cfg.seed
    summary = evaluate(env, ckpt.bundle, args.episodes, seed,
                       action_source=resolve_eval_action_source(cfg))
    for key in ("episodes", "return_mean", "return_std", "win_rate", "captures_mean"):
        if summary[key] is not None:
            print(f"{key} = {json.dumps(summary[key])}")
    return EXIT_OK


def cmd_report(args) -> int:
    ckpt = _load_or_fail(args.ckpt)
    cfg = preset_defaults("matrix_game")
    env = cfg.make_env_instance()
    if env.info != ckpt.info:
        raise ConfigError(
            f"report requires a matrix-game checkpoint; this one has {ckpt.info}")
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "report.txt"
    out.write_text(matrix_game_report(ckpt.bundle, env))
    print(out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import THRESHOLD, run_gradcheck

    failures = 0
    for name, err in run_gradcheck():
        ok = err < THRESHOLD
        failures += 0 if ok else 1
        print(f"{name:<26s} max_rel_err = {err:.3e}  [{'ok' if ok else 'FAIL'}]")
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pacmarl",
        description="Train and inspect cooperative value-factorization agents.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    p_train.add_argument("--config", help="key = value config file")
    p_train.add_argument("--algo", help="algorithm (pac, qmix, vdn, ow_qmix)")
    p_train.add_argument("--env", help="environment preset name")
    p_train.add_argument("--seed", type=int, help="run seed (default: PAC_SEED or config)")
    p_train.add_argument("--out", help="output directory for run artifacts")
    p_train.add_argument("--workers", type=int, help="rollout workers (default 1)")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override any config key (repeatable)")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p_eval.add_argument("--ckpt", required=True, help="checkpoint path")
    p_eval.add_argument("--env", default="matrix_game", help="environment preset name")
    p_eval.add_argument("--episodes", type=int, default=32, help="evaluation episodes")
    p_eval.add_argument("--seed", type=int, help="evaluation seed")
    p_eval.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override env settings, e.g. env.width=9 (repeatable)")
    p_eval.set_defaults(fn=cmd_eval)

    p_report = sub.add_parser("report", help="write the matrix-game factorization report")
    p_report.add_argument("--ckpt", required=True, help="matrix-game checkpoint path")
    p_report.add_argument("--out", help="report path (default: next to the checkpoint)")
    p_report.set_defaults(fn=cmd_report)

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference check of every architecture")
    p_grad.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
