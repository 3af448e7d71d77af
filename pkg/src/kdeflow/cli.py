"""``kdeflow`` command: run a configured experiment or list the catalog.

Exit status is 0 on success, 2 for an invalid configuration and 3 for a
numerical failure; failures also print a JSON error object on stderr (and
write ``error.json`` into the output directory when one is known).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .experiments import ConfigError, ExperimentConfig, list_experiments, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects path=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = data
    for k in keys[:-1]:
        nxt = node.get(k)
        if nxt is None:
            nxt = node[k] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {path!r}: {k!r} is not a mapping")
        node = nxt
    node[keys[-1]] = _parse_value(raw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdeflow", description="KDE-point experiments.")
    p.add_argument("--config", type=Path, help="JSON config (or a previous run's manifest.json)")
    p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                   help="override a config entry, e.g. --set flow.stop_eps=1e-6")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--threads", type=int,
                   help="cap on BLAS/OpenMP threads (default: $KDEFLOW_THREADS)")
    p.add_argument("--list", action="store_true", help="list experiment kinds and exit")
    p.add_argument("--json", action="store_true", help="with --list: emit a JSON array")
    return p


def _fail(code: int, kind: str, message: str, out: Path | None, **extra) -> int:
    payload = {"status": "error", "error": kind, "message": message, **extra}
    text = json.dumps(payload, sort_keys=True)
    print(text, file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(text + "\n")
        except OSError:
            pass
    return code


def _thread_limit(arg):
    if arg is not None:
        return arg
    env = os.environ.get("KDEFLOW_THREADS")
    return int(env) if env else None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.list:
        listing = list_experiments(as_json=args.json)
        print(json.dumps(listing, indent=2) if args.json else listing)
        return EXIT_OK

    out = args.out
    try:
        data = {}
        if args.config is not None:
            try:
                data = json.loads(args.config.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            if "config" in data and "versions" in data:
                data = data["config"]
        for s in args.set:
            apply_override(data, s)
        if args.seed is not None:
            data["seed"] = args.seed
        if args.out is not None:
            data["out"] = str(args.out)
        cfg = ExperimentConfig.from_dict(data)
        out = Path(cfg.out)
        threads = _thread_limit(args.threads)
        if threads is not None and threads < 1:
            raise ConfigError("--threads must be at least 1")
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "invalid_config", str(exc), out)

    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                run_experiment(cfg, out)
        else:
            run_experiment(cfg, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "invalid_config", str(exc), out)
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
        return _fail(EXIT_NUMERIC, "numeric_failure", str(exc), out,
                     exception=type(exc).__name__, experiment=cfg.experiment)
    print(json.dumps({"status": "ok", "experiment": cfg.experiment, "out": str(out)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
