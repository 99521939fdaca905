"""``fedsim run <scenario.json> [--out metrics.json] [--sweep key=v1,v2,...]``"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import engine
from .scenario import ScenarioError, parse, set_path


def _value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def run_file(path, sweep=None) -> dict:
    raw = json.loads(Path(path).read_text())
    if not sweep:
        return engine.run(parse(raw))
    key, _, values = sweep.partition("=")
    if not key or not values:
        raise ValueError("--sweep expects key=v1,v2,...")
    runs = []
    for text in values.split(","):
        v = _value(text)
        runs.append({"value": v, "metrics": engine.run(parse(set_path(raw, key, v)))})
    return {"sweep": key, "runs": runs}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="fedsim", description="Deterministic federation simulator.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("scenario")
    r.add_argument("--out", help="write metrics JSON here instead of stdout")
    r.add_argument("--sweep", help="key=v1,v2,... (dotted key into the scenario)")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.CRITICAL)
    try:
        result = run_file(args.scenario, args.sweep)
    except ScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"fedsim: {exc}", file=sys.stderr)
        return 2
    text = engine.metrics_json(result)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
