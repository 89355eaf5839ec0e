"""Thin command-line client.

Subcommands mirror the service endpoints: ``run <config>``, ``check
[--level]``, ``oracle <config> [--h]``, plus ``serve`` to start the HTTP
service. By default commands execute in-process; pass ``--server URL`` to
send the same payload to a running service instead. The CLI holds no
algorithm logic of its own.
"""

from __future__ import annotations

import argparse
import json
import sys

import yaml

from .bench.config import load_config
from .errors import SimtuneError


def _post(server: str, route: str, payload: dict) -> dict:
    import httpx

    resp = httpx.post(server.rstrip("/") + route, json=payload, timeout=None)
    if resp.status_code != 200:
        raise SimtuneError(f"server returned {resp.status_code}: {resp.text}")
    return resp.json()


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.server:
        out = _post(
            args.server, "/run", {"config": cfg.model_dump(mode="json"), "out_dir": args.out_dir}
        )
        print(out["metrics_path"])
        print(yaml.safe_dump(out["summary"], sort_keys=False), end="")
        return 0
    from .bench.runner import run_experiment

    metrics_path = run_experiment(cfg, args.out_dir)
    summary = yaml.safe_load(
        (metrics_path.parent / (metrics_path.stem + ".summary.yaml")).read_text()
    )
    print(metrics_path)
    print(yaml.safe_dump(summary, sort_keys=False), end="")
    return 0


def cmd_check(args) -> int:
    if args.server:
        out = _post(args.server, "/check", {"level": args.level})
        results = out["results"]
        all_passed = out["all_passed"]
        for r in results:
            flag = "PASS" if r["passed"] else "FAIL"
            print(f"{flag}  {r['name']:<28} {r['seconds']:7.2f}s  {r['detail']}")
        return 0 if all_passed else 1

    from .bench.checks import check_suite, render_report

    results = check_suite(args.level)
    print(render_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    psi = json.loads(args.psi) if args.psi else None
    if args.server:
        out = _post(
            args.server,
            "/oracle",
            {"config": cfg.model_dump(mode="json"), "h": args.h, "psi": psi},
        )
    else:
        from .bench.oracle import run_oracle

        out = run_oracle(cfg, h=args.h, psi_raw=psi)
    print(yaml.safe_dump(out, sort_keys=False), end="")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("simtune.service.app:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simtune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a YAML config")
    p_run.add_argument("config", help="path to the experiment config")
    p_run.add_argument("--out-dir", default=None, help="metrics output directory")
    p_run.add_argument("--server", default=None, help="send to a running service instead")
    p_run.set_defaults(fn=cmd_run)

    p_check = sub.add_parser("check", help="run the verification suite")
    p_check.add_argument("--level", choices=("fast", "full"), default="fast")
    p_check.add_argument("--server", default=None)
    p_check.set_defaults(fn=cmd_check)

    p_oracle = sub.add_parser("oracle", help="brute-force bi-level gradient at a config's task")
    p_oracle.add_argument("config", help="path to the experiment config")
    p_oracle.add_argument("--h", type=float, default=1e-2, help="finite-difference step on raw psi")
    p_oracle.add_argument("--psi", default=None, help="JSON list overriding the task's initial psi")
    p_oracle.add_argument("--server", default=None)
    p_oracle.set_defaults(fn=cmd_oracle)

    p_serve = sub.add_parser("serve", help="start the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SimtuneError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
