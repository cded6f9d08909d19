"""Command line entry point.

    lossagent run --config run.json [--out trajectory.jsonl]
    lossagent compare --config run.json --policies fixed,random,agent --seeds 0,1,2
    lossagent curves --in trajectory.jsonl --out curves.csv
    lossagent selftest
    lossagent serve [--host 127.0.0.1 --port 8000]

``run`` and ``compare`` execute in-process unless ``--server URL`` is given,
in which case they forward the request to a running ``lossagent serve``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import BackendError, ConfigError, LoadError, TrainingDiverged

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_BACKEND = 4

_KIND_EXIT = {"config": EXIT_CONFIG, "diverged": EXIT_DIVERGED, "backend": EXIT_BACKEND}


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _post(server: str, route: str, payload: dict):
    import httpx

    try:
        return httpx.post(server.rstrip("/") + route, json=payload, timeout=None)
    except httpx.HTTPError as exc:
        raise BackendError(f"cannot reach {server}: {exc}", "transport") from exc


def cmd_run(args) -> int:
    from .config import load_config

    config = load_config(args.config)
    out = Path(args.out)
    if args.server:
        resp = _post(args.server, "/runs", {"config": config.model_dump(mode="json"), "wait": True})
        body = resp.json()
        if body.get("trajectory_jsonl"):
            out.write_text(body["trajectory_jsonl"], encoding="utf-8")
        if resp.status_code != 200:
            print(f"error: {body.get('error')}", file=sys.stderr)
            return _KIND_EXIT.get(body.get("error_kind") or body.get("kind"), EXIT_FAILURE)
        print(f"{body['stages_completed']} stages -> {out}")
        return EXIT_OK

    from .orchestrator import run

    traj = run(config, out_path=out)
    last = traj[-1]
    summary = ", ".join(
        f"{fb.objective_name}={fb.aggregate:.4f}" if fb.kind == "score" else f"{fb.objective_name}=<text>"
        for fb in last.feedback
    )
    print(f"{len(traj)} stages -> {out}; final {summary}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .config import load_config

    config = load_config(args.config)
    policies = _csv_list(args.policies)
    seeds = [int(s) for s in _csv_list(args.seeds)]
    if args.server:
        resp = _post(
            args.server,
            "/compare",
            {"config": config.model_dump(mode="json"), "policies": policies, "seeds": seeds, "workers": args.workers},
        )
        if resp.status_code != 200:
            body = resp.json()
            print(f"error: {body.get('error')}", file=sys.stderr)
            return _KIND_EXIT.get(body.get("kind"), EXIT_FAILURE)
        report = resp.json()
    else:
        from .harness import compare_policies

        report = compare_policies(config, policies, seeds, out_dir=args.out_dir, workers=args.workers).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_curves(args) -> int:
    from .harness import emit_weight_curves
    from .trajectory import load

    traj = load(args.inp)
    if len(traj) == 0:
        print("error: trajectory has no entries", file=sys.stderr)
        return EXIT_FAILURE
    emit_weight_curves(traj, args.out)
    print(f"{len(traj)} stages -> {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .harness import selftest

    return selftest(fault=args.fault)


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(args.runs_dir), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lossagent", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every stage")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one run from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="trajectory.jsonl")
    p.add_argument("--server", help="forward to a lossagent service at this URL")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several policies over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--policies", required=True, help="comma-separated, e.g. fixed,random,agent")
    p.add_argument("--seeds", required=True, help="comma-separated integers")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", help="keep per-run trajectory files here")
    p.add_argument("--report", help="also write the JSON report to this file")
    p.add_argument("--server")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("curves", help="export loss-weight curves as CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("selftest", help="offline gradient, parser and smoke checks")
    p.add_argument("--fault", choices=["gradient"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--runs-dir")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except LoadError as exc:
        print(f"load error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
