from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .allocation import AllocationError
from .backends import BackendError
from .config import ConfigError, load_json, parse_bench, parse_context, parse_train
from .grpo import PolicyError
from .harness import HarnessError, run_benchmark, run_context, run_repair_fuzz, run_training
from .netenv import NetEnvError
from .render import RenderError, render_report
from .reward import RewardError
from .serializer import SerializerError
from .solvers import SolverError

EXIT_AUDIT_FAILED = 2


def _out_dir(args: argparse.Namespace, default_stem: str) -> Path:
    return Path(args.out) if args.out else Path("artifacts") / default_stem


def cmd_run(args: argparse.Namespace) -> int:
    cfg = parse_bench(load_json(args.config), default_name=Path(args.config).stem)
    out = _out_dir(args, Path(args.config).stem)
    result = run_benchmark(cfg, out, args.config)
    print(json.dumps({
        "run_id": result.run_id,
        "out_dir": str(out),
        "records": len(result.records),
        "audit": result.audit.to_dict(),
    }, ensure_ascii=False))
    return 0 if result.audit.passed else EXIT_AUDIT_FAILED


def cmd_train(args: argparse.Namespace) -> int:
    cfg = parse_train(load_json(args.config), default_name=Path(args.config).stem)
    out = _out_dir(args, Path(args.config).stem)
    results = run_training(cfg, out, args.config)
    print(json.dumps({
        "out_dir": str(out),
        "variants": {
            r.name: {"improved": sum(b > a for a, b in zip(r.first_window, r.last_window)), "seeds": len(r.first_window)}
            for r in results
        },
    }, ensure_ascii=False))
    return 0


def cmd_context(args: argparse.Namespace) -> int:
    cfg = parse_context(load_json(args.config), default_name=Path(args.config).stem)
    out = _out_dir(args, Path(args.config).stem)
    rows = run_context(cfg, out, args.config)
    print(json.dumps({
        "out_dir": str(out),
        "rows": [{"budget": r.budget, "detail_level": r.detail_level, "status": r.status} for r in rows],
    }, ensure_ascii=False))
    return 0


def cmd_repair_fuzz(args: argparse.Namespace) -> int:
    out = _out_dir(args, "repair_fuzz")
    report = run_repair_fuzz(args.n, args.seed, out)
    print(json.dumps({
        "out_dir": str(out),
        "n": report.n,
        "passed": report.passed,
        "failures": report.failures,
    }, ensure_ascii=False))
    return 0 if report.passed else EXIT_AUDIT_FAILED


def cmd_render_report(args: argparse.Namespace) -> int:
    output = render_report(artifact_path=args.artifact, output_path=args.output)
    print(json.dumps({"output_path": str(output)}, ensure_ascii=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run")
    r.add_argument("config")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("train")
    t.add_argument("config")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("context")
    c.add_argument("config")
    c.add_argument("--out")
    c.set_defaults(func=cmd_context)

    f = sub.add_parser("repair-fuzz")
    f.add_argument("n", type=int)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out")
    f.set_defaults(func=cmd_repair_fuzz)

    render = sub.add_parser("render")
    render_sub = render.add_subparsers(dest="render_cmd", required=True)

    report = render_sub.add_parser("report")
    report.add_argument("--artifact", required=True)
    report.add_argument("--output", required=True)
    report.set_defaults(func=cmd_render_report)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    try:
        return args.func(args)
    except (
        ConfigError,
        HarnessError,
        NetEnvError,
        AllocationError,
        SolverError,
        SerializerError,
        RewardError,
        PolicyError,
        BackendError,
        RenderError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
