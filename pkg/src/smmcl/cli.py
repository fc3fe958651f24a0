"""Command line: ``smmcl generate|run|report|check-bounds``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import runner
from .errors import SmmclError
from .taskgen import save_stream


def _seed_list(text: str) -> list[int]:
    """``3`` means seeds 0..2; ``1,4,7`` and ``2-5`` list them explicitly."""
    text = text.strip()
    if text.isdigit():
        return list(range(int(text)))
    seeds = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-", 1)
            seeds.extend(range(int(a), int(b) + 1))
        else:
            seeds.append(int(part))
    return seeds


def _load(args) -> dict:
    raw = runner.load_config(args.config)
    if not isinstance(raw, dict):
        return raw
    if args.seeds is not None:
        raw["seeds"] = args.seeds
    if args.out is not None:
        raw["out"] = args.out
    if getattr(args, "jobs", None) is not None:
        raw["jobs"] = args.jobs
    return raw


def cmd_generate(args) -> int:
    raw = _load(args)
    problems = [p for p in runner.validate({**raw, "strategies": raw.get("strategies") or ["smm"],
                                            "seeds": raw.get("seeds") or [0]})
                if p.startswith("stream")]
    if problems:
        print("invalid config:\n  " + "\n  ".join(problems), file=sys.stderr)
        return runner.EXIT_INVALID
    seed = (args.seeds or raw.get("seeds") or [0])[0]
    stream = runner.make_stream(raw["stream"], seed)
    target = args.out or "stream.txt"
    save_stream(stream, target)
    print(f"wrote {target}: {stream.n_tasks} tasks, {len(stream.seen_classes(stream.n_tasks))} classes")
    return runner.EXIT_OK


def cmd_run(args) -> int:
    raw = _load(args)
    problems = runner.validate(raw)
    if problems:
        print("invalid config:\n  " + "\n  ".join(problems), file=sys.stderr)
        return runner.EXIT_INVALID
    cfg = runner.parse_config(raw)
    status, records = runner.run(cfg)
    failed = [r for r in records if r.error]
    print(f"{len(records)} runs written to {cfg.out}; {len(failed)} failed")
    for r in failed:
        print(f"  {r.method} seed {r.seed}: {r.error.splitlines()[0]}")
    print(runner.format_summary(runner.report(cfg.out)))
    return status


def cmd_report(args) -> int:
    out = args.out
    if out is None and args.config:
        out = runner.load_config(args.config).get("out")
    if out is None:
        print("report needs --out or a config with 'out'", file=sys.stderr)
        return runner.EXIT_INVALID
    summary = runner.report(out)
    print(runner.format_summary(summary))
    return runner.EXIT_OK


def cmd_check_bounds(args) -> int:
    bad = runner.analytic_bound_sweep()
    print(f"analytic grid: {len(bad)} violations")
    for row in bad[:10]:
        print(f"  {row}")
    n_bad = len(bad)
    if args.seeds:
        rows = runner.measured_bound_check(args.seeds, args.alpha)
        over = [r for r in rows if r["displacement"] > r["bound"]]
        print(f"measured: {len(rows)} task runs at alpha={args.alpha}, {len(over)} above the recursion bound, "
              f"max ratio {max(r['displacement'] / r['bound'] for r in rows if r['bound'] > 0):.4f}")
        n_bad += len(over)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"analytic_violations": bad}, fh, indent=2)
    return runner.EXIT_OK if n_bad == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smmcl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML experiment config")
        p.add_argument("--seeds", type=_seed_list, help="N for 0..N-1, or a list like 1,2,5-7")
        p.add_argument("--out", help="output directory (file for generate)")

    p = sub.add_parser("generate", help="write a task stream to a file")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run every strategy over every seed")
    common(p)
    p.add_argument("--jobs", type=int, help="parallel worker processes (one seed per job)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="rebuild the summary from run artifacts")
    common(p, config_required=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("check-bounds", help="verify the displacement bounds")
    common(p, config_required=False)
    p.add_argument("--alpha", type=float, default=0.3, help="constant ratio for measured runs")
    p.set_defaults(func=cmd_check_bounds)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SmmclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return runner.EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return runner.EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
