"""``funion`` command line: simulate, tables, iou, bacap-vectors."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bacap, perfmodel
from .harness import ConfigError, JobSpec, RunConfig, aligned, emit_tables, iou_config, run_e2e, run_iou_experiment, table3_csv, table4_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK = 3


def _layers(text: str) -> list[int]:
    try:
        sizes = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers, e.g. 4,4,4") from None
    return sizes


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.add_argument("--mu", type=float, help="mean per-hop delay in seconds")
    p.add_argument("--lambda-s", type=float, help="cover rate in packets per second")
    p.add_argument("--layers", type=_layers, help="mix layer sizes, e.g. 4,4,4")
    p.add_argument("--payload-size", type=int, help="Sphinx payload bytes")
    p.add_argument("--delta", type=float, help="bucket width in seconds")
    p.add_argument("--no-bucketing", action="store_true", help="release results as soon as they are ready")
    p.add_argument("--check", action="store_true", help="exit 3 unless the run meets its acceptance check")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funion", description="Anonymous inference over a mixnet-backed store: simulator and calculators.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run jobs end to end and write outcomes, trace and store dumps")
    _common(p)
    p.add_argument("--jobs", type=int, help="repeat the first configured job this many times")

    p = sub.add_parser("tables", help="write the latency and overhead tables as CSV")
    _common(p)
    p.add_argument("--echoes", type=int, default=perfmodel.PIPELINE_ECHOES)

    p = sub.add_parser("iou", help="run the input-output unlinkability distinguisher")
    _common(p)
    p.add_argument("--trials", type=int, default=2000)

    p = sub.add_parser("bacap-vectors", help="print capability derivation vectors")
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--indices", type=int, default=4)
    p.add_argument("--check", action="store_true", help="also confirm read and write sides agree")
    return parser


def _config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else (base or RunConfig())
    for attr, name in (("seed", "seed"), ("mu", "mu"), ("lambda_s", "lambda_s"), ("layers", "layer_sizes"), ("payload_size", "payload_size"), ("delta", "delta")):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.no_bucketing:
        cfg.bucketing = False
    return cfg.validate()


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs: must be >= 1")
        first = cfg.jobs[0] if cfg.jobs else JobSpec()
        first.count = args.jobs
        cfg.jobs = [first]
        cfg.validate()
    result = run_e2e(cfg, args.out_dir)
    summary = result.summary()
    print(json.dumps(summary, sort_keys=True))
    for name, path in sorted(result.files.items()):
        print(f"wrote {path}")
    if args.check:
        bad = [o.job_id for o in result.outcomes if o.status not in ("ok", "overflow")]
        sizes_ok = all(int(z) == cfg.wire_size for z in result.world.sim.observer_view().sizes)
        if bad or not sizes_ok:
            print(f"check failed: {len(bad)} unfinished jobs, constant wire size {sizes_ok}", file=sys.stderr)
            return EXIT_CHECK
    return EXIT_OK


def cmd_tables(args) -> int:
    cfg = _config(args)
    if args.echoes < 1:
        raise ConfigError("--echoes: must be >= 1")
    files = emit_tables(args.out_dir, cfg.mu, cfg.delta, args.echoes)
    print(aligned(table3_csv()))
    print()
    print(aligned(table4_csv(cfg.mu, cfg.delta, args.echoes)))
    for path in files.values():
        print(f"wrote {path}")
    if args.check:
        rows = perfmodel.overhead_table(mu=0.2, delta=0.2)
        got = [(round(r.t_llm_rounded, 2), round(r.total, 2), r.mix_pct) for r in rows]
        want = [(4.0, 13.0, 69), (19.6, 28.6, 31), (38.6, 47.6, 19), (10.4, 19.4, 46)]
        if got != want:
            print(f"check failed: {got} != {want}", file=sys.stderr)
            return EXIT_CHECK
    return EXIT_OK


def cmd_iou(args) -> int:
    cfg = _config(args, iou_config(not args.no_bucketing))
    if args.trials < 0:
        raise ConfigError("--trials: must be >= 0")
    report = run_iou_experiment(cfg, args.trials)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = args.out_dir / ("iou.json" if cfg.bucketing else "iou-no-bucketing.json")
    path.write_text(report.to_json() + "\n")
    print(report.to_json())
    print(f"wrote {path}")
    if args.check and report.trials:
        lo, hi = report.confidence_interval
        ok = lo <= 0.5 <= hi if cfg.bucketing else report.adversary_accuracy > 0.95
        if not ok:
            print("check failed", file=sys.stderr)
            return EXIT_CHECK
    return EXIT_OK


def cmd_vectors(args) -> int:
    if args.indices < 1:
        raise ConfigError("--indices: must be >= 1")
    lines = bacap.vector_lines(bacap.default_vector_seeds(), range(1, args.indices + 1))
    text = "".join(line + "\n" for line in lines)
    sys.stdout.write(text)
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "bacap_vectors.txt").write_text(text)
    if args.check:
        for seed in bacap.default_vector_seeds():
            w, r = bacap.generate_capability(seed)
            for i in range(1, args.indices + 1):
                for ctx in (bacap.CTX_IN, bacap.CTX_OUT):
                    if bacap.derive_box(w, i, ctx).box_id != bacap.derive_box(r, i, ctx).box_id:
                        print(f"check failed at index {i}", file=sys.stderr)
                        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "tables": cmd_tables, "iou": cmd_iou, "bacap-vectors": cmd_vectors}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValueError as exc:
        # every package ConfigError is a ValueError
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
