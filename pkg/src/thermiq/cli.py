"""Command-line entry point: ``thermiq <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import engine, heatview, simcontrol
from . import floorplan as fp
from .errors import ThermalRunawayError, ThermiqError

log = logging.getLogger("thermiq")


def _dims(text: str, cast=float) -> tuple:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected <a>x<b>, got {text!r}")
    try:
        return cast(parts[0]), cast(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number in {text!r}") from None


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def cmd_floorplan(args) -> int:
    template = fp.read_flp(args.core_template) if args.core_template else None
    cw, ch = args.core_size
    by, bx = args.banks
    bw, bh = args.bank_size
    cfg = fp.StackConfig(fp.StackKind.parse(args.kind), cores=args.cores, core_width=cw * 1e-3,
                         core_height=ch * 1e-3, core_layers=args.core_layers, mem_banks_x=bx, mem_banks_y=by,
                         mem_layers=args.mem_layers, bank_width=bw * 1e-3, bank_height=bh * 1e-3,
                         gap_2_5d=args.gap * 1e-3, core_template=template)
    written = fp.write_stack_files(args.out, cfg)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = engine.load_config(args.config, dict(args.set or []))
    out = Path(args.out) if args.out else cfg.base_dir / "out"
    tr = engine.run(cfg, out, dump_network=args.dump_network)
    s = simcontrol.collect_metrics(out)
    print(f"{tr.n_epochs} epochs -> {out}")
    print(simcontrol.format_report([s]), end="")
    return 0


def cmd_batch(args) -> int:
    spec = simcontrol.read_batch(args.spec)
    summaries = simcontrol.run_batch(spec, force=args.force, jobs=args.jobs)
    print(simcontrol.format_report(summaries), end="")
    return 0 if all(s.status == "ok" for s in summaries) else 1


def cmd_metrics(args) -> int:
    s = simcontrol.collect_metrics(args.run_dir)
    print(",".join(s.CSV_FIELDS))
    print(",".join(str(x) for x in s.csv_row()))
    return 0


def cmd_smoke(args) -> int:
    tags = args.filter.split(",") if args.filter else None
    report = simcontrol.run_smoke_suite(tags, fault=args.inject_fault, log_dir=args.out)
    print(report.format(), end="")
    return 0 if report.passed else 1


def cmd_heatview(args) -> int:
    k = engine.KELVIN
    cfg = heatview.RenderConfig(
        t_min=None if args.tmin is None else args.tmin + k, t_max=None if args.tmax is None else args.tmax + k,
        sampling_every=args.every, layers=tuple(args.layers.split(",")) if args.layers else None,
        cell_pixels=args.cell_pixels, fps=args.fps, field=args.field,
    )
    frames = heatview.render_run(args.run, args.out, cfg)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thermiq", description="Interval thermal co-simulation for core-memory stacks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("floorplan", help="generate floorplan and layer files for a stack configuration")
    f.add_argument("--kind", required=True, choices=[k.value for k in fp.StackKind])
    f.add_argument("--cores", type=int, default=4, help="cores per core layer")
    f.add_argument("--core-size", type=_dims, default=(4.0, 4.0), metavar="WxH", help="core size in mm")
    f.add_argument("--banks", type=lambda s: _dims(s, int), default=(4, 4), metavar="RxC")
    f.add_argument("--bank-size", type=_dims, default=(2.0, 2.0), metavar="WxH", help="bank size in mm")
    f.add_argument("--mem-layers", type=int, default=8)
    f.add_argument("--core-layers", type=int, default=1)
    f.add_argument("--gap", type=float, default=1.0, help="2.5D core-to-memory gap in mm")
    f.add_argument("--core-template", help="per-core .flp replicated onto every core")
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_floorplan)

    r = sub.add_parser("run", help="run one simulation")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--dump-network", action="store_true", help="write the G and C matrices to network.txt")
    r.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE", help="override a config key")
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("batch", help="run a batch spec")
    b.add_argument("--spec", required=True)
    b.add_argument("-j", "--jobs", type=int)
    b.add_argument("--force", action="store_true", help="overwrite existing run folders")
    b.set_defaults(fn=cmd_batch)

    m = sub.add_parser("metrics", help="summary metrics of a run folder")
    m.add_argument("run_dir")
    m.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("smoke", help="run the smoke-test matrix")
    s.add_argument("--filter", help="comma-separated tags, e.g. 2.5d,dtm")
    s.add_argument("--inject-fault", choices=simcontrol.FAULTS)
    s.add_argument("--out", help="directory for the report and error log")
    s.set_defaults(fn=cmd_smoke)

    h = sub.add_parser("heatview", help="render thermal-map frames from a run folder")
    h.add_argument("--run", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--every", type=int, default=1)
    h.add_argument("--tmin", type=float, help="color-scale minimum in C (default: trace minimum)")
    h.add_argument("--tmax", type=float, help="color-scale maximum in C (default: trace maximum)")
    h.add_argument("--layers", help="comma-separated layer selectors: <index> or <stack>:<index>")
    h.add_argument("--cell-pixels", type=int, default=8)
    h.add_argument("--fps", type=float, default=10.0)
    h.add_argument("--field", choices=("max", "mean"), default="max")
    h.set_defaults(fn=cmd_heatview)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ThermalRunawayError as exc:
        print(f"thermal runaway: {exc}", file=sys.stderr)
        return 3
    except ThermiqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
