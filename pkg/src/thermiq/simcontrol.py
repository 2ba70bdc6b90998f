"""Batch runs, offline metrics from trace folders, and the smoke-test suite."""

from __future__ import annotations

import configparser
import csv
import itertools
import logging
import re
import shutil
import tempfile
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import engine
from . import floorplan as fp
from .errors import ConfigError, IntegrityError, InvalidArgument, ThermiqError, ValidationError
from .thermal import build_network

log = logging.getLogger(__name__)

TRACE_FILES = ("power_dyn.csv", "power_static.csv", "temp_max.csv", "temp_mean.csv")


@dataclass(frozen=True)
class RunSummary:
    name: str
    status: str = "ok"
    peak_core: float = float("nan")  # K
    peak_memory: float = float("nan")  # K
    energy: float = 0.0  # J
    response_times: tuple = ()  # s, in completion order
    throttle_cycles: int = 0
    epochs: int = 0

    CSV_FIELDS = ("name", "status", "epochs", "peak_core_c", "peak_memory_c", "energy_j",
                  "tasks_completed", "mean_response_ms", "throttle_cycles")

    def csv_row(self) -> list:
        rt = self.response_times
        mean_rt = repr(round(1000.0 * sum(rt) / len(rt), 9)) if rt else ""
        return [self.name, self.status, self.epochs, _c(self.peak_core), _c(self.peak_memory),
                repr(self.energy), len(rt), mean_rt, self.throttle_cycles]


def _c(kelvin: float) -> str:
    return "" if np.isnan(kelvin) else repr(round(kelvin - engine.KELVIN, 9))


# ---------------------------------------------------------------------------
# metrics


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise IntegrityError(f"missing trace {path.name}: {exc}") from None
    if not rows or rows[0][:1] != ["time_ms"]:
        raise IntegrityError(f"{path.name}: missing header")
    header = rows[0]
    body = rows[1:]
    for i, r in enumerate(body, 2):
        if len(r) != len(header):
            raise IntegrityError(f"{path.name}: line {i} has {len(r)} fields, expected {len(header)}")
    try:
        data = np.array([[float(x) for x in r] for r in body], dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise IntegrityError(f"{path.name}: non-numeric value ({exc})") from None
    return header, data


def read_events(path: Path) -> list[tuple[float, str, dict]]:
    out = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IntegrityError(f"missing events log: {exc}") from None
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            t = float(parts[0])
            info = dict(p.split("=", 1) for p in parts[2:])
            out.append((t, parts[1], info))
        except (ValueError, IndexError):
            raise IntegrityError(f"events.log line {i} is malformed") from None
    return out


def load_traces(run_dir) -> dict:
    """Read and cross-check every trace file of a run folder."""
    run_dir = Path(run_dir)
    try:
        stacks = fp.read_stacks(run_dir / "floorplan")
    except (OSError, ValidationError) as exc:
        raise IntegrityError(f"cannot read run floorplan: {exc}") from None
    blocks = [b.name for b in fp.all_blocks(stacks)]
    traces = {}
    times = None
    for name in TRACE_FILES:
        header, data = _read_csv(run_dir / name)
        if header[1:] != blocks:
            raise IntegrityError(f"{name}: block columns do not match the floorplan")
        if times is None:
            times = data[:, 0]
        elif data.shape[0] != times.shape[0] or not np.array_equal(data[:, 0], times):
            raise IntegrityError(f"{name}: epochs misaligned with {TRACE_FILES[0]}")
        traces[name] = data[:, 1:]
    header, perf = _read_csv(run_dir / "perf.csv")
    if perf.shape[0] != times.shape[0] or not np.array_equal(perf[:, 0], times):
        raise IntegrityError("perf.csv: epochs misaligned with the block traces")
    if times.size and ((np.diff(times) <= 0).any() or times[0] <= 0):
        raise IntegrityError("time column is not strictly increasing")
    traces.update(blocks=blocks, times_ms=times, perf_header=header[1:], perf=perf[:, 1:],
                  events=read_events(run_dir / "events.log"), stacks=stacks)
    return traces


def collect_metrics(run_dir, name: Optional[str] = None) -> RunSummary:
    """Summary metrics computed from the trace files alone."""
    run_dir = Path(run_dir)
    tr = load_traces(run_dir)
    times = tr["times_ms"]
    dt = np.diff(np.concatenate([[0.0], times])) / 1000.0
    power = tr["power_dyn.csv"] + tr["power_static.csv"]
    energy = float(power.sum(axis=1) @ dt)
    tmax = tr["temp_max.csv"]
    mem = np.array([fp.is_memory_block(b) for b in tr["blocks"]], dtype=bool)
    peak_core = float(tmax[:, ~mem].max()) if tmax.size and (~mem).any() else float("nan")
    peak_mem = float(tmax[:, mem].max()) if tmax.size and mem.any() else float("nan")
    rts = []
    cycles = 0
    armed = False
    for _, kind, info in tr["events"]:
        if kind == "complete":
            try:
                rts.append(float(info["response_ms"]) / 1000.0)
            except (KeyError, ValueError):
                raise IntegrityError("complete event without response_ms") from None
        elif kind == "throttle_on":
            armed = True
        elif kind == "throttle_off" and armed:
            cycles += 1
            armed = False
    return RunSummary(name or run_dir.name, "ok", peak_core, peak_mem, energy, tuple(rts), cycles, len(times))


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class BatchSpec:
    base: Path
    output: Path
    runs: tuple  # (name, overrides dict) pairs
    parallel: int = 1

    def __post_init__(self):
        names = [n for n, _ in self.runs]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise ConfigError(f"duplicate run name {dup!r}")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")


def _slug(key: str, value: str) -> str:
    short = key.rsplit(".", 1)[-1]
    val = Path(value).stem if "/" in value or value.endswith((".wl", ".cfg")) else value
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", f"{short}-{val}")


def parse_batch(text: str, base_dir=".") -> BatchSpec:
    """``[batch]`` (base, output, parallel), ``[vary]`` lists and ``[run <name>]`` sections.

    Explicit runs (or the base config alone) are crossed with the cartesian
    product of every ``[vary]`` list.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed batch spec: {exc}") from None
    if not cp.has_section("batch") or "base" not in cp["batch"]:
        raise ConfigError("batch spec needs [batch] with a 'base' config")
    b = cp["batch"]
    base_dir = Path(base_dir)
    explicit = []
    for sec in cp.sections():
        if sec.startswith("run "):
            explicit.append((sec[4:].strip(), dict(cp[sec])))
        elif sec not in ("batch", "vary"):
            raise ConfigError(f"unknown batch section [{sec}]")
    if not explicit:
        explicit = [("", {})]
    vary = dict(cp["vary"]) if cp.has_section("vary") else {}
    axes = [(k, [x.strip() for x in v.split(",") if x.strip()]) for k, v in vary.items()]
    runs = []
    for name, ov in explicit:
        for combo in itertools.product(*[vals for _, vals in axes]):
            o = dict(ov)
            parts = [name] if name else []
            for (k, _), val in zip(axes, combo):
                o[k] = val
                parts.append(_slug(k, val))
            runs.append(("__".join(parts) or "run", o))
    for _, o in runs:
        engine.check_keys(o)
    return BatchSpec(fp.resolve(b["base"], base_dir), fp.resolve(b.get("output", "batch_out"), base_dir),
                     tuple(runs), int(b.get("parallel", "1")))


def read_batch(path) -> BatchSpec:
    path = Path(path)
    return parse_batch(path.read_text(), path.parent)


def _execute_run(base: str, name: str, overrides: dict, folder: str) -> RunSummary:
    folder = Path(folder)
    folder.mkdir(parents=True)
    try:
        cfg = engine.load_config(base, overrides)
        engine.run(cfg, folder)
        summary = collect_metrics(folder, name)
    except Exception as exc:  # isolate failures per run
        (folder / "error.log").write_text(f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}")
        return RunSummary(name, f"failed: {type(exc).__name__}: {exc}")
    _write_summary(folder / "summary.csv", [summary])
    return summary


def _write_summary(path: Path, summaries: Sequence[RunSummary]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RunSummary.CSV_FIELDS)
        for s in summaries:
            w.writerow(s.csv_row())


def format_report(summaries: Sequence[RunSummary]) -> str:
    lines = [f"{len(summaries)} runs, {sum(s.status == 'ok' for s in summaries)} ok", ""]
    width = max([len(s.name) for s in summaries] + [4])
    lines.append(f"{'run':<{width}}  {'status':<8} {'core peak C':>11} {'mem peak C':>11} {'energy J':>10} "
                 f"{'tasks':>5} {'cycles':>6}")
    for s in summaries:
        status = "ok" if s.status == "ok" else "FAILED"
        core = "-" if np.isnan(s.peak_core) else f"{s.peak_core - engine.KELVIN:.2f}"
        memp = "-" if np.isnan(s.peak_memory) else f"{s.peak_memory - engine.KELVIN:.2f}"
        lines.append(f"{s.name:<{width}}  {status:<8} {core:>11} {memp:>11} {s.energy:>10.4f} "
                     f"{len(s.response_times):>5} {s.throttle_cycles:>6}")
    failed = [s for s in summaries if s.status != "ok"]
    if failed:
        lines.append("")
        lines.extend(f"{s.name}: {s.status}" for s in failed)
    return "\n".join(lines) + "\n"


def run_batch(spec: BatchSpec, force: bool = False, jobs: Optional[int] = None) -> list[RunSummary]:
    """Run every configuration of ``spec`` in its own folder under ``spec.output``."""
    root = spec.output
    folders = [root / name for name, _ in spec.runs]
    existing = [f for f in folders if f.exists()]
    if existing and not force:
        raise ConfigError(f"run folder {existing[0]} already exists (use --force to overwrite)")
    for f in existing:
        shutil.rmtree(f)
    root.mkdir(parents=True, exist_ok=True)
    jobs = jobs or spec.parallel
    args = [(str(spec.base), name, ov, str(root / name)) for name, ov in spec.runs]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_execute_run, *zip(*args)))
    else:
        summaries = [_execute_run(*a) for a in args]
    _write_summary(root / "summary.csv", summaries)
    (root / "report.txt").write_text(format_report(summaries))
    return summaries


# ---------------------------------------------------------------------------
# smoke suite

SMOKE_WORKLOAD = """\
app mixed
phase 1500000 1.0 2 0.7 0.9
phase 1000000 1.2 20 0.6 0.6
end
app compute
phase 3000000 0.9 0.1 0.9 1.0
end
task compute at=0
task mixed at=0
task mixed at=2
"""

FAULTS = ("negative-conductance",)


@dataclass
class CaseResult:
    name: str
    tags: tuple
    passed: bool
    message: str = ""
    seconds: float = 0.0


@dataclass
class SmokeReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def format(self) -> str:
        lines = []
        for r in self.results:
            lines.append(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  ({r.seconds:.2f} s)"
                         + (f"  {r.message}" if r.message and not r.passed else ""))
        n_ok = sum(r.passed for r in self.results)
        lines.append(f"{n_ok}/{len(self.results)} cases passed")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SmokeCase:
    name: str
    tags: frozenset
    fn: Callable[[Path], None]


def _smoke_values(kind: fp.StackKind, dtm: bool, core_layers: int, workload: Path) -> dict:
    v = {
        "stack": kind.value, "grid": "4x4", "max_time_ms": "30", "workload": str(workload),
        "stack.core_layers": str(core_layers), "stack.mem_layers": "1" if kind is fp.StackKind.EXT_2D else "4",
        "dtm.enabled": "on" if dtm else "off",
    }
    if dtm:
        # start above the trigger so the throttle path is exercised
        v.update({"initial": "uniform:85", "dtm.trigger_c": "80", "dtm.resume_c": "78"})
    return v


def _check_run(tr: engine.TraceSet, cfg: engine.SimConfig, out: Path) -> None:
    amb = cfg.ambient.ambient_temperature
    if tr.n_epochs == 0:
        raise AssertionError("no epochs recorded")
    if (tr.array("power_dyn") < 0).any() or (tr.array("power_static") < 0).any():
        raise AssertionError("negative power in traces")
    tmean, tmax = tr.array("temp_mean"), tr.array("temp_max")
    if (tmean > tmax + 1e-9).any():
        raise AssertionError("block mean temperature above its max")
    if cfg.initial[0] is engine.InitialMode.AMBIENT and (tmax < amb - 1e-9).any():
        raise AssertionError("temperature below ambient with nonnegative power")
    s = collect_metrics(out)
    p = tr.array("power_dyn") + tr.array("power_static")
    ref = float(p.sum() * cfg.epoch_dt)
    if abs(s.energy - ref) > 1e-6 * max(1.0, ref):
        raise AssertionError(f"energy from traces {s.energy} differs from in-memory {ref}")
    if cfg.dtm.enabled:
        if not any(t for t in tr.throttled):
            raise AssertionError("DTM never throttled from a hot start")
        if any(e.split("\t")[1] == "throttle_on" for e in tr.events) is False:
            raise AssertionError("missing throttle event")


def _sim_case(kind: fp.StackKind, dtm: bool, core_layers: int) -> Callable[[Path], None]:
    def fn(work: Path):
        wl = work / "smoke.wl"
        wl.write_text(SMOKE_WORKLOAD)
        values = _smoke_values(kind, dtm, core_layers, wl)
        supported = not (core_layers > 1 and kind in (fp.StackKind.EXT_2D, fp.StackKind.INTERPOSED_2_5D))
        if not supported:
            try:
                engine.Simulation(engine.SimConfig.from_mapping(values, work))
            except (ConfigError, InvalidArgument):
                return
            raise AssertionError("unsupported combination was accepted")
        outs = []
        for rep in range(2):
            out = work / f"run{rep}"
            cfg = engine.SimConfig.from_mapping(values, work)
            tr = engine.run(cfg, out)
            _check_run(tr, cfg, out)
            outs.append(out)
        for name in ("perf.csv", "events.log") + TRACE_FILES:
            if (outs[0] / name).read_bytes() != (outs[1] / name).read_bytes():
                raise AssertionError(f"{name} differs between identical runs")

    return fn


def _thermal_case(kind: fp.StackKind, fault: Optional[str]) -> Callable[[Path], None]:
    def fn(work: Path):
        cfg = fp.StackConfig(kind, mem_layers=1 if kind is fp.StackKind.EXT_2D else 4)
        if fault == "negative-conductance":
            cfg = fp.with_materials(cfg, si_conductivity=-120.0)
        net = build_network(fp.build_stack(cfg), (4, 4))
        G = net.G.toarray()
        if not np.allclose(G, G.T):
            raise AssertionError("G not symmetric")
        if (G - np.diag(np.diag(G)) > 0).any():
            raise AssertionError("positive off-diagonal in G")
        if (net.C <= 0).any():
            raise AssertionError("nonpositive capacitance")

    return fn


def smoke_cases(fault: Optional[str] = None) -> list[SmokeCase]:
    if fault is not None and fault not in FAULTS:
        raise InvalidArgument(f"unknown fault {fault!r}; known: {', '.join(FAULTS)}")
    cases = []
    for kind in fp.StackKind:
        cases.append(SmokeCase(f"thermal-build/{kind.value}", frozenset({kind.value, "thermal"}),
                               _thermal_case(kind, fault)))
        for dtm in (False, True):
            for layers in (1, 2):
                name = f"sim/{kind.value}/{'dtm' if dtm else 'nodtm'}/{layers}layer"
                tags = {kind.value, "sim", "dtm" if dtm else "nodtm", f"{layers}layer"}
                cases.append(SmokeCase(name, frozenset(tags), _sim_case(kind, dtm, layers)))
    return cases


def run_smoke_suite(filter_tags: Optional[Iterable[str]] = None, fault: Optional[str] = None,
                    log_dir=None) -> SmokeReport:
    """Run the scenario matrix; a case is selected when it carries every filter tag."""
    wanted = {t.strip() for t in filter_tags if t.strip()} if filter_tags else None
    report = SmokeReport()
    errors = []
    for case in smoke_cases(fault):
        if wanted and not wanted <= case.tags:
            continue
        t0 = time.perf_counter()
        with tempfile.TemporaryDirectory(prefix="thermiq-smoke-") as tmp:
            try:
                case.fn(Path(tmp))
                res = CaseResult(case.name, tuple(sorted(case.tags)), True)
            except Exception as exc:
                msg = f"{type(exc).__name__}: {exc}"
                log.error("smoke case %s failed: %s", case.name, msg)
                errors.append(f"== {case.name}\n{traceback.format_exc()}")
                res = CaseResult(case.name, tuple(sorted(case.tags)), False, msg)
        res.seconds = time.perf_counter() - t0
        report.results.append(res)
    if log_dir is not None:
        d = Path(log_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "smoke_report.txt").write_text(report.format())
        (d / "smoke_errors.log").write_text("\n".join(errors))
    return report
