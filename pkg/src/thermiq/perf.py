"""Interval performance model.

Each epoch every busy core spends a cycle budget ``f * dt`` on the phases of
its application.  Memory accesses add ``latency * f`` cycles each (divided by
the memory-level parallelism).  Channels whose demanded bandwidth exceeds
their capacity stretch the latency of every access they serve by the
utilisation ratio, and the epoch is re-executed with the stretched latency.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InvalidArgument, ParseError, ValidationError
from .floorplan import core_grid_shape
from .power import DEFAULT_VF_TABLE


@dataclass(frozen=True)
class Phase:
    instructions: int
    cpi_base: float
    mem_per_kilo_instr: float = 0.0
    read_fraction: float = 1.0
    activity: float = 1.0

    def __post_init__(self):
        if int(self.instructions) != self.instructions or self.instructions <= 0:
            raise ValidationError("phase instructions must be a positive integer")
        object.__setattr__(self, "instructions", int(self.instructions))
        if not self.cpi_base > 0:
            raise ValidationError("cpi_base must be > 0")
        if self.mem_per_kilo_instr < 0:
            raise ValidationError("mem_per_kilo_instr must be >= 0")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ValidationError("read_fraction must lie in [0, 1]")
        if not 0.0 <= self.activity <= 1.0:
            raise ValidationError("activity must lie in [0, 1]")


@dataclass(frozen=True)
class AppSpec:
    name: str
    phases: tuple

    def __post_init__(self):
        if not self.phases:
            raise ValidationError(f"app {self.name} has no phases")
        object.__setattr__(self, "phases", tuple(self.phases))

    @property
    def total_instructions(self) -> int:
        return sum(p.instructions for p in self.phases)

    @property
    def mem_intensity(self) -> float:
        """Instruction-weighted accesses per kilo-instruction."""
        return sum(p.instructions * p.mem_per_kilo_instr for p in self.phases) / self.total_instructions


@dataclass(frozen=True)
class MemConfig:
    channels: int = 16
    per_channel_bandwidth: float = 7.6e9  # bytes/s
    access_latency: float = 20e-9  # s
    access_size: int = 64  # bytes
    banks_per_channel: int = 8
    mlp: float = 1.0

    def __post_init__(self):
        if self.channels < 1 or self.banks_per_channel < 1:
            raise ValidationError("channels and banks_per_channel must be >= 1")
        if not (self.per_channel_bandwidth > 0 and self.access_latency > 0 and self.access_size > 0):
            raise ValidationError("bandwidth, latency and access size must be > 0")
        if not self.mlp > 0:
            raise ValidationError("mlp must be > 0")

    @property
    def n_banks(self) -> int:
        return self.channels * self.banks_per_channel

    def bank_index(self, channel: int, j: int) -> int:
        """Bank ``j`` of ``channel``; consecutive channels interleave within a bank row."""
        return j * self.channels + channel


@dataclass(frozen=True)
class TaskProgress:
    task_id: int
    app: AppSpec
    arrival: float = 0.0
    start: float = 0.0
    phase: int = 0
    retired_in_phase: int = 0
    finished: Optional[float] = None

    @property
    def done(self) -> bool:
        return self.finished is not None


@dataclass(frozen=True)
class CoreRunState:
    core_id: int
    task: Optional[TaskProgress] = None
    vf_level: int = 0
    channel_affinity: tuple = ()
    carry_cycles: float = 0.0

    @property
    def busy(self) -> bool:
        return self.task is not None and not self.task.done


@dataclass(frozen=True)
class CoreEpoch:
    core_id: int
    freq_hz: float
    instructions: int = 0
    compute_cycles: float = 0.0
    stall_cycles: float = 0.0
    idle_cycles: float = 0.0
    activity: float = 0.0
    accesses: float = 0.0
    reads: float = 0.0
    latency_scale: float = 1.0
    # cursor after the epoch, consumed by advance()
    phase: int = 0
    retired_in_phase: int = 0
    carry_cycles: float = 0.0
    finished_offset: Optional[float] = None

    @property
    def total_cycles(self) -> float:
        return self.compute_cycles + self.stall_cycles + self.idle_cycles

    @property
    def utilization(self) -> float:
        budget = self.total_cycles
        return self.compute_cycles / budget if budget > 0 else 0.0


@dataclass(frozen=True)
class EpochPerfResult:
    dt: float
    cores: tuple
    bank_reads: np.ndarray
    bank_writes: np.ndarray
    channel_demand: np.ndarray  # bytes/s requested in the uncontended pass
    channel_served: np.ndarray  # bytes/s actually generated

    def core(self, core_id: int) -> CoreEpoch:
        for c in self.cores:
            if c.core_id == core_id:
                return c
        raise InvalidArgument(f"no core {core_id} in result")

    def ips(self, core_id: int) -> float:
        return self.core(core_id).instructions / self.dt

    @property
    def total_accesses(self) -> float:
        return float(self.bank_reads.sum() + self.bank_writes.sum())


def utilization(result: EpochPerfResult, core_id: int) -> float:
    return result.core(core_id).utilization


def _run_core(st: CoreRunState, f_hz: float, dt: float, mem: MemConfig, scale: float) -> CoreEpoch:
    """Spend one epoch's cycles on the core's task with memory latency stretched by ``scale``."""
    epoch_cycles = f_hz * dt
    if not st.busy:
        return CoreEpoch(st.core_id, f_hz, idle_cycles=epoch_cycles)
    task = st.task
    phases = task.app.phases
    lat_cycles = mem.access_latency * f_hz * scale / mem.mlp
    budget = epoch_cycles + st.carry_cycles
    used = 0.0
    retired = compute = act = acc = reads = 0.0
    k, done_in = task.phase, task.retired_in_phase
    finished_offset = None
    carry = 0.0
    while k < len(phases):
        ph = phases[k]
        cpi = ph.cpi_base + ph.mem_per_kilo_instr / 1000.0 * lat_cycles
        remaining = ph.instructions - done_in
        left = budget - used
        n = remaining if remaining * cpi <= left else int(math.floor(left / cpi))
        used += n * cpi
        retired += n
        compute += n * ph.cpi_base
        act += n * ph.cpi_base * ph.activity
        a = n * ph.mem_per_kilo_instr / 1000.0
        acc += a
        reads += a * ph.read_fraction
        if n < remaining:
            done_in += n
            carry = budget - used
            break
        k, done_in = k + 1, 0
    if k == len(phases):
        finished_offset = min(dt, max(0.0, (used - st.carry_cycles) / f_hz))
    # cycles credited from the previous epoch count towards this one; clip rounding spill
    compute = min(compute, epoch_cycles)
    idle = 0.0 if finished_offset is None else max(0.0, epoch_cycles - (used - st.carry_cycles))
    idle = min(idle, epoch_cycles - compute)
    stall = max(0.0, epoch_cycles - compute - idle)
    return CoreEpoch(
        st.core_id, f_hz, int(retired), compute, stall, idle,
        activity=min(1.0, act / epoch_cycles), accesses=acc, reads=reads, latency_scale=scale,
        phase=k, retired_in_phase=done_in, carry_cycles=carry, finished_offset=finished_offset,
    )


def epoch_execute(states: Sequence[CoreRunState], mem: MemConfig, dt: float,
                  vf_table: Sequence = DEFAULT_VF_TABLE) -> EpochPerfResult:
    """Two-pass contention-aware execution of one epoch."""
    if not dt > 0:
        raise InvalidArgument("dt must be > 0")
    freqs = []
    for st in states:
        if not 0 <= st.vf_level < len(vf_table):
            raise InvalidArgument(f"core {st.core_id}: vf level {st.vf_level} out of range")
        if any(not 0 <= c < mem.channels for c in st.channel_affinity):
            raise ConfigError(f"core {st.core_id}: channel affinity outside 0..{mem.channels - 1}")
        if st.busy and not st.channel_affinity and any(p.mem_per_kilo_instr > 0 for p in st.task.app.phases):
            raise ConfigError(f"core {st.core_id} has memory traffic but no channels")
        freqs.append(vf_table[st.vf_level][1] * 1e9)

    capacity = mem.per_channel_bandwidth * dt
    first = [_run_core(st, f, dt, mem, 1.0) for st, f in zip(states, freqs)]
    demand = np.zeros(mem.channels)
    for st, ce in zip(states, first):
        if ce.accesses:
            demand[list(st.channel_affinity)] += ce.accesses * mem.access_size / len(st.channel_affinity)
    rho = np.maximum(1.0, demand / capacity)

    cores = []
    reads = np.zeros(mem.n_banks)
    writes = np.zeros(mem.n_banks)
    served = np.zeros(mem.channels)
    for st, f, ce in zip(states, freqs, first):
        if ce.accesses:
            scale = float(np.mean(rho[list(st.channel_affinity)]))
            if scale > 1.0:
                ce = _run_core(st, f, dt, mem, scale)
        cores.append(ce)
        if ce.accesses:
            chans = np.asarray(st.channel_affinity)
            share = 1.0 / (len(chans) * mem.banks_per_channel)
            banks = (np.arange(mem.banks_per_channel)[:, None] * mem.channels + chans[None, :]).ravel()
            np.add.at(reads, banks, ce.reads * share)
            np.add.at(writes, banks, (ce.accesses - ce.reads) * share)
            served[chans] += ce.accesses * mem.access_size / len(chans)
    return EpochPerfResult(dt, tuple(cores), reads, writes, demand / dt, served / dt)


def advance(state: CoreRunState, result: EpochPerfResult, epoch_start: float = 0.0) -> CoreRunState:
    """Move the core's phase cursor by the retired instructions of ``result``."""
    if not state.busy:
        return replace(state, carry_cycles=0.0)
    ce = result.core(state.core_id)
    task = replace(state.task, phase=ce.phase, retired_in_phase=ce.retired_in_phase)
    if ce.finished_offset is not None:
        task = replace(task, finished=epoch_start + ce.finished_offset)
        return replace(state, task=task, carry_cycles=0.0)
    return replace(state, task=task, carry_cycles=ce.carry_cycles)


def default_channel_affinity(n_cores: int, channels: int, banks_x: int = 4, banks_y: int = 4,
                             cores_per_layer: Optional[int] = None) -> list[tuple[int, ...]]:
    """Channels whose layer-0 bank lies under each core's footprint.

    Channel ``c`` owns bank ``c`` of every memory layer, so its position on
    the bank grid is ``(c // banks_x, c % banks_x)``.  Cores on upper core
    layers reuse the affinity of the core beneath them.  With fewer channels
    than grid positions every core shares every channel.
    """
    per_layer = cores_per_layer or n_cores
    if channels < banks_x * banks_y or channels < per_layer:
        return [tuple(range(channels))] * n_cores
    rows, cols = core_grid_shape(per_layer)
    owner: dict[int, list[int]] = {i: [] for i in range(per_layer)}
    for c in range(channels):
        pos = c % (banks_x * banks_y)
        r, col = divmod(pos, banks_x)
        owner[(r * rows // banks_y) * cols + col * cols // banks_x].append(c)
    if any(not v for v in owner.values()):
        return [tuple(range(channels))] * n_cores
    return [tuple(owner[i % per_layer]) for i in range(n_cores)]


# ---------------------------------------------------------------------------
# workload files


@dataclass(frozen=True)
class TaskSpec:
    app: str
    at: float = 0.0  # seconds
    core: Optional[int] = None
    channels: Optional[tuple] = None


@dataclass(frozen=True)
class Workload:
    apps: dict = field(default_factory=dict)
    tasks: tuple = ()

    def app(self, name: str) -> AppSpec:
        try:
            return self.apps[name]
        except KeyError:
            raise ValidationError(f"unknown app {name!r}") from None


def parse_workload(text: str, path=None) -> Workload:
    """Parse the line-oriented workload format.

    ``app <name>`` opens an app, ``phase <instr> <cpi> <mpki> <read_frac> <activity>``
    adds a phase and ``end`` closes it.  ``task <app> [at=<ms>] [core=<id>]
    [channels=<a,b,..>]`` queues one thread.
    """
    apps: dict[str, AppSpec] = {}
    tasks = []
    current = None
    phases: list[Phase] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        head = words[0].lower()
        try:
            if head == "app":
                if current is not None:
                    raise ParseError("nested app (missing 'end')", lineno, path)
                if len(words) != 2:
                    raise ParseError("expected 'app <name>'", lineno, path)
                current, phases = words[1], []
            elif head == "phase":
                if current is None:
                    raise ParseError("phase outside an app", lineno, path)
                if len(words) != 6:
                    raise ParseError("expected 'phase <instr> <cpi> <mpki> <read_frac> <activity>'", lineno, path)
                instr = float(words[1])
                phases.append(Phase(int(instr), *map(float, words[2:])))
            elif head == "end":
                if current is None:
                    raise ParseError("'end' without an app", lineno, path)
                if current in apps:
                    raise ParseError(f"duplicate app {current!r}", lineno, path)
                apps[current] = AppSpec(current, tuple(phases))
                current = None
            elif head == "task":
                if len(words) < 2:
                    raise ParseError("expected 'task <app> ...'", lineno, path)
                opts = {}
                for w in words[2:]:
                    if "=" not in w:
                        raise ParseError(f"bad task option {w!r}", lineno, path)
                    k, v = w.split("=", 1)
                    opts[k] = v
                unknown = set(opts) - {"at", "core", "channels"}
                if unknown:
                    raise ParseError(f"unknown task option {sorted(unknown)[0]!r}", lineno, path)
                chans = None
                if "channels" in opts:
                    chans = tuple(int(c) for c in re.split(r"[,;]", opts["channels"]) if c)
                tasks.append(TaskSpec(words[1], float(opts.get("at", 0.0)) / 1000.0,
                                      int(opts["core"]) if "core" in opts else None, chans))
            else:
                raise ParseError(f"unknown directive {words[0]!r}", lineno, path)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), lineno, path) from None
    if current is not None:
        raise ParseError(f"app {current!r} not closed with 'end'", None, path)
    for t in tasks:
        if t.app not in apps:
            raise ValidationError(f"task references unknown app {t.app!r}")
        if t.at < 0:
            raise ValidationError("task arrival time must be >= 0")
    return Workload(apps, tuple(tasks))


def read_workload(path) -> Workload:
    path = Path(path)
    return parse_workload(path.read_text(), path)


def format_workload(wl: Workload) -> str:
    lines = []
    for app in wl.apps.values():
        lines.append(f"app {app.name}")
        for p in app.phases:
            lines.append(f"phase {p.instructions} {p.cpi_base!r} {p.mem_per_kilo_instr!r} "
                         f"{p.read_fraction!r} {p.activity!r}")
        lines.append("end")
    for t in wl.tasks:
        s = f"task {t.app} at={t.at * 1000.0!r}"
        if t.core is not None:
            s += f" core={t.core}"
        if t.channels is not None:
            s += " channels=" + ",".join(map(str, t.channels))
        lines.append(s)
    return "\n".join(lines) + "\n"
