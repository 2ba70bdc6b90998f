"""Epoch loop coupling performance, power, temperature and management.

Within an epoch the order is: arrivals and mapping, interval performance,
power conversion, transient thermal step, block temperatures, then DTM and
the DVFS policy.  Management decisions take effect in the next epoch.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import re
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import floorplan as fp
from .errors import (ConfigError, InternalError, InvalidArgument, NumericalError, ThermalRunawayError,
                     ValidationError)
from .mgmt import (REJECT, ArrivalMode, ArrivalProcess, DtmConfig, GovernorState, OndemandConfig, PolicyInput,
                   check_priority_list, dtm_update, generate_arrivals, make_policy, map_task, parse_arrivals,
                   read_explicit_times)
from .perf import (CoreRunState, MemConfig, TaskProgress, Workload, advance, default_channel_affinity,
                   epoch_execute, read_workload)
from .power import (CorePowerParams, MemPowerParams, PowerBreakdown, T_REF_DEFAULT, bank_reference_power,
                    calibrate_memory_leakage)
from .thermal import (AmbientSpec, LeakageFit, LeakageTable, ThermalNetwork, ThermalState, ambient_state,
                      build_network, steady_state, transient_step, uniform_state)

log = logging.getLogger(__name__)

KELVIN = 273.15
RUNAWAY_GUARD_K = 500.0
FLUSH_EVERY = 100

# memory access latency per configuration (ns)
DEFAULT_LATENCY_NS = {
    fp.StackKind.EXT_2D: 45.0,
    fp.StackKind.EXT_3D: 29.0,
    fp.StackKind.INTERPOSED_2_5D: 20.0,
    fp.StackKind.STACKED_3D: 15.0,
}

DEFAULTS = {
    "stack": "3d-stacked",
    "stack_dir": "",
    "grid": "8x8",
    "epoch_ms": "1",
    "max_time_ms": "100",
    "substeps": "4",
    "seed": "0",
    "workload": "",
    "initial": "ambient",
    "governor": "ondemand",
    "arrivals": "",
    "priority_list": "",
    "stack.cores": "4",
    "stack.core_size_mm": "4x4",
    "stack.core_layers": "1",
    "stack.banks": "4x4",
    "stack.bank_size_mm": "2x2",
    "stack.mem_layers": "8",
    "stack.gap_mm": "1",
    "stack.core_template": "",
    "materials.si_conductivity": "120",
    "materials.si_capacity": "1.75e6",
    "materials.core_thickness_um": "100",
    "materials.mem_thickness_um": "100",
    "materials.mem_conductivity": "120",
    "materials.tim_conductivity": "4",
    "materials.tim_thickness_um": "20",
    "materials.tim_capacity": "4e6",
    "materials.interposer_thickness_um": "200",
    "thermal.ambient_c": "45",
    "thermal.sink_resistance": "0.1",
    "thermal.spreader_resistance": "0.05",
    "thermal.air_multiplier": "20",
    "thermal.spreader_capacity": "3.2",
    "thermal.sink_capacity": "140.4",
    "power.c_dyn": repr(10.0 / (3.6 * 1.2 ** 2)),
    "power.vf_table": "0.70:1.0, 0.80:1.6, 0.90:2.2, 1.00:2.8, 1.10:3.2, 1.20:3.6",
    "power.core_leak_w": "2.0",
    "power.core_leak_beta": "0.02",
    "power.component_fractions": "",
    "power.e_read_nj": "5",
    "power.e_write_nj": "5",
    "power.mem_leak_fraction": "0.40",
    "power.mem_leak_beta": "0.02",
    "power.logic_layer_w": "1.0",
    "power.memory_power": "on",
    "memory.channels": "auto",
    "memory.bandwidth_gbps": "7.6",
    "memory.latency_ns": "auto",
    "memory.access_size": "64",
    "memory.banks_per_channel": "auto",
    "memory.mlp": "1.0",
    "dtm.enabled": "on",
    "dtm.trigger_c": "80",
    "dtm.resume_c": "78",
    "dtm.min_level": "0",
    "dtm.scope": "global",
    "governor.up_threshold": "0.8",
    "governor.down_threshold": "0.2",
    "governor.initial_level": "max",
}

_PATH_KEYS = ("stack_dir", "workload", "stack.core_template")


class InitialMode(Enum):
    AMBIENT = "ambient"
    UNIFORM = "uniform"
    WARMED = "warmed"


# ---------------------------------------------------------------------------
# config parsing


def parse_config_text(text: str) -> dict[str, str]:
    """Flatten an INI-like file into ``section.key`` entries.

    Keys before the first section header (or in ``[general]``) have no prefix.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[general]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            out[key if section == "general" else f"{section}.{key}"] = value.strip()
    return out


def format_config(values: Mapping[str, str]) -> str:
    general = {k: v for k, v in values.items() if "." not in k}
    sections: dict[str, dict[str, str]] = {}
    for k, v in values.items():
        if "." in k:
            sec, key = k.split(".", 1)
            sections.setdefault(sec, {})[key] = v
    lines = [f"{k} = {v}" for k, v in sorted(general.items())]
    for sec in sorted(sections):
        lines.append("")
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {v}" for k, v in sorted(sections[sec].items()))
    return "\n".join(lines) + "\n"


def check_keys(values: Mapping[str, str]) -> None:
    unknown = sorted(set(values) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")


def _pair(text: str, key: str, cast=float) -> tuple:
    parts = re.split(r"[xX*]", text.strip())
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected <a>x<b>, got {text!r}")
    try:
        return cast(parts[0]), cast(parts[1])
    except ValueError:
        raise ConfigError(f"{key}: bad number in {text!r}") from None


def _bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "yes", "true", "1"):
        return True
    if t in ("off", "no", "false", "0"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {text!r}")


def parse_vf_table(text: str) -> tuple:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            v, f = item.split(":")
            out.append((float(v), float(f)))
        except ValueError:
            raise ConfigError(f"power.vf_table: bad entry {item!r} (want V:GHz)") from None
    return tuple(out)


def _fractions(text: str) -> Optional[dict]:
    if not text.strip():
        return None
    out = {}
    for item in text.split(","):
        try:
            name, x = item.split(":")
            out[name.strip()] = float(x)
        except ValueError:
            raise ConfigError(f"power.component_fractions: bad entry {item!r}") from None
    return out


@dataclass(frozen=True)
class SimConfig:
    values: tuple  # sorted (key, value) pairs, the full flattened config
    base_dir: Path
    stack_cfg: fp.StackConfig
    stack_dir: Optional[Path]
    grid: tuple
    epoch_dt: float
    max_time: float
    substeps: int
    seed: int
    ambient: AmbientSpec
    core_power: CorePowerParams
    e_read: float
    e_write: float
    mem_leak_fraction: float
    mem_leak_beta: float
    logic_layer_power: float
    memory_power: bool
    mem: MemConfig
    workload: Workload
    governor: str
    ondemand: OndemandConfig
    initial_level: Optional[int]
    dtm: DtmConfig
    arrivals: Optional[tuple]
    priority_list: Optional[tuple]
    initial: tuple  # (InitialMode, kelvin or None)

    @property
    def mapping(self) -> dict[str, str]:
        return dict(self.values)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base_dir=".") -> "SimConfig":
        check_keys(values)
        v = dict(DEFAULTS)
        v.update({k: str(x) for k, x in values.items()})
        base = Path(base_dir)
        try:
            return cls._build(v, base)
        except ConfigError:
            raise
        except (ValidationError, InvalidArgument) as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(f"bad config value: {exc}") from None

    @classmethod
    def _build(cls, v: dict, base: Path) -> "SimConfig":
        def path(key):
            return fp.resolve(v[key], base) if v[key].strip() else None

        kind = fp.StackKind.parse(v["stack"])
        mats = fp.Materials(
            si_conductivity=float(v["materials.si_conductivity"]),
            si_capacity=float(v["materials.si_capacity"]),
            core_thickness=float(v["materials.core_thickness_um"]) * 1e-6,
            mem_thickness=float(v["materials.mem_thickness_um"]) * 1e-6,
            mem_conductivity=float(v["materials.mem_conductivity"]),
            tim_conductivity=float(v["materials.tim_conductivity"]),
            tim_thickness=float(v["materials.tim_thickness_um"]) * 1e-6,
            tim_capacity=float(v["materials.tim_capacity"]),
            interposer_thickness=float(v["materials.interposer_thickness_um"]) * 1e-6,
        )
        cw, ch = _pair(v["stack.core_size_mm"], "stack.core_size_mm")
        by, bx = _pair(v["stack.banks"], "stack.banks", int)
        bw, bh = _pair(v["stack.bank_size_mm"], "stack.bank_size_mm")
        template = path("stack.core_template")
        mem_layers = int(v["stack.mem_layers"])
        stack_cfg = fp.StackConfig(
            kind, cores=int(v["stack.cores"]), core_width=cw * 1e-3, core_height=ch * 1e-3,
            core_layers=int(v["stack.core_layers"]), mem_banks_x=bx, mem_banks_y=by, mem_layers=mem_layers,
            bank_width=bw * 1e-3, bank_height=bh * 1e-3, gap_2_5d=float(v["stack.gap_mm"]) * 1e-3,
            core_template=fp.read_flp(template) if template else None, materials=mats,
        )
        grid = _pair(v["grid"], "grid", int)
        epoch_dt = float(v["epoch_ms"]) * 1e-3
        max_time = float(v["max_time_ms"]) * 1e-3
        if not epoch_dt > 0 or not max_time > 0:
            raise ConfigError("epoch_ms and max_time_ms must be > 0")
        substeps = int(v["substeps"])
        if substeps < 1:
            raise ConfigError("substeps must be >= 1")

        ambient = AmbientSpec(
            ambient_temperature=float(v["thermal.ambient_c"]) + KELVIN,
            sink_to_ambient_resistance=float(v["thermal.sink_resistance"]),
            convection_multiplier_aircooled=float(v["thermal.air_multiplier"]),
            spreader_to_sink_resistance=float(v["thermal.spreader_resistance"]),
            spreader_capacity=float(v["thermal.spreader_capacity"]),
            sink_capacity=float(v["thermal.sink_capacity"]),
        )
        vf = parse_vf_table(v["power.vf_table"])
        core_power = CorePowerParams(
            c_dyn=float(v["power.c_dyn"]), vf_table=vf,
            leak=LeakageFit(float(v["power.core_leak_w"]), float(v["power.core_leak_beta"]), T_REF_DEFAULT),
            component_fractions=_fractions(v["power.component_fractions"]),
        )

        total_banks = stack_cfg.banks_per_layer * mem_layers
        channels = 1 if kind is fp.StackKind.EXT_2D else 16
        if v["memory.channels"] != "auto":
            channels = int(v["memory.channels"])
        if v["memory.banks_per_channel"] != "auto":
            bpc = int(v["memory.banks_per_channel"])
        else:
            if total_banks % channels:
                raise ConfigError(f"{total_banks} banks do not divide evenly over {channels} channels")
            bpc = total_banks // channels
        latency = DEFAULT_LATENCY_NS[kind] if v["memory.latency_ns"] == "auto" else float(v["memory.latency_ns"])
        mem = MemConfig(channels, float(v["memory.bandwidth_gbps"]) * 1e9, latency * 1e-9,
                        int(v["memory.access_size"]), bpc, float(v["memory.mlp"]))

        wl_path = path("workload")
        workload = read_workload(wl_path) if wl_path else Workload()
        arrivals = None
        if v["arrivals"].strip():
            mode, params = parse_arrivals(v["arrivals"])
            if mode is ArrivalMode.EXPLICIT:
                params = {"times": read_explicit_times(fp.resolve(params["file"], base))}
            arrivals = (mode, params)
        prio = None
        if v["priority_list"].strip():
            prio = tuple(int(x) for x in re.split(r"[,\s]+", v["priority_list"].strip()) if x)

        init = v["initial"].strip().lower()
        if init == "ambient":
            initial = (InitialMode.AMBIENT, None)
        else:
            mode_s, _, temp = init.partition(":")
            try:
                initial = (InitialMode(mode_s), float(temp) + KELVIN)
            except ValueError:
                raise ConfigError(f"initial: expected ambient, uniform:<C> or warmed:<C>, got {init!r}") from None

        il = v["governor.initial_level"].strip().lower()
        initial_level = None if il == "max" else int(il)
        if initial_level is not None and not 0 <= initial_level < len(vf):
            raise ConfigError("governor.initial_level outside the vf table")
        dtm = DtmConfig(float(v["dtm.trigger_c"]) + KELVIN, float(v["dtm.resume_c"]) + KELVIN,
                        int(v["dtm.min_level"]), _bool(v["dtm.enabled"], "dtm.enabled"), v["dtm.scope"].strip())
        if dtm.min_level >= len(vf):
            raise ConfigError("dtm.min_level outside the vf table")
        make_policy(v["governor"])  # validate early
        stack_dir = path("stack_dir")
        return cls(
            values=tuple(sorted(v.items())), base_dir=base, stack_cfg=stack_cfg, stack_dir=stack_dir,
            grid=grid, epoch_dt=epoch_dt, max_time=max_time, substeps=substeps, seed=int(v["seed"]),
            ambient=ambient, core_power=core_power,
            e_read=float(v["power.e_read_nj"]) * 1e-9, e_write=float(v["power.e_write_nj"]) * 1e-9,
            mem_leak_fraction=float(v["power.mem_leak_fraction"]), mem_leak_beta=float(v["power.mem_leak_beta"]),
            logic_layer_power=float(v["power.logic_layer_w"]),
            memory_power=_bool(v["power.memory_power"], "power.memory_power"),
            mem=mem, workload=workload, governor=v["governor"].strip(),
            ondemand=OndemandConfig(float(v["governor.up_threshold"]), float(v["governor.down_threshold"])),
            initial_level=initial_level, dtm=dtm, arrivals=arrivals, priority_list=prio, initial=initial,
        )

    def with_values(self, **changes) -> "SimConfig":
        """Copy with flattened keys overridden (use ``__`` for the section dot)."""
        vals = self.mapping
        vals.update({k.replace("__", "."): str(x) for k, x in changes.items()})
        return SimConfig.from_mapping(vals, self.base_dir)

    def with_overrides(self, overrides: Mapping[str, str]) -> "SimConfig":
        vals = self.mapping
        vals.update({k: str(x) for k, x in overrides.items()})
        return SimConfig.from_mapping(vals, self.base_dir)

    def snapshot(self) -> str:
        """Config text with paths made absolute, loadable from any directory."""
        vals = self.mapping
        for k in _PATH_KEYS:
            if vals[k].strip():
                vals[k] = str(fp.resolve(vals[k], self.base_dir).resolve())
        if vals["arrivals"].lower().startswith("explicit:"):
            p = vals["arrivals"].split(":", 1)[1]
            vals["arrivals"] = "explicit:" + str(fp.resolve(p, self.base_dir).resolve())
        return format_config({k: x for k, x in vals.items() if x != DEFAULTS.get(k)})


def load_config(path, overrides: Optional[Mapping[str, str]] = None) -> SimConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values = parse_config_text(text)
    if overrides:
        values.update(overrides)
    return SimConfig.from_mapping(values, path.parent)


def force_memory_power(cfg: SimConfig, enabled: bool) -> SimConfig:
    """Variant with memory dynamic and static power forced to zero when disabled."""
    if enabled:
        return cfg
    return cfg.with_overrides({"power.memory_power": "off"})


def warm_start(net: ThermalNetwork, peak: float) -> ThermalState:
    """Steady field of a uniform power-density preheat whose hottest node equals ``peak``."""
    amb = net.ambient_temperature
    if peak < amb:
        raise InvalidArgument(f"warm-start peak {peak} K is below ambient {amb} K")
    if peak == amb:
        return ambient_state(net)
    unit = np.where(net.dissipating, net.block_areas / net.block_areas[net.dissipating].sum(), 0.0)
    base = steady_state(net, unit)
    rise = base.temperatures.max() - amb
    # the field is linear in power without leakage, so one rescale hits the peak exactly
    return ThermalState(amb + (base.temperatures - amb) * ((peak - amb) / rise), 0.0)


# ---------------------------------------------------------------------------
# traces


class TraceWriter:
    """Buffered CSV writer flushed every ``FLUSH_EVERY`` rows and on close."""

    def __init__(self, path: Path, header: Sequence[str]):
        self.path = path
        self.rows: list = []
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(header)

    def add(self, row):
        self.rows.append(row)
        if len(self.rows) >= FLUSH_EVERY:
            self.flush()

    def flush(self):
        if not self.rows:
            return
        with open(self.path, "a", newline="") as f:
            w = csv.writer(f)
            for row in self.rows:
                w.writerow([_fmt(x) for x in row])
        self.rows.clear()


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class TaskRecord:
    task_id: int
    app: str
    arrival: float
    core: Optional[int] = None
    start: Optional[float] = None
    finish: Optional[float] = None


@dataclass
class TraceSet:
    blocks: list
    n_cores: int
    layer_of_block: dict  # block -> (stack id, layer index, LayerKind)
    times_ms: list = field(default_factory=list)
    ips: list = field(default_factory=list)
    util: list = field(default_factory=list)
    level: list = field(default_factory=list)
    freq: list = field(default_factory=list)
    power_dyn: list = field(default_factory=list)
    power_static: list = field(default_factory=list)
    temp_max: list = field(default_factory=list)
    temp_mean: list = field(default_factory=list)
    throttled: list = field(default_factory=list)
    events: list = field(default_factory=list)
    tasks: list = field(default_factory=list)
    out_dir: Optional[Path] = None

    def array(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)

    @property
    def n_epochs(self) -> int:
        return len(self.times_ms)

    def layer_columns(self, stack_id: str, layer: int) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if self.layer_of_block[b][:2] == (stack_id, layer)]

    def layer_peak(self, stack_id: str, layer: int) -> np.ndarray:
        cols = self.layer_columns(stack_id, layer)
        if not cols:
            raise InvalidArgument(f"no blocks on layer {layer} of stack {stack_id}")
        return self.array("temp_max")[:, cols].max(axis=1)

    def hotspot_blocks(self) -> list[str]:
        tm = self.array("temp_max")
        return [self.blocks[i] for i in tm.argmax(axis=1)]


def _core_id(name: str) -> Optional[int]:
    if fp.is_memory_block(name):
        return None
    m = re.search(r"_(\d+)$", name)
    if not m:
        raise ValidationError(f"core block {name!r} lacks a trailing _<core> index")
    return int(m.group(1))


def _sub_name(name: str) -> str:
    return name.rsplit("_", 1)[0]


class Simulation:
    """One engine instance.  Call ``step()`` per epoch or ``run()`` to completion."""

    def __init__(self, cfg: SimConfig, out_dir=None, dump_network=False):
        self.cfg = cfg
        self.stacks = fp.read_stacks(cfg.stack_dir) if cfg.stack_dir else fp.build_stack(cfg.stack_cfg)
        self.net = build_network(self.stacks, cfg.grid, cfg.ambient)
        net = self.net
        self.blocks = list(net.block_names)
        self.layer_of_block = fp.block_locations(self.stacks)
        self.dt = cfg.epoch_dt
        self._setup_power()
        self._setup_workload()
        self.out_dir = Path(out_dir) if out_dir else None
        self.trace = TraceSet(self.blocks, self.n_cores, self.layer_of_block, out_dir=self.out_dir)
        self.policy = make_policy(cfg.governor, cfg.ondemand)
        start_level = cfg.core_power.max_level if cfg.initial_level is None else cfg.initial_level
        self.gov = GovernorState.initial(self.n_cores, start_level)
        self.state = self._initial_state()
        self.epoch = 0
        self._writers = None
        if self.out_dir:
            self._open_outputs(dump_network)

    # -- setup ------------------------------------------------------------

    def _setup_power(self):
        cfg, net = self.cfg, self.net
        idx = net.block_index
        cores: dict[int, list[int]] = {}
        self.bank_cols = np.full(cfg.mem.n_banks, -1, dtype=np.int64)
        lc = []
        for name in self.blocks:
            i = idx[name]
            if name.startswith("B_"):
                b = int(name[2:])
                if b >= cfg.mem.n_banks:
                    raise ConfigError(f"bank {name} outside the {cfg.mem.n_banks} banks of the memory config")
                self.bank_cols[b] = i
            elif name.startswith("LC_"):
                lc.append(i)
            else:
                cores.setdefault(_core_id(name), []).append(i)
        if (self.bank_cols < 0).any():
            missing = int(np.flatnonzero(self.bank_cols < 0)[0])
            raise ConfigError(f"memory config expects bank B_{missing} but the floorplan lacks it")
        if sorted(cores) != list(range(len(cores))) or not cores:
            raise ConfigError("core blocks must be numbered 0..N-1")
        self.n_cores = len(cores)
        self.lc_cols = np.asarray(lc, dtype=np.int64)

        # per-block share of its core's dynamic power and leakage
        self.core_of_col = np.full(net.n_blocks, -1, dtype=np.int64)
        self.dyn_frac = np.zeros(net.n_blocks)
        self.area_frac = np.zeros(net.n_blocks)
        fractions = cfg.core_power.component_fractions
        for c, cols in cores.items():
            areas = net.block_areas[cols]
            self.core_of_col[cols] = c
            self.area_frac[cols] = areas / areas.sum()
            if fractions:
                subs = [_sub_name(self.blocks[i]) for i in cols]
                missing = set(subs) - set(fractions)
                if missing:
                    raise ConfigError(f"no component fraction for sub-block {sorted(missing)[0]!r}")
                share = np.array([fractions[s] for s in subs])
                self.dyn_frac[cols] = share / share.sum()
            else:
                self.dyn_frac[cols] = self.area_frac[cols]
        self.core_cols = np.flatnonzero(self.core_of_col >= 0)

        mem = cfg.mem
        dyn_ref = bank_reference_power(mem.per_channel_bandwidth, mem.access_size, mem.banks_per_channel, cfg.e_read)
        self.mem_leak = calibrate_memory_leakage(cfg.mem_leak_fraction, T_REF_DEFAULT, dyn_ref, cfg.mem_leak_beta)
        self.beta = np.zeros(net.n_blocks)
        self.tref = np.full(net.n_blocks, T_REF_DEFAULT)
        self.beta[self.core_cols] = cfg.core_power.leak.beta
        self.beta[self.bank_cols] = self.mem_leak.beta
        self.mem_p0 = np.zeros(net.n_blocks)
        if cfg.memory_power:
            self.mem_p0[self.bank_cols] = self.mem_leak.p0
        self.v_max = cfg.core_power.vf_table[-1][0]

    def _setup_workload(self):
        cfg = self.cfg
        wl = cfg.workload
        self.priority = (check_priority_list(cfg.priority_list, self.n_cores) if cfg.priority_list
                         else tuple(range(self.n_cores)))
        per_layer = self.n_cores // max(1, cfg.stack_cfg.core_layers) if not cfg.stack_dir else self.n_cores
        self.default_affinity = default_channel_affinity(
            self.n_cores, cfg.mem.channels, cfg.stack_cfg.mem_banks_x, cfg.stack_cfg.mem_banks_y, per_layer)
        MemPowerParams(cfg.e_read, cfg.e_write, self.mem_leak, cfg.logic_layer_power,
                       dict(enumerate(self.default_affinity))).check_channels(cfg.mem.channels)
        for t in wl.tasks:
            if t.core is not None and not 0 <= t.core < self.n_cores:
                raise ConfigError(f"task pinned to missing core {t.core}")
            if t.channels is not None and any(not 0 <= c < cfg.mem.channels for c in t.channels):
                raise ConfigError(f"task channels {t.channels} outside 0..{cfg.mem.channels - 1}")
        if cfg.arrivals:
            mode, params = cfg.arrivals
            proc = ArrivalProcess(mode, wl.tasks, **params)
            arrivals = [(t, spec) for t, spec in generate_arrivals(proc, cfg.max_time) if spec is not None]
        else:
            arrivals = sorted(((t.at, t) for t in wl.tasks), key=lambda x: x[0])
        self.arrivals = deque((t, i, spec) for i, (t, spec) in enumerate(arrivals))
        self.pending: deque = deque()
        self.records: list[TaskRecord] = []
        self.cores = [CoreRunState(i, None, 0, self.default_affinity[i]) for i in range(self.n_cores)]

    def _initial_state(self) -> ThermalState:
        mode, temp = self.cfg.initial
        if mode is InitialMode.AMBIENT:
            return ambient_state(self.net)
        if mode is InitialMode.UNIFORM:
            return uniform_state(self.net, temp)
        return warm_start(self.net, temp)

    def _open_outputs(self, dump_network):
        out = self.out_dir
        out.mkdir(parents=True, exist_ok=True)
        fp.write_stacks(out / "floorplan", self.stacks)
        (out / "config.cfg").write_text(self.cfg.snapshot())
        if dump_network:
            from .thermal import dump_network as dump
            dump(self.net, out / "network.txt")
        perf_header = ["time_ms"]
        for c in range(self.n_cores):
            perf_header += [f"core{c}_ips", f"core{c}_util", f"core{c}_level", f"core{c}_freq_ghz"]
        blocks = ["time_ms"] + self.blocks
        self._writers = {
            "perf": TraceWriter(out / "perf.csv", perf_header),
            "power_dyn": TraceWriter(out / "power_dyn.csv", blocks),
            "power_static": TraceWriter(out / "power_static.csv", blocks),
            "temp_max": TraceWriter(out / "temp_max.csv", blocks),
            "temp_mean": TraceWriter(out / "temp_mean.csv", blocks),
        }
        self._events = open(out / "events.log", "w")

    # -- loop -------------------------------------------------------------

    def _event(self, time_s: float, kind: str, **info):
        text = "\t".join([repr(round(time_s * 1000.0, 9)), kind] + [f"{k}={v}" for k, v in info.items()])
        self.trace.events.append(text)
        if self._writers is not None:
            self._events.write(text + "\n")

    def _dispatch(self, t0: float):
        end = t0 + 1e-12
        while self.arrivals and self.arrivals[0][0] <= end:
            t, tid, spec = self.arrivals.popleft()
            self.records.append(TaskRecord(tid, spec.app, t))
            self.pending.append((tid, spec))
            self._event(t, "arrive", task=tid, app=spec.app)
        if not self.pending:
            return
        waiting = deque()
        while self.pending:
            tid, spec = self.pending.popleft()
            free = [c.core_id for c in self.cores if not c.busy]
            if spec.core is not None:
                core = spec.core if spec.core in free else REJECT
            else:
                core = map_task(spec, free, self.priority)
            if core == REJECT:
                waiting.append((tid, spec))
                continue
            aff = spec.channels if spec.channels is not None else self.default_affinity[core]
            app = self.cfg.workload.app(spec.app)
            rec = self.records[tid]
            rec.core, rec.start = core, t0
            self.cores[core] = CoreRunState(core, TaskProgress(tid, app, rec.arrival, t0), self.cores[core].vf_level,
                                            tuple(aff))
            self._event(t0, "start", task=tid, app=spec.app, core=core)
        self.pending = waiting

    def power(self, perf) -> tuple[np.ndarray, LeakageTable]:
        """Per-block dynamic power and leakage table for one epoch.

        The package is power-gated (no dynamic or static power) in epochs
        where no core has a task.
        """
        cfg = self.cfg
        cp = cfg.core_power
        p = np.zeros(self.net.n_blocks)
        if not any(c.busy for c in self.cores):
            return p, LeakageTable(np.zeros(self.net.n_blocks), self.beta, self.tref)
        core_dyn = np.zeros(self.n_cores)
        volt = np.zeros(self.n_cores)
        for ce, st in zip(perf.cores, self.cores):
            v, f = cp.vf_table[st.vf_level]
            core_dyn[ce.core_id] = cp.c_dyn * ce.activity * f * v * v
            volt[ce.core_id] = v
        owner = self.core_of_col[self.core_cols]
        p[self.core_cols] = core_dyn[owner] * self.dyn_frac[self.core_cols]
        p0 = self.mem_p0.copy()
        p0[self.core_cols] = cp.leak.p0 * (volt[owner] / self.v_max) * self.area_frac[self.core_cols]
        if cfg.memory_power:
            p[self.bank_cols] = (perf.bank_reads * cfg.e_read + perf.bank_writes * cfg.e_write) / self.dt
            if len(self.lc_cols):
                p[self.lc_cols] = cfg.logic_layer_power / len(self.lc_cols)
        return p, LeakageTable(p0, self.beta, self.tref)

    def step(self):
        """Advance one epoch and record its traces."""
        cfg, net, dt = self.cfg, self.net, self.dt
        e = self.epoch
        t0 = e * dt
        self._dispatch(t0)
        self.cores = [replace(c, vf_level=lvl) for c, lvl in zip(self.cores, self.gov.levels)]
        perf = epoch_execute(self.cores, cfg.mem, dt, cfg.core_power.vf_table)
        p, leak = self.power(perf)
        try:
            new = transient_step(net, self.state, p, leak, dt, cfg.substeps)
        except NumericalError:
            # leakage overflowed: the feedback loop has no bounded solution
            tmax, _ = net.block_stats(self.state.temperatures)
            hot = self.blocks[int(np.argmax(tmax))]
            raise ThermalRunawayError(f"epoch {e}: temperature diverged near block {hot}", epoch=e,
                                      block=hot) from None
        if new.temperatures.max() > RUNAWAY_GUARD_K:
            tmax, _ = net.block_stats(new.temperatures)
            hot = self.blocks[int(np.argmax(tmax))]
            raise ThermalRunawayError(f"epoch {e}: temperature exceeds {RUNAWAY_GUARD_K} K at block {hot}",
                                      epoch=e, block=hot)
        breakdown = PowerBreakdown(tuple(self.blocks), p, new.block_leakage, e)
        if abs(breakdown.total - new.injected_power) > 1e-9 * max(1.0, abs(breakdown.total)):
            raise InternalError(f"epoch {e}: power trace {breakdown.total} W differs from injected "
                                f"{new.injected_power} W")
        self.state = new
        tmax, tmean = net.block_stats(new.temperatures)
        t1 = t0 + dt

        # management for the next epoch
        if cfg.dtm.scope == "core":
            hotspot = float(tmax[self.core_cols].max())
        else:
            hotspot = float(tmax.max())
        utils = tuple(min(1.0, max(0.0, ce.utilization)) for ce in perf.cores)
        gov = dtm_update(hotspot, self.gov, cfg.dtm)
        if gov.throttled != self.gov.throttled:
            self._event(t1, "throttle_on" if gov.throttled else "throttle_off", max_c=round(hotspot - KELVIN, 6))
        elif not gov.throttled:
            temps = {b: float(x) for b, x in zip(self.blocks, tmax)}
            decision = self.policy.decide(PolicyInput(e, utils, temps, gov, cfg.core_power.max_level))
            levels = tuple(int(x) for x in decision.levels)
            if len(levels) != self.n_cores or any(not 0 <= x <= cfg.core_power.max_level for x in levels):
                raise InternalError(f"policy returned invalid levels {levels}")
            gov = replace(gov, levels=levels)

        used_levels = [c.vf_level for c in self.cores]
        self.cores = [advance(c, perf, t0) for c in self.cores]
        for c in self.cores:
            if c.task is not None and c.task.done:
                rec = self.records[c.task.task_id]
                rec.finish = c.task.finished
                self._event(rec.finish, "complete", task=rec.task_id, app=rec.app, core=c.core_id,
                            response_ms=repr(round((rec.finish - rec.arrival) * 1000.0, 9)))
        self.cores = [CoreRunState(c.core_id, None, c.vf_level, self.default_affinity[c.core_id])
                      if c.task is not None and c.task.done else c for c in self.cores]

        tr = self.trace
        t_ms = round(t1 * 1000.0, 9)
        tr.times_ms.append(t_ms)
        tr.ips.append([ce.instructions / dt for ce in perf.cores])
        tr.util.append(list(utils))
        tr.level.append(used_levels)
        tr.freq.append([cfg.core_power.vf_table[l][1] for l in used_levels])
        tr.power_dyn.append(p)
        tr.power_static.append(new.block_leakage)
        tr.temp_max.append(tmax)
        tr.temp_mean.append(tmean)
        tr.throttled.append(gov.throttled)
        if self._writers is not None:
            row = [t_ms]
            for c in range(self.n_cores):
                row += [tr.ips[-1][c], utils[c], used_levels[c], tr.freq[-1][c]]
            self._writers["perf"].add(row)
            self._writers["power_dyn"].add([t_ms, *p])
            self._writers["power_static"].add([t_ms, *new.block_leakage])
            self._writers["temp_max"].add([t_ms, *tmax])
            self._writers["temp_mean"].add([t_ms, *tmean])
        self.gov = gov
        self.epoch += 1

    @property
    def finished(self) -> bool:
        if self.epoch * self.dt >= self.cfg.max_time - 1e-12:
            return True
        if not self.cfg.workload.tasks:
            return False
        return not self.arrivals and not self.pending and not any(c.busy for c in self.cores)

    def close(self):
        if self._writers is not None:
            for w in self._writers.values():
                w.flush()
            self._events.close()
            self._writers = None
        self.trace.tasks = list(self.records)

    def run(self) -> TraceSet:
        try:
            while not self.finished:
                self.step()
        finally:
            self.close()
        return self.trace


def run(cfg: SimConfig, out_dir=None, dump_network: bool = False) -> TraceSet:
    return Simulation(cfg, out_dir, dump_network).run()
