"""DVFS governors, DTM throttling, task arrivals and core mapping."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, InvalidArgument, ValidationError

REJECT = -1


@dataclass(frozen=True)
class DtmConfig:
    trigger_temp: float = 353.15
    resume_temp: float = 351.15
    min_level: int = 0
    enabled: bool = True
    # "global": hottest block anywhere; "core": hottest core block only
    scope: str = "global"

    def __post_init__(self):
        if not self.resume_temp < self.trigger_temp:
            raise ValidationError("resume_temp must be below trigger_temp")
        if self.min_level < 0:
            raise ValidationError("min_level must be >= 0")
        if self.scope not in ("global", "core"):
            raise ValidationError(f"unknown DTM scope {self.scope!r}")


@dataclass(frozen=True)
class GovernorState:
    levels: tuple
    saved_levels: Optional[tuple] = None
    throttled: bool = False

    @classmethod
    def initial(cls, n_cores: int, level: int) -> "GovernorState":
        return cls(tuple([level] * n_cores))


@dataclass(frozen=True)
class OndemandConfig:
    up_threshold: float = 0.80
    down_threshold: float = 0.20

    def __post_init__(self):
        if not 0.0 <= self.down_threshold < self.up_threshold <= 1.0:
            raise ValidationError("need 0 <= down_threshold < up_threshold <= 1")


def ondemand_update(utilizations: Sequence[float], state: GovernorState, max_level: int,
                    cfg: OndemandConfig = OndemandConfig()) -> tuple:
    """Per-core level: jump to max above ``up``, one step down below ``down``."""
    if state.throttled:
        return state.levels
    if len(utilizations) != len(state.levels):
        raise InvalidArgument("one utilisation per core required")
    out = []
    for u, lvl in zip(utilizations, state.levels):
        if not 0.0 <= u <= 1.0:
            raise InvalidArgument(f"utilisation {u} outside [0, 1]")
        if u > cfg.up_threshold:
            lvl = max_level
        elif u < cfg.down_threshold:
            lvl = max(0, lvl - 1)
        out.append(lvl)
    return tuple(out)


def dtm_update(max_temp: float, gov: GovernorState, cfg: DtmConfig) -> GovernorState:
    if not cfg.enabled:
        return gov
    if not gov.throttled and max_temp > cfg.trigger_temp:
        return GovernorState(tuple([cfg.min_level] * len(gov.levels)), gov.levels, True)
    if gov.throttled and max_temp < cfg.resume_temp:
        return GovernorState(gov.saved_levels, None, False)
    return gov


def map_task(task, free_cores: Iterable[int], priority_list: Sequence[int]) -> int:
    """First free core in priority order, or ``REJECT``."""
    free = set(free_cores)
    for core in priority_list:
        if core in free:
            return core
    return REJECT


def check_priority_list(priority_list: Sequence[int], n_cores: int) -> tuple:
    pl = tuple(int(c) for c in priority_list)
    if sorted(pl) != list(range(n_cores)):
        raise ConfigError(f"priority list {list(pl)} is not a permutation of 0..{n_cores - 1}")
    return pl


class ArrivalMode(Enum):
    UNIFORM = "uniform"
    POISSON = "poisson"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class ArrivalProcess:
    mode: ArrivalMode
    tasks: tuple = ()
    period: float = 0.0  # s, UNIFORM
    rate: float = 0.0  # 1/s, POISSON
    seed: int = 0
    times: tuple = ()  # s, EXPLICIT

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        if self.mode is ArrivalMode.UNIFORM and not self.period > 0:
            raise ValidationError("uniform arrivals need period > 0")
        if self.mode is ArrivalMode.POISSON and not self.rate > 0:
            raise ValidationError("poisson arrivals need rate > 0")
        if self.mode is ArrivalMode.EXPLICIT:
            t = np.asarray(self.times)
            if (t < 0).any() or (np.diff(t) < 0).any():
                raise ValidationError("explicit arrival times must be nonnegative and nondecreasing")


def generate_arrivals(proc: ArrivalProcess, horizon: float) -> list[tuple[float, object]]:
    """Arrival times below ``horizon`` paired with tasks.

    UNIFORM and POISSON cycle through the task list (one task per arrival);
    EXPLICIT pairs the i-th time with the i-th task and keeps times verbatim.
    """
    if not horizon > 0:
        raise InvalidArgument("horizon must be > 0")
    tasks = proc.tasks or (None,)
    if proc.mode is ArrivalMode.EXPLICIT:
        if proc.tasks and len(proc.tasks) != len(proc.times):
            raise ValidationError("explicit arrivals need one time per task")
        return [(t, tasks[i % len(tasks)]) for i, t in enumerate(proc.times)]
    times = []
    if proc.mode is ArrivalMode.UNIFORM:
        k = 0
        while k * proc.period < horizon:
            times.append(k * proc.period)
            k += 1
    else:
        rng = np.random.default_rng(proc.seed)
        t = 0.0
        while True:
            t += float(rng.exponential(1.0 / proc.rate))
            if t >= horizon:
                break
            times.append(t)
    return [(t, tasks[i % len(tasks)]) for i, t in enumerate(times)]


def parse_arrivals(text: str) -> tuple[ArrivalMode, dict]:
    """``uniform:<ms>``, ``poisson:<rate>:<seed>`` or ``explicit:<file>``."""
    parts = text.strip().split(":")
    try:
        mode = ArrivalMode(parts[0].lower())
    except ValueError:
        raise ConfigError(f"unknown arrival mode {parts[0]!r}") from None
    try:
        if mode is ArrivalMode.UNIFORM and len(parts) == 2:
            return mode, {"period": float(parts[1]) / 1000.0}
        if mode is ArrivalMode.POISSON and len(parts) == 3:
            return mode, {"rate": float(parts[1]), "seed": int(parts[2])}
        if mode is ArrivalMode.EXPLICIT and len(parts) >= 2:
            return mode, {"file": ":".join(parts[1:])}
    except ValueError:
        pass
    raise ConfigError(f"malformed arrivals setting {text!r}")


def read_explicit_times(path) -> tuple:
    """One arrival time in milliseconds per line; returns seconds."""
    out = []
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if line:
                out.append(float(line) / 1000.0)
    return tuple(out)


# ---------------------------------------------------------------------------
# policy interface


@dataclass(frozen=True)
class PolicyInput:
    epoch: int
    utilizations: tuple
    block_temps: Mapping[str, float]  # max temperature per block, K
    governor: GovernorState
    max_level: int


@dataclass(frozen=True)
class Decision:
    levels: tuple
    # (task_id, core) pairs; empty means "use the default priority mapping"
    mappings: tuple = ()


class Policy:
    """DVFS policy base class.  Subclasses return per-core levels for the next epoch."""

    name = "base"

    def decide(self, inp: PolicyInput) -> Decision:
        raise NotImplementedError


class OndemandPolicy(Policy):
    name = "ondemand"

    def __init__(self, cfg: OndemandConfig = OndemandConfig()):
        self.cfg = cfg

    def decide(self, inp: PolicyInput) -> Decision:
        return Decision(ondemand_update(inp.utilizations, inp.governor, inp.max_level, self.cfg))


class StaticPolicy(Policy):
    name = "static"

    def decide(self, inp: PolicyInput) -> Decision:
        return Decision(inp.governor.levels)


_REGISTRY: dict[str, Callable[[], Policy]] = {}


def register_policy(name: str):
    """Class decorator making a policy selectable as ``governor = custom:<name>``."""

    def deco(cls):
        _REGISTRY[name] = cls
        return cls

    return deco


def make_policy(spec: str, ondemand: OndemandConfig = OndemandConfig()) -> Policy:
    spec = spec.strip()
    if spec == "ondemand":
        return OndemandPolicy(ondemand)
    if spec == "static":
        return StaticPolicy()
    if spec.startswith("custom:"):
        name = spec[len("custom:"):]
        if name not in _REGISTRY:
            raise ConfigError(f"no custom policy registered as {name!r}")
        return _REGISTRY[name]()
    raise ConfigError(f"unknown governor {spec!r}")


@register_policy("powersave")
class PowersavePolicy(Policy):
    """Example custom policy: pin every core to the lowest level."""

    name = "powersave"

    def decide(self, inp: PolicyInput) -> Decision:
        return Decision(tuple([0] * len(inp.governor.levels)))
