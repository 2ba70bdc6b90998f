"""Analytic core and memory power models with exponential leakage fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidArgument, ValidationError
from .thermal import LeakageFit

T_MIN_PHYSICAL = 200.0
T_MAX_PHYSICAL = 500.0
T_REF_DEFAULT = 343.15  # 70 C

# (V, GHz) operating points; the top point is the nominal 3.6 GHz / 1.2 V core
DEFAULT_VF_TABLE = ((0.70, 1.0), (0.80, 1.6), (0.90, 2.2), (1.00, 2.8), (1.10, 3.2), (1.20, 3.6))


@dataclass(frozen=True)
class CorePowerParams:
    c_dyn: float = 10.0 / (3.6 * 1.2 ** 2)  # ~10 W fully active at the top point
    vf_table: tuple = DEFAULT_VF_TABLE
    leak: LeakageFit = LeakageFit(2.0, 0.02, T_REF_DEFAULT)  # at the top voltage
    component_fractions: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        if self.c_dyn < 0:
            raise ValidationError("c_dyn must be >= 0")
        vf = tuple((float(v), float(f)) for v, f in self.vf_table)
        if not vf:
            raise ValidationError("vf_table is empty")
        for (v0, f0), (v1, f1) in zip(vf, vf[1:]):
            if not (v1 > v0 and f1 > f0):
                raise ValidationError("vf_table must be strictly increasing in V and f")
        if any(v <= 0 or f <= 0 for v, f in vf):
            raise ValidationError("vf_table entries must be positive")
        object.__setattr__(self, "vf_table", vf)
        if self.component_fractions is not None:
            fr = dict(self.component_fractions)
            if any(x < 0 for x in fr.values()) or abs(sum(fr.values()) - 1.0) > 1e-9:
                raise ValidationError("component fractions must be >= 0 and sum to 1")
            object.__setattr__(self, "component_fractions", fr)

    @property
    def max_level(self) -> int:
        return len(self.vf_table) - 1

    def voltage(self, level: int) -> float:
        return self.vf_table[self._check(level)][0]

    def frequency_ghz(self, level: int) -> float:
        return self.vf_table[self._check(level)][1]

    def _check(self, level: int) -> int:
        if not 0 <= level < len(self.vf_table):
            raise InvalidArgument(f"vf level {level} outside 0..{len(self.vf_table) - 1}")
        return level

    def leakage_at_level(self, level: int) -> LeakageFit:
        """Core leakage fit with p0 scaled linearly by supply voltage."""
        return self.leak.scaled(self.voltage(level) / self.vf_table[-1][0])


@dataclass(frozen=True)
class MemPowerParams:
    e_read: float = 5e-9  # J/access
    e_write: float = 5e-9
    leak: LeakageFit = LeakageFit(0.0, 0.02, T_REF_DEFAULT)
    logic_layer_power: float = 1.0  # W, whole logic layer
    channel_map: Mapping[int, Sequence[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.e_read < 0 or self.e_write < 0:
            raise ValidationError("access energies must be >= 0")
        if self.logic_layer_power < 0:
            raise ValidationError("logic layer power must be >= 0")

    def check_channels(self, channels: int) -> None:
        owned = {c for chans in self.channel_map.values() for c in chans}
        missing = set(range(channels)) - owned
        if missing:
            raise ValidationError(f"channels without an owning core: {sorted(missing)}")
        extra = owned - set(range(channels))
        if extra:
            raise ValidationError(f"channel map references unknown channels {sorted(extra)}")


@dataclass(frozen=True)
class PowerBreakdown:
    """Per-block dynamic and static power for one epoch, in the given block order."""

    blocks: tuple
    dynamic: np.ndarray
    static: np.ndarray
    epoch_index: int = 0

    def __post_init__(self):
        if self.dynamic.shape != (len(self.blocks),) or self.static.shape != (len(self.blocks),):
            raise ValidationError("power breakdown arrays do not match block list")
        if (self.dynamic < 0).any() or (self.static < 0).any():
            raise ValidationError("power breakdown entries must be >= 0")

    @property
    def total(self) -> float:
        return float(self.dynamic.sum() + self.static.sum())

    def as_dict(self) -> dict[str, tuple[float, float]]:
        return {b: (float(d), float(s)) for b, d, s in zip(self.blocks, self.dynamic, self.static)}


def core_dynamic_power(activity: float, level: int, params: CorePowerParams, split: bool = False):
    """``c_dyn * a * f[GHz] * V^2``; with ``split`` also the per-component shares."""
    if not 0.0 <= activity <= 1.0 or math.isnan(activity):
        raise InvalidArgument(f"activity {activity} outside [0, 1]")
    v, f = params.vf_table[params._check(level)]
    p = params.c_dyn * activity * f * v * v
    if not split:
        return p
    fr = params.component_fractions or {}
    return p, {name: p * x for name, x in fr.items()}


def mem_bank_power(rd: float, wr: float, dt: float, params: MemPowerParams) -> float:
    if not dt > 0:
        raise InvalidArgument("dt must be > 0")
    if rd < 0 or wr < 0:
        raise InvalidArgument("access counts must be >= 0")
    return (rd * params.e_read + wr * params.e_write) / dt


def leakage_power(T: float, fit: LeakageFit) -> float:
    if not T_MIN_PHYSICAL <= T <= T_MAX_PHYSICAL:
        raise InvalidArgument(f"temperature {T} K outside the physical range")
    return float(fit.p0 * math.exp(fit.beta * (T - fit.t_ref)))


def calibrate_memory_leakage(target_fraction: float, at_T: float, dyn_ref: float, beta: float = 0.02,
                             t_ref: float = T_REF_DEFAULT) -> LeakageFit:
    """Fit whose static share of ``static + dyn_ref`` at ``at_T`` equals ``target_fraction``."""
    if not 0.0 < target_fraction < 1.0:
        raise InvalidArgument("target fraction must lie in (0, 1)")
    if not dyn_ref > 0:
        raise InvalidArgument("dyn_ref must be > 0")
    p0 = dyn_ref * target_fraction / (1.0 - target_fraction) * math.exp(-beta * (at_T - t_ref))
    return LeakageFit(p0, beta, t_ref)


def bank_reference_power(per_channel_bandwidth: float, access_size: float, banks_per_channel: int,
                         e_read: float) -> float:
    """Dynamic power of one bank when its channel streams reads at full bandwidth (activity 1)."""
    if banks_per_channel < 1 or access_size <= 0:
        raise InvalidArgument("banks_per_channel and access_size must be positive")
    return per_channel_bandwidth / access_size / banks_per_channel * e_read
