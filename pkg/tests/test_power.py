import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from thermiq import power as pw
from thermiq.errors import InvalidArgument, ValidationError
from thermiq.thermal import LeakageFit


def test_zero_activity_is_zero_power():
    assert pw.core_dynamic_power(0.0, 5, pw.CorePowerParams()) == 0.0


def test_dynamic_power_formula():
    p = pw.CorePowerParams(c_dyn=2.0, vf_table=((0.9, 1.8), (1.2, 3.6)))
    assert pw.core_dynamic_power(1.0, 1, p) == pytest.approx(10.368, rel=1e-12)
    ratio = pw.core_dynamic_power(1.0, 0, p) / pw.core_dynamic_power(1.0, 1, p)
    assert ratio == pytest.approx(0.5 * (0.9 / 1.2) ** 2, rel=1e-12)
    assert ratio == pytest.approx(0.28125, rel=1e-12)


def test_default_core_is_about_ten_watts():
    p = pw.CorePowerParams()
    assert pw.core_dynamic_power(1.0, p.max_level, p) == pytest.approx(10.0, rel=1e-12)


def test_component_split_sums_to_total():
    p = pw.CorePowerParams(component_fractions={"ALU": 0.5, "FPU": 0.3, "L2": 0.2})
    total, parts = pw.core_dynamic_power(0.7, 3, p, split=True)
    assert sum(parts.values()) == pytest.approx(total, rel=1e-12)
    assert parts["ALU"] == pytest.approx(0.5 * total)


@pytest.mark.parametrize("a", [-0.1, 1.1, float("nan")])
def test_activity_out_of_range(a):
    with pytest.raises(InvalidArgument):
        pw.core_dynamic_power(a, 0, pw.CorePowerParams())


def test_invalid_level():
    with pytest.raises(InvalidArgument):
        pw.core_dynamic_power(1.0, 6, pw.CorePowerParams())


def test_param_validation():
    with pytest.raises(ValidationError):
        pw.CorePowerParams(vf_table=((1.0, 2.0), (0.9, 3.0)))
    with pytest.raises(ValidationError):
        pw.CorePowerParams(component_fractions={"a": 0.5, "b": 0.4})
    with pytest.raises(ValidationError):
        pw.MemPowerParams(e_read=-1.0)


def test_core_leakage_scales_with_voltage():
    p = pw.CorePowerParams()
    assert p.leakage_at_level(p.max_level).p0 == p.leak.p0
    assert p.leakage_at_level(0).p0 == pytest.approx(p.leak.p0 * 0.7 / 1.2)


def test_mem_bank_power():
    m = pw.MemPowerParams()
    assert pw.mem_bank_power(0, 0, 1e-3, m) == 0.0
    assert pw.mem_bank_power(1e5, 0, 1e-3, m) == pytest.approx(0.5, rel=1e-12)
    pcm = pw.MemPowerParams(e_read=5e-9, e_write=10e-9)
    assert pw.mem_bank_power(100, 10, 1e-3, pcm) != pw.mem_bank_power(10, 100, 1e-3, pcm)
    with pytest.raises(InvalidArgument):
        pw.mem_bank_power(1, 1, 0.0, m)


def test_channel_ownership_check():
    pw.MemPowerParams(channel_map={0: (0, 1), 1: (2, 3)}).check_channels(4)
    with pytest.raises(ValidationError):
        pw.MemPowerParams(channel_map={0: (0, 1)}).check_channels(4)


def test_leakage_power_examples():
    fit = LeakageFit(1.5, 0.02, 343.15)
    assert pw.leakage_power(343.15, fit) == 1.5
    flat = LeakageFit(1.5, 0.0, 343.15)
    assert pw.leakage_power(250.0, flat) == pw.leakage_power(450.0, flat) == 1.5
    with pytest.raises(InvalidArgument):
        pw.leakage_power(600.0, fit)
    with pytest.raises(InvalidArgument):
        pw.leakage_power(100.0, fit)


def test_calibration_closed_form():
    dyn = 0.37
    fit = pw.calibrate_memory_leakage(0.40, 343.15, dyn, beta=0.02)
    s = pw.leakage_power(343.15, fit)
    assert abs(s / (s + dyn) - 0.40) < 1e-9
    s2 = pw.leakage_power(363.15, fit)
    assert s2 / (s2 + dyn) > 0.40 + 1e-3


def test_calibration_away_from_reference_temperature():
    fit = pw.calibrate_memory_leakage(0.25, 330.0, 2.0, beta=0.03)
    s = pw.leakage_power(330.0, fit)
    assert s / (s + 2.0) == pytest.approx(0.25, abs=1e-12)


def test_calibration_limit_and_errors():
    assert pw.calibrate_memory_leakage(1e-12, 343.15, 1.0).p0 < 1e-11
    with pytest.raises(InvalidArgument):
        pw.calibrate_memory_leakage(0.4, 343.15, 0.0)
    with pytest.raises(InvalidArgument):
        pw.calibrate_memory_leakage(1.0, 343.15, 1.0)


def test_bank_reference_power():
    # 7.6 GB/s of 64 B reads spread over 8 banks at 5 nJ
    assert pw.bank_reference_power(7.6e9, 64, 8, 5e-9) == pytest.approx(7.6e9 / 64 / 8 * 5e-9)


def test_power_breakdown():
    b = pw.PowerBreakdown(("a", "b"), np.array([1.0, 2.0]), np.array([0.5, 0.0]), 3)
    assert b.total == 3.5 and b.as_dict()["a"] == (1.0, 0.5)
    with pytest.raises(ValidationError):
        pw.PowerBreakdown(("a",), np.array([-1.0]), np.array([0.0]))


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 5))
def test_dynamic_monotone_in_activity(a, b, level):
    p = pw.CorePowerParams()
    lo, hi = sorted((a, b))
    assert pw.core_dynamic_power(lo, level, p) <= pw.core_dynamic_power(hi, level, p)


@given(st.floats(0.01, 1.0), st.integers(0, 4))
def test_dynamic_monotone_in_level(a, level):
    p = pw.CorePowerParams()
    assert pw.core_dynamic_power(a, level, p) < pw.core_dynamic_power(a, level + 1, p)


@given(st.floats(0.5, 2.0), st.floats(0.5, 2.0), st.floats(0.5, 5.0), st.floats(0.5, 5.0))
def test_dynamic_monotone_in_v_and_f_separately(v1, v2, f1, f2):
    def power(v, f):
        return pw.core_dynamic_power(1.0, 0, pw.CorePowerParams(c_dyn=1.0, vf_table=((v, f),)))
    assert (power(v1, f1) <= power(v2, f1)) == (v1 <= v2) or v1 == v2
    assert (power(v1, f1) <= power(v1, f2)) == (f1 <= f2) or f1 == f2


@given(st.floats(200.0, 499.0), st.floats(0.01, 1.0), st.floats(1e-4, 0.1), st.floats(1e-6, 5.0))
def test_leakage_strictly_increasing(T, dT, beta, p0):
    fit = LeakageFit(p0, beta, 343.15)
    assert pw.leakage_power(T + dT, fit) > pw.leakage_power(T, fit)


@given(st.floats(0.01, 0.99), st.floats(250.0, 450.0), st.floats(1e-3, 100.0), st.floats(0.0, 0.1))
def test_calibration_hits_target(frac, T, dyn, beta):
    fit = pw.calibrate_memory_leakage(frac, T, dyn, beta)
    s = pw.leakage_power(T, fit)
    assert math.isclose(s / (s + dyn), frac, rel_tol=1e-9)
