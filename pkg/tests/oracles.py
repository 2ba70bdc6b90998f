"""Independent reference computations used by the tests."""

import math

import numpy as np

# the 2d-ext memory used for the contention calibration
CONTENTION_MEM = dict(channels=1, per_channel_bandwidth=7.6e9, access_latency=45e-9, access_size=64,
                      banks_per_channel=16, mlp=4.0)


def bisect(f, lo, hi, tol=1e-10):
    flo = f(lo)
    if (flo > 0) == (f(hi) > 0):
        raise ValueError("root not bracketed")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def one_node_fixed_point(amb, R, p_dyn, p0, beta, t_ref):
    """Smallest root of T = amb + R (p_dyn + p0 e^{beta (T - t_ref)}), or None when none exists."""
    g = lambda T: amb + R * (p_dyn + p0 * math.exp(beta * (T - t_ref))) - T
    if beta == 0:
        return amb + R * (p_dyn + p0)
    # g is convex; its minimum sits where R p0 beta e^{...} = 1
    if R * p0 * beta <= 0:
        return amb + R * p_dyn
    t_star = t_ref + math.log(1.0 / (R * p0 * beta)) / beta
    t_star = max(t_star, amb)
    if g(t_star) > 0:
        return None
    return bisect(g, amb, t_star)


def contention_reduction(mpki, n_copies=2, f_hz=3.6e9, dt=1e-3, channels=1, bw=7.6e9,
                         latency=45e-9, size=64, mlp=4.0, cpi_base=1.0):
    """Fractional IPS loss of one copy when ``n_copies`` identical apps share the channels."""
    lat = latency * f_hz / mlp
    m = mpki / 1000.0

    def ips(rho):
        return f_hz / (cpi_base + m * lat * rho)

    solo_ips = ips(1.0)
    # both copies issue the same uncontended demand in the first pass
    demand = n_copies * solo_ips * m * size / channels
    rho = max(1.0, demand / bw)
    solo_demand = solo_ips * m * size / channels
    rho_solo = max(1.0, solo_demand / bw)
    return 1.0 - ips(rho) / ips(rho_solo)


def rc_charge(t, R=1.0, C=1.0, P=1.0):
    return P * R * (1.0 - math.exp(-t / (R * C)))
