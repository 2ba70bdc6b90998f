"""Grid RC thermal network: construction, transient and steady-state solves.

Node temperatures obey ``C dT/dt = -G (T - T_amb) + P(T)`` where ``G`` is a
weighted graph Laplacian plus the sink-to-ambient conductance on the
diagonal.  Each stack contributes ``layers * rows * cols`` grid cells, one
lumped spreader node and one lumped sink node.  Stacks never share
conductances, so off-package configurations are disjoint components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InternalError, InvalidArgument, NumericalError, ThermalRunawayError, ValidationError
from .floorplan import LayerKind, LayerSpec, Stack, stack_die_size

RUNAWAY_GUARD_K = 500.0
STEADY_TOL_K = 1e-4
STEADY_MAX_ITER = 100
_DENSE_LIMIT = 1500


@dataclass(frozen=True)
class AmbientSpec:
    """Ambient and package parameters for the lumped spreader/sink path."""

    ambient_temperature: float = 318.15
    sink_to_ambient_resistance: float = 0.1  # K/W
    convection_multiplier_aircooled: float = 20.0
    spreader_to_sink_resistance: float = 0.05  # K/W
    spreader_capacity: float = 3.2  # J/K
    sink_capacity: float = 140.4  # J/K

    def __post_init__(self):
        if not self.sink_to_ambient_resistance > 0:
            raise ValidationError("sink_to_ambient_resistance must be > 0")
        if not self.spreader_to_sink_resistance > 0:
            raise ValidationError("spreader_to_sink_resistance must be > 0")
        if not self.convection_multiplier_aircooled > 0:
            raise ValidationError("convection multiplier must be > 0")
        if not (self.spreader_capacity > 0 and self.sink_capacity > 0):
            raise ValidationError("spreader and sink capacities must be > 0")
        if not self.ambient_temperature > 0:
            raise ValidationError("ambient temperature must be positive kelvin")


@dataclass(frozen=True)
class LeakageFit:
    """Static power ``p0 * exp(beta * (T - t_ref))``."""

    p0: float
    beta: float
    t_ref: float

    def __post_init__(self):
        if self.p0 < 0 or self.beta < 0:
            raise ValidationError("leakage fit needs p0 >= 0 and beta >= 0")

    def __call__(self, temperature):
        return self.p0 * np.exp(self.beta * (np.asarray(temperature, dtype=float) - self.t_ref))

    def scaled(self, factor: float) -> "LeakageFit":
        return LeakageFit(self.p0 * factor, self.beta, self.t_ref)


class LeakageTable(NamedTuple):
    """Per-block leakage parameters as arrays in network block order."""

    p0: np.ndarray
    beta: np.ndarray
    t_ref: np.ndarray


@dataclass(frozen=True)
class ThermalState:
    temperatures: np.ndarray  # kelvin, one per node
    time: float = 0.0
    # mean static power injected per block over the last step, network block order
    block_leakage: Optional[np.ndarray] = None
    # mean total power the solver injected into the nodes over the last step
    injected_power: float = 0.0


class BlockTemp(NamedTuple):
    max: float
    mean: float


class LayerInfo(NamedTuple):
    stack_id: str
    index: int
    kind: LayerKind
    start: int
    stop: int


class ThermalNetwork:
    """Sparse conductance matrix, capacitances and the block-to-cell map.

    Treat instances as immutable.  Factorizations are memoised per step size.
    """

    def __init__(self, G, C, blocks, ambient_temperature, grid_rows=1, grid_cols=1, layers=(),
                 dissipating=None, stack_nodes=None, areas=None):
        self.G = sp.csr_matrix(G, dtype=float)
        self.C = np.asarray(C, dtype=float)
        self.ambient_temperature = float(ambient_temperature)
        self.grid_rows = grid_rows
        self.grid_cols = grid_cols
        self.layers: tuple[LayerInfo, ...] = tuple(layers)
        self.stack_nodes: dict[str, tuple[int, int]] = dict(stack_nodes or {})
        n = self.C.shape[0]
        if self.G.shape != (n, n):
            raise ValidationError("conductance matrix and capacitance vector disagree in size")

        self.block_names: list[str] = list(blocks)
        self.block_index = {name: i for i, name in enumerate(self.block_names)}
        if len(self.block_index) != len(self.block_names):
            raise ValidationError("duplicate block names in network")
        nodes, fracs, owner, ptr = [], [], [], [0]
        for i, name in enumerate(self.block_names):
            cells = blocks[name]
            if not cells:
                raise ValidationError(f"block {name} maps to no cells")
            for node, frac in cells:
                nodes.append(node)
                fracs.append(frac)
                owner.append(i)
            ptr.append(len(nodes))
        self.cell_nodes = np.asarray(nodes, dtype=np.int64)
        self.cell_fracs = np.asarray(fracs, dtype=float)
        self.cell_owner = np.asarray(owner, dtype=np.int64)
        self.cell_ptr = np.asarray(ptr, dtype=np.int64)
        if dissipating is None:
            dissipating = [True] * len(self.block_names)
        self.dissipating = np.asarray(dissipating, dtype=bool)
        self.block_areas = np.ones(len(self.block_names)) if areas is None else np.asarray(areas, dtype=float)
        self._validate()
        self._factors: dict = {}

    @property
    def n_nodes(self) -> int:
        return self.C.shape[0]

    @property
    def n_blocks(self) -> int:
        return len(self.block_names)

    def cell_map(self, name: str) -> list[tuple[int, float]]:
        i = self._index(name)
        s, e = self.cell_ptr[i], self.cell_ptr[i + 1]
        return list(zip(self.cell_nodes[s:e].tolist(), self.cell_fracs[s:e].tolist()))

    def ambient_conductance(self) -> np.ndarray:
        return np.asarray(self.G.sum(axis=1)).ravel()

    def _index(self, name: str) -> int:
        try:
            return self.block_index[name]
        except KeyError:
            raise InvalidArgument(f"unknown block {name!r}") from None

    def _validate(self):
        G = self.G
        if abs(G - G.T).max() > 1e-9 * max(1.0, abs(G).max()):
            raise ValidationError("conductance matrix is not symmetric")
        off = G - sp.diags(G.diagonal())
        if off.nnz and off.max() > 0:
            raise ValidationError("negative conductance between nodes (positive off-diagonal)")
        rows = self.ambient_conductance()
        if (rows < -1e-9 * max(1.0, abs(G).max())).any():
            raise ValidationError("negative ambient conductance")
        if not (self.C > 0).all():
            raise ValidationError("all capacitances must be > 0")
        if len(self.cell_nodes) and (self.cell_nodes.min() < 0 or self.cell_nodes.max() >= self.n_nodes):
            raise ValidationError("cell map references a node outside the network")
        sums = np.add.reduceat(self.cell_fracs, self.cell_ptr[:-1]) if len(self.cell_fracs) else np.zeros(0)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
        if bad.size:
            raise ValidationError(f"area fractions of block {self.block_names[bad[0]]} do not sum to 1")

    # -- vector helpers ---------------------------------------------------

    def power_vector(self, block_powers) -> np.ndarray:
        """Per-block powers (mapping or array in block order) as a checked array."""
        if isinstance(block_powers, Mapping):
            p = np.zeros(self.n_blocks)
            for name, value in block_powers.items():
                p[self._index(name)] = value
        else:
            p = np.array(block_powers, dtype=float)
            if p.shape != (self.n_blocks,):
                raise InvalidArgument(f"expected {self.n_blocks} block powers, got shape {p.shape}")
        if not np.isfinite(p).all():
            raise InvalidArgument("block powers must be finite")
        if (p < 0).any():
            raise InvalidArgument(f"negative power for block {self.block_names[int(np.argmax(p < 0))]}")
        if (p[~self.dissipating] != 0).any():
            raise InvalidArgument("power assigned to a block on a non-dissipating layer")
        return p

    def leakage_arrays(self, fits) -> Optional[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """(p0, beta, t_ref) per block, or None when no block leaks.

        ``fits`` is a mapping of block name to LeakageFit, a sequence of fits in
        block order, or an already-built ``LeakageTable``.
        """
        if isinstance(fits, LeakageTable):
            if fits.p0.shape != (self.n_blocks,):
                raise InvalidArgument("leakage table does not match the network blocks")
            return (fits.p0, fits.beta, fits.t_ref) if fits.p0.any() else None
        if fits is None or len(fits) == 0:
            return None
        p0 = np.zeros(self.n_blocks)
        beta = np.zeros(self.n_blocks)
        tref = np.zeros(self.n_blocks)
        items = fits.items() if isinstance(fits, Mapping) else zip(self.block_names, fits)
        for name, fit in items:
            if fit is None:
                continue
            i = self._index(name)
            p0[i], beta[i], tref[i] = fit.p0, fit.beta, fit.t_ref
        if not p0.any():
            return None
        return p0, beta, tref

    def distribute(self, p: np.ndarray) -> np.ndarray:
        """Spread per-block power onto nodes by area fraction."""
        return np.bincount(self.cell_nodes, weights=p[self.cell_owner] * self.cell_fracs,
                           minlength=self.n_nodes)

    def _leak_entries(self, T: np.ndarray, leak) -> np.ndarray:
        p0, beta, tref = leak
        o = self.cell_owner
        with np.errstate(over="ignore"):
            return p0[o] * self.cell_fracs * np.exp(beta[o] * (T[self.cell_nodes] - tref[o]))

    def block_stats(self, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(max, mean) temperature per block in block order."""
        vals = T[self.cell_nodes]
        starts = self.cell_ptr[:-1]
        return np.maximum.reduceat(vals, starts), np.add.reduceat(vals * self.cell_fracs, starts)

    def layer_peaks(self, T: np.ndarray) -> list[tuple[LayerInfo, float]]:
        return [(info, float(T[info.start:info.stop].max())) for info in self.layers]

    # -- factorizations ---------------------------------------------------

    def _solver(self, key, build):
        solver = self._factors.get(key)
        if solver is None:
            solver = _Solver(build())
            self._factors[key] = solver
        return solver

    def transient_solver(self, h: float):
        return self._solver(("be", h), lambda: self.G + sp.diags(self.C / h))

    def steady_solver(self):
        return self._solver("ss", lambda: self.G)


class _Solver:
    """Symmetric positive definite solve: dense inverse when small, sparse LU otherwise."""

    def __init__(self, A):
        A = sp.csc_matrix(A)
        n = A.shape[0]
        self.dense = n <= _DENSE_LIMIT
        try:
            if self.dense:
                cf = scipy.linalg.cho_factor(A.toarray())
                self.inv = scipy.linalg.cho_solve(cf, np.eye(n))
            else:
                self.lu = spla.splu(A)
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            raise InternalError(f"singular thermal system: {exc}") from None

    def __call__(self, b: np.ndarray) -> np.ndarray:
        if self.dense:
            return self.inv @ b
        return self.lu.solve(b)


def lumped_network(conductances, capacitances, blocks, ambient_temperature=318.15) -> ThermalNetwork:
    """Network from explicit matrices (row sums = ambient coupling).

    ``blocks`` maps a block name to a list of ``(node, area_fraction)``.
    """
    G = np.atleast_2d(np.asarray(conductances, dtype=float))
    C = np.atleast_1d(np.asarray(capacitances, dtype=float))
    return ThermalNetwork(G, C, dict(blocks), ambient_temperature)


def build_network(stacks: Sequence, grid=(8, 8), ambient: AmbientSpec = AmbientSpec()) -> ThermalNetwork:
    """Discretise each stack on a ``rows x cols`` grid and couple it to its own spreader and sink."""
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise InvalidArgument("grid must be at least 1x1")
    stacks = [st if isinstance(st, Stack) else Stack(*st) for st in stacks]
    if not stacks:
        raise InvalidArgument("no stacks given")

    I, J, V = [], [], []
    caps = []
    ambient_g = []
    block_cells: dict[str, list[tuple[int, float]]] = {}
    dissipating = []
    areas = []
    layer_infos = []
    stack_nodes = {}
    base = 0
    per_layer = rows * cols

    def edge(a, b, g):
        I.extend((a, b))
        J.extend((b, a))
        V.extend((-g, -g))

    for st in stacks:
        layers: list[LayerSpec] = sorted(st.layers, key=lambda l: l.index)
        if not layers:
            raise ValidationError(f"stack {st.stack_id} has no layers")
        W, H = stack_die_size(layers)
        dx, dy = W / cols, H / rows
        area = dx * dy
        n_cells = len(layers) * per_layer
        spreader, sink = base + n_cells, base + n_cells + 1
        r_idx, c_idx = np.divmod(np.arange(per_layer), cols)

        for li, layer in enumerate(layers):
            off = base + li * per_layer
            k, t = layer.conductivity, layer.thickness
            layer_infos.append(LayerInfo(st.stack_id, layer.index, layer.kind, off, off + per_layer))
            caps.extend([layer.volumetric_heat_capacity * t * area] * per_layer)
            gx, gy = k * t * dy / dx, k * t * dx / dy
            for r in range(rows):
                for c in range(cols):
                    n = off + r * cols + c
                    if c + 1 < cols:
                        edge(n, n + 1, gx)
                    if r + 1 < rows:
                        edge(n, n + cols, gy)
            if li + 1 < len(layers):
                up = layers[li + 1]
                g = 1.0 / (t / (2 * k * area) + up.thickness / (2 * up.conductivity * area))
                for n in range(per_layer):
                    edge(off + n, off + per_layer + n, g)
            else:
                g = 2 * k * area / t
                for n in range(per_layer):
                    edge(off + n, spreader, g)
            if layer.floorplan is None:
                continue
            for b in layer.floorplan:
                if b.right > W * (1 + 1e-9) or b.top > H * (1 + 1e-9):
                    raise ValidationError(f"block {b.name} lies outside the die of stack {st.stack_id}")
                if b.name in block_cells:
                    raise ValidationError(f"duplicate block name {b.name!r}")
                block_cells[b.name] = _cover(b, dx, dy, rows, cols, off)
                dissipating.append(layer.dissipates_power)
                areas.append(b.area)
        del r_idx, c_idx

        edge(spreader, sink, 1.0 / ambient.spreader_to_sink_resistance)
        r_conv = ambient.sink_to_ambient_resistance
        if st.air_cooled:
            r_conv *= ambient.convection_multiplier_aircooled
        caps.extend([ambient.spreader_capacity, ambient.sink_capacity])
        n_total = n_cells + 2
        ambient_g.append((sink, 1.0 / r_conv))
        stack_nodes[st.stack_id] = (base, base + n_total)
        base += n_total

    n = base
    off = sp.coo_matrix((V, (I, J)), shape=(n, n)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    for node, g in ambient_g:
        diag[node] += g
    G = off + sp.diags(diag)
    return ThermalNetwork(G, caps, block_cells, ambient.ambient_temperature, rows, cols, layer_infos,
                          dissipating, stack_nodes, areas)


def _cover(b, dx, dy, rows, cols, offset) -> list[tuple[int, float]]:
    """Cells overlapped by a block, weighted by overlap area / block area."""
    c0 = max(0, int(math.floor(b.x / dx + 1e-9)))
    c1 = min(cols, int(math.ceil(b.right / dx - 1e-9)))
    r0 = max(0, int(math.floor(b.y / dy + 1e-9)))
    r1 = min(rows, int(math.ceil(b.top / dy - 1e-9)))
    out = []
    for r in range(r0, r1):
        h = min(b.top, (r + 1) * dy) - max(b.y, r * dy)
        if h <= 0:
            continue
        for c in range(c0, c1):
            w = min(b.right, (c + 1) * dx) - max(b.x, c * dx)
            if w > 0:
                out.append((offset + r * cols + c, w * h))
    total = sum(a for _, a in out)
    if total <= 0:
        raise ValidationError(f"block {b.name} covers no grid cell")
    return [(node, a / total) for node, a in out]


def ambient_state(net: ThermalNetwork, time: float = 0.0) -> ThermalState:
    return ThermalState(np.full(net.n_nodes, net.ambient_temperature), time)


def uniform_state(net: ThermalNetwork, temperature: float, time: float = 0.0) -> ThermalState:
    return ThermalState(np.full(net.n_nodes, float(temperature)), time)


def transient_step(net: ThermalNetwork, state: ThermalState, block_powers, leakage_fits=None,
                   dt: float = 1e-3, substeps: int = 4) -> ThermalState:
    """Advance ``dt`` seconds with backward Euler over ``substeps`` increments.

    Conduction is implicit; leakage is evaluated at the temperature at the
    start of each substep.  The returned state carries the mean leakage power
    per block over the step.
    """
    if not dt > 0:
        raise InvalidArgument("dt must be > 0")
    if substeps < 1:
        raise InvalidArgument("substeps must be >= 1")
    T = np.asarray(state.temperatures, dtype=float)
    if T.shape != (net.n_nodes,):
        raise InvalidArgument("state does not match network")
    if not np.isfinite(T).all():
        bad = int(np.flatnonzero(~np.isfinite(T))[0])
        raise NumericalError(f"non-finite temperature at node {bad}", node=bad)
    p = net.power_vector(block_powers)
    leak = net.leakage_arrays(leakage_fits)
    h = dt / substeps
    solve = net.transient_solver(h)
    amb = net.ambient_temperature
    c_h = net.C / h
    p_nodes = net.distribute(p)
    theta = T - amb
    leak_sum = np.zeros(net.n_blocks)
    injected = 0.0
    for _ in range(substeps):
        if leak is None:
            q = p_nodes
        else:
            entries = net._leak_entries(theta + amb, leak)
            leak_sum += np.bincount(net.cell_owner, weights=entries, minlength=net.n_blocks)
            q = p_nodes + np.bincount(net.cell_nodes, weights=entries, minlength=net.n_nodes)
        total = float(q.sum())
        if not math.isfinite(total):
            bad = int(np.flatnonzero(~np.isfinite(q))[0]) if not np.isfinite(q).all() else int(np.argmax(q))
            raise NumericalError(f"non-finite power at node {bad}", node=bad)
        injected += total
        theta = solve(c_h * theta + q)
    T_new = theta + amb
    bad = np.flatnonzero(~np.isfinite(T_new))
    if bad.size:
        raise NumericalError(f"non-finite temperature at node {bad[0]}", node=int(bad[0]))
    return ThermalState(T_new, state.time + dt, leak_sum / substeps, injected / substeps)


def steady_state(net: ThermalNetwork, block_powers, leakage_fits=None, tol: float = STEADY_TOL_K,
                 max_iter: int = STEADY_MAX_ITER, guard: float = RUNAWAY_GUARD_K) -> ThermalState:
    """Fixed point of ``G (T - T_amb) = P(T)`` starting from ambient."""
    p = net.power_vector(block_powers)
    leak = net.leakage_arrays(leakage_fits)
    solve = net.steady_solver()
    amb = net.ambient_temperature
    p_nodes = net.distribute(p)
    theta = np.zeros(net.n_nodes)
    leak_blocks = np.zeros(net.n_blocks)
    for _ in range(max_iter):
        if leak is None:
            rhs = p_nodes
        else:
            entries = net._leak_entries(theta + amb, leak)
            leak_blocks = np.bincount(net.cell_owner, weights=entries, minlength=net.n_blocks)
            rhs = p_nodes + np.bincount(net.cell_nodes, weights=entries, minlength=net.n_nodes)
        new = solve(rhs)
        T_new = new + amb
        if not np.isfinite(T_new).all() or T_new.max() > guard:
            raise ThermalRunawayError(
                f"leakage feedback diverged (temperature beyond {guard} K) near {_hottest_block(net, T_new)}",
                block=_hottest_block(net, T_new))
        done = np.abs(new - theta).max() < tol
        theta = new
        if done or leak is None:
            return ThermalState(theta + amb, 0.0, leak_blocks)
    raise ThermalRunawayError(f"leakage fixed point not reached in {max_iter} iterations",
                              block=_hottest_block(net, theta + amb))


def _hottest_block(net: ThermalNetwork, T: np.ndarray) -> Optional[str]:
    if not net.n_blocks:
        return None
    T = np.where(np.isfinite(T), T, np.inf)
    mx, _ = net.block_stats(T)
    return net.block_names[int(np.argmax(mx))]


def block_temperatures(net: ThermalNetwork, state: ThermalState, names: Optional[Sequence[str]] = None
                       ) -> dict[str, BlockTemp]:
    """Area-weighted mean and maximum cell temperature per block."""
    T = np.asarray(state.temperatures)
    if T.shape != (net.n_nodes,):
        raise InvalidArgument("state does not match network")
    mx, mean = net.block_stats(T)
    if names is None:
        idx = range(net.n_blocks)
    else:
        idx = [net._index(n) for n in names]
    return {net.block_names[i]: BlockTemp(float(mx[i]), float(mean[i])) for i in idx}


def total_power_to_ambient(net: ThermalNetwork, state: ThermalState) -> float:
    """Heat flowing into the ambient reference at this state."""
    return float(net.ambient_conductance() @ (state.temperatures - net.ambient_temperature))


def dump_network(net: ThermalNetwork, path) -> None:
    """Text dump: node capacitances, then conductance triplets."""
    G = net.G.tocoo()
    with open(path, "w") as f:
        f.write(f"# nodes {net.n_nodes}\n# capacitance J/K\n")
        for i, c in enumerate(net.C.tolist()):
            f.write(f"C {i} {c!r}\n")
        f.write("# conductance W/K (row col value)\n")
        for i, j, v in sorted(zip(G.row.tolist(), G.col.tolist(), G.data.tolist())):
            f.write(f"G {i} {j} {v!r}\n")
