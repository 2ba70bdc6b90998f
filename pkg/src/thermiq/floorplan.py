"""Floorplans, layer stacks and their on-disk formats.

Floorplan files (``.flp``) use the HotSpot column order, one block per line::

    <name>  <width>  <height>  <x>  <y>

in meters, tab separated, ``#`` comments.  A ``# bounds <w> <h>`` comment
records the die size when it is larger than the block extents.

Layer configuration files (``.lcf``) are sequences of records::

    layer 0
    kind ACTIVE_MEMORY
    thickness 0.0001
    conductivity 120
    capacity 1750000
    floorplan mem_L0.flp      # or: uniform
    power yes

Index 0 is the layer farthest from the heat sink.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

from .errors import InvalidArgument, ParseError, ValidationError

AREA_TOL = 1e-12  # m^2
_EDGE_TOL = 1e-12  # m


@dataclass(frozen=True)
class Block:
    name: str
    x: float
    y: float
    width: float
    height: float

    def __post_init__(self):
        if not self.name or any(c.isspace() for c in self.name):
            raise ValidationError(f"invalid block name {self.name!r}")
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(f"block {self.name}: width and height must be > 0")
        if self.x < 0 or self.y < 0:
            raise ValidationError(f"block {self.name}: negative position")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.width, self.height)):
            raise ValidationError(f"block {self.name}: non-finite geometry")

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def right(self) -> float:
        return self.x + self.width

    @property
    def top(self) -> float:
        return self.y + self.height

    def overlap_area(self, other: "Block") -> float:
        w = min(self.right, other.right) - max(self.x, other.x)
        h = min(self.top, other.top) - max(self.y, other.y)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def moved(self, dx: float, dy: float, name: Optional[str] = None) -> "Block":
        return Block(name or self.name, self.x + dx, self.y + dy, self.width, self.height)


@dataclass(frozen=True)
class Floorplan:
    """Ordered blocks inside a bounding rectangle.

    Block order is significant: trace files list blocks in this order.
    """

    blocks: tuple[Block, ...]
    bounding_width: float
    bounding_height: float

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not (self.bounding_width > 0 and self.bounding_height > 0):
            raise ValidationError("floorplan bounding box must be positive")
        seen = set()
        for b in self.blocks:
            if b.name in seen:
                raise ValidationError(f"duplicate block name {b.name!r}")
            seen.add(b.name)
            if b.right > self.bounding_width + _EDGE_TOL or b.top > self.bounding_height + _EDGE_TOL:
                raise ValidationError(f"block {b.name} lies outside the die bounds")
        _check_overlaps(self.blocks)

    @classmethod
    def from_blocks(cls, blocks: Sequence[Block], width=None, height=None) -> "Floorplan":
        """Build a floorplan whose bounding box defaults to the block extents."""
        if not blocks and (width is None or height is None):
            raise InvalidArgument("empty floorplan needs explicit bounds")
        w = max((b.right for b in blocks), default=0.0)
        h = max((b.top for b in blocks), default=0.0)
        return cls(tuple(blocks), width if width is not None else w, height if height is not None else h)

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.blocks]

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise InvalidArgument(f"unknown block {name!r}")

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def with_bounds(self, width: float, height: float) -> "Floorplan":
        return Floorplan(self.blocks, width, height)

    def translated(self, dx: float, dy: float) -> "Floorplan":
        return Floorplan(
            tuple(b.moved(dx, dy) for b in self.blocks),
            self.bounding_width + dx,
            self.bounding_height + dy,
        )


def _check_overlaps(blocks: Sequence[Block]) -> None:
    # sweep on x keeps this near-linear for grid floorplans
    order = sorted(blocks, key=lambda b: b.x)
    active: list[Block] = []
    for b in order:
        active = [a for a in active if a.right > b.x + _EDGE_TOL]
        for a in active:
            if a.overlap_area(b) > AREA_TOL:
                raise ValidationError(f"blocks {a.name} and {b.name} overlap")
        active.append(b)


class LayerKind(Enum):
    ACTIVE_CORE = "ACTIVE_CORE"
    ACTIVE_MEMORY = "ACTIVE_MEMORY"
    LOGIC_CORE_LAYER = "LOGIC_CORE_LAYER"
    TIM = "TIM"
    INTERPOSER = "INTERPOSER"
    SPREADER = "SPREADER"

    @property
    def can_dissipate(self) -> bool:
        return self in (LayerKind.ACTIVE_CORE, LayerKind.ACTIVE_MEMORY, LayerKind.LOGIC_CORE_LAYER)


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: LayerKind
    thickness: float
    conductivity: float
    volumetric_heat_capacity: float
    floorplan: Optional[Floorplan]  # None means UNIFORM
    dissipates_power: bool

    def __post_init__(self):
        if self.thickness <= 0:
            raise ValidationError(f"layer {self.index}: thickness must be > 0")
        if self.conductivity <= 0:
            raise ValidationError(f"layer {self.index}: conductivity must be > 0")
        if self.volumetric_heat_capacity <= 0:
            raise ValidationError(f"layer {self.index}: heat capacity must be > 0")
        if self.dissipates_power and not self.kind.can_dissipate:
            raise ValidationError(f"layer {self.index}: {self.kind.value} layers cannot dissipate power")
        if self.dissipates_power and self.floorplan is None:
            raise ValidationError(f"layer {self.index}: power-dissipating layer needs a floorplan")


class StackKind(Enum):
    EXT_2D = "2d-ext"
    EXT_3D = "3d-ext"
    INTERPOSED_2_5D = "2.5d"
    STACKED_3D = "3d-stacked"

    @classmethod
    def parse(cls, text: str) -> "StackKind":
        t = text.strip().lower()
        for k in cls:
            if t in (k.value, k.name.lower()):
                return k
        raise InvalidArgument(f"unknown stack kind {text!r}")


@dataclass(frozen=True)
class Materials:
    """Layer material defaults. Silicon-like dies, a thin TIM, silicon interposer."""

    si_conductivity: float = 120.0
    si_capacity: float = 1.75e6
    core_thickness: float = 1.0e-4
    mem_thickness: float = 1.0e-4
    # effective value for a memory die including its die-to-die bond
    mem_conductivity: float = 120.0
    tim_conductivity: float = 4.0
    tim_thickness: float = 2.0e-5
    tim_capacity: float = 4.0e6
    interposer_thickness: float = 2.0e-4


@dataclass(frozen=True)
class StackConfig:
    kind: StackKind
    cores: int = 4  # per core layer
    core_width: float = 4e-3
    core_height: float = 4e-3
    core_layers: int = 1
    mem_banks_x: int = 4
    mem_banks_y: int = 4
    mem_layers: int = 8
    bank_width: float = 2e-3
    bank_height: float = 2e-3
    gap_2_5d: float = 1e-3
    core_template: Optional[Floorplan] = None
    materials: Materials = field(default_factory=Materials)

    def __post_init__(self):
        for name in ("cores", "core_layers", "mem_banks_x", "mem_banks_y", "mem_layers"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        for name in ("core_width", "core_height", "bank_width", "bank_height"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be > 0")
        if self.gap_2_5d < 0:
            raise InvalidArgument("gap_2_5d must be >= 0")

    @property
    def core_grid(self) -> tuple[int, int]:
        return core_grid_shape(self.cores)

    @property
    def banks_per_layer(self) -> int:
        return self.mem_banks_x * self.mem_banks_y


class Stack(NamedTuple):
    stack_id: str
    layers: list[LayerSpec]
    air_cooled: bool = False

    @property
    def die_size(self) -> tuple[float, float]:
        return stack_die_size(self.layers)

    def blocks(self) -> list[Block]:
        return [b for layer in self.layers if layer.floorplan is not None for b in layer.floorplan]


def stack_die_size(layers: Sequence[LayerSpec]) -> tuple[float, float]:
    fps = [l.floorplan for l in layers if l.floorplan is not None]
    if not fps:
        raise ValidationError("stack has no floorplan to define the die size")
    return max(f.bounding_width for f in fps), max(f.bounding_height for f in fps)


def core_grid_shape(n: int) -> tuple[int, int]:
    """(rows, cols) for ``n`` cores: the most square factorisation, rows <= cols."""
    if n < 1:
        raise InvalidArgument("core count must be >= 1")
    rows = int(math.isqrt(n))
    while n % rows:
        rows -= 1
    return rows, n // rows


def generate_grid_floorplan(
    rows: int, cols: int, cell_w: float, cell_h: float, prefix: str, start_index: int = 0
) -> Floorplan:
    """Regular ``rows x cols`` grid of blocks named ``<prefix>_<i>`` in row-major order."""
    if rows < 1 or cols < 1:
        raise InvalidArgument("rows and cols must be >= 1")
    if not (cell_w > 0 and cell_h > 0):
        raise InvalidArgument("cell dimensions must be > 0")
    blocks = []
    for r in range(rows):
        for c in range(cols):
            i = start_index + r * cols + c
            blocks.append(Block(f"{prefix}_{i}", c * cell_w, r * cell_h, cell_w, cell_h))
    return Floorplan(tuple(blocks), cols * cell_w, rows * cell_h)


def replicate_core_template(template: Floorplan, rows: int, cols: int, start_index: int = 0) -> Floorplan:
    """Tile a per-core floorplan over a ``rows x cols`` core grid.

    Copy ``k`` (row-major) is shifted by the template's bounding box and each
    sub-block is renamed ``<name>_<k>``.
    """
    if rows < 1 or cols < 1:
        raise InvalidArgument("rows and cols must be >= 1")
    if len(template) == 0:
        raise InvalidArgument("core template is empty")
    try:
        _check_overlaps(template.blocks)
    except ValidationError as exc:
        raise InvalidArgument(f"core template: {exc}") from None
    tw, th = template.bounding_width, template.bounding_height
    blocks = []
    for r in range(rows):
        for c in range(cols):
            k = start_index + r * cols + c
            for b in template.blocks:
                blocks.append(b.moved(c * tw, r * th, f"{b.name}_{k}"))
    return Floorplan(tuple(blocks), cols * tw, rows * th)


def _core_floorplan(cfg: StackConfig, layer: int) -> Floorplan:
    rows, cols = cfg.core_grid
    start = layer * cfg.cores
    if cfg.core_template is not None:
        return replicate_core_template(cfg.core_template, rows, cols, start_index=start)
    return generate_grid_floorplan(rows, cols, cfg.core_width, cfg.core_height, "C", start_index=start)


def _bank_floorplan(cfg: StackConfig, layer: int) -> Floorplan:
    return generate_grid_floorplan(
        cfg.mem_banks_y, cfg.mem_banks_x, cfg.bank_width, cfg.bank_height, "B",
        start_index=layer * cfg.banks_per_layer,
    )


def _logic_floorplan(cfg: StackConfig) -> Floorplan:
    return generate_grid_floorplan(cfg.mem_banks_y, cfg.mem_banks_x, cfg.bank_width, cfg.bank_height, "LC")


def _merge(fps: Sequence[Floorplan], width: float, height: float) -> Floorplan:
    return Floorplan(tuple(b for fp in fps for b in fp.blocks), width, height)


def build_stack(cfg: StackConfig) -> list[Stack]:
    """Layer stacks for one core-memory configuration.

    Off-package kinds return a core stack and a memory stack; the packaged
    kinds return a single stack.  Every sink-cooled stack ends with a TIM
    layer; the spreader and sink themselves are lumped thermal nodes.
    """
    m = cfg.materials
    kind = cfg.kind

    def layer(i, lk, fp, power=True, thickness=None, k=None, cap=None):
        if thickness is None:
            thickness = m.mem_thickness if lk is LayerKind.ACTIVE_MEMORY else m.core_thickness
        if k is None:
            k = m.mem_conductivity if lk is LayerKind.ACTIVE_MEMORY else m.si_conductivity
        return LayerSpec(i, lk, thickness, k, cap or m.si_capacity, fp, power)

    def tim(i):
        return LayerSpec(i, LayerKind.TIM, m.tim_thickness, m.tim_conductivity, m.tim_capacity, None, False)

    if kind in (StackKind.EXT_2D, StackKind.INTERPOSED_2_5D) and cfg.core_layers != 1:
        raise InvalidArgument(f"{kind.value} supports exactly one core layer")
    if kind is StackKind.EXT_2D and cfg.mem_layers != 1:
        raise InvalidArgument("2d-ext memory is a single DRAM layer (mem_layers must be 1)")

    if kind in (StackKind.EXT_2D, StackKind.EXT_3D):
        core_layers = [layer(i, LayerKind.ACTIVE_CORE, _core_floorplan(cfg, i)) for i in range(cfg.core_layers)]
        core_layers.append(tim(len(core_layers)))
        core = Stack("core", core_layers)
        if kind is StackKind.EXT_2D:
            mem = Stack("mem", [layer(0, LayerKind.ACTIVE_MEMORY, _bank_floorplan(cfg, 0))], air_cooled=True)
        else:
            mem_layers = [layer(0, LayerKind.LOGIC_CORE_LAYER, _logic_floorplan(cfg), k=m.si_conductivity,
                                thickness=m.core_thickness)]
            for j in range(cfg.mem_layers):
                mem_layers.append(layer(j + 1, LayerKind.ACTIVE_MEMORY, _bank_floorplan(cfg, j)))
            mem_layers.append(tim(len(mem_layers)))
            mem = Stack("mem", mem_layers)
        return [core, mem]

    if kind is StackKind.INTERPOSED_2_5D:
        cores = _core_floorplan(cfg, 0)
        banks0 = _bank_floorplan(cfg, 0)
        x_mem = cores.bounding_width + cfg.gap_2_5d
        width = x_mem + banks0.bounding_width
        height = max(cores.bounding_height, banks0.bounding_height)
        layers = [LayerSpec(0, LayerKind.INTERPOSER, m.interposer_thickness, m.si_conductivity,
                            m.si_capacity, None, False)]
        base = _merge([cores, _logic_floorplan(cfg).translated(x_mem, 0)], width, height)
        layers.append(layer(1, LayerKind.ACTIVE_CORE, base))
        for j in range(cfg.mem_layers):
            fp = _bank_floorplan(cfg, j).translated(x_mem, 0)
            layers.append(layer(j + 2, LayerKind.ACTIVE_MEMORY, fp.with_bounds(width, height)))
        layers.append(tim(len(layers)))
        return [Stack("pkg", layers)]

    if kind is StackKind.STACKED_3D:
        c0 = _core_floorplan(cfg, 0)
        b0 = _bank_floorplan(cfg, 0)
        width = max(c0.bounding_width, b0.bounding_width)
        height = max(c0.bounding_height, b0.bounding_height)
        layers = []
        for j in range(cfg.mem_layers):
            layers.append(layer(j, LayerKind.ACTIVE_MEMORY, _bank_floorplan(cfg, j).with_bounds(width, height)))
        for i in range(cfg.core_layers):
            fp = _core_floorplan(cfg, i).with_bounds(width, height)
            layers.append(layer(cfg.mem_layers + i, LayerKind.ACTIVE_CORE, fp))
        layers.append(tim(len(layers)))
        return [Stack("pkg", layers)]

    raise InvalidArgument(f"unsupported stack kind {kind}")


# ---------------------------------------------------------------------------
# file formats


def format_flp(fp: Floorplan) -> str:
    lines = ["# name\twidth\theight\tx\ty", f"# bounds {fp.bounding_width!r} {fp.bounding_height!r}"]
    for b in fp.blocks:
        lines.append(f"{b.name}\t{b.width!r}\t{b.height!r}\t{b.x!r}\t{b.y!r}")
    return "\n".join(lines) + "\n"


def parse_flp(text: str, path=None) -> Floorplan:
    blocks = []
    bounds = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 3 and parts[0] == "bounds":
                try:
                    bounds = (float(parts[1]), float(parts[2]))
                except ValueError:
                    raise ParseError("bad bounds comment", lineno, path) from None
            continue
        line = line.split("#", 1)[0]
        fields = line.split()
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields (name width height x y), got {len(fields)}", lineno, path)
        try:
            w, h, x, y = (float(v) for v in fields[1:])
        except ValueError:
            raise ParseError("non-numeric geometry", lineno, path) from None
        try:
            blocks.append(Block(fields[0], x, y, w, h))
        except ValidationError as exc:
            raise ParseError(str(exc), lineno, path) from None
    if bounds is None:
        return Floorplan.from_blocks(blocks)
    return Floorplan(tuple(blocks), *bounds)


def read_flp(path) -> Floorplan:
    path = Path(path)
    return parse_flp(path.read_text(), path)


def write_flp(path, fp: Floorplan) -> None:
    Path(path).write_text(format_flp(fp))


def format_lcf(layers: Sequence[LayerSpec], flp_names: Sequence[Optional[str]]) -> str:
    out = []
    for layer, name in zip(layers, flp_names):
        out += [
            f"layer {layer.index}",
            f"kind {layer.kind.value}",
            f"thickness {layer.thickness!r}",
            f"conductivity {layer.conductivity!r}",
            f"capacity {layer.volumetric_heat_capacity!r}",
            f"floorplan {name if name else 'uniform'}",
            f"power {'yes' if layer.dissipates_power else 'no'}",
            "",
        ]
    return "\n".join(out)


_LCF_KEYS = ("kind", "thickness", "conductivity", "capacity", "floorplan", "power")


def parse_lcf(text: str, base_dir=".", path=None) -> list[LayerSpec]:
    """Parse a layer configuration; floorplan paths resolve against ``base_dir``."""
    base_dir = Path(base_dir)
    records: list[tuple[int, int, dict]] = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ParseError(f"expected '<key> <value>', got {line!r}", lineno, path)
        key, value = parts[0].lower(), parts[1].strip()
        if key == "layer":
            try:
                idx = int(value)
            except ValueError:
                raise ParseError(f"bad layer index {value!r}", lineno, path) from None
            current = {}
            records.append((idx, lineno, current))
            continue
        if current is None:
            raise ParseError(f"{key!r} before any 'layer' record", lineno, path)
        if key not in _LCF_KEYS:
            raise ParseError(f"unknown key {key!r}", lineno, path)
        if key in current:
            raise ParseError(f"duplicate key {key!r}", lineno, path)
        current[key] = (value, lineno)

    layers = []
    for expected, (idx, lineno, rec) in enumerate(records):
        if idx != expected:
            raise ParseError(f"layer indices must be consecutive from 0, got {idx}", lineno, path)
        missing = [k for k in _LCF_KEYS if k not in rec]
        if missing:
            raise ParseError(f"layer {idx} missing {', '.join(missing)}", lineno, path)
        try:
            kind = LayerKind(rec["kind"][0].upper())
        except ValueError:
            raise ParseError(f"unknown layer kind {rec['kind'][0]!r}", rec["kind"][1], path) from None
        nums = {}
        for key in ("thickness", "conductivity", "capacity"):
            try:
                nums[key] = float(rec[key][0])
            except ValueError:
                raise ParseError(f"bad {key} {rec[key][0]!r}", rec[key][1], path) from None
        power = rec["power"][0].lower()
        if power not in ("yes", "no"):
            raise ParseError("power must be yes or no", rec["power"][1], path)
        fp_ref = rec["floorplan"][0]
        fp = None if fp_ref.lower() == "uniform" else read_flp(base_dir / fp_ref)
        try:
            layers.append(LayerSpec(idx, kind, nums["thickness"], nums["conductivity"], nums["capacity"],
                                    fp, power == "yes"))
        except ValidationError as exc:
            raise ParseError(str(exc), lineno, path) from None
    return layers


def read_lcf(path) -> list[LayerSpec]:
    path = Path(path)
    return parse_lcf(path.read_text(), path.parent, path)


def write_stacks(directory, stacks: Sequence[Stack]) -> list[Path]:
    """Write ``stacks.txt`` plus one ``.lcf`` and per-layer ``.flp`` files per stack."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _check_unique_names(stacks)
    written = []
    index_lines = ["# stack_id\tlayer_file\tcooling"]
    for st in stacks:
        names = []
        for layer in st.layers:
            if layer.floorplan is None:
                names.append(None)
                continue
            name = f"{st.stack_id}_L{layer.index}.flp"
            write_flp(directory / name, layer.floorplan)
            written.append(directory / name)
            names.append(name)
        lcf = directory / f"{st.stack_id}.lcf"
        lcf.write_text(format_lcf(st.layers, names))
        written.append(lcf)
        index_lines.append(f"{st.stack_id}\t{lcf.name}\t{'air' if st.air_cooled else 'sink'}")
    idx = directory / "stacks.txt"
    idx.write_text("\n".join(index_lines) + "\n")
    written.append(idx)
    return written


def read_stacks(directory) -> list[Stack]:
    directory = Path(directory)
    index = directory / "stacks.txt"
    stacks = []
    for lineno, raw in enumerate(index.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3 or fields[2] not in ("air", "sink"):
            raise ParseError("expected '<stack_id> <layer_file> <air|sink>'", lineno, index)
        stacks.append(Stack(fields[0], read_lcf(directory / fields[1]), fields[2] == "air"))
    _check_unique_names(stacks)
    return stacks


def _check_unique_names(stacks: Sequence[Stack]) -> None:
    seen = set()
    for st in stacks:
        for b in st.blocks():
            if b.name in seen:
                raise ValidationError(f"duplicate block name {b.name!r} across layers")
            seen.add(b.name)


def all_blocks(stacks: Sequence[Stack]) -> list[Block]:
    """Blocks of every stack in canonical trace order (stack, layer, floorplan order)."""
    return [b for st in stacks for b in st.blocks()]


def block_locations(stacks: Sequence[Stack]) -> dict[str, tuple[str, int, LayerKind]]:
    """Map block name to (stack id, layer index, layer kind)."""
    out = {}
    for st in stacks:
        for layer in st.layers:
            if layer.floorplan is None:
                continue
            for b in layer.floorplan:
                out[b.name] = (st.stack_id, layer.index, layer.kind)
    return out


def with_materials(cfg: StackConfig, **changes) -> StackConfig:
    return replace(cfg, materials=replace(cfg.materials, **changes))


def is_memory_block(name: str) -> bool:
    """Bank and logic-core blocks belong to the memory group; everything else is core."""
    return name.startswith("B_") or name.startswith("LC_")


def write_stack_files(directory, cfg: StackConfig) -> list[Path]:
    return write_stacks(directory, build_stack(cfg))


def resolve(path, base) -> Path:
    p = Path(os.path.expanduser(str(path)))
    return p if p.is_absolute() else Path(base) / p
