"""Per-layer thermal map frames (binary PPM) from temperature traces."""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import data_path
from . import floorplan as fp
from .errors import IntegrityError, InvalidArgument, ValidationError

BORDER = (0, 0, 0)
BACKGROUND = (48, 48, 48)
LABEL_FG = (255, 255, 255)
PANEL_GAP = 4
LABEL_H = 9

# 3x5 glyphs, rows top to bottom, '#' = lit
_GLYPHS = {
    "0": "###|#.#|#.#|#.#|###", "1": ".#.|##.|.#.|.#.|###", "2": "###|..#|###|#..|###",
    "3": "###|..#|.##|..#|###", "4": "#.#|#.#|###|..#|..#", "5": "###|#..|###|..#|###",
    "6": "###|#..|###|#.#|###", "7": "###|..#|.#.|.#.|.#.", "8": "###|#.#|###|#.#|###",
    "9": "###|#.#|###|..#|###", "A": ".#.|#.#|###|#.#|#.#", "B": "##.|#.#|##.|#.#|##.",
    "C": ".##|#..|#..|#..|.##", "D": "##.|#.#|#.#|#.#|##.", "E": "###|#..|##.|#..|###",
    "F": "###|#..|##.|#..|#..", "G": ".##|#..|#.#|#.#|.##", "H": "#.#|#.#|###|#.#|#.#",
    "I": "###|.#.|.#.|.#.|###", "J": "..#|..#|..#|#.#|.#.", "K": "#.#|#.#|##.|#.#|#.#",
    "L": "#..|#..|#..|#..|###", "M": "#.#|###|###|#.#|#.#", "N": "##.|#.#|#.#|#.#|#.#",
    "O": ".#.|#.#|#.#|#.#|.#.", "P": "##.|#.#|##.|#..|#..", "Q": ".#.|#.#|#.#|##.|.##",
    "R": "##.|#.#|##.|#.#|#.#", "S": ".##|#..|.#.|..#|##.", "T": "###|.#.|.#.|.#.|.#.",
    "U": "#.#|#.#|#.#|#.#|###", "V": "#.#|#.#|#.#|#.#|.#.", "W": "#.#|#.#|###|###|#.#",
    "X": "#.#|#.#|.#.|#.#|#.#", "Y": "#.#|#.#|.#.|.#.|.#.", "Z": "###|..#|.#.|#..|###",
    " ": "...|...|...|...|...", "-": "...|...|###|...|...", "_": "...|...|...|...|###",
    ".": "...|...|...|...|.#.", ":": "...|.#.|...|.#.|...",
}


@lru_cache(maxsize=1)
def load_colormap() -> np.ndarray:
    """The shipped 256-entry blue-to-red ramp as a (256, 3) uint8 array."""
    rows = []
    for line in data_path("colormap.txt").read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rows.append([int(x) for x in line.split()])
    cmap = np.asarray(rows, dtype=np.uint8)
    if cmap.shape != (256, 3):
        raise ValidationError("colormap must have 256 RGB rows")
    cmap.setflags(write=False)
    return cmap


def color_index(T, t_min: float, t_max: float):
    """Colormap index of ``clamp(T, t_min, t_max)`` on a linear 256-bin ramp."""
    if not t_min < t_max:
        raise InvalidArgument("t_min must be below t_max")
    x = (np.clip(np.asarray(T, dtype=float), t_min, t_max) - t_min) / (t_max - t_min)
    idx = np.minimum(np.floor(x * 256.0), 255).astype(np.int64)
    return idx if idx.ndim else int(idx)


@dataclass(frozen=True)
class RenderConfig:
    t_min: Optional[float] = None  # K; None = auto from the trace
    t_max: Optional[float] = None
    sampling_every: int = 1
    layers: Optional[tuple] = None  # None = all; entries "stack:index" or "index"
    cell_pixels: int = 8
    fps: float = 10.0
    field: str = "max"  # temperature trace used: "max" or "mean"

    def __post_init__(self):
        if self.sampling_every < 1:
            raise InvalidArgument("sampling_every must be >= 1")
        if self.cell_pixels < 1:
            raise InvalidArgument("cell_pixels must be >= 1")
        if self.t_min is not None and self.t_max is not None and not self.t_min < self.t_max:
            raise InvalidArgument("t_min must be below t_max")
        if self.field not in ("max", "mean"):
            raise InvalidArgument("field must be 'max' or 'mean'")


def _text(img: np.ndarray, x: int, y: int, text: str, color=LABEL_FG) -> None:
    for ch in text.upper():
        glyph = _GLYPHS.get(ch, _GLYPHS["-"])
        for r, row in enumerate(glyph.split("|")):
            for c, bit in enumerate(row):
                yy, xx = y + r, x + c
                if bit == "#" and 0 <= yy < img.shape[0] and 0 <= xx < img.shape[1]:
                    img[yy, xx] = color
        x += 4


def _panel(floorplan: fp.Floorplan, temps: Mapping[str, float], t_min, t_max, scale: float) -> np.ndarray:
    w = max(1, int(math.ceil(floorplan.bounding_width * scale - 1e-9)))
    h = max(1, int(math.ceil(floorplan.bounding_height * scale - 1e-9)))
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    cmap = load_colormap()
    for b in floorplan.blocks:
        if b.name not in temps:
            raise ValidationError(f"no temperature for block {b.name}")
        x0, x1 = int(round(b.x * scale)), int(round(b.right * scale))
        # image rows grow downwards; floorplan y grows upwards
        y1, y0 = h - int(round(b.y * scale)), h - int(round(b.top * scale))
        x1, y1 = max(x1, x0 + 1), max(y1, y0 + 1)
        img[y0:y1, x0:x1] = cmap[color_index(temps[b.name], t_min, t_max)]
        img[y0, x0:x1] = BORDER
        img[y1 - 1, x0:x1] = BORDER
        img[y0:y1, x0] = BORDER
        img[y0:y1, x1 - 1] = BORDER
    return img


def _scale(panels: Sequence[tuple[str, fp.Floorplan]], cell_pixels: int) -> float:
    smallest = min(min(b.width, b.height) for _, f in panels for b in f.blocks)
    return cell_pixels / smallest


def render_frame(panels, temps: Mapping[str, float], cfg: RenderConfig, t_min: Optional[float] = None,
                 t_max: Optional[float] = None) -> np.ndarray:
    """Side-by-side labelled layer panels as an (H, W, 3) uint8 image.

    ``panels`` is a Floorplan or a list of ``(label, Floorplan)``.
    """
    if isinstance(panels, fp.Floorplan):
        panels = [("", panels)]
    panels = list(panels)
    if not panels:
        raise InvalidArgument("nothing to render")
    lo = cfg.t_min if t_min is None else t_min
    hi = cfg.t_max if t_max is None else t_max
    if lo is None or hi is None:
        raise InvalidArgument("render_frame needs explicit temperature bounds")
    scale = _scale(panels, cfg.cell_pixels)
    imgs = [_panel(f, temps, lo, hi, scale) for _, f in panels]
    labelled = any(label for label, _ in panels)
    top = LABEL_H if labelled else 0
    H = top + max(i.shape[0] for i in imgs)
    W = sum(i.shape[1] for i in imgs) + PANEL_GAP * (len(imgs) - 1)
    out = np.zeros((H, W, 3), dtype=np.uint8)
    x = 0
    for (label, _), img in zip(panels, imgs):
        out[top:top + img.shape[0], x:x + img.shape[1]] = img
        if label:
            _text(out, x + 1, 2, label)
        x += img.shape[1] + PANEL_GAP
    return out


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise ValidationError("not a binary 8-bit PPM")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValidationError("truncated PPM")
    return pixels.reshape(h, w, 3)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ppm(path, img: np.ndarray) -> None:
    _atomic_write(Path(path), encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def layer_panels(stacks: Sequence[fp.Stack], select: Optional[Sequence[str]] = None
                 ) -> list[tuple[str, fp.Floorplan]]:
    """One panel per floorplanned layer, optionally restricted to ``stack:index`` or ``index`` selectors."""
    panels = []
    seen = set()
    for st in stacks:
        for layer in st.layers:
            if layer.floorplan is None:
                continue
            keys = {f"{st.stack_id}:{layer.index}", str(layer.index)}
            if select is not None and not keys & set(select):
                continue
            panels.append((f"{st.stack_id} L{layer.index}", layer.floorplan))
            seen |= keys
    if select is not None:
        missing = [s for s in select if s not in seen]
        if missing:
            raise InvalidArgument(f"no layer matches {missing[0]!r}")
    return panels


def _read_temp_trace(path: Path) -> tuple[list[str], np.ndarray]:
    import csv

    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise IntegrityError(f"missing temperature trace: {exc}") from None
    if not rows or rows[0][:1] != ["time_ms"]:
        raise IntegrityError(f"{path.name}: missing header")
    header = rows[0]
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:] if len(r) == len(header)], dtype=float)
    except ValueError as exc:
        raise IntegrityError(f"{path.name}: {exc}") from None
    if data.shape[0] != len(rows) - 1:
        raise IntegrityError(f"{path.name}: ragged rows")
    return header[1:], data.reshape(len(rows) - 1, len(header))


def render_run(trace_dir, out_dir, cfg: RenderConfig = RenderConfig()) -> list[Path]:
    """Render sampled epochs of a run folder to ``frame_<epoch>.ppm`` plus ``manifest.txt``."""
    trace_dir, out_dir = Path(trace_dir), Path(out_dir)
    try:
        stacks = fp.read_stacks(trace_dir / "floorplan")
    except (OSError, ValidationError) as exc:
        raise IntegrityError(f"cannot read run floorplan: {exc}") from None
    blocks, data = _read_temp_trace(trace_dir / f"temp_{cfg.field}.csv")
    fp_blocks = [b.name for b in fp.all_blocks(stacks)]
    if blocks != fp_blocks:
        raise IntegrityError("temperature trace columns do not match the floorplan blocks")
    panels = layer_panels(stacks, cfg.layers)
    shown = sorted({fp_blocks.index(b.name) for _, f in panels for b in f.blocks})
    temps = data[:, 1:]
    if cfg.t_min is None or cfg.t_max is None:
        if temps.size == 0:
            raise IntegrityError("empty temperature trace; cannot auto-scale")
        sel = temps[:, shown]
    lo = float(sel.min()) if cfg.t_min is None else cfg.t_min
    hi = float(sel.max()) if cfg.t_max is None else cfg.t_max
    if not hi > lo:
        hi = lo + 1.0
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(max(0, temps.shape[0] - 1))))
    frames = []
    for epoch in range(0, temps.shape[0], cfg.sampling_every):
        row = dict(zip(blocks, temps[epoch]))
        path = out_dir / f"frame_{epoch:0{width}d}.ppm"
        write_ppm(path, render_frame(panels, row, cfg, lo, hi))
        frames.append(path)
    manifest = [f"fps {cfg.fps!r}", f"tmin_k {lo!r}", f"tmax_k {hi!r}", f"every {cfg.sampling_every}",
                f"frames {len(frames)}"] + [p.name for p in frames]
    _atomic_write(out_dir / "manifest.txt", ("\n".join(manifest) + "\n").encode())
    return frames
