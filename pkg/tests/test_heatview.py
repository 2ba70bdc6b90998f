import numpy as np
import pytest
from hypothesis import given, strategies as st

from thermiq import data_path, engine
from thermiq import floorplan as fp
from thermiq import heatview as hv
from thermiq.errors import IntegrityError, InvalidArgument, ValidationError

CMAP = hv.load_colormap()
LOOKUP = {tuple(c): i for i, c in enumerate(CMAP.tolist())}
F = fp.generate_grid_floorplan(2, 2, 1e-3, 1e-3, "B")
CFG = hv.RenderConfig(t_min=300.0, t_max=400.0, cell_pixels=10)


def interior(img, block, scale, h):
    """A pixel strictly inside a block's rectangle."""
    cx = int((block.x + block.width / 2) * scale)
    cy = h - 1 - int((block.y + block.height / 2) * scale)
    return tuple(img[cy, cx])


def test_colormap_shape_and_ends():
    assert CMAP.shape == (256, 3)
    assert tuple(CMAP[0]) == (0, 0, 255) and tuple(CMAP[255]) == (255, 0, 0)
    assert len(LOOKUP) == 256  # distinct colors, so index order is recoverable from pixels


def test_color_index_edges():
    assert hv.color_index(300.0, 300.0, 400.0) == 0
    assert hv.color_index(400.0, 300.0, 400.0) == 255
    assert hv.color_index(250.0, 300.0, 400.0) == 0
    assert hv.color_index(900.0, 300.0, 400.0) == 255
    with pytest.raises(InvalidArgument):
        hv.color_index(350.0, 400.0, 300.0)


@given(st.floats(300.0, 400.0), st.floats(300.0, 400.0))
def test_color_index_monotone(a, b):
    lo, hi = sorted((a, b))
    i, j = hv.color_index(lo, 300.0, 400.0), hv.color_index(hi, 300.0, 400.0)
    assert i <= j
    if hi - lo >= 100.0 / 256:
        assert i < j


def test_all_cold_frame_is_uniform():
    img = hv.render_frame(F, {b: 300.0 for b in F.names}, CFG)
    colors = {tuple(p) for p in img.reshape(-1, 3).tolist()}
    assert colors == {tuple(CMAP[0]), hv.BORDER}


def test_single_hot_block():
    temps = {b: 300.0 for b in F.names}
    temps["B_3"] = 400.0
    img = hv.render_frame(F, temps, CFG)
    hot = np.all(img == CMAP[255], axis=2)
    # B_3 is the top-right 1 mm square: 10 px with a 1 px border on each side
    ys, xs = np.nonzero(hot)
    assert hot.sum() == 8 * 8
    assert (ys.min(), ys.max(), xs.min(), xs.max()) == (1, 8, 11, 18)


def test_missing_block_named():
    with pytest.raises(ValidationError, match="B_2"):
        hv.render_frame(F, {"B_0": 300.0, "B_1": 300.0, "B_3": 300.0}, CFG)


def test_render_config_validation():
    with pytest.raises(InvalidArgument):
        hv.RenderConfig(sampling_every=0)
    with pytest.raises(InvalidArgument):
        hv.RenderConfig(t_min=400.0, t_max=300.0)


def test_ppm_round_trip(tmp_path):
    img = hv.render_frame(F, {b: 300.0 + 30 * i for i, b in enumerate(F.names)}, CFG)
    data = hv.encode_ppm(img)
    assert data.startswith(b"P6\n20 20\n255\n")
    hv.write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(hv.read_ppm(tmp_path / "a.ppm"), img)
    with pytest.raises(ValidationError):
        hv.decode_ppm(b"P3\n1 1\n255\n000")


def test_panels_cover_every_block_once():
    stacks = fp.build_stack(fp.StackConfig(fp.StackKind.EXT_3D, mem_layers=3))
    names = [b.name for _, f in hv.layer_panels(stacks) for b in f]
    assert sorted(names) == sorted(b.name for b in fp.all_blocks(stacks))
    sel = hv.layer_panels(stacks, ["mem:0", "core:0"])
    assert [label for label, _ in sel] == ["core L0", "mem L0"]
    with pytest.raises(InvalidArgument):
        hv.layer_panels(stacks, ["mem:42"])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = engine.load_config(data_path("scenarios", "ext3d.cfg"), {"max_time_ms": "20", "grid": "4x4"})
    engine.run(cfg, out)
    return out


def test_sampling_counts(run_dir, tmp_path):
    frames = hv.render_run(run_dir, tmp_path / "a", hv.RenderConfig(sampling_every=10))
    assert len(frames) == 2
    frames = hv.render_run(run_dir, tmp_path / "b", hv.RenderConfig(sampling_every=1))
    assert [p.name for p in frames][:2] == ["frame_000000.ppm", "frame_000001.ppm"] and len(frames) == 20
    manifest = (tmp_path / "b" / "manifest.txt").read_text().splitlines()
    assert manifest[:1] == ["fps 10.0"] and manifest[4] == "frames 20" and manifest[5:] == [p.name for p in frames]


def test_auto_scale_bounds(run_dir, tmp_path):
    hv.render_run(run_dir, tmp_path, hv.RenderConfig(sampling_every=5))
    lines = (run_dir / "temp_max.csv").read_text().splitlines()[1:]
    vals = [float(x) for line in lines for x in line.split(",")[1:]]
    m = dict(l.split(" ", 1) for l in (tmp_path / "manifest.txt").read_text().splitlines()[:4])
    assert float(m["tmin_k"]) == min(vals) and float(m["tmax_k"]) == max(vals)


def test_frames_deterministic(run_dir, tmp_path):
    cfg = hv.RenderConfig(sampling_every=3, t_min=320.0, t_max=340.0)
    a = hv.render_run(run_dir, tmp_path / "a", cfg)
    b = hv.render_run(run_dir, tmp_path / "b", cfg)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()


def test_bottom_memory_layer_panel_hotter(tmp_path):
    out = tmp_path / "run"
    cfg = engine.load_config(data_path("scenarios", "ext3d.cfg"), {"max_time_ms": "15"})
    engine.run(cfg, out)
    rc = hv.RenderConfig(layers=("mem:1", "mem:8"), cell_pixels=6)
    frames = hv.render_run(out, tmp_path / "f", rc)
    img = hv.read_ppm(frames[-1])
    stacks = fp.read_stacks(out / "floorplan")
    panels = hv.layer_panels(stacks, rc.layers)
    scale = hv._scale(panels, rc.cell_pixels)
    f0 = panels[0][1]
    w = int(np.ceil(f0.bounding_width * scale - 1e-9))
    h = int(np.ceil(f0.bounding_height * scale - 1e-9))
    body = img[hv.LABEL_H:]
    left, right = body[:, :w], body[:, w + hv.PANEL_GAP:]
    hotter = 0
    for b0, b8 in zip(panels[0][1].blocks, panels[1][1].blocks):
        i0 = LOOKUP[interior(left, b0, scale, h)]
        i8 = LOOKUP[interior(right, b8, scale, h)]
        assert i0 >= i8
        hotter += i0 > i8
    assert hotter == len(panels[0][1].blocks)


def test_trace_floorplan_mismatch(run_dir, tmp_path):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(run_dir, bad)
    text = (bad / "temp_max.csv").read_text().replace("B_0", "B_X", 1)
    (bad / "temp_max.csv").write_text(text)
    with pytest.raises(IntegrityError):
        hv.render_run(bad, tmp_path / "f")
