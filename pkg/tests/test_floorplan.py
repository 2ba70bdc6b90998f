import pytest
from hypothesis import given, strategies as st

from thermiq import data_path
from thermiq import floorplan as fp
from thermiq.errors import InvalidArgument, ParseError, ValidationError


def test_grid_2x2_cores_tile_8mm_die():
    f = fp.generate_grid_floorplan(2, 2, 4e-3, 4e-3, "C")
    assert f.names == ["C_0", "C_1", "C_2", "C_3"]
    assert (f.bounding_width, f.bounding_height) == (8e-3, 8e-3)
    assert f.block("C_3").x == 4e-3 and f.block("C_3").y == 4e-3


def test_grid_single_block_fills_die():
    f = fp.generate_grid_floorplan(1, 1, 1e-3, 1e-3, "B")
    (b,) = f.blocks
    assert (b.x, b.y, b.width, b.height) == (0.0, 0.0, 1e-3, 1e-3)
    assert (f.bounding_width, f.bounding_height) == (1e-3, 1e-3)


def test_grid_row_major_coordinates():
    f = fp.generate_grid_floorplan(4, 4, 2e-3, 2e-3, "BANK")
    assert len(f) == 16
    # index 5 = row 1, column 1
    b = f.block("BANK_5")
    assert (b.x, b.y) == (2e-3, 2e-3)
    assert f.block("BANK_7").x == 6e-3 and f.block("BANK_7").y == 2e-3


@pytest.mark.parametrize("args", [(0, 1, 1e-3, 1e-3), (1, 0, 1e-3, 1e-3), (1, 1, 0.0, 1e-3), (1, 1, 1e-3, -1.0)])
def test_grid_rejects_bad_dimensions(args):
    with pytest.raises(InvalidArgument):
        fp.generate_grid_floorplan(*args, "X")


@given(st.integers(1, 6), st.integers(1, 6), st.floats(1e-4, 5e-3), st.floats(1e-4, 5e-3))
def test_grid_tiles_exactly(rows, cols, w, h):
    f = fp.generate_grid_floorplan(rows, cols, w, h, "X")
    total = sum(b.area for b in f)
    assert abs(total - f.bounding_width * f.bounding_height) < 1e-12
    assert f.names == [f"X_{i}" for i in range(rows * cols)]
    # row-major: x cycles fastest
    assert all(f.blocks[i].x <= f.blocks[i + 1].x or f.blocks[i + 1].x == 0 for i in range(len(f) - 1))


def _template4():
    return fp.Floorplan.from_blocks([
        fp.Block("ALU", 0, 0, 2e-3, 2e-3), fp.Block("FPU", 2e-3, 0, 2e-3, 2e-3),
        fp.Block("ROB", 0, 2e-3, 2e-3, 2e-3), fp.Block("L2", 2e-3, 2e-3, 2e-3, 2e-3),
    ])


def test_template_replication_counts():
    f = fp.replicate_core_template(_template4(), 2, 2)
    assert len(f) == 16
    for k in range(4):
        assert {f"ALU_{k}", f"FPU_{k}", f"ROB_{k}", f"L2_{k}"} <= set(f.names)


def test_single_block_template_matches_grid():
    t = fp.Floorplan.from_blocks([fp.Block("C", 0, 0, 4e-3, 4e-3)])
    a = fp.replicate_core_template(t, 2, 2)
    b = fp.generate_grid_floorplan(2, 2, 4e-3, 4e-3, "C")
    assert a == b


def test_l_shaped_template_translation():
    # L shape inside a 3x2 mm bounding box
    t = fp.Floorplan.from_blocks([
        fp.Block("A", 0, 0, 3e-3, 1e-3), fp.Block("B", 0, 1e-3, 1e-3, 1e-3), fp.Block("C", 1e-3, 1e-3, 1e-3, 1e-3),
    ])
    f = fp.replicate_core_template(t, 1, 2)
    for name in "ABC":
        assert f.block(f"{name}_1").x == pytest.approx(f.block(f"{name}_0").x + 3e-3, abs=1e-15)
        assert f.block(f"{name}_1").y == f.block(f"{name}_0").y


def test_overlapping_template_rejected():
    with pytest.raises(ValidationError):
        fp.Floorplan.from_blocks([fp.Block("A", 0, 0, 2e-3, 2e-3), fp.Block("B", 1e-3, 1e-3, 2e-3, 2e-3)])
    bad = object.__new__(fp.Floorplan)
    object.__setattr__(bad, "blocks", (fp.Block("A", 0, 0, 2e-3, 2e-3), fp.Block("B", 1e-3, 1e-3, 2e-3, 2e-3)))
    object.__setattr__(bad, "bounding_width", 3e-3)
    object.__setattr__(bad, "bounding_height", 3e-3)
    with pytest.raises(InvalidArgument):
        fp.replicate_core_template(bad, 2, 2)


def test_touching_blocks_are_not_overlapping():
    fp.Floorplan.from_blocks([fp.Block("A", 0, 0, 1e-3, 1e-3), fp.Block("B", 1e-3, 0, 1e-3, 1e-3)])


def _power_layers(stack):
    return [l for l in stack.layers if l.dissipates_power]


def test_stacked_3d_one_core_layer():
    (st,) = fp.build_stack(fp.StackConfig(fp.StackKind.STACKED_3D, mem_layers=8))
    active = _power_layers(st)
    assert len(active) == 9
    core = [l for l in active if l.kind is fp.LayerKind.ACTIVE_CORE]
    assert len(core) == 1 and core[0].index == max(l.index for l in active)


def test_stacked_3d_two_core_layers():
    (st,) = fp.build_stack(fp.StackConfig(fp.StackKind.STACKED_3D, core_layers=2, mem_layers=8))
    active = _power_layers(st)
    assert len(active) == 10
    assert [l.index for l in active if l.kind is fp.LayerKind.ACTIVE_CORE] == [8, 9]
    names = [b.name for l in active if l.kind is fp.LayerKind.ACTIVE_CORE for b in l.floorplan]
    assert names == [f"C_{i}" for i in range(8)]
    # cores 0 and 4 are vertically aligned
    l8, l9 = active[-2].floorplan, active[-1].floorplan
    assert (l8.block("C_0").x, l8.block("C_0").y) == (l9.block("C_4").x, l9.block("C_4").y)


def test_ext_3d_logic_layer_at_bottom():
    core, mem = fp.build_stack(fp.StackConfig(fp.StackKind.EXT_3D, mem_layers=8))
    assert mem.layers[0].kind is fp.LayerKind.LOGIC_CORE_LAYER and mem.layers[0].index == 0
    assert [l.kind for l in mem.layers[1:9]] == [fp.LayerKind.ACTIVE_MEMORY] * 8
    assert mem.layers[-1].kind is fp.LayerKind.TIM
    assert not core.air_cooled and not mem.air_cooled


def test_ext_2d_memory_is_air_cooled():
    core, mem = fp.build_stack(fp.StackConfig(fp.StackKind.EXT_2D, mem_layers=1))
    assert mem.air_cooled and len(mem.layers) == 1
    assert core.layers[-1].kind is fp.LayerKind.TIM


def test_2_5d_single_stack_with_interposer():
    (st,) = fp.build_stack(fp.StackConfig(fp.StackKind.INTERPOSED_2_5D, mem_layers=8))
    assert st.layers[0].kind is fp.LayerKind.INTERPOSER and st.layers[0].floorplan is None
    base = st.layers[1].floorplan
    cores = [b for b in base if b.name.startswith("C_")]
    banks = [b for b in st.layers[2].floorplan]
    # memory region starts after the cores plus the gap
    assert min(b.x for b in banks) == pytest.approx(max(b.right for b in cores) + 1e-3)


@pytest.mark.parametrize("kind", [fp.StackKind.EXT_2D, fp.StackKind.INTERPOSED_2_5D])
def test_unsupported_core_layer_combination(kind):
    with pytest.raises(InvalidArgument):
        fp.build_stack(fp.StackConfig(kind, core_layers=2, mem_layers=1))


@given(st.sampled_from(list(fp.StackKind)), st.integers(1, 3), st.integers(1, 9), st.sampled_from([1, 2, 4, 6]))
def test_stack_invariants(kind, core_layers, mem_layers, cores):
    if kind is fp.StackKind.EXT_2D:
        mem_layers = 1
    cfg = fp.StackConfig(kind, cores=cores, core_layers=core_layers, mem_layers=mem_layers)
    if kind in (fp.StackKind.EXT_2D, fp.StackKind.INTERPOSED_2_5D) and core_layers > 1:
        with pytest.raises(InvalidArgument):
            fp.build_stack(cfg)
        return
    stacks = fp.build_stack(cfg)
    assert len(stacks) == (2 if kind in (fp.StackKind.EXT_2D, fp.StackKind.EXT_3D) else 1)
    names = [b.name for s in stacks for b in s.blocks()]
    assert len(names) == len(set(names))
    if kind is fp.StackKind.STACKED_3D:
        (s,) = stacks
        core_idx = [l.index for l in s.layers if l.kind is fp.LayerKind.ACTIVE_CORE]
        mem_idx = [l.index for l in s.layers if l.kind is fp.LayerKind.ACTIVE_MEMORY]
        assert min(core_idx) > max(mem_idx)


def test_flp_round_trip():
    f = fp.generate_grid_floorplan(2, 2, 4e-3, 4e-3, "C")
    g = fp.parse_flp(fp.format_flp(f))
    assert g == f and g.names == f.names


@given(st.lists(st.tuples(st.floats(1e-5, 1e-2), st.floats(1e-5, 1e-2)), min_size=1, max_size=8))
def test_flp_round_trip_exact(sizes):
    x = 0.0
    blocks = []
    for i, (w, h) in enumerate(sizes):
        blocks.append(fp.Block(f"b{i}", x, 0.0, w, h))
        x += w
    f = fp.Floorplan.from_blocks(blocks, x * 1.5, max(h for _, h in sizes) * 2)
    assert fp.parse_flp(fp.format_flp(f)) == f


def test_flp_wrong_field_count_names_line():
    text = "# comment\nC_0\t1e-3\t1e-3\t0\t0\nC_1\t1e-3\t1e-3\t0\n"
    with pytest.raises(ParseError) as exc:
        fp.parse_flp(text)
    assert exc.value.line == 3
    assert "line 3" in str(exc.value)


def test_flp_duplicate_name_is_validation_error():
    with pytest.raises(ValidationError):
        fp.parse_flp("A\t1e-3\t1e-3\t0\t0\nA\t1e-3\t1e-3\t1e-3\t0\n")


def test_shipped_3dstack_has_nine_layers():
    layers = fp.read_lcf(data_path("stacks", "3dstack", "3dstack.lcf"))
    assert len(layers) == 9
    assert [l.kind for l in layers] == [fp.LayerKind.ACTIVE_MEMORY] * 8 + [fp.LayerKind.ACTIVE_CORE]


def test_lcf_and_stack_dir_round_trip(tmp_path):
    stacks = fp.build_stack(fp.StackConfig(fp.StackKind.EXT_3D, mem_layers=3))
    fp.write_stacks(tmp_path, stacks)
    back = fp.read_stacks(tmp_path)
    assert back == stacks


def test_lcf_errors():
    with pytest.raises(ParseError):
        fp.parse_lcf("layer 1\nkind TIM\n")
    with pytest.raises(ParseError):
        fp.parse_lcf("kind TIM\n")
    rec = "layer 0\nkind TIM\nthickness 2e-5\nconductivity -4\ncapacity 4e6\nfloorplan uniform\npower no\n"
    with pytest.raises(ValidationError):
        fp.parse_lcf(rec)


def test_layer_spec_invariants():
    with pytest.raises(ValidationError):
        fp.LayerSpec(0, fp.LayerKind.TIM, 1e-5, 4.0, 4e6, None, True)
    with pytest.raises(ValidationError):
        fp.LayerSpec(0, fp.LayerKind.TIM, 0.0, 4.0, 4e6, None, False)
