import numpy as np
import pytest
import torch
from conftest import SMALL, randomized
from hypothesis import given, settings
from hypothesis import strategies as st

from multiref.backbone import (
    AdapterParams,
    BackboneError,
    ModelConfig,
    NonFiniteLossError,
    apply_adapter,
    collate,
    forward,
    forward_batch,
    grad,
    init_adapter,
    init_params,
    merge_adapter,
    rope_rotate,
    rotary_positions,
    text_positions,
)
from multiref.flowmatch import SftConfig, sft_batch_loss
from multiref.instructions import Instruction, InstructionError
from multiref.packing import assemble, pack_condition, patchify
from multiref.rasters import RasterImage, encode


def make_pack(rng, k, target_side=4, ref_side=2, channels=48):
    def part(side):
        idx = np.arange(side * side)
        return rng.normal(size=(side * side, channels)), np.stack([idx // side, idx % side], axis=1)
    return assemble(part(target_side), [part(ref_side) for _ in range(k)])


def place_all(k):
    cells = ["TL", "TR", "BL", "BR"]
    return Instruction.from_text(" ".join(f"PLACE REF_{i + 1} CELL_{cells[i % 4]}" for i in range(k)))


def test_init_deterministic_and_seed_sensitive():
    a, b, c = init_params(SMALL, 3), init_params(SMALL, 3), init_params(SMALL, 4)
    assert a.content_hash() == b.content_hash() != c.content_hash()
    assert torch.all(a["head.w"] == 0) and torch.all(a["head.b"] == 0)


def test_indivisible_width_rejected():
    with pytest.raises(BackboneError):
        ModelConfig(width=30, heads=4)
    with pytest.raises(BackboneError):
        ModelConfig(width=24, heads=4)  # head dim 6 is not divisible by 4


def test_zero_head_outputs_head_bias(rng):
    p = init_params(SMALL, 0, torch.float64)
    p.arrays["head.b"] = torch.linspace(-1, 1, 48, dtype=torch.float64)
    for k in (0, 2):
        out = forward(p, make_pack(rng, k), 0.3, place_all(k))
        np.testing.assert_array_equal(out, np.tile(p["head.b"].numpy(), (16, 1)))


def test_rope_identity_and_isometry(rng):
    v = rng.normal(size=16)
    np.testing.assert_array_equal(rope_rotate(v, (0, 0)), v)
    for _ in range(20):
        p = rng.integers(-20, 20, size=2)
        assert np.linalg.norm(rope_rotate(v, p)) == pytest.approx(np.linalg.norm(v), rel=1e-12)


def test_rope_relative_positions(rng):
    q, k = rng.normal(size=16), rng.normal(size=16)
    for p1 in [(0, 0), (1, 2), (3, 1)]:
        for p2 in [(0, 0), (2, 5), (4, 4)]:
            ref = rope_rotate(q, p1) @ rope_rotate(k, p2)
            for shift in [(1, 0), (0, 3), (5, 7), (-2, 4)]:
                shifted = rope_rotate(q, np.add(p1, shift)) @ rope_rotate(k, np.add(p2, shift))
                assert shifted == pytest.approx(ref, abs=1e-12)


def test_rope_rejects_bad_dim():
    with pytest.raises(BackboneError):
        rope_rotate(np.ones(6), (1, 1))


@pytest.mark.parametrize("ref_side", [2, 4, 8])
def test_rotary_positions_map_references_onto_target_grid(rng, ref_side):
    pack = make_pack(rng, 2, target_side=4, ref_side=ref_side)
    pos = rotary_positions(pack)
    np.testing.assert_array_equal(pos[: pack.target_len], pack.positions[: pack.target_len])
    ref = pos[pack.segments == 1].reshape(ref_side, ref_side, 2)
    if ref_side == 8:
        # every 2x2 block of an upscaled reference is centred on one target cell
        blocks = ref.reshape(4, 2, 4, 2, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(blocks, pack.positions[: pack.target_len].reshape(4, 4, 2), atol=1e-12)
    # normalized centres agree: (p + 1/2) / target == (i + 1/2) / ref
    idx = pack.positions[pack.segments == 1].reshape(ref_side, ref_side, 2)
    np.testing.assert_allclose((ref + 0.5) / 4, (idx + 0.5) / ref_side, atol=1e-12)
    np.testing.assert_array_equal(pos[pack.segments == 2], pos[pack.segments == 1])


def test_text_positions_at_quadrant_centres(rng):
    pack = make_pack(rng, 1, target_side=4)
    ins = Instruction.from_text("MOVE REF_1 CELL_TR CELL_BL")
    assert text_positions(ins, pack).tolist() == [[0.5, 2.5]] * 3 + [[2.5, 0.5]]
    batch = collate([pack], [ins], SMALL)
    assert batch.positions[0, len(pack):].tolist() == [[0.5, 2.5]] * 3 + [[2.5, 0.5]]


@pytest.mark.parametrize("k", range(9))
def test_output_rows_equal_target_len_for_any_k(small_params, rng, k):
    out = forward(small_params, make_pack(rng, k), 0.5, place_all(k))
    assert out.shape == (16, 48) and np.all(np.isfinite(out))


def test_deterministic_forward(small_params, rng):
    pack = make_pack(rng, 3)
    a = forward(small_params, pack, 0.4, place_all(3))
    b = forward(small_params, pack, 0.4, place_all(3))
    np.testing.assert_array_equal(a, b)


def test_reference_order_matters(small_params, rng):
    pack = make_pack(rng, 2)
    seg = pack.segments
    swapped = type(pack)(
        np.concatenate([pack.tokens[seg == 0], pack.tokens[seg == 2], pack.tokens[seg == 1]]),
        pack.positions, seg, pack.target_len,
    )
    a = forward(small_params, pack, 0.5, place_all(2))
    b = forward(small_params, swapped, 0.5, place_all(2))
    assert not np.allclose(a, b)


def test_padding_does_not_leak(small_params, rng):
    short, long = make_pack(rng, 1), make_pack(rng, 5)
    alone = forward_batch(small_params, collate([short], [place_all(1)], SMALL, torch.float64), 0.5)
    both = forward_batch(small_params, collate([short, long], [place_all(1), place_all(5)], SMALL, torch.float64),
                         0.5)
    torch.testing.assert_close(both[0], alone[0], rtol=0, atol=1e-12)


def test_forward_rejects_bad_inputs(small_params, rng):
    pack = make_pack(rng, 1)
    with pytest.raises(BackboneError, match="timestep"):
        forward(small_params, pack, 1.0, place_all(1))
    with pytest.raises(InstructionError):
        forward(small_params, pack, 0.5, place_all(2))
    cfg = ModelConfig(layers=1, width=32, heads=2, vocab=4)
    with pytest.raises(InstructionError, match="vocabulary"):
        forward(init_params(cfg, 0), pack, 0.5, place_all(1))


def test_grad_of_half_squared_norm(small_params):
    value, g = grad(small_params, lambda p: 0.5 * (p["time.w1"] ** 2).sum())
    assert value == pytest.approx(0.5 * float((small_params["time.w1"] ** 2).sum()))
    torch.testing.assert_close(g["time.w1"], small_params["time.w1"])
    assert all(torch.all(v == 0) for k, v in g.items() if k != "time.w1")
    assert {k: tuple(v.shape) for k, v in g.items()} == {k: tuple(v.shape) for k, v in small_params.arrays.items()}


def test_grad_of_constant_is_zero(small_params):
    value, g = grad(small_params, lambda p: torch.tensor(3.0, dtype=torch.float64))
    assert value == 3.0 and all(torch.all(v == 0) for v in g.values())


def test_non_finite_loss_names_array(small_params):
    bad = small_params.clone()
    bad.arrays["layers.1.ff.fc1.w"][0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError, match="layers.1.ff.fc1.w"):
        grad(bad, lambda p: p["layers.1.ff.fc1.w"].sum())


def sft_loss_fn(samples, config=SftConfig()):
    packs, x0s, ins, seeds = [], [], [], []
    for i, s in enumerate(samples):
        pack, _ = pack_condition(s.references, s.target.size, 32 * 32, 4)
        packs.append(pack)
        x0s.append(patchify(encode(s.target, 4))[0])
        ins.append(s.instruction)
        seeds.append([0, i])
    return lambda p: sft_batch_loss(p, packs, x0s, ins, seeds, config)


def test_sft_gradient_matches_finite_differences(small_params, samples):
    loss_fn = sft_loss_fn(samples[:3])
    _, g = grad(small_params, loss_fn)
    rng = np.random.default_rng(0)
    names = sorted(small_params.arrays)
    h = 1e-4
    for _ in range(20):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(n)) for n in small_params[name].shape)
        plus, minus = small_params.clone(), small_params.clone()
        plus.arrays[name][idx] += h
        minus.arrays[name][idx] -= h
        with torch.no_grad():
            fd = (float(loss_fn(plus)) - float(loss_fn(minus))) / (2 * h)
        an = float(g[name][idx])
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-8), (name, idx, an, fd)


def test_zero_adapter_is_identity(small_params, rng):
    adapter = init_adapter(small_params, rank=4, alpha=8)
    assert adapter.scale == 2.0
    pack = make_pack(rng, 2)
    np.testing.assert_array_equal(forward(apply_adapter(small_params, adapter), pack, 0.5, place_all(2)),
                                  forward(small_params, pack, 0.5, place_all(2)))


def test_merged_matches_adapted(small_params, rng):
    adapter = init_adapter(small_params, rank=4, alpha=8, seed=2)
    gen = torch.Generator().manual_seed(5)
    for name, (down, up) in adapter.factors.items():
        up.copy_(0.1 * torch.randn(up.shape, generator=gen, dtype=torch.float64))
    pack = make_pack(rng, 3)
    a = forward(apply_adapter(small_params, adapter), pack, 0.5, place_all(3))
    b = forward(merge_adapter(small_params, adapter), pack, 0.5, place_all(3))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)
    assert not np.allclose(a, forward(small_params, pack, 0.5, place_all(3)))


def test_adapter_targets_projections_only(small_params):
    adapter = init_adapter(small_params)
    assert adapter.factors and all(n.endswith(("qkv.w", "out.w", "fc1.w", "fc2.w")) for n in adapter.factors)
    bad = AdapterParams(4, 2.0, {"text_embed": (torch.zeros(32, 4), torch.zeros(4, 32))})
    with pytest.raises(BackboneError):
        apply_adapter(small_params, bad)
    name = next(iter(adapter.factors))
    down, up = adapter.factors[name]
    wrong = AdapterParams(4, 2.0, {name: (down[:-1], up)})
    with pytest.raises(BackboneError, match="do not match"):
        apply_adapter(small_params, wrong)
    with pytest.raises(BackboneError):
        init_adapter(small_params, rank=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 4), st.integers(0, 1000))
def test_real_images_pack_and_run(k, seed):
    rng = np.random.default_rng(seed)
    refs = [RasterImage(rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)) for _ in range(k)]
    pack, grid = pack_condition(refs, (32, 32), 64 * 64, 4)
    p = randomized(init_params(SMALL, 0), seed=seed)
    out = forward(p, pack, 0.5, place_all(k))
    assert out.shape == (grid[0] * grid[1], 48)
