import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbca import attention as att
from fbca.checks import run_gradcheck_suite
from fbca.numerics.counters import count_macs
from fbca.numerics.gradcheck import gradcheck
from fbca.numerics.rng import RngStream
from fbca.numerics.serialize import load_weights, save_weights
from fbca.numerics.tensor import Tensor, no_grad

from oracles import conv2d_loop, mlp_gate_loop, sigmoid_scalar


def rand(rng, *shape, scale=1.0, grad=False):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=grad)


def randomize(block, rng, scale=0.5):
    """Non-trivial values for every parameter and running statistic."""
    for name, p in block.named_parameters():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
        if name.endswith("bn_gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, size=p.shape)
    for name, buf in block.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, size=buf.shape) if name.endswith("var") else rng.normal(0, 0.1, size=buf.shape)


def zero_cblr(block):
    block.cblr.kernel.data[...] = 0.0
    block.cblr.conv_bias.data[...] = 0.0
    block.cblr.bn_beta.data[...] = 0.0
    block.cblr.bn_running_mean[...] = 0.0


def copy_gate(src, dst):
    for name in ("w1", "b1", "w2", "b2"):
        getattr(dst, name).data[...] = getattr(src, name).data


# -- embedding ---------------------------------------------------------------


def test_zero_pre_activation_gives_half_map():
    rng = RngStream(1)
    blk = att.FBCA(4, k=3, r=2, rng=rng)
    zero_cblr(blk)
    x = rand(rng, 2, 4, 5, 5)
    inter = att.fbca_embed(x, blk)
    assert np.all(inter.f_map_fore.data == 0.5)
    sums = x.data.sum(axis=(2, 3))
    assert np.allclose(inter.v_fore.data, 0.5 * sums, rtol=1e-13, atol=1e-13)
    assert np.allclose(inter.v_back.data, 0.5 * sums, rtol=1e-13, atol=1e-13)


def test_forced_all_ones_map_routes_everything_to_foreground():
    rng = RngStream(2)
    blk = att.FBCA(4, k=3, r=2, rng=rng)
    blk.force(fore_map=np.ones((1, 1, 4, 4)))
    x = rand(rng, 1, 4, 4, 4)
    inter = att.fbca_embed(x, blk)
    assert np.allclose(inter.v_fore.data, x.data.sum(axis=(2, 3)), rtol=1e-13)
    assert np.all(inter.v_back.data == 0.0)


def test_embed_matches_triple_loop_oracle():
    rng = RngStream(3)
    blk = att.FBCA(3, k=3, r=3, rng=rng)
    randomize(blk, rng)
    x = rand(rng, 1, 3, 4, 4)
    inter = att.fbca_embed(x, blk)
    # map oracle: conv -> eval BN -> leaky -> sigmoid, scalar by scalar
    c = blk.cblr
    pre = conv2d_loop(x.data, c.kernel.data, c.conv_bias.data, 1, 1)[0, 0]
    mean, var = c.bn_running_mean[0], c.bn_running_var[0]
    fmap = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            z = (pre[i, j] - mean) / np.sqrt(var + 1e-5) * c.bn_gamma.data[0] + c.bn_beta.data[0]
            z = z if z > 0 else 0.1 * z
            fmap[i, j] = sigmoid_scalar(z)
    assert np.abs(inter.f_map_fore.data[0, 0] - fmap).max() <= 1e-12
    for ch in range(3):
        acc = 0.0
        for i in range(4):
            for j in range(4):
                acc += fmap[i, j] * x.data[0, ch, i, j]
        assert abs(inter.v_fore.data[0, ch] - acc) <= 1e-12


def test_embed_rejects_channel_mismatch():
    blk = att.FBCA(4, k=3, r=2)
    with pytest.raises(ValueError, match="channels"):
        att.fbca_embed(Tensor(np.zeros((1, 3, 4, 4))), blk)
    with pytest.raises(ValueError, match="divide"):
        att.FBCA(6, r=4)


# -- contrast ----------------------------------------------------------------


def test_zero_gates_give_zero_contrast():
    rng = RngStream(4)
    blk = att.FBCA(8, k=3, r=4, rng=rng)
    for gate in (blk.fore_gate, blk.back_gate):
        for p in gate.parameters():
            p.data[...] = 0.0
    _, inter = att.fbca_forward(rand(rng, 2, 8, 3, 3), blk)
    assert np.all(inter.c_fore.data == 0.5) and np.all(inter.c_back.data == 0.5)
    assert np.all(inter.d_w.data == 0.0)


def test_identical_gates_and_vectors_give_zero_contrast():
    rng = RngStream(5)
    blk = att.FBCA(8, k=3, r=4, rng=rng)
    randomize(blk, rng)
    copy_gate(blk.fore_gate, blk.back_gate)
    blk.force(fore_map=np.full((1, 1, 3, 3), 0.5))
    out, inter = att.fbca_forward(rand(rng, 2, 8, 3, 3), blk)
    assert np.array_equal(inter.v_fore.data, inter.v_back.data)
    assert np.all(inter.d_w.data == 0.0)
    assert np.all(out.data == 0.0)


def test_contrast_matches_mlp_loop_oracle():
    rng = RngStream(6)
    blk = att.FBCA(4, k=3, r=2, rng=rng)
    randomize(blk, rng)
    x = rand(rng, 2, 4, 3, 3)
    _, inter = att.fbca_forward(x, blk)
    for n in range(2):
        g = blk.fore_gate
        cf = mlp_gate_loop(inter.v_fore.data[n], g.w1.data, g.b1.data, g.w2.data, g.b2.data, 0.1)
        g = blk.back_gate
        cb = mlp_gate_loop(inter.v_back.data[n], g.w1.data, g.b1.data, g.w2.data, g.b2.data, 0.1)
        assert np.abs(inter.c_fore.data[n] - cf).max() <= 1e-12
        assert np.abs(inter.c_back.data[n] - cb).max() <= 1e-12
        assert np.abs(inter.d_w.data[n] - (cf - cb)).max() <= 1e-12


# -- full forward ------------------------------------------------------------


def test_without_background_and_half_gate_halves_features():
    rng = RngStream(7)
    blk = att.FBCA(4, k=3, r=2, include_background=False, rng=rng)
    for p in blk.fore_gate.parameters():
        p.data[...] = 0.0
    x = rand(rng, 2, 4, 5, 5)
    out, inter = att.fbca_forward(x, blk)
    assert inter.c_back is None
    assert np.array_equal(out.data, 0.5 * x.data)


def test_without_background_is_plain_gated_attention_over_foreground_vector():
    rng = RngStream(8)
    blk = att.FBCA(8, k=3, r=4, include_background=False, rng=rng)
    randomize(blk, rng)
    x = rand(rng, 2, 8, 4, 4)
    out, inter = att.fbca_forward(x, blk)
    g = blk.fore_gate
    for n in range(2):
        gate = mlp_gate_loop(inter.v_fore.data[n], g.w1.data, g.b1.data, g.w2.data, g.b2.data, 0.1)
        assert np.abs(out.data[n] - x.data[n] * gate[:, None, None]).max() <= 1e-12
    assert blk.back_gate is None


def test_forward_matches_stage_composition():
    rng = RngStream(9)
    blk = att.FBCA(8, k=3, r=2, rng=rng)
    randomize(blk, rng)
    x = rand(rng, 2, 8, 5, 5)
    out, _ = att.fbca_forward(x, blk)
    inter = att.fbca_embed(x, blk)
    d_w = att.fbca_contrast(inter, blk).data
    ref = x.data * d_w[:, :, None, None]
    assert np.abs(out.data - ref).max() <= 1e-12


def test_residual_flag_adds_identity():
    rng = RngStream(10)
    plain = att.FBCA(4, k=3, r=2, rng=RngStream(3))
    resid = att.FBCA(4, k=3, r=2, residual=True, rng=RngStream(3))
    x = rand(rng, 1, 4, 3, 3)
    assert np.allclose(resid(x).data, plain(x).data + x.data, atol=1e-14)


def test_full_block_gradcheck_c8():
    rng = RngStream(11)
    blk = att.FBCA(8, k=3, r=2, rng=rng)
    randomize(blk, rng, scale=0.3)
    x = rand(rng, 2, 8, 5, 5, grad=True)
    w = rng.normal(size=(2, 8, 5, 5))
    params = dict(blk.named_parameters())
    params["x"] = x
    rep = gradcheck(lambda _: (blk(x, False) * w).sum(), params, tol=1e-4)
    assert rep.passed, rep.failures()


@pytest.mark.parametrize("seed", range(10))
def test_every_block_passes_gradcheck(seed):
    names = ["fbca_C4", "fbca_C8", "fbca_C16", "fbca_nob_C8", "se", "eca", "coord"]
    for res in run_gradcheck_suite([seed], groups=("blocks",), only=names):
        assert res.passed and res.max_rel_err <= 1e-4, res


# -- invariants --------------------------------------------------------------


def fuzz_block(seed, include_background=True):
    rng = RngStream(seed)
    c = [2, 4, 6, 8][rng.integers(0, 4)]
    r = [d for d in (1, 2) if c % d == 0][rng.integers(0, 2)]
    blk = att.FBCA(c, k=[1, 3, 5][rng.integers(0, 3)], r=r, include_background=include_background, rng=rng)
    randomize(blk, rng, scale=float(rng.uniform(0.1, 3.0)))
    x = rand(rng, rng.integers(1, 3), c, rng.integers(1, 6), rng.integers(1, 6), scale=float(rng.uniform(0.1, 10)))
    return blk, x


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_complementarity_is_exact(seed):
    blk, x = fuzz_block(seed)
    inter = att.fbca_embed(x, blk)
    assert np.all(inter.f_map_fore.data + inter.f_map_back.data == 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_sum_rule(seed):
    blk, x = fuzz_block(seed)
    inter = att.fbca_embed(x, blk)
    total = x.data.sum(axis=(2, 3))
    got = inter.v_fore.data + inter.v_back.data
    assert np.all(np.abs(got - total) <= 1e-9 * np.maximum(np.abs(total), 1e-300) + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**63 - 1), st.booleans())
def test_gates_and_contrast_are_bounded(seed, include_background):
    blk, x = fuzz_block(seed, include_background)
    _, inter = att.fbca_forward(x, blk)
    assert np.all((inter.c_fore.data > 0) & (inter.c_fore.data < 1))
    if include_background:
        assert np.all((inter.c_back.data > 0) & (inter.c_back.data < 1))
    assert np.all((inter.d_w.data > -1) & (inter.d_w.data < 1))


def test_zero_symmetry_with_zero_map_pre_activation():
    rng = RngStream(12)
    blk = att.FBCA(8, k=5, r=4, rng=rng)
    randomize(blk, rng)
    zero_cblr(blk)
    copy_gate(blk.fore_gate, blk.back_gate)
    out, inter = att.fbca_forward(rand(rng, 3, 8, 6, 6), blk)
    assert np.all(inter.f_map_fore.data == 0.5)
    assert np.all(inter.d_w.data == 0.0) and np.all(out.data == 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_channel_permutation_equivariance(seed):
    rng = RngStream(100 + seed)
    c = 8
    blk = att.FBCA(c, k=3, r=2, rng=rng)
    randomize(blk, rng)
    x = rand(rng, 2, c, 5, 5)
    perm = rng.permutation(c)
    twin = att.FBCA(c, k=3, r=2, rng=RngStream(0))
    twin.load_state_dict(blk.state_dict())
    twin.cblr.kernel.data[...] = blk.cblr.kernel.data[:, perm]
    for g_src, g_dst in ((blk.fore_gate, twin.fore_gate), (blk.back_gate, twin.back_gate)):
        g_dst.w1.data[...] = g_src.w1.data[:, perm]
        g_dst.w2.data[...] = g_src.w2.data[perm]
        g_dst.b2.data[...] = g_src.b2.data[perm]
    out, inter = att.fbca_forward(x, blk)
    out_p, inter_p = att.fbca_forward(Tensor(x.data[:, perm]), twin)
    assert np.abs(inter_p.d_w.data - inter.d_w.data[:, perm]).max() <= 1e-12
    assert np.abs(out_p.data - out.data[:, perm]).max() <= 1e-12


# -- baselines ---------------------------------------------------------------


def test_se_with_zero_weights_halves_features():
    rng = RngStream(13)
    blk = att.SE(16, r=4, rng=rng)
    for p in blk.parameters():
        p.data[...] = 0.0
    x = rand(rng, 2, 16, 3, 3)
    assert np.array_equal(blk(x).data, 0.5 * x.data)


def test_eca_constant_channels_loop_oracle():
    rng = RngStream(14)
    c = 7
    blk = att.ECA(c, k=3, rng=rng)
    means = rng.normal(size=(2, c))
    x = Tensor(np.broadcast_to(means[:, :, None, None], (2, c, 4, 4)).copy())
    kern = blk.kernel.data[0, 0, 0]
    out = blk(x).data
    for n in range(2):
        for ch in range(c):
            acc = 0.0
            for t in range(3):
                j = ch + t - 1
                if 0 <= j < c:
                    acc += kern[t] * means[n, j]
            gate = sigmoid_scalar(acc)
            assert abs(out[n, ch, 0, 0] - means[n, ch] * gate) <= 1e-12


def test_coord_on_single_pixel_is_a_channel_gate():
    rng = RngStream(15)
    c = 8
    blk = att.CoordAttention(c, r=4, rng=rng)
    randomize(blk, rng)
    x = rand(rng, 2, c, 1, 1)
    out = blk(x).data
    m = blk._mip
    for n in range(2):
        feat = x.data[n, :, 0, 0]
        mid = []
        for j in range(m):
            acc = blk.stem_bias.data[j] + sum(blk.stem_kernel.data[j, i, 0, 0] * feat[i] for i in range(c))
            z = (acc - blk.bn_running_mean[j]) / np.sqrt(blk.bn_running_var[j] + 1e-5)
            z = z * blk.bn_gamma.data[j] + blk.bn_beta.data[j]
            mid.append(z * min(max(z + 3.0, 0.0), 6.0) / 6.0)
        for ch in range(c):
            ah = sigmoid_scalar(blk.h_bias.data[ch] + sum(blk.h_kernel.data[ch, j, 0, 0] * mid[j] for j in range(m)))
            aw = sigmoid_scalar(blk.w_bias.data[ch] + sum(blk.w_kernel.data[ch, j, 0, 0] * mid[j] for j in range(m)))
            assert abs(out[n, ch, 0, 0] - feat[ch] * ah * aw) <= 1e-12


@pytest.mark.parametrize("kind", ["se", "eca", "coord", "none"])
def test_baselines_preserve_shape_and_bound_gates(kind):
    rng = RngStream(16)
    blk = att.make_attention(kind, 8, r=4, rng=rng)
    x = rand(rng, 2, 8, 5, 3)
    out = blk(x)
    assert out.shape == x.shape
    if kind == "se":
        g = blk.gate(x.mean(axis=(2, 3))).data
        assert np.all((g > 0) & (g < 1))
    elif kind == "eca":
        g = blk.gate(x).data
        assert np.all((g > 0) & (g < 1))
    elif kind == "coord":
        for g in blk.gates(x):
            assert np.all((g.data > 0) & (g.data < 1))


def test_make_attention_rejects_unknown_kind():
    with pytest.raises(ValueError):
        att.make_attention("cbam", 8)
    with pytest.raises(ValueError):
        att.ECA(8, k=4)


# -- parameter and cost accounting ----------------------------------------------


def serialized_scalars(block, tmp_path):
    save_weights(block.state_dict(), tmp_path / "blk")
    state, _ = load_weights(tmp_path / "blk")
    return sum(a.size for a in state.values())


def test_fbca_param_count_example(tmp_path):
    blk = att.FBCA(64, k=5, r=16)
    expected = 25 * 64 + 1 + 2 + 2 + 2 * (64 * 4 + 4 + 4 * 64 + 64)
    assert expected == 2765
    assert att.param_count(blk) == expected
    assert serialized_scalars(blk, tmp_path) == expected
    assert blk.num_parameters() == expected - 2  # BN running mean/var are not learnable


def test_se_and_eca_param_count_examples(tmp_path):
    se = att.SE(64, r=16)
    assert att.param_count(se) == 580 == serialized_scalars(se, tmp_path)
    eca = att.ECA(64, k=3)
    assert att.param_count(eca) == 3 == serialized_scalars(eca, tmp_path)


def test_param_count_matches_enumeration_on_random_configs(tmp_path):
    rng = RngStream(17)
    configs = 0
    for _ in range(24):
        c = int(rng.integers(1, 9)) * 4
        r = [d for d in (1, 2, 4) if c % d == 0][rng.integers(0, 3)]
        k = [1, 3, 5, 7][rng.integers(0, 4)]
        for kind in ("fbca", "se", "eca", "coord", "none"):
            for nob in (True, False):
                blk = att.make_attention(kind, c, k=k, r=r, include_background=nob, eca_k=k, rng=rng,
                                         conv_bias=bool(rng.integers(0, 2)))
                assert att.param_count(blk) == serialized_scalars(blk, tmp_path), (kind, c, k, r)
                configs += 1
    assert configs >= 20


def test_bench_example_macs_match_instrumented_counter():
    blk = att.FBCA(64, k=5, r=16)
    expected = 25 * 64 * 80 * 80 + 2 * 64 * 6400 + 2 * 2 * 64 * 4
    assert att.mac_count(blk, 80, 80) == expected
    with no_grad(), count_macs() as box:
        blk(Tensor(np.ones((1, 64, 80, 80))))
    assert box[0] == expected


@pytest.mark.parametrize("kind", ["fbca", "se", "eca", "coord", "none"])
def test_mac_count_matches_counter(kind):
    blk = att.make_attention(kind, 16, k=3, r=4)
    with no_grad(), count_macs() as box:
        blk(Tensor(np.ones((1, 16, 6, 10))))
    assert att.mac_count(blk, 6, 10) == box[0]


# -- dumps --------------------------------------------------------------------


def test_pgm_roundtrip_and_half_gray(tmp_path):
    att.write_pgm(tmp_path / "m.pgm", np.full((3, 5), 0.5))
    pix = att.read_pgm(tmp_path / "m.pgm")
    assert pix.shape == (3, 5) and np.all(pix == 128)
    ramp = np.linspace(0, 1, 12).reshape(3, 4)
    att.write_pgm(tmp_path / "r.pgm", ramp)
    assert np.array_equal(att.read_pgm(tmp_path / "r.pgm"), np.floor(ramp * 255 + 0.5).astype(np.uint8))
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n5 3\n255\n")


def test_channel_rows_and_site_summary():
    rng = RngStream(18)
    blk = att.FBCA(4, k=3, r=2, rng=rng)
    _, inter = att.fbca_forward(rand(rng, 2, 4, 3, 3), blk)
    rows = att.channel_rows("site", inter, sample=1)
    assert [r[1] for r in rows] == [0, 1, 2, 3]
    for _, ch, cf, cb, dw in rows:
        assert dw == pytest.approx(cf - cb, abs=1e-15)
    summary = att.summarize_sites([("site", blk)])
    assert summary["separation"] == pytest.approx(float((inter.c_fore.data - inter.c_back.data).mean()))
