import numpy as np
import pytest

from tracefuse import autograd as ag
from tracefuse.autograd import ShapeMismatchError, Tape, Tensor
from tracefuse.autograd.gradcheck import gradcheck
from tracefuse.content import ContentFeatureMap
from tracefuse.decoder import (FUSION_STEPS, FusionDecoder, FusionLayer, FusionState, SingleCrossAttentionDecoder,
                               decode_mask, fusion_layer)
from tracefuse.model import Detector, ModelConfig
from tracefuse.nn import AttentionConfig, PatchGrid
from tracefuse.stub import SegPromptEmbedding
from tracefuse.trace_encoder import TraceFeatureMap

from conftest import leaf

GRID = PatchGrid.for_image(64, 64, 8)


def inputs(rng, grid=GRID, b=2):
    d = grid.embed_dim
    f_c = ContentFeatureMap(Tensor(rng.normal(size=(b, grid.n_patches, d))), grid)
    f_t = TraceFeatureMap(Tensor(rng.normal(size=(b, grid.n_patches, d))), grid)
    h = SegPromptEmbedding(Tensor(rng.normal(size=(b, d))))
    return f_c, f_t, h


def test_output_resolution(rng):
    dec = FusionDecoder(GRID, rng)
    out = decode_mask(dec, *inputs(rng))
    assert out.logits.shape == (2, 64, 64)
    assert np.isfinite(out.logits.data).all()


def test_structure_and_step_order(rng):
    dec = FusionDecoder(GRID, rng)
    assert len(dec.layers) == 3
    assert dec.EMBEDDING_SCHEDULE == ("trace", "content", "content")
    log = []
    dec.record_steps(log)
    dec(*inputs(rng))
    expected = []
    for kind in ("trace", "content", "content"):
        expected += [f"layer:{kind}", *FUSION_STEPS]
    assert log == expected
    assert FUSION_STEPS == ("self_attn", "token_to_embedding", "mlp", "embedding_to_token")


def test_first_layer_consumes_trace_embedding(rng):
    """Layer 1 must see f_t: changing f_t alone changes its token output."""
    dec = FusionDecoder(GRID, rng, carry_trace=False)
    f_c, f_t, h = inputs(rng)
    seen = []
    orig = FusionLayer.forward

    def spy(self, state, pos):
        seen.append(state.embedding)
        return orig(self, state, pos)

    FusionLayer.forward = spy
    try:
        dec(f_c, f_t, h)
    finally:
        FusionLayer.forward = orig
    assert seen[0] is f_t.features
    assert seen[1] is f_c.features
    assert seen[2] is not f_c.features and seen[2].shape == f_c.features.shape


def test_carry_trace_feeds_layer_two(rng):
    f_c, f_t, h = inputs(rng)
    dec = FusionDecoder(GRID, np.random.default_rng(0))
    seen = []
    orig = FusionLayer.forward

    def spy(self, state, pos):
        out = orig(self, state, pos)
        seen.append((state.embedding, out.embedding))
        return out

    FusionLayer.forward = spy
    try:
        dec(f_c, f_t, h)
    finally:
        FusionLayer.forward = orig
    np.testing.assert_allclose(seen[1][0].data, f_c.features.data + seen[0][1].data, rtol=1e-6)


def test_layer_shapes_and_single_token_self_attention(rng):
    cfg = AttentionConfig(64, 4)
    layer = FusionLayer(cfg, 128, rng)
    tokens = Tensor(rng.normal(size=(2, 4, 64)))
    emb = Tensor(rng.normal(size=(2, 64, 64)))
    out = fusion_layer(layer, FusionState(tokens, emb))
    assert out.tokens.shape == (2, 4, 64) and out.embedding.shape == (2, 64, 64)
    one = Tensor(rng.normal(size=(1, 1, 64)))
    h = layer.norm_self(one)
    sa = layer.self_attn(h, h).data
    np.testing.assert_allclose(sa, layer.self_attn.out_proj(layer.self_attn.v_proj(h)).data, rtol=1e-5, atol=1e-6)


def test_zero_embedding_oracle(f64, rng):
    cfg = AttentionConfig(8, 2)
    layer = FusionLayer(cfg, 16, rng)
    for ln in (layer.norm_t2e_emb, layer.norm_e2t_emb):
        ln.bias.data = rng.normal(size=8)
    t0 = Tensor(rng.normal(size=(1, 3, 8)))
    zero = Tensor(np.zeros((1, 5, 8)))
    out = layer(FusionState(t0, zero), None)
    # hand trace: LN of an all-zero row is its bias, so every key is equal and
    # attention averages identical value rows
    h = layer.norm_self(t0)
    t = t0.data + layer.self_attn(h, h).data
    v_row = layer.token_to_embedding.out_proj(layer.token_to_embedding.v_proj(ag.reshape(layer.norm_t2e_emb.bias, (1, 8)))).data
    t = t + v_row
    t = t + layer.mlp(layer.norm_mlp(Tensor(t))).data
    np.testing.assert_allclose(out.tokens.data, t, rtol=1e-10, atol=1e-10)
    rows = out.embedding.data[0]
    np.testing.assert_allclose(rows, np.repeat(rows[:1], 5, axis=0), rtol=1e-10, atol=1e-12)


def test_grid_mismatch(rng):
    dec = FusionDecoder(GRID, rng)
    f_c, f_t, h = inputs(rng)
    other = PatchGrid.for_image(32, 32, 8)
    bad = TraceFeatureMap(Tensor(np.zeros((2, other.n_patches, 64))), other)
    with pytest.raises(ShapeMismatchError):
        dec(f_c, bad, h)


def test_permutation_invariance_without_positions(rng):
    dec = FusionDecoder(GRID, rng, use_pos=False)
    f_c, f_t, h = inputs(rng, b=1)
    perm = rng.permutation(GRID.n_patches)
    a = dec.fuse(f_c, f_t, h).tokens.data
    pc = ContentFeatureMap(Tensor(f_c.features.data[:, perm]), GRID)
    pt = TraceFeatureMap(Tensor(f_t.features.data[:, perm]), GRID)
    b = dec.fuse(pc, pt, h).tokens.data
    np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-5)


def test_deterministic(rng):
    dec = FusionDecoder(GRID, rng)
    args = inputs(rng)
    np.testing.assert_array_equal(dec(*args).logits.data, dec(*args).logits.data)


def test_single_cross_attention_ablation_shape(rng):
    dec = SingleCrossAttentionDecoder(GRID, rng)
    assert dec(*inputs(rng)).logits.shape == (2, 64, 64)


def test_gradient_reachability():
    model = Detector(ModelConfig(trace_depth=1, content_depth=1), seed=0)
    img = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 64)).astype(np.float32))
    with Tape() as tape:
        out = model(img)
        loss = (out.mask_logits * out.mask_logits).mean()
    tape.backward(loss)
    grads = {n: p.grad for n, p in model.named_parameters()}
    assert all(g is None for n, g in grads.items() if n.startswith("backbone."))
    assert grads["trace.noise.conv1.weight"] is not None and np.abs(grads["trace.noise.conv1.weight"]).sum() > 0
    assert any(n.startswith("stub.seg_proj") and g is not None and np.abs(g).sum() > 0 for n, g in grads.items())
    assert any(n.startswith("decoder.") and g is not None and np.abs(g).sum() > 0 for n, g in grads.items())


def test_trace_ablation_changes_output():
    img = np.random.default_rng(1).uniform(size=(1, 3, 64, 64)).astype(np.float32)
    full = Detector(ModelConfig(), seed=0)
    ablated = Detector(ModelConfig(use_trace=False), seed=0)
    a = full.predict(img)[0]
    b = ablated.predict(img)[0]
    assert not np.allclose(a, b)


@pytest.mark.parametrize("kind", ["fusion", "single"])
def test_energy_skip_reaches_mask_logits(kind):
    rng = np.random.default_rng(4)
    cls = FusionDecoder if kind == "fusion" else SingleCrossAttentionDecoder
    dec = cls(GRID, rng, skip_channels=3)
    f_c, f_t, h = inputs(rng, b=1)
    base = dec(f_c, f_t, h).logits.data
    energy = rng.normal(size=(1, 3, 64, 64))
    with_skip = TraceFeatureMap(f_t.features, GRID, Tensor(energy))
    out = dec(f_c, with_skip, h).logits.data
    assert not np.allclose(out, base)
    # the skip acts per pixel: changing the map at one pixel changes that logit only
    moved = energy.copy()
    moved[..., 10, 20] += 3.0
    diff = np.abs(dec(f_c, TraceFeatureMap(f_t.features, GRID, Tensor(moved)), h).logits.data - out)[0]
    assert diff[10, 20] > 0
    diff[10, 20] = 0
    assert diff.max() == 0.0


def test_no_skip_ignores_energy_map():
    rng = np.random.default_rng(4)
    dec = FusionDecoder(GRID, rng)
    f_c, f_t, h = inputs(rng, b=1)
    with_map = TraceFeatureMap(f_t.features, GRID, Tensor(rng.normal(size=(1, 16, 64, 64))))
    np.testing.assert_array_equal(dec(f_c, f_t, h).logits.data, dec(f_c, with_map, h).logits.data)


@pytest.mark.parametrize("kind", ["fusion", "single"])
def test_decoder_gradients(f64, kind):
    rng = np.random.default_rng(11)
    grid = PatchGrid(4, 2, 2, 4)
    if kind == "fusion":
        dec = FusionDecoder(grid, rng, num_heads=1, mlp_hidden=4, n_aux_tokens=1, skip_channels=2)
    else:
        dec = SingleCrossAttentionDecoder(grid, rng, num_heads=1, n_aux_tokens=1, skip_channels=2)
    fc = leaf(rng, 1, 4, 4)
    ft = leaf(rng, 1, 4, 4)
    hs = leaf(rng, 1, 4)
    en = leaf(rng, 1, 2, 8, 8)
    w = rng.normal(size=(1, 8, 8))

    def fn():
        out = dec(ContentFeatureMap(fc, grid), TraceFeatureMap(ft, grid, en), SegPromptEmbedding(hs))
        return (out.logits * w).sum()

    assert gradcheck(fn, dec.parameters() + [fc, ft, hs, en]) < 1e-4
