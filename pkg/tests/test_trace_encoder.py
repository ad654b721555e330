import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tracefuse import autograd as ag
from tracefuse.autograd import ShapeMismatchError, Tensor
from tracefuse.autograd.gradcheck import gradcheck
from tracefuse.nn import PatchGrid
from tracefuse.trace_encoder import (RECTIFY_EPS, ConstrainedConv, NoiseEnhance, TraceEncoder, constraint_violation,
                                     encode_traces, local_energy, project_constraints)

from conftest import leaf


def test_projection_of_uniform_taps():
    k = project_constraints(np.full((1, 1, 5, 5), 0.04))
    assert k[0, 0, 2, 2] == 1.0
    off = np.delete(k.ravel(), 12)
    np.testing.assert_allclose(off, -1.0 / 24, rtol=1e-12)
    assert abs(k.sum()) < 1e-12


def test_projection_of_zero_kernel_uses_uniform_fill():
    k = project_constraints(np.zeros((2, 3, 5, 5)))
    assert constraint_violation(k) < 1e-12
    np.testing.assert_allclose(np.delete(k[1, 2].ravel(), 12), -1.0 / 24)


def test_projection_rejects_even_kernels():
    with pytest.raises(ShapeMismatchError):
        project_constraints(np.ones((1, 1, 4, 4)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 2, 5, 5), elements=st.floats(-3, 3)))
def test_projection_is_idempotent_and_valid(w):
    once = project_constraints(w)
    assert constraint_violation(once) < 1e-6
    np.testing.assert_allclose(project_constraints(once), once, atol=1e-9)


def test_constant_image_gives_zero_response(rng):
    ne = NoiseEnhance(16, rng)
    img = Tensor(np.full((2, 3, 32, 32), 0.37, dtype=np.float32))
    resp = ne.constrained_response(img).data
    assert np.abs(resp).max() < 1e-5
    # rectified residual of zero is sqrt(eps)
    np.testing.assert_allclose(ne(img).data, ne.lift(img).data + np.sqrt(RECTIFY_EPS), atol=1e-5)
    ne.rectify = False
    np.testing.assert_allclose(ne(img).data, ne.lift(img).data, atol=1e-5)


def test_single_layer_impulse_support(rng):
    conv = ConstrainedConv(1, 1, rng)
    img = np.zeros((1, 1, 15, 15))
    img[0, 0, 7, 7] = 1.0
    out = conv(Tensor(img)).data[0, 0]
    nz = np.argwhere(np.abs(out) > 1e-9)
    assert nz.min(0).tolist() == [5, 5] and nz.max(0).tolist() == [9, 9]
    # direct correlation oracle
    k = conv.weight.data[0, 0]
    ref = np.zeros((15, 15))
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            ref[7 - dy, 7 - dx] = k[2 + dy, 2 + dx]
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_noise_enhance_shape_and_channel_check(rng):
    ne = NoiseEnhance(16, rng)
    assert ne(Tensor(np.zeros((1, 3, 16, 16)))).shape == (1, 16, 16, 16)
    with pytest.raises(ShapeMismatchError):
        ne(Tensor(np.zeros((1, 4, 16, 16))))


def test_noise_enhance_locality(rng):
    ne = NoiseEnhance(8, rng)
    a = rng.uniform(size=(1, 3, 32, 32)).astype(np.float32)
    b = a.copy()
    b[..., 8:16, 8:16] = rng.uniform(size=(1, 3, 8, 8))
    diff = np.abs(ne(Tensor(a)).data - ne(Tensor(b)).data).max(axis=(0, 1))
    outside = np.ones_like(diff, dtype=bool)
    outside[4:20, 4:20] = False
    assert diff[outside].max() == 0.0
    assert diff[8:16, 8:16].max() > 0


def test_encode_traces_shape_and_determinism():
    grid = PatchGrid.for_image(64, 64, 8)
    enc1 = TraceEncoder(grid, np.random.default_rng(5))
    enc2 = TraceEncoder(grid, np.random.default_rng(5))
    img = Tensor(np.random.default_rng(0).uniform(size=(3, 64, 64)))
    f1, f2 = encode_traces(img, enc1), encode_traces(img, enc2)
    assert f1.features.shape == (1, 64, 64)
    np.testing.assert_array_equal(f1.features.data, f2.features.data)


def test_projection_after_perturbation(rng):
    grid = PatchGrid.for_image(16, 16, 8, embed_dim=8)
    enc = TraceEncoder(grid, rng, channels=4, depth=1, num_heads=2, mlp_hidden=8)
    for layer in enc.noise.constrained_layers():
        layer.weight.data += rng.normal(size=layer.weight.shape).astype(np.float32)
    assert enc.max_constraint_violation() > 1e-3
    enc.project_constraints()
    assert enc.max_constraint_violation() < 1e-6


def test_trace_encoder_gradients(f64):
    rng = np.random.default_rng(9)
    grid = PatchGrid(4, 1, 2, 4)
    enc = TraceEncoder(grid, rng, channels=2, depth=1, num_heads=1, mlp_hidden=4)
    img = leaf(rng, 1, 3, 4, 8)
    w = rng.normal(size=(1, 2, 4))
    assert gradcheck(lambda: (enc(img).features * w).sum(), enc.parameters() + [img]) < 1e-4


def test_local_energy_flat_for_uniform_noise_level():
    res = Tensor(np.full((1, 2, 12, 12), 0.05))
    np.testing.assert_allclose(local_energy(res).data, 0.0, atol=1e-12)


def test_local_energy_highlights_noisier_region():
    res = np.full((1, 1, 24, 24), 0.02)
    res[..., 8:16, 8:16] = 0.08
    e = local_energy(Tensor(res), window=3).data[0, 0]
    assert e[10:14, 10:14].min() > 0 > e[:5, :5].max()
    # log contrast: interior minus far background equals ln 4
    assert e[12, 12] - e[0, 0] == pytest.approx(np.log(4.0))


def test_local_energy_gradients(f64):
    rng = np.random.default_rng(3)
    res = Tensor(rng.uniform(0.1, 1.0, size=(1, 2, 6, 6)), requires_grad=True)
    w = rng.normal(size=(1, 2, 6, 6))
    assert gradcheck(lambda: (local_energy(res, window=3) * w).sum(), [res]) < 1e-4


def test_energy_map_follows_rectify_and_flag():
    grid = PatchGrid.for_image(16, 16, 8, 8)
    img = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 16, 16)))
    for rectify, energy, expect in ((True, True, True), (True, False, False), (False, True, False)):
        enc = TraceEncoder(grid, np.random.default_rng(1), channels=2, depth=1, num_heads=1, mlp_hidden=8,
                           rectify=rectify, energy=energy)
        out = enc(img)
        assert (out.energy is not None) == expect
        if expect:
            assert out.energy.shape == (1, 2, 16, 16)
