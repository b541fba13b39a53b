"""Position encoding and dense initialization layers."""

import numpy as np
import pytest

from sparsematch import autodiff as ad
from sparsematch import encoder as enc
from sparsematch.autodiff import Tensor
from sparsematch.errors import ShapeError
from sparsematch.layers import parameters_of

from conftest import check_param_grad


@pytest.fixture
def pos_params(rng):
    return enc.init_position_encoder(32, rng)


def make_kps(rng, m=5, dim=32, size=(640, 480)):
    pos = rng.uniform([0, 0], size, size=(m, 2))
    desc = rng.normal(size=(m, dim)).astype(np.float32)
    return enc.KeypointSet(pos, desc, size)


def test_zero_encoder_weights_give_zero_output(rng, pos_params):
    for stage in pos_params.stages:
        stage.weight.data[:] = 0.0
        stage.bias.data[:] = 0.0
    out = enc.encode_positions(rng.uniform(0, 100, size=(4, 2)), (640, 480), pos_params)
    assert np.array_equal(out.data, np.zeros((4, 32), dtype=np.float32))


def test_identical_positions_identical_rows(rng, pos_params):
    pos = np.array([[10.0, 20.0], [10.0, 20.0], [50.0, 60.0]])
    out = enc.encode_positions(pos, (640, 480), pos_params)
    assert np.array_equal(out.data[0], out.data[1])
    assert not np.array_equal(out.data[0], out.data[2])


def test_encoder_output_width_matches_dim(rng):
    params = enc.init_position_encoder(32, rng)
    out = enc.encode_positions(rng.uniform(0, 100, size=(7, 2)), (640, 480), params)
    assert out.shape == (7, 32)


def test_init_features_zero_encoder_passes_descriptors(rng, pos_params):
    for stage in pos_params.stages:
        stage.weight.data[:] = 0.0
        stage.bias.data[:] = 0.0
    kps = make_kps(rng)
    out = enc.init_features(kps, pos_params)
    assert np.allclose(out.data, kps.descriptors, atol=1e-7)


def test_init_features_zero_descriptors_pass_encoding(rng, pos_params):
    kps = make_kps(rng)
    kps.descriptors = np.zeros_like(kps.descriptors)
    out = enc.init_features(kps, pos_params)
    ref = enc.encode_positions(kps.positions, kps.image_size, pos_params)
    assert np.array_equal(out.data, ref.data)


def test_init_features_width_mismatch(rng, pos_params):
    kps = make_kps(rng, dim=16)
    with pytest.raises(ShapeError):
        enc.init_features(kps, pos_params)


def test_init_features_gradients_flow_to_encoder_and_descriptors(rng, f64):
    params = enc.init_position_encoder(8, rng)
    pos = rng.uniform(0, 100, size=(4, 2))
    desc = Tensor(rng.normal(size=(4, 8)), requires_grad=True)

    def loss_fn():
        embedded = enc.encode_positions(pos, (640, 480), params)
        return ad.tsum(ad.mul(ad.add(desc, embedded), ad.add(desc, embedded)))

    for p in parameters_of(params):
        check_param_grad(loss_fn, p, tol=1e-4)

    loss = loss_fn()
    ad.backward(loss)
    assert desc.grad is not None and np.abs(desc.grad).max() > 0


def test_keypointset_validates_bounds(rng):
    with pytest.raises(ValueError):
        enc.KeypointSet(np.array([[700.0, 10.0]]), np.zeros((1, 8)), (640, 480))


def test_ica_layer_identical_sides_symmetric(rng):
    params = enc.init_ica_layer(8, 2, rng)
    f = rng.normal(size=(6, 8))
    state = enc.LayerState(Tensor(f), Tensor(f.copy()))
    out = enc.ica_layer(state, params)
    assert np.array_equal(out.features_a.data, out.features_b.data)


def test_ica_layer_preserves_shapes(rng):
    params = enc.init_ica_layer(8, 2, rng)
    state = enc.LayerState(Tensor(rng.normal(size=(5, 8))),
                           Tensor(rng.normal(size=(9, 8))))
    out = enc.ica_layer(state, params)
    assert out.features_a.shape == (5, 8)
    assert out.features_b.shape == (9, 8)
    assert out.layer == 1


def test_ica_layer_permuting_a_permutes_output_a_only(rng):
    params = enc.init_ica_layer(8, 2, rng)
    fa = rng.normal(size=(6, 8))
    fb = rng.normal(size=(4, 8))
    perm = np.array([2, 0, 5, 1, 4, 3])
    out = enc.ica_layer(enc.LayerState(Tensor(fa), Tensor(fb)), params)
    out_p = enc.ica_layer(enc.LayerState(Tensor(fa[perm]), Tensor(fb)), params)
    assert np.abs(out.features_a.data[perm] - out_p.features_a.data).max() <= 1e-5
    assert np.abs(out.features_b.data - out_p.features_b.data).max() <= 1e-5


def test_stacked_layers_swap_symmetry(rng):
    layers = [enc.init_ica_layer(8, 2, rng) for _ in range(3)]
    fa = rng.normal(size=(5, 8))
    fb = rng.normal(size=(7, 8))
    fwd = enc.LayerState(Tensor(fa), Tensor(fb))
    swp = enc.LayerState(Tensor(fb), Tensor(fa))
    for lp in layers:
        fwd = enc.ica_layer(fwd, lp)
        swp = enc.ica_layer(swp, lp)
    assert np.array_equal(fwd.features_a.data, swp.features_b.data)
    assert np.array_equal(fwd.features_b.data, swp.features_a.data)
