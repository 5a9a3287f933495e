import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from divpatch import autograd as ag
from divpatch.autograd import Tensor
from divpatch.vit import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    count_params,
    drop_path_rates,
    forward,
    init_params,
    load_checkpoint,
    patchify,
    save_checkpoint,
    unpatchify,
)


def test_patchify_imagenet_geometry():
    assert patchify(np.zeros((3, 224, 224)), 16).shape == (196, 3 * 16 * 16)


def test_single_patch_is_flattened_image(rng):
    img = rng.standard_normal((1, 4, 4))
    np.testing.assert_array_equal(patchify(img, 4), img.reshape(1, 16))


def test_patch_raster_order():
    img = np.arange(16, dtype=float).reshape(1, 4, 4)
    p = patchify(img, 2)
    np.testing.assert_array_equal(p[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[2], [8, 9, 12, 13])


def test_patchify_round_trip_bit_identical(rng):
    img = rng.standard_normal((3, 12, 12)).astype(np.float32)
    assert unpatchify(patchify(img, 4), 4, 3).tobytes() == img.tobytes()


@pytest.mark.parametrize("shape", [(1, 4, 6), (1, 6, 6)])
def test_patchify_rejects_bad_geometry(shape):
    with pytest.raises(ConfigError):
        patchify(np.zeros(shape), 4)


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=30, patch_size=4)
    with pytest.raises(ConfigError):
        ModelConfig(dim=30, heads=4)
    cfg = ModelConfig(image_size=32, patch_size=4)
    assert cfg.num_patches == 64


def test_drop_path_rates():
    rates = drop_path_rates(ModelConfig(depth=24, drop_path_max=0.5))
    assert rates[0] == 0.0 and rates[23] == 0.5 and len(rates) == 24
    assert drop_path_rates(ModelConfig(depth=6, drop_path_max=0.0)) == [0.0] * 6
    assert drop_path_rates(ModelConfig(depth=2, drop_path_max=0.5)) == [0.0, 0.5]
    assert drop_path_rates(ModelConfig(depth=1, drop_path_max=0.5)) == [0.0]


def test_init_is_deterministic():
    cfg = ModelConfig(depth=2, dim=16, heads=2)
    assert init_params(cfg, 3).equal(init_params(cfg, 3))
    assert not init_params(cfg, 3).equal(init_params(cfg, 4))


def test_parameter_count_closed_form_and_enumeration():
    cfg = ModelConfig(image_size=32, patch_size=8, channels=3, dim=64, depth=4, heads=4,
                      mlp_ratio=4, num_classes=10)
    # independent tally: embed + blocks + final norm + two heads
    d, n, pdim, hidden, c = 64, 16, 3 * 8 * 8, 256, 10
    embed = pdim * d + d + d + (n + 1) * d
    attn = 4 * (d * d + d)
    mlp = d * hidden + hidden + hidden * d + d
    norms = 2 * 2 * d
    expected = embed + 4 * (attn + mlp + norms) + 2 * d + 2 * (d * c + c)
    assert count_params(cfg) == expected
    assert init_params(cfg, 0).num_params() == expected


def test_embedding_std():
    cfg = ModelConfig(image_size=56, patch_size=4, dim=64, depth=0, heads=4)
    pos = init_params(cfg, 0)["pos_embed"].data
    assert pos.size >= 10_000
    assert 0.015 <= pos.std() <= 0.025


def _random_patches(cfg, batch, rng):
    return rng.standard_normal((batch, cfg.num_patches, cfg.patch_dim)).astype(np.float32)


def test_depth_zero_class_logit_ignores_patches(rng):
    cfg = ModelConfig(image_size=8, patch_size=4, channels=1, dim=8, depth=0, heads=2, num_classes=3)
    params = init_params(cfg, 0)
    x = Tensor(_random_patches(cfg, 2, rng), requires_grad=True)
    logits, stack = forward(params, x)
    ag.backward(ag.sum_(ag.slice_(logits, 0, 1, axis=1)))
    assert len(stack) == 1
    assert x.grad is None or not np.any(x.grad)
    other = forward(params, _random_patches(cfg, 2, rng))[0]
    np.testing.assert_array_equal(other.data, logits.data)


def test_permutation_equivariance(tiny_config, rng):
    params = init_params(tiny_config, 1).astype(np.float64)
    n = tiny_config.num_patches
    x = rng.standard_normal((2, n, tiny_config.patch_dim))
    perm = rng.permutation(n)
    pos = params["pos_embed"].data
    permuted_pos = pos.copy()
    permuted_pos[0, 1:] = pos[0, 1:][perm]
    p2 = params.with_tensor("pos_embed", Tensor(permuted_pos))
    logits, stack = forward(params, x)
    logits2, stack2 = forward(p2, x[:, perm])
    np.testing.assert_allclose(logits2.data, logits.data, atol=1e-5)
    last, last2 = stack.layers[-1].data, stack2.layers[-1].data
    np.testing.assert_allclose(last2[:, 1:], last[:, 1:][:, perm], atol=1e-5)


def test_forward_deterministic_and_eval_ignores_rng(tiny_config, rng):
    params = init_params(tiny_config.__class__(**{**tiny_config.__dict__, "drop_path_max": 0.3}), 0)
    x = _random_patches(params.config, 4, rng)
    a = forward(params, x, train_mode=True, rng=np.random.default_rng(5))[0].data
    b = forward(params, x, train_mode=True, rng=np.random.default_rng(5))[0].data
    assert a.tobytes() == b.tobytes()
    e1 = forward(params, x, False, np.random.default_rng(1))[0].data
    e2 = forward(params, x, False, np.random.default_rng(2))[0].data
    assert e1.tobytes() == e2.tobytes()


def test_drop_path_changes_train_output(rng):
    cfg = ModelConfig(image_size=8, patch_size=4, channels=1, dim=16, depth=2, heads=2,
                      num_classes=3, drop_path_max=0.9)
    params = init_params(cfg, 0)
    x = _random_patches(cfg, 16, rng)
    outs = {forward(params, x, True, np.random.default_rng(s))[0].data.tobytes() for s in range(4)}
    assert len(outs) > 1


def test_empty_batch_rejected(tiny_params):
    with pytest.raises(ConfigError):
        forward(tiny_params, np.zeros((0, 4, 16), np.float32))


def test_class_logit_gradient_reaches_every_patch(tiny_config, rng):
    params = init_params(tiny_config, 2)
    x = Tensor(_random_patches(tiny_config, 1, rng), requires_grad=True)
    logits, _ = forward(params, x)
    ag.backward(ag.sum_(ag.slice_(logits, 0, 1, axis=1)))
    assert np.all(np.linalg.norm(x.grad[0], axis=-1) > 0)


@settings(max_examples=15, deadline=None)
@given(
    grid=st.integers(1, 3),
    patch=st.integers(1, 3),
    heads=st.integers(1, 3),
    head_dim=st.integers(1, 4),
    depth=st.integers(0, 3),
    batch=st.integers(1, 3),
)
def test_activation_stack_shapes(grid, patch, heads, head_dim, depth, batch):
    cfg = ModelConfig(image_size=grid * patch, patch_size=patch, channels=2, dim=heads * head_dim,
                      depth=depth, heads=heads, num_classes=3)
    params = init_params(cfg, 0)
    x = np.random.default_rng(0).standard_normal((batch, cfg.num_patches, cfg.patch_dim))
    logits, stack = forward(params, x.astype(np.float32))
    assert logits.shape == (batch, 3)
    assert len(stack) == depth + 1
    for layer in stack.layers:
        assert layer.shape == (batch, cfg.num_patches + 1, cfg.dim)


def test_checkpoint_round_trip(tmp_path, tiny_params):
    path = tmp_path / "m.dpck"
    save_checkpoint(tiny_params, path)
    loaded = load_checkpoint(path)
    assert loaded.equal(tiny_params)
    save_checkpoint(loaded, tmp_path / "again.dpck")
    assert (tmp_path / "again.dpck").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path, tiny_params):
    path = tmp_path / "m.dpck"
    save_checkpoint(tiny_params, path)
    raw = path.read_bytes()
    assert raw[:4] == b"DPCK"
    assert int.from_bytes(raw[4:8], "little") == 1
    text_end = raw.index(b"\0", 8)
    assert b"dim=16" in raw[8:text_end]
    rank = int.from_bytes(raw[text_end + 1 : text_end + 5], "little")
    assert rank == 2  # patch_w comes first


def test_checkpoint_truncated(tmp_path, tiny_params):
    path = tmp_path / "m.dpck"
    save_checkpoint(tiny_params, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
