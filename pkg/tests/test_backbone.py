import numpy as np
import pytest

from msvr import ndgrad as ng
from msvr.backbone import (
    BackboneConfig,
    embed,
    init_backbone,
    load_backbone,
    save_backbone,
)
from msvr.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from msvr.ndgrad import ShapeError, Tensor

from oracles import central_diff, max_rel_err

SMALL = BackboneConfig(input_side=12, channels_per_stage=(4, 6), stage_strides=(2, 2), embed_dim=6)


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(input_side=8, channels_per_stage=(4, 6), stage_strides=(2,), embed_dim=6)
    with pytest.raises(ValueError):
        BackboneConfig(input_side=8, channels_per_stage=(4, 6), stage_strides=(2, 2), embed_dim=4)


def test_init_deterministic():
    a = init_backbone(SMALL, seed=42)
    b = init_backbone(SMALL, seed=42)
    for ta, tb in zip(a.tensors(), b.tensors()):
        assert np.array_equal(ta.data, tb.data)


def test_init_seed_sensitivity():
    a = init_backbone(SMALL, seed=1)
    b = init_backbone(SMALL, seed=2)
    assert any(not np.array_equal(ta.data, tb.data) for ta, tb in zip(a.tensors(), b.tensors()))


def test_init_kernel_stddev_tracks_fan_in():
    cfg = BackboneConfig(
        input_side=16, channels_per_stage=(32, 64), stage_strides=(2, 2), embed_dim=64
    )
    params = init_backbone(cfg, seed=0)
    c_in = 3
    for kernel in params.kernels:
        fan_in = c_in * cfg.kernel_size**2
        target = np.sqrt(2.0 / fan_in)
        observed = kernel.data.std()
        assert abs(observed - target) / target < 0.2
        c_in = kernel.data.shape[0]


def test_init_biases_zero():
    params = init_backbone(SMALL, seed=3)
    for b in params.biases:
        assert np.array_equal(b.data, np.zeros_like(b.data))


def test_embed_zero_image_gives_zero_embedding():
    params = init_backbone(SMALL, seed=4)
    out = embed(params, Tensor(np.zeros((3, 12, 12))))
    assert np.array_equal(out.data, np.zeros(6))


def test_embed_output_dimension():
    params = init_backbone(SMALL, seed=5)
    img = Tensor(np.random.default_rng(0).uniform(0, 1, (3, 12, 12)))
    assert embed(params, img).shape == (6,)


def test_embed_rejects_wrong_side():
    params = init_backbone(SMALL, seed=6)
    with pytest.raises(ShapeError, match=r"12.*10|expected"):
        embed(params, Tensor(np.zeros((3, 10, 10))))


def test_embed_deterministic():
    params = init_backbone(SMALL, seed=7)
    img = Tensor(np.random.default_rng(1).uniform(0, 1, (3, 12, 12)))
    a = embed(params, img).data
    b = embed(params, img).data
    assert np.array_equal(a, b)


def test_embedding_dim_independent_of_input_side():
    for side in (8, 12, 20):
        cfg = BackboneConfig(
            input_side=side, channels_per_stage=(4, 6), stage_strides=(2, 2), embed_dim=6
        )
        params = init_backbone(cfg, seed=8)
        img = Tensor(np.random.default_rng(side).uniform(0, 1, (3, side, side)))
        assert embed(params, img).shape == (6,)


def test_embed_gradient_wrt_image_matches_finite_differences():
    params = init_backbone(SMALL, seed=9)
    rng = np.random.default_rng(2)
    img = rng.uniform(0.1, 0.9, (3, 12, 12))
    weights = rng.uniform(-1, 1, 6)

    leaf = Tensor(img, requires_grad=True)
    ng.tensor_sum(ng.mul(embed(params, leaf), Tensor(weights))).backward()

    def f(x):
        return ng.tensor_sum(ng.mul(embed(params, Tensor(x)), Tensor(weights))).item()

    fd = central_diff(f, img.copy())
    assert max_rel_err(leaf.grad, fd, floor=1e-4) < 1e-4


def test_backbone_checkpoint_roundtrip(tmp_path):
    params = init_backbone(SMALL, seed=10)
    path = tmp_path / "bb.ckpt"
    save_backbone(path, params)
    back = load_backbone(path)
    assert back.config == SMALL
    for ta, tb in zip(params.tensors(), back.tensors()):
        assert np.array_equal(ta.data, tb.data)
        assert tb.requires_grad


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_checkpoint_scalar_and_empty_shapes(tmp_path):
    path = tmp_path / "mixed.ckpt"
    arrays = [np.float64(3.5), np.arange(6.0).reshape(2, 3)]
    write_checkpoint(path, "test", {"n": 1}, arrays)
    kind, config, back = read_checkpoint(path)
    assert kind == "test"
    assert config == {"n": 1}
    assert back[0].shape == ()
    assert float(back[0]) == 3.5
    assert np.array_equal(back[1], arrays[1])
