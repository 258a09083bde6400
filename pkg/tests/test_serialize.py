"""Checkpoint container: roundtrips, corruption detection, config embedding."""

import numpy as np
import pytest

from cardioseg.model import EdgeAttentionUNet, NetworkConfig
from cardioseg.serialize import (
    MAGIC,
    CheckpointError,
    checkpoint_bytes,
    load_checkpoint,
    load_checkpoint_file,
    peek_config,
    save_checkpoint,
)


def tiny_config(**overrides):
    base = dict(height=16, width=16, depth=2, base_channels=4,
                vit_layers=1, embed_dim=16, heads=2, patch_size=2)
    base.update(overrides)
    return NetworkConfig(**base)


def build(seed=0, **overrides):
    return EdgeAttentionUNet(tiny_config(**overrides), np.random.default_rng(seed))


def test_roundtrip_bit_exact():
    model = build(seed=3)
    raw = checkpoint_bytes(model)
    restored = load_checkpoint(raw)
    orig = dict(model.named_params())
    back = dict(restored.named_params())
    assert orig.keys() == back.keys()
    for name, t in orig.items():
        np.testing.assert_array_equal(t.data, back[name].data)


def test_roundtrip_via_file(tmp_path):
    model = build(seed=4)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model)
    restored = load_checkpoint_file(path)
    for (na, a), (nb, b) in zip(model.named_params(), restored.named_params()):
        assert na == nb
        np.testing.assert_array_equal(a.data, b.data)


def test_config_embedded():
    model = build(seed=0, dam_mode="product")
    cfg = peek_config(checkpoint_bytes(model))
    assert cfg["dam_mode"] == "product"
    assert cfg["height"] == 16 and cfg["depth"] == 2


def test_restored_model_same_forward():
    model = build(seed=5)
    restored = load_checkpoint(checkpoint_bytes(model))
    rng = np.random.default_rng(0)
    from cardioseg.edges import edge_pyramid
    from cardioseg.tensor import Tensor
    img = rng.random((1, 16, 16))
    edges = edge_pyramid(img[0], levels=3)
    a = model.forward(Tensor(img), edges).data
    b = restored.forward(Tensor(img), edges).data
    np.testing.assert_array_equal(a, b)


def test_bad_magic():
    raw = bytearray(checkpoint_bytes(build()))
    raw[:8] = b"NOTCKPT?"
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bytes(raw))


def test_bad_version():
    raw = bytearray(checkpoint_bytes(build()))
    raw[8:12] = (99).to_bytes(4, "little")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bytes(raw))


def test_truncated():
    raw = checkpoint_bytes(build())
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(raw[: len(raw) - 7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(raw[:10])


def test_trailing_garbage():
    raw = checkpoint_bytes(build())
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(raw + b"\x00\x01")


def test_magic_constant():
    raw = checkpoint_bytes(build())
    assert raw[:8] == MAGIC == b"SEGCKPT1"


def test_corrupt_param_name_order():
    # Flipping a name byte breaks the expected parameter ordering.
    raw = bytearray(checkpoint_bytes(build()))
    idx = raw.find(b"enc0.conv1.weight")
    assert idx > 0
    raw[idx] = ord("x")
    with pytest.raises(CheckpointError):
        load_checkpoint(bytes(raw))
