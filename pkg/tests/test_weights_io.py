import struct

import numpy as np
import pytest

from services.model.checkpoint import load_checkpoint, save_checkpoint
from services.model.detector import ModelConfig, ModelScale, build_model, reparameterize_model, scale_config
from services.model.weights_io import (
    MAGIC,
    WeightFormatError,
    decode_weights,
    encode_weights,
    read_weights,
    write_weights,
)
from services.nn.tensor import Tensor, no_grad

TINY = ModelScale(0.125, 0.33, "tiny")


def _tensors():
    return {
        "conv.weight": np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2) / 7,
        "bn.gamma": np.array([1.5, -2.0], dtype=np.float32),
        "scalar": np.asarray(3.25, dtype=np.float32),
    }


def test_encode_decode_keeps_names_order_and_values():
    src = _tensors()
    wf = decode_weights(encode_weights(src, reparameterized=True))
    assert wf.reparameterized
    assert list(wf.tensors) == list(src)
    for k, v in src.items():
        assert wf.tensors[k].dtype == np.float32
        assert wf.tensors[k].shape == v.shape
        np.testing.assert_array_equal(wf.tensors[k], v)


def test_header_layout():
    buf = encode_weights({"a": np.ones((2,), dtype=np.float32)})
    assert buf[:4] == MAGIC
    assert struct.unpack_from("<I", buf, 4)[0] == 1
    assert buf[8] == 0
    assert struct.unpack_from("<I", buf, 9)[0] == 1
    assert buf[13:14] == b"a"
    assert struct.unpack_from("<II", buf, 14) == (1, 2)
    assert len(buf) == 9 + 4 + 1 + 4 + 4 + 8


def test_empty_file_body_is_valid():
    wf = decode_weights(encode_weights({}))
    assert wf.tensors == {}


def test_bad_magic():
    buf = b"NOPE" + encode_weights(_tensors())[4:]
    with pytest.raises(WeightFormatError) as e:
        decode_weights(buf)
    assert e.value.offset == 0


def test_bad_version_and_flag():
    buf = bytearray(encode_weights(_tensors()))
    buf[4] = 2
    with pytest.raises(WeightFormatError) as e:
        decode_weights(bytes(buf))
    assert e.value.offset == 4
    buf = bytearray(encode_weights(_tensors()))
    buf[8] = 7
    with pytest.raises(WeightFormatError) as e:
        decode_weights(bytes(buf))
    assert e.value.offset == 8


@pytest.mark.parametrize("cut", [5, 11, 16, 30, -1])
def test_truncation_is_reported(cut):
    buf = encode_weights(_tensors())
    with pytest.raises(WeightFormatError):
        decode_weights(buf[:cut])


def test_truncated_payload_offset_points_at_payload():
    buf = encode_weights({"w": np.zeros((4,), dtype=np.float32)})
    payload_at = 9 + 4 + 1 + 4 + 4
    with pytest.raises(WeightFormatError) as e:
        decode_weights(buf[:-2])
    assert e.value.offset == payload_at


def test_duplicate_name_rejected():
    one = encode_weights({"w": np.zeros(2, dtype=np.float32)})
    buf = one + one[9:]
    with pytest.raises(WeightFormatError) as e:
        decode_weights(buf)
    assert e.value.offset == len(one)


def test_write_and_read_file(tmp_path):
    path = write_weights(tmp_path / "sub" / "w.pyew", _tensors())
    assert path.is_file()
    assert not list(tmp_path.rglob("*.tmp"))
    wf = read_weights(path)
    np.testing.assert_array_equal(wf.tensors["bn.gamma"], [1.5, -2.0])


def _tiny_model(seed=0):
    return build_model(scale_config(ModelConfig(num_classes=3), TINY), seed=seed)


def test_checkpoint_round_trip_training_form(tmp_path):
    model = _tiny_model(4)
    path = save_checkpoint(tmp_path / "m.pyew", model, TINY)
    ckpt = load_checkpoint(path)
    assert not ckpt.reparameterized
    assert ckpt.model.cfg == model.cfg
    assert (ckpt.scale.alpha, ckpt.model.cfg.num_classes) == (0.125, 3)
    ref = model.state_dict()
    got = ckpt.model.state_dict()
    assert ref.keys() == got.keys()
    assert all(np.array_equal(ref[k], got[k]) for k in ref)


def test_checkpoint_round_trip_inference_form(tmp_path):
    model = _tiny_model(5)
    model.eval()
    fused = reparameterize_model(model)
    path = save_checkpoint(tmp_path / "m_reparam.pyew", fused, TINY)
    assert read_weights(path).reparameterized
    ckpt = load_checkpoint(path)
    assert ckpt.reparameterized and ckpt.model.reparameterized
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 64)))
    with no_grad():
        a, _, _ = fused.forward_flat(x)
        b, _, _ = ckpt.model.forward_flat(x)
    np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_with_external_state(tmp_path):
    model = _tiny_model(1)
    state = {k: v * 0 + 0.5 for k, v in model.state_dict().items()}
    path = save_checkpoint(tmp_path / "ema.pyew", model, TINY, state=state)
    ckpt = load_checkpoint(path)
    assert all(np.all(v == 0.5) for v in ckpt.model.state_dict().values())


def test_checkpoint_without_metadata(tmp_path):
    path = write_weights(tmp_path / "bare.pyew", _tensors())
    with pytest.raises(WeightFormatError):
        load_checkpoint(path)


def test_checkpoint_architecture_mismatch(tmp_path):
    model = _tiny_model()
    state = model.state_dict()
    state.pop(next(iter(state)))
    path = save_checkpoint(tmp_path / "broken.pyew", model, TINY, state=state)
    with pytest.raises(WeightFormatError):
        load_checkpoint(path)
