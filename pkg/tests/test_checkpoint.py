import numpy as np
import pytest
from hypothesis import given, strategies as st

from lmcyclegan.checkpoint import (Checkpoint, bundle_checkpoint, decode_checkpoint, encode_checkpoint,
                                   load_checkpoint, restore_bundle, save_checkpoint)
from lmcyclegan.errors import CheckpointError
from lmcyclegan.nets import ModelBundle
from lmcyclegan.optim import AdamState, adam_step


def _ckpt(rng):
    return Checkpoint(iteration=42, phase="stage1",
                      tensors={"a.w": rng.standard_normal((3, 2, 4, 4)).astype(np.float32),
                               "a.b": np.zeros(3, np.float32), "scalar": np.array(1.5, np.float32)},
                      config_hash="ab" * 32, rng_state={"seed": 3, "next_iteration": 42})


def _reason(excinfo):
    return excinfo.value.reason


def test_round_trip_is_byte_identical(rng):
    buf = encode_checkpoint(_ckpt(rng))
    back = decode_checkpoint(buf)
    assert encode_checkpoint(back) == buf
    assert back.iteration == 42 and back.phase == "stage1"
    assert back.rng_state == {"seed": 3, "next_iteration": 42}
    assert back.tensors["scalar"].shape == ()


@given(st.dictionaries(st.from_regex(r"[a-z][a-z0-9_./]{0,20}", fullmatch=True),
                       st.lists(st.integers(0, 3), min_size=0, max_size=3), max_size=4),
       st.integers(0, 2 ** 40))
def test_any_tensor_set_round_trips(shapes, it):
    shapes.pop("meta/json", None)
    r = np.random.default_rng(len(shapes))
    c = Checkpoint(iteration=it, phase="p", tensors={k: r.standard_normal(s).astype(np.float32)
                                                     for k, s in shapes.items()})
    back = decode_checkpoint(encode_checkpoint(c))
    assert set(back.tensors) == set(c.tensors)
    assert all(np.array_equal(back.tensors[k], v) for k, v in c.tensors.items())


def test_flipped_byte_rejected(rng):
    buf = bytearray(encode_checkpoint(_ckpt(rng)))
    buf[len(buf) // 2] ^= 0x10
    with pytest.raises(CheckpointError) as e:
        decode_checkpoint(bytes(buf))
    assert _reason(e) in (CheckpointError.CHECKSUM, CheckpointError.TRUNCATED)


def test_payload_flip_is_a_checksum_error(rng):
    buf = bytearray(encode_checkpoint(_ckpt(rng)))
    buf[-10] ^= 0x01  # inside the last tensor payload
    with pytest.raises(CheckpointError) as e:
        decode_checkpoint(bytes(buf))
    assert _reason(e) == CheckpointError.CHECKSUM


@pytest.mark.parametrize("cut", [3, 30, 200])
def test_truncation_rejected(rng, cut):
    buf = encode_checkpoint(_ckpt(rng))
    with pytest.raises(CheckpointError) as e:
        decode_checkpoint(buf[:-cut])
    assert _reason(e) in (CheckpointError.TRUNCATED, CheckpointError.CHECKSUM)


def test_version_and_magic(rng):
    c = _ckpt(rng)
    c.version = 2
    with pytest.raises(CheckpointError) as e:
        decode_checkpoint(encode_checkpoint(c))
    assert _reason(e) == CheckpointError.VERSION
    with pytest.raises(CheckpointError) as e:
        decode_checkpoint(b"NOPE" + encode_checkpoint(_ckpt(rng))[4:])
    assert _reason(e) == CheckpointError.BAD_MAGIC


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(tmp_path / "none.lmcg")
    assert _reason(e) == CheckpointError.MISSING
    assert e.value.exit_code == 4


def test_atomic_save_leaves_no_temp(tmp_path, rng):
    p = tmp_path / "ck" / "a.lmcg"
    save_checkpoint(p, _ckpt(rng))
    save_checkpoint(p, _ckpt(rng))
    assert sorted(x.name for x in p.parent.iterdir()) == ["a.lmcg"]
    assert load_checkpoint(p).iteration == 42


@pytest.fixture
def bundle():
    return ModelBundle(size=32, ngf=4, ndf=8, ndf_local=4, n_res=1, seed=0)


def test_bundle_round_trip_with_optimizer(bundle, rng):
    params = bundle.group("D_X")
    st_ = bundle.opt.setdefault("D_X", AdamState())
    adam_step(params, {k: rng.standard_normal(p.shape).astype(np.float32) for k, p in params.items()}, st_, 1e-3)
    ck = decode_checkpoint(encode_checkpoint(bundle_checkpoint(bundle, ["D_X"], "stage1", 1, "h")))

    fresh = ModelBundle(size=32, ngf=4, ndf=8, ndf_local=4, n_res=1, seed=0)
    restore_bundle(fresh, ck, "h")
    for k, p in params.items():
        assert np.array_equal(fresh.params[k].data, p.data)
        assert np.array_equal(fresh.opt["D_X"].m[k], st_.m[k])
        assert np.array_equal(fresh.opt["D_X"].v[k], st_.v[k])
    assert fresh.opt["D_X"].step == 1


def test_unknown_tensor_rejected(bundle):
    ck = bundle_checkpoint(bundle, ["D_X"], "stage1", 1, "h")
    ck.tensors["D_Z.conv1.w"] = np.zeros(3, np.float32)
    with pytest.raises(CheckpointError) as e:
        restore_bundle(bundle, ck, "h")
    assert _reason(e) == CheckpointError.UNKNOWN_TENSOR


def test_shape_mismatch_is_unknown_tensor(bundle):
    ck = bundle_checkpoint(bundle, ["D_X"], "stage1", 1, "h")
    k = next(iter(ck.tensors))
    ck.tensors[k] = np.zeros(7, np.float32)
    with pytest.raises(CheckpointError) as e:
        restore_bundle(bundle, ck, "h")
    assert _reason(e) == CheckpointError.UNKNOWN_TENSOR


def test_config_hash_needs_override(bundle):
    ck = bundle_checkpoint(bundle, ["D_X"], "stage1", 1, "one")
    with pytest.raises(CheckpointError) as e:
        restore_bundle(bundle, ck, "two")
    assert _reason(e) == CheckpointError.CONFIG_HASH
    restore_bundle(bundle, ck, "two", allow_hash_mismatch=True)
