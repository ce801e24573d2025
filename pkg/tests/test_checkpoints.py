"""Checkpoint format round-trips and corruption handling."""

import struct
import zlib

import numpy as np
import pytest

from obfusion import nncore as nn
from obfusion.checkpoints import (FORMAT_VERSION, file_digest,
                                  load_checkpoint, save_checkpoint,
                                  expect_kind)
from obfusion.errors import DataFormatError, SchemaError


@pytest.fixture
def sample_params():
    rng = np.random.default_rng(42)
    return {
        "enc.fc0.w": rng.normal(size=(6, 4)).astype(np.float32),
        "enc.fc0.b": rng.normal(size=4).astype(np.float32),
        "dec.w": rng.normal(size=(4, 2, 3)).astype(np.float32),
    }


def test_roundtrip_bitwise(tmp_path, sample_params):
    path = tmp_path / "m.ckpt"
    meta = {"latent_dim": 4, "note": "unit test"}
    digest = save_checkpoint(path, "vae", sample_params, meta)
    ckpt = load_checkpoint(path)
    assert ckpt.kind == "vae"
    assert ckpt.digest == digest == file_digest(path)
    assert ckpt.meta["latent_dim"] == 4
    assert "tool_version" in ckpt.meta
    assert list(ckpt.params) == list(sample_params)
    for name, arr in sample_params.items():
        assert ckpt.params[name].dtype == np.float32
        np.testing.assert_array_equal(ckpt.params[name], arr)


def test_identical_saves_identical_bytes(tmp_path, sample_params):
    d1 = save_checkpoint(tmp_path / "a.ckpt", "ldm", sample_params, {"t": 1000})
    d2 = save_checkpoint(tmp_path / "b.ckpt", "ldm", sample_params, {"t": 1000})
    assert d1 == d2
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_optimizer_state_roundtrip(tmp_path, sample_params):
    opt = nn.make_optimizer(sample_params, "adamw", lr=2e-4, weight_decay=0.01)
    grads = {k: np.ones_like(v) for k, v in sample_params.items()}
    nn.optimizer_step(opt, sample_params, grads)
    nn.optimizer_step(opt, sample_params, grads)
    save_checkpoint(tmp_path / "m.ckpt", "ldm", sample_params, opt_state=opt)
    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    assert ckpt.opt_state is not None
    assert ckpt.opt_state.kind == "adamw"
    assert ckpt.opt_state.step == 2
    assert ckpt.opt_state.lr == 2e-4
    assert ckpt.opt_state.weight_decay == 0.01
    for name in sample_params:
        np.testing.assert_array_equal(ckpt.opt_state.m[name], opt.m[name])
        np.testing.assert_array_equal(ckpt.opt_state.v[name], opt.v[name])


def test_resume_training_bitwise_equivalent(tmp_path):
    """Save/load mid-training, continue, and match an uninterrupted run."""
    def fresh():
        rng = np.random.default_rng(0)
        model = nn.MLP([3, 8, 2], rng)
        opt = nn.make_optimizer(model.params(), "adam", lr=1e-2)
        return model, opt

    data_rng = np.random.default_rng(1)
    xs = [data_rng.normal(size=(4, 3)).astype(np.float32) for _ in range(6)]
    ys = [data_rng.integers(0, 2, size=4) for _ in range(6)]

    def step(model, opt, x, y):
        logits, cache = model.forward(x)
        _, dlogits = nn.cross_entropy(logits, y)
        _, grads = model.backward(cache, dlogits.astype(np.float32))
        nn.optimizer_step(opt, model.params(), grads)

    m1, o1 = fresh()
    for x, y in zip(xs, ys):
        step(m1, o1, x, y)

    m2, o2 = fresh()
    for x, y in zip(xs[:3], ys[:3]):
        step(m2, o2, x, y)
    save_checkpoint(tmp_path / "mid.ckpt", "classifier", m2.params(), opt_state=o2)
    ckpt = load_checkpoint(tmp_path / "mid.ckpt")
    m3, _ = fresh()
    m3.set_params(ckpt.params)
    o3 = ckpt.opt_state
    for x, y in zip(xs[3:], ys[3:]):
        step(m3, o3, x, y)

    for name, arr in m1.params().items():
        np.testing.assert_array_equal(arr, m3.params()[name])


def test_crc_detects_corruption(tmp_path, sample_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "vae", sample_params)
    blob = bytearray(path.read_bytes())
    blob[30] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError, match="CRC"):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(DataFormatError, match="magic"):
        load_checkpoint(path)


def test_unknown_version_rejected(tmp_path, sample_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "vae", sample_params)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    body = bytes(blob[:-4])
    blob[-4:] = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path.write_bytes(bytes(blob))
    with pytest.raises(SchemaError, match="version"):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path, sample_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "vae", sample_params)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(DataFormatError):
        load_checkpoint(path)


def test_expect_kind(tmp_path, sample_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "vae", sample_params)
    ckpt = load_checkpoint(path)
    assert expect_kind(ckpt, "vae") is ckpt
    with pytest.raises(SchemaError):
        expect_kind(ckpt, "ldm")


def test_meta_change_changes_digest(tmp_path, sample_params):
    d1 = save_checkpoint(tmp_path / "a.ckpt", "vae", sample_params, {"s": 1})
    d2 = save_checkpoint(tmp_path / "b.ckpt", "vae", sample_params, {"s": 2})
    assert d1 != d2
