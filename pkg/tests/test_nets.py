import numpy as np
import pytest

from ds2net import diffcore as dc
from ds2net.diffcore import ShapeError, Tensor
from ds2net.nets import (
    CheckpointError,
    Conv2d,
    Discriminator,
    Encoder,
    EncoderConfig,
    Head,
    config_digest,
    disc_output_size,
    discriminate,
    encode,
    head_forward,
    load_checkpoint,
    min_disc_input,
    quad_forward,
    save_checkpoint,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def images(n, size=64, seed=0):
    return Tensor(rng(seed).uniform(0, 1, size=(n, 3, size, size)).astype(np.float32))


def test_encoder_output_shape():
    enc = Encoder(rng())
    assert encode(enc, images(1)).shape == (1, 64, 8, 8)


def test_encoder_zero_input_zero_features():
    enc = Encoder(rng())
    f = enc(Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))
    assert np.all(f.data == 0)


def test_encoder_tied_params_identical():
    a, b = Encoder(rng(3)), Encoder(rng(3))
    x = images(2, 32)
    np.testing.assert_array_equal(a(x).data, b(x).data)


def test_encoder_rejects_indivisible_size():
    with pytest.raises(ShapeError):
        Encoder(rng())(images(1, 60))


def test_quad_tied_and_same_input_all_equal():
    enc = Encoder(rng(1))
    x = images(1, 32)
    q = quad_forward(enc, enc, x, x)
    for f in (q.st, q.tt, q.ts):
        np.testing.assert_array_equal(f.data, q.ss.data)


def test_quad_shapes():
    q = quad_forward(Encoder(rng(1)), Encoder(rng(2)), images(2, seed=1), images(2, seed=2))
    assert {f.shape for f in (q.ss, q.st, q.tt, q.ts)} == {(2, 64, 8, 8)}


def test_quad_matches_independent_calls():
    es, et = Encoder(rng(1)), Encoder(rng(2))
    xs, xt = images(1, 32, 1), images(1, 32, 2)
    q = quad_forward(es, et, xs, xt)
    np.testing.assert_array_equal(q.ss.data, es(xs).data)
    np.testing.assert_array_equal(q.st.data, et(xs).data)
    np.testing.assert_array_equal(q.tt.data, et(xt).data)
    np.testing.assert_array_equal(q.ts.data, es(xt).data)


def test_head_constant_feature_gives_constant_logits():
    head = Head(rng(), 96)
    for p in head.parameters():
        p.data = rng(5).normal(size=p.shape).astype(np.float32)
    f = Tensor(np.full((1, 96, 4, 4), 0.7, dtype=np.float32))
    out = head_forward(head, f).data
    assert out.shape == (1, 2, 32, 32)
    np.testing.assert_allclose(out, out[:, :, :1, :1] * np.ones_like(out), rtol=1e-6, atol=1e-6)


def test_head_output_matches_image_size_and_argmax_binary():
    enc, head = Encoder(rng()), Head(rng(1), 64)
    x = images(2, 48)
    logits = head(enc(x))
    assert logits.shape == (2, 2, 48, 48)
    mask = logits.data.argmax(axis=1)
    assert mask.shape == (2, 48, 48) and set(np.unique(mask)) <= {0, 1}


def test_head_channel_mismatch():
    with pytest.raises(ShapeError):
        Head(rng(), 96)(Tensor(np.zeros((1, 64, 4, 4), dtype=np.float32)))


def test_disc_output_sizes():
    assert disc_output_size(16) == 2
    assert disc_output_size(12) == 1
    with pytest.raises(ShapeError):
        disc_output_size(11)
    assert min_disc_input() == 12


def test_disc_eight_pixels_infeasible():
    d = Discriminator(rng(), 64)
    with pytest.raises(ShapeError):
        d(Tensor(np.zeros((1, 64, 8, 8), dtype=np.float32)))


def test_disc_patch_map_shape():
    d = Discriminator(rng(), 8)
    out = discriminate(d, Tensor(rng(1).normal(size=(2, 8, 16, 16)).astype(np.float32)))
    assert out.shape == (2, 1, 2, 2)


def test_disc_zero_weights_half_probability():
    d = Discriminator(rng(), 8)
    for p in d.parameters():
        p.data = np.zeros_like(p.data)
    out = d(Tensor(rng(1).normal(size=(1, 8, 12, 12)).astype(np.float32)))
    np.testing.assert_array_equal(out.data, 0)
    np.testing.assert_array_equal(dc.sigmoid(out).data, 0.5)


def test_parameter_count_is_pure():
    def count():
        return (
            Encoder(rng(1)).num_parameters()
            + Head(rng(2), 96).num_parameters()
            + Discriminator(rng(3), 64).num_parameters()
        )

    enc = 3 * 16 * 9 + 16 + 16 * 32 * 9 + 32 + 32 * 32 * 9 + 32 + 32 * 64 * 9 + 64 + 64 * 64 * 9 + 64
    head = 96 * 64 + 64 + 64 * 2 + 2
    disc = 64 * 64 * 16 + 64 + 64 * 128 * 16 + 128 + 128 * 256 * 16 + 256 + 256 * 16 + 1
    assert count() == count() == enc + head + disc


def test_forward_deterministic():
    enc = Encoder(rng(4))
    x = images(1, 32)
    np.testing.assert_array_equal(enc(x).data, enc(x).data)


def test_frozen_restores_flags():
    conv = Conv2d(rng(), 2, 3, 1)
    with conv.frozen():
        assert not any(p.requires_grad for p in conv.parameters())
    assert all(p.requires_grad for p in conv.parameters())


def test_encoder_needs_three_widths():
    with pytest.raises(ValueError):
        Encoder(rng(), EncoderConfig(widths=(8, 16)))


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    r = rng(9)
    tensors = {
        "a": r.normal(size=(3, 4)).astype(np.float32),
        "b.weight": r.normal(size=(2, 2, 1, 1)),
        "steps": np.array([7], dtype=np.int64),
        "scalar": np.float32(r.normal(size=())),
    }
    digest = config_digest('{"x": 1}')
    save_checkpoint(tmp_path / "c.bin", tensors, digest, {"iteration": 5})
    back, d2, meta = load_checkpoint(tmp_path / "c.bin")
    assert d2 == digest and meta == {"iteration": 5}
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == np.asarray(v).dtype
        assert back[k].tobytes() == np.asarray(v).tobytes()


def test_checkpoint_header_layout(tmp_path):
    save_checkpoint(tmp_path / "c.bin", {"w": np.ones(2, dtype=np.float32)}, b"\x01" * 32)
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"DS2NCKPT"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert raw[12:44] == b"\x01" * 32
    assert int.from_bytes(raw[44:48], "little") == 1
    assert int.from_bytes(raw[48:52], "little") == 1 and raw[52:53] == b"w"


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"w": np.ones(8, dtype=np.float32)}, b"\x00" * 32)
    raw = p.read_bytes()
    p.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(raw[:60])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_rejects_short_digest(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "c.bin", {}, b"abc")
