import struct
import zlib

import numpy as np
import pytest

from gtalab import numeric_core as nc
from gtalab.analysis import model_param_count
from gtalab.errors import ChecksumError, ConfigError, DimensionError, FormatError, IntegrityError
from gtalab.model import (CKPT_MAGIC, ModelSpec, build_model, checkpoint_bytes, load_checkpoint,
                          read_checkpoint, save_checkpoint)
from gtalab.plan import parse_plan

SMALL = dict(t=4, h=8, w=8, patch=4, c=8)


def spec(blocks="", **kw):
    return ModelSpec(**{**SMALL, **kw}, blocks=parse_plan(blocks))


def clips(n, s, seed=0):
    return np.random.default_rng(seed).random((n, s.t, s.h, s.w, s.c_in))


def randomize(model, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        if p.trainable:
            p.value = rng.normal(scale=scale, size=p.shape)


# ---------------------------------------------------------------- spec

def test_spec_lists_every_problem():
    bad = ModelSpec(t=0, h=10, w=8, patch=4, c=12, blocks=parse_plan("gta[g=8]"))
    with pytest.raises(ConfigError) as info:
        build_model(bad)
    msg = str(info.value)
    assert "t=0" in msg and "patch=4" in msg and "block 0 (gta)" in msg


def test_tape_tmax_shorter_than_clip():
    with pytest.raises(ConfigError, match="tmax"):
        build_model(spec("tape[tmax=2]"))


def test_spec_text_round_trip():
    s = spec("sa,gta[g=2,k=3],tape[pe=sinusoidal]", seed=7, stem_bias=False)
    assert ModelSpec.from_text(s.to_text()) == s


def test_spec_rejects_unknown_and_repeated_keys():
    with pytest.raises(ConfigError, match="unknown"):
        ModelSpec.from_text("t=4\ndepth=3\n")
    with pytest.raises(ConfigError, match="repeated"):
        ModelSpec.from_text("t=4\nt=5\n")
    with pytest.raises(ConfigError):
        ModelSpec.from_text("t=four\n")


# ---------------------------------------------------------------- build

def test_empty_plan_is_stem_and_head():
    m = build_model(spec())
    assert list(m.registry) == ["stem.w", "stem.pos_bias", "head.w", "head.b"]
    assert m.layers == []


def test_same_seed_same_parameters():
    a, b = build_model(spec("nl,gta[g=2]", seed=3)), build_model(spec("nl,gta[g=2]", seed=3))
    assert a.checksum() == b.checksum()
    assert build_model(spec("nl,gta[g=2]", seed=4)).checksum() != a.checksum()


def test_registry_names_unique_and_ordered():
    m = build_model(spec("sa,dnl,gta[g=2]"))
    names = list(m.registry)
    assert len(names) == len(set(names))
    assert names[:2] == ["stem.w", "stem.pos_bias"] and names[-2:] == ["head.w", "head.b"]
    assert names.index("block0.w_q") < names.index("block1.s.w_q") < names.index("block2.pixel.w_v")


def test_param_count_matches_closed_form():
    s = ModelSpec(t=8, h=16, w=16, patch=4, c=32, blocks=parse_plan("gta[g=8,k=4]"))
    m = build_model(s)
    assert sum(p.value.size for p in m.trainable()) == model_param_count(s)
    # stem 16*32 + bias 16*32 + two paths (2*32^2 + 8*8*64) + w_g 4*32 + head 32*2 + 2
    assert model_param_count(s) == 512 + 512 + 2 * (2048 + 4096) + 128 + 66


@pytest.mark.parametrize("plan", ["nl[norm=on]", "sa,ta", "tape", "tape[pe=sinusoidal]", "dnl",
                                  "gta[ccmh=off,region=off]", "gta[g=2,k=3,pixel=off]"])
def test_param_count_closed_form_per_kind(plan):
    s = spec(plan)
    assert sum(p.value.size for p in build_model(s).trainable()) == model_param_count(s)


# ---------------------------------------------------------------- forward

def test_one_patch_per_frame():
    s = ModelSpec(t=3, h=4, w=4, patch=4, c=5)
    assert build_model(s).stem(clips(2, s)).shape == (2, 3, 1, 5)


def test_stem_of_zeros():
    s = spec(stem_bias=False)
    assert not build_model(s).stem(np.zeros((1, 4, 8, 8, 1))).data.any()
    m = build_model(spec())
    out = m.stem(np.zeros((1, 4, 8, 8, 1))).data
    np.testing.assert_array_equal(out[0, 2], m.b_stem.value.data)


def test_stem_patch_layout():
    s = ModelSpec(t=1, h=4, w=4, patch=2, c=1, stem_bias=False)
    m = build_model(s)
    m.w_stem.value = np.arange(1.0, 5.0).reshape(4, 1)      # weights for (row, col) in patch
    frame = np.zeros((1, 1, 4, 4, 1))
    frame[0, 0, 2, 1, 0] = 1.0                               # bottom-left patch, offset (0, 1)
    out = m.stem(frame).data[0, 0, :, 0]
    np.testing.assert_array_equal(out, [0, 0, 2, 0])


def test_stem_is_framewise():
    s = spec()
    m = build_model(s)
    x = clips(1, s)
    perm = [2, 0, 3, 1]
    np.testing.assert_array_equal(m.stem(x[:, perm]).data, m.stem(x).data[:, perm])


def test_fresh_blocks_are_transparent():
    s = spec("nl,sa,ta,tape,dnl,gta[g=2]")
    m = build_model(s)
    bare = build_model(spec())
    for name in ("stem.w", "stem.pos_bias", "head.w", "head.b"):
        bare.registry[name].value = m.registry[name].value
    x = clips(3, s)
    np.testing.assert_array_equal(m(x).data, bare(x).data)


def test_forward_is_deterministic():
    s = spec("dnl,gta[g=2]")
    a, b = build_model(s), build_model(s)
    randomize(a, 1)
    randomize(b, 1)
    x = clips(2, s)
    assert a(x).data.tobytes() == b(x).data.tobytes()


@pytest.mark.parametrize("plan", ["", "sa", "ta", "sa,ta", "nl", "dnl,sa[norm=on]"])
def test_blind_models_ignore_time_order(plan):
    s = spec(plan)
    m = build_model(s)
    randomize(m, 2)
    x = clips(2, s, seed=3)
    rng = np.random.default_rng(4)
    for perm in [np.arange(s.t)[::-1]] + [rng.permutation(s.t) for _ in range(3)]:
        np.testing.assert_allclose(m(x[:, perm]).data, m(x).data, atol=1e-9)


@pytest.mark.parametrize("plan", ["gta[g=2]", "tape"])
def test_order_aware_models_see_reversal(plan):
    s = spec(plan)
    m = build_model(s)
    randomize(m, 5)
    x = clips(1, s, seed=6)
    assert np.abs(m(x[:, ::-1]).data - m(x).data).max() > 1e-6


def test_geometry_mismatch():
    m = build_model(spec())
    with pytest.raises(DimensionError):
        m(np.zeros((1, 5, 8, 8, 1)))
    with pytest.raises(DimensionError):
        m(np.zeros((8, 8, 1)))


def test_single_clip_is_accepted():
    s = spec("sa")
    m = build_model(s)
    x = clips(1, s)
    np.testing.assert_array_equal(m(x[0]).data, m(x).data)


def test_every_registered_parameter_gets_a_gradient():
    s = spec("nl,sa,tape,dnl,gta[g=2]")
    m = build_model(s)
    randomize(m, 7)
    with nc.Tape() as tape:
        from gtalab.training import cross_entropy
        tape.backward(cross_entropy(m(clips(2, s)), np.array([0, 1])))
        grads = tape.param_grads()
    assert set(grads) == {p.name for p in m.trainable()}
    assert all(grads[n].shape == m.registry[n].shape for n in grads)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    s = spec("sa,gta[g=2],tape[pe=sinusoidal]", seed=9)
    m = build_model(s)
    randomize(m, 8)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.spec == s
    assert back.checksum() == m.checksum()
    x = clips(2, s)
    assert back(x).data.tobytes() == m(x).data.tobytes()


def test_checkpoint_layout():
    s = ModelSpec(t=2, h=2, w=2, patch=2, c=1, classes=2, stem_bias=False)
    blob = checkpoint_bytes(build_model(s))
    assert blob[:8] == CKPT_MAGIC
    (spec_len,) = struct.unpack_from("<I", blob, 8)
    assert blob[12:12 + spec_len].decode() == s.to_text()
    pos = 12 + spec_len
    (name_len,) = struct.unpack_from("<I", blob, pos)
    assert blob[pos + 4:pos + 4 + name_len] == b"stem.w"
    pos += 4 + name_len
    assert struct.unpack_from("<I2Q", blob, pos) == (2, 4, 1)
    (crc,) = struct.unpack("<I", blob[-4:])
    assert crc == zlib.crc32(blob[:-4])


def test_truncated_checkpoint(tmp_path):
    blob = checkpoint_bytes(build_model(spec()))
    path = tmp_path / "cut.ckpt"
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_bad_magic_reports_offset():
    blob = bytearray(checkpoint_bytes(build_model(spec())))
    blob[0:8] = b"NOTACKPT"
    with pytest.raises(FormatError) as info:
        read_checkpoint(bytes(blob))
    assert info.value.offset == 0


def test_flipped_bit_is_caught():
    blob = bytearray(checkpoint_bytes(build_model(spec())))
    blob[100] ^= 0x10
    with pytest.raises(ChecksumError):
        read_checkpoint(bytes(blob))


def test_loading_against_another_spec(tmp_path):
    save_checkpoint(build_model(spec("sa")), tmp_path / "a.ckpt")
    with pytest.raises(IntegrityError, match="block0.w_q"):
        load_checkpoint(tmp_path / "a.ckpt", spec("gta[g=2]"))
    with pytest.raises(IntegrityError, match="shape"):
        load_checkpoint(tmp_path / "a.ckpt", spec("sa", c=4, patch=4))
    with pytest.raises(IntegrityError, match="block1.w_q"):
        load_checkpoint(tmp_path / "a.ckpt", spec("sa,sa"))
