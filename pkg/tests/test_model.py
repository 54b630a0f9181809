import struct
import zlib

import numpy as np
import pytest

from microisp.errors import ConfigError, ContractError, FormatError
from microisp.model import (ATTENTION_VARIANTS, ACTIVATION_VARIANTS, BRANCHES, DEPTH_TO_BLOCKS,
                            GraphBuilder, MicroISPModel, ModelConfig, build_model, decode_weights,
                            encode_weights, forward, forward_branch, load_weights, param_count,
                            save_weights)
from microisp.tensor import Tape

ALL_CONFIGS = [ModelConfig(d, a, act, clamp)
               for d in DEPTH_TO_BLOCKS for a in ATTENTION_VARIANTS
               for act in ACTIVATION_VARIANTS for clamp in (False, True)]


def _packed(seed, h=16, w=16):
    return np.random.default_rng(seed).uniform(0, 1, (h, w, 4)).astype(np.float32)


@pytest.mark.parametrize("depth,blocks", [(1.5, 3), (1.0, 2), (0.5, 1)])
def test_full_block_structure(depth, blocks):
    m = build_model(ModelConfig(depth), seed=0)
    assert len(m.branches) == 3
    for br in m.branches:
        assert len(br.blocks) == blocks
        assert all(b.conv2 is not None and b.act2 is not None for b in br.blocks)
        assert br.tail.kernel.shape == (3, 3, 4, 4)


def test_quarter_config_is_half_block():
    m = build_model(ModelConfig(0.25), seed=0)
    for br in m.branches:
        (blk,) = br.blocks
        assert blk.conv2 is None and blk.act2 is None
        assert blk.conv1 is not None and blk.attention is not None


def test_attention_shapes():
    att = build_model(ModelConfig(1.0)).branches[0].blocks[0].attention
    assert att.reduce.kernel.shape == (1, 1, 4, 4)
    assert [c.kernel.shape for c, _ in att.body] == [(3, 3, 4, 4)] * 3
    assert all(a.shape == (4,) for _, a in att.body)
    assert att.head1.kernel.shape == att.head2.kernel.shape == (1, 1, 4, 4)


def test_every_conv_is_four_to_four():
    m = build_model(ModelConfig(1.5, "enhanced"))
    for name, arr in m.params.items():
        if name.endswith(".kernel"):
            assert arr.shape[2:] == (4, 4), name


def test_invalid_multiplier():
    with pytest.raises(ConfigError):
        ModelConfig(0.75)
    with pytest.raises(ConfigError):
        ModelConfig(1.0, attention_variant="spatial")


def test_build_is_deterministic_and_initialised():
    a, b = build_model(ModelConfig(1.0), 5), build_model(ModelConfig(1.0), 5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build_model(ModelConfig(1.0), 6)
    assert not np.array_equal(a.params["r.tail.kernel"], c.params["r.tail.kernel"])
    for name, arr in a.params.items():
        if name.endswith(".bias"):
            assert not arr.any()
        elif name.endswith(".alpha"):
            assert (arr == 0.25).all()
        else:
            bound = 1 / np.sqrt(np.prod(arr.shape[:3]))
            assert np.abs(arr).max() <= bound


def test_output_shape():
    m = build_model(ModelConfig(0.25))
    assert forward(m, _packed(0, 128, 128)).shape == (256, 256, 3)
    assert forward(m, _packed(0, 16, 24)).shape == (32, 48, 3)


def test_input_contract():
    m = build_model(ModelConfig(0.25))
    with pytest.raises(ContractError):
        forward(m, np.zeros((16, 16, 3), np.float32))
    with pytest.raises(ContractError):
        forward(m, np.zeros((8, 16, 4), np.float32))


def test_zero_network():
    m = build_model(ModelConfig(1.0))
    for v in m.params.values():
        v[...] = 0
    assert not forward(m, _packed(1)).any()


def test_zero_head_gives_half_gate():
    m = build_model(ModelConfig(1.0), 3)
    m.params["r.block0.att.head2.kernel"][...] = 0
    x = np.random.default_rng(2).standard_normal((27, 27, 4)).astype(np.float32)
    tape = Tape(record=False)
    out = GraphBuilder(m, tape).attention(tape.leaf(x), "r.block0.att").data
    assert np.array_equal(out, 0.5 * x)


@pytest.mark.parametrize("depth", [1.0, 0.25])
def test_residual_identity(depth):
    m = build_model(ModelConfig(depth), 3)
    last = "conv1" if depth == 0.25 else "conv2"
    for part in ("kernel", "bias"):
        m.params[f"g.block0.{last}.{part}"][...] = 0
    m.params["g.block0.att.head2.kernel"][...] = 0
    x = _packed(4)
    tape = Tape(record=False)
    out = GraphBuilder(m, tape).block(tape.leaf(x), "g.block0").data
    assert np.array_equal(out, x)


def test_branch_isolation():
    m = build_model(ModelConfig(1.0), 8)
    x = _packed(5, 20, 18)
    full = forward(m, x)
    for c, br in enumerate(BRANCHES):
        assert np.array_equal(full[:, :, c], forward_branch(m, br, x)[:, :, 0])


def test_branch_independence():
    m = build_model(ModelConfig(1.0), 8)
    x = _packed(6)
    before = forward(m, x)
    for name in m.params:
        if name.startswith("r."):
            m.params[name] += 0.05
    after = forward(m, x)
    assert not np.array_equal(before[:, :, 0], after[:, :, 0])
    assert np.array_equal(before[:, :, 1:], after[:, :, 1:])


def test_leaky_equals_prelu_at_fixed_slope():
    prelu_model = build_model(ModelConfig(1.0, activation_variant="prelu"), 2)
    for name, arr in prelu_model.params.items():
        if name.endswith(".alpha"):
            arr[...] = np.float32(0.2)
    leaky_params = {k: v for k, v in prelu_model.params.items() if not k.endswith(".alpha")}
    leaky_model = MicroISPModel(ModelConfig(1.0, activation_variant="leaky-relu"), leaky_params)
    x = _packed(7)
    assert np.array_equal(forward(prelu_model, x), forward(leaky_model, x))


def test_clamp_only_when_configured():
    m = build_model(ModelConfig(0.25), 0)
    m.params["r.tail.bias"][...] = 5.0
    assert forward(m, _packed(0)).max() > 1
    mc = MicroISPModel(ModelConfig(0.25, clamp_output=True), m.params)
    out = forward(mc, _packed(0))
    assert out.max() <= 1 and out.min() >= 0


def test_param_count_config_one():
    # per branch: 2 blocks x (2 convs + 2 alphas + attention 6 convs + 4 alphas) + tail
    conv3, conv1, alpha = 3 * 3 * 4 * 4 + 4, 4 * 4 + 4, 4
    attention = conv1 + 3 * (conv3 + alpha) + conv1 + alpha + conv1
    block = 2 * (conv3 + alpha) + attention
    assert param_count(build_model(ModelConfig(1.0))) == 3 * (2 * block + conv3)


def _expected_file_size(model):
    size = 4 + 2 + 4 + 4
    for name, arr in model.params.items():
        size += 2 + len(name.encode()) + 1 + 4 * arr.ndim + 4 * arr.size
    return size


@pytest.mark.parametrize("config", ALL_CONFIGS, ids=str)
def test_roundtrip_all_configs(config, tmp_path):
    m = build_model(config, 11)
    path = tmp_path / "w.misp"
    save_weights(m, path)
    m2 = load_weights(path)
    assert m2.config == config
    assert list(m2.params) == list(m.params)
    assert all(m.params[k].tobytes() == m2.params[k].tobytes() for k in m.params)
    assert path.stat().st_size == _expected_file_size(m)


def test_forward_after_roundtrip(tmp_path):
    m = build_model(ModelConfig(1.0), 4)
    save_weights(m, tmp_path / "w")
    x = _packed(9)
    assert np.array_equal(forward(m, x), forward(load_weights(tmp_path / "w"), x))


def test_file_size_under_one_mib():
    assert len(encode_weights(build_model(ModelConfig(1.0)))) < 2**20
    assert len(encode_weights(build_model(ModelConfig(1.5)))) < 2**20


def test_header_layout():
    buf = encode_weights(build_model(ModelConfig(0.25, "standard-pool", "leaky-relu", True)))
    assert buf[:4] == b"MISP"
    assert struct.unpack("<HBBBB", buf[4:10]) == (1, 0, 1, 1, 1)
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])


def _reseal(body):
    return body + struct.pack("<I", zlib.crc32(body))


def test_rejects_truncation_everywhere():
    buf = encode_weights(build_model(ModelConfig(0.25)))
    for cut in (0, 3, 9, 20, len(buf) // 2, len(buf) - 5, len(buf) - 1):
        with pytest.raises(FormatError):
            decode_weights(buf[:cut])


def test_rejects_corruption():
    buf = bytearray(encode_weights(build_model(ModelConfig(0.25))))
    buf[200] ^= 0x01
    with pytest.raises(FormatError, match="crc32"):
        decode_weights(bytes(buf))


@pytest.mark.parametrize("offset,value,field", [(0, b"X", "magic"), (4, b"\x02", "version"),
                                                (6, b"\x07", "blocks_per_branch"),
                                                (7, b"\x09", "attention_variant")])
def test_rejects_bad_header_fields(offset, value, field):
    buf = bytearray(encode_weights(build_model(ModelConfig(0.25)))[:-4])
    buf[offset:offset + 1] = value
    with pytest.raises(FormatError, match=field):
        decode_weights(_reseal(bytes(buf)))


def test_rejects_mismatched_tensor_set():
    # header says 1.0 but records describe 0.25
    buf = bytearray(encode_weights(build_model(ModelConfig(0.25)))[:-4])
    buf[6] = 2
    with pytest.raises(FormatError):
        decode_weights(_reseal(bytes(buf)))


def test_failed_save_leaves_no_partial_file(tmp_path, monkeypatch):
    import microisp.model as model_mod

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(model_mod.os, "replace", boom)
    with pytest.raises(OSError):
        save_weights(build_model(ModelConfig(0.25)), tmp_path / "w.misp")
    assert list(tmp_path.iterdir()) == []
