"""The MicroISP network: parameters, forward pass and weight files.

A packed ``(h, w, 4)`` Bayer tensor (channels R, G1, G2, B) is fed to three
independent branches, one per output color. Each branch is a stack of
residual building blocks made of 4-filter 3x3 convolutions, an activation and
a channel attention gate, followed by a 4-filter tail convolution and a
depth-to-space op that produces one full-resolution color plane. The three
planes are concatenated into a ``(2h, 2w, 3)`` RGB image.

Parameters live in a flat, ordered ``{name: array}`` mapping so that the
optimizer, serializer and gradient checker can treat them uniformly; the
structured views (:class:`BuildingBlockParams`, ...) are built on demand for
introspection.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .tensor import ConvWeights, Tape, Var

BRANCHES = ("r", "g", "b")
LEAKY_SLOPE = 0.2
PRELU_INIT = 0.25
MIN_PACKED_SIZE = 16

DEPTH_TO_BLOCKS = {1.5: 3, 1.0: 2, 0.5: 1, 0.25: 0}
BLOCKS_TO_DEPTH = {v: k for k, v in DEPTH_TO_BLOCKS.items()}
ATTENTION_VARIANTS = ("enhanced", "standard-pool", "none")
ACTIVATION_VARIANTS = ("prelu", "leaky-relu")

MAGIC = b"MISP"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    depth_multiplier: float = 1.0
    attention_variant: str = "enhanced"
    activation_variant: str = "prelu"
    clamp_output: bool = False

    def __post_init__(self):
        if self.depth_multiplier not in DEPTH_TO_BLOCKS:
            raise ConfigError(f"depth multiplier must be one of {sorted(DEPTH_TO_BLOCKS)}, "
                              f"got {self.depth_multiplier}")
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ConfigError(f"unknown attention variant {self.attention_variant!r}")
        if self.activation_variant not in ACTIVATION_VARIANTS:
            raise ConfigError(f"unknown activation variant {self.activation_variant!r}")

    @property
    def blocks_per_branch(self) -> int:
        """Number of full building blocks; 0 means a single half block."""
        return DEPTH_TO_BLOCKS[self.depth_multiplier]

    @property
    def half_block(self) -> bool:
        return self.blocks_per_branch == 0

    @property
    def learned_activations(self) -> bool:
        return self.activation_variant == "prelu"


@dataclass
class AttentionParams:
    head1: ConvWeights
    head2: ConvWeights
    head_act: np.ndarray | None
    reduce: ConvWeights | None = None
    body: list[tuple[ConvWeights, np.ndarray | None]] = field(default_factory=list)


@dataclass
class BuildingBlockParams:
    conv1: ConvWeights
    act1: np.ndarray | None
    conv2: ConvWeights | None = None
    act2: np.ndarray | None = None
    attention: AttentionParams | None = None


@dataclass
class BranchParams:
    blocks: list[BuildingBlockParams]
    tail: ConvWeights


def _conv_spec(name: str, k: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{name}.kernel", (k, k, 4, 4)), (f"{name}.bias", (4,))]


def param_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` list of every parameter the config needs."""
    act = config.learned_activations
    spec: list[tuple[str, tuple[int, ...]]] = []

    def add_act(name):
        if act:
            spec.append((f"{name}.alpha", (4,)))

    for br in BRANCHES:
        n_blocks = max(config.blocks_per_branch, 1)
        for i in range(n_blocks):
            p = f"{br}.block{i}"
            spec += _conv_spec(f"{p}.conv1", 3)
            add_act(f"{p}.act1")
            if not config.half_block:
                spec += _conv_spec(f"{p}.conv2", 3)
                add_act(f"{p}.act2")
            if config.attention_variant == "enhanced":
                spec += _conv_spec(f"{p}.att.reduce", 1)
                for j in range(3):
                    spec += _conv_spec(f"{p}.att.body{j}", 3)
                    add_act(f"{p}.att.body{j}.act")
            if config.attention_variant != "none":
                spec += _conv_spec(f"{p}.att.head1", 1)
                add_act(f"{p}.att.head_act")
                spec += _conv_spec(f"{p}.att.head2", 1)
        spec += _conv_spec(f"{br}.tail", 3)
    return spec


@dataclass
class MicroISPModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_spec(self.config)
        names = [n for n, _ in expected]
        if list(self.params) != names:
            missing = sorted(set(names) - set(self.params))
            extra = sorted(set(self.params) - set(names))
            if missing or extra:
                raise ConfigError(f"parameter set mismatch: missing={missing[:3]} extra={extra[:3]}")
            self.params = {n: self.params[n] for n in names}
        for name, shape in expected:
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape} != {shape}")

    def conv(self, name: str) -> ConvWeights:
        return ConvWeights(self.params[f"{name}.kernel"], self.params[f"{name}.bias"])

    def alpha(self, name: str) -> np.ndarray | None:
        return self.params.get(f"{name}.alpha")

    def _attention(self, p: str) -> AttentionParams | None:
        variant = self.config.attention_variant
        if variant == "none":
            return None
        att = AttentionParams(self.conv(f"{p}.att.head1"), self.conv(f"{p}.att.head2"),
                              self.alpha(f"{p}.att.head_act"))
        if variant == "enhanced":
            att.reduce = self.conv(f"{p}.att.reduce")
            att.body = [(self.conv(f"{p}.att.body{j}"), self.alpha(f"{p}.att.body{j}.act"))
                        for j in range(3)]
        return att

    @property
    def branches(self) -> list[BranchParams]:
        out = []
        for br in BRANCHES:
            blocks = []
            for i in range(max(self.config.blocks_per_branch, 1)):
                p = f"{br}.block{i}"
                blk = BuildingBlockParams(self.conv(f"{p}.conv1"), self.alpha(f"{p}.act1"),
                                          attention=self._attention(p))
                if not self.config.half_block:
                    blk.conv2 = self.conv(f"{p}.conv2")
                    blk.act2 = self.alpha(f"{p}.act2")
                blocks.append(blk)
            out.append(BranchParams(blocks, self.conv(f"{br}.tail")))
        return out

    def astype(self, dtype) -> "MicroISPModel":
        return MicroISPModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "MicroISPModel":
        return MicroISPModel(self.config, {k: v.copy() for k, v in self.params.items()})


def build_model(config: ModelConfig, seed: int = 0) -> MicroISPModel:
    """Kernels ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases, PReLU slopes 0.25."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_spec(config):
        if name.endswith(".kernel"):
            bound = 1.0 / np.sqrt(shape[0] * shape[1] * shape[2])
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, np.float32)
        else:
            params[name] = np.full(shape, PRELU_INIT, np.float32)
    return MicroISPModel(config, params)


def param_count(model: MicroISPModel) -> int:
    return int(sum(v.size for v in model.params.values()))


# ---------------------------------------------------------------------------
# forward

class GraphBuilder:
    """Emits the network's ops onto a :class:`Tape`, one parameter leaf per name."""

    def __init__(self, model: MicroISPModel, tape: Tape):
        self.model = model
        self.tape = tape
        self.leaves: dict[str, Var] = {}

    def p(self, name: str) -> Var:
        v = self.leaves.get(name)
        if v is None:
            v = self.leaves[name] = self.tape.leaf(self.model.params[name], name)
        return v

    def conv(self, x: Var, name: str, stride: int = 1) -> Var:
        return self.tape.apply("conv2d", (x, self.p(f"{name}.kernel"), self.p(f"{name}.bias")),
                               stride=stride)

    def act(self, x: Var, name: str) -> Var:
        if self.model.config.learned_activations:
            return self.tape.apply("prelu", (x, self.p(f"{name}.alpha")))
        return self.tape.apply("leaky_relu", (x,), slope=LEAKY_SLOPE)

    def attention(self, x: Var, prefix: str) -> Var:
        variant = self.model.config.attention_variant
        if variant == "none":
            return x
        t = x
        if variant == "enhanced":
            t = self.conv(t, f"{prefix}.reduce", stride=3)
            for j in range(3):
                t = self.act(self.conv(t, f"{prefix}.body{j}", stride=3), f"{prefix}.body{j}.act")
        t = self.tape.apply("global_avg_pool", (t,))
        t = self.act(self.conv(t, f"{prefix}.head1"), f"{prefix}.head_act")
        coeffs = self.tape.apply("sigmoid", (self.conv(t, f"{prefix}.head2"),))
        return self.tape.apply("channel_scale", (x, coeffs))

    def block(self, x: Var, prefix: str) -> Var:
        t = self.act(self.conv(x, f"{prefix}.conv1"), f"{prefix}.act1")
        if not self.model.config.half_block:
            t = self.act(self.conv(t, f"{prefix}.conv2"), f"{prefix}.act2")
        t = self.attention(t, f"{prefix}.att")
        return self.tape.apply("add", (x, t))

    def branch(self, x: Var, br: str) -> Var:
        for i in range(max(self.model.config.blocks_per_branch, 1)):
            x = self.block(x, f"{br}.block{i}")
        x = self.conv(x, f"{br}.tail")
        return self.tape.apply("depth_to_space", (x,), block=2)

    def network(self, x: Var) -> Var:
        outs = [self.branch(x, br) for br in BRANCHES]
        return self.tape.apply("concat_channels", outs)


def check_packed(packed: np.ndarray) -> None:
    if not isinstance(packed, np.ndarray) or packed.ndim not in (3, 4):
        raise ContractError("packed input must be an (h, w, 4) or (N, h, w, 4) array")
    if packed.shape[-1] != 4:
        raise ContractError(f"packed input must have 4 channels, got {packed.shape[-1]}")
    h, w = packed.shape[-3:-1]
    if h < MIN_PACKED_SIZE or w < MIN_PACKED_SIZE:
        raise ContractError(f"packed input must be at least {MIN_PACKED_SIZE}x{MIN_PACKED_SIZE}, "
                            f"got {h}x{w}")


def forward_branch(model: MicroISPModel, branch: str, packed: np.ndarray) -> np.ndarray:
    """One color plane, ``(2h, 2w, 1)``, unclamped."""
    check_packed(packed)
    tape = Tape(record=False)
    return GraphBuilder(model, tape).branch(tape.leaf(packed), branch).data


def forward(model: MicroISPModel, packed: np.ndarray) -> np.ndarray:
    """Inference: ``(h, w, 4)`` packed Bayer to ``(2h, 2w, 3)`` RGB."""
    check_packed(packed)
    tape = Tape(record=False)
    out = GraphBuilder(model, tape).network(tape.leaf(packed)).data
    if model.config.clamp_output:
        out = np.clip(out, 0, 1)
    return out


def forward_recorded(model: MicroISPModel, packed: np.ndarray,
                     branch: str | None = None) -> tuple[Tape, Var, dict[str, Var]]:
    """Forward on a recording tape, never clamped. With ``branch`` set only
    that branch is built. Returns ``(tape, output, parameter leaves)``."""
    check_packed(packed)
    tape = Tape()
    builder = GraphBuilder(model, tape)
    x = tape.leaf(packed, "input")
    out = builder.network(x) if branch is None else builder.branch(x, branch)
    return tape, out, builder.leaves


# ---------------------------------------------------------------------------
# weight files

_ATT_CODES = {name: i for i, name in enumerate(ATTENTION_VARIANTS)}
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATION_VARIANTS)}


def encode_weights(model: MicroISPModel) -> bytes:
    cfg = model.config
    out = bytearray(MAGIC)
    out += struct.pack("<HBBBB", FORMAT_VERSION, cfg.blocks_per_branch,
                       _ATT_CODES[cfg.attention_variant], _ACT_CODES[cfg.activation_variant],
                       int(cfg.clamp_output))
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated (need {n} bytes at offset {self.pos})", what)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_weights(buf: bytes) -> MicroISPModel:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", "magic")
    if len(buf) < 14:
        raise FormatError("truncated header", "header")
    rd = _Reader(buf, len(buf) - 4)
    rd.take(4, "magic")
    (version,) = rd.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", "version")
    blocks, att, act, clamp = rd.unpack("<BBBB", "config")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError("checksum mismatch (file corrupted or truncated)", "crc32")
    if blocks not in BLOCKS_TO_DEPTH:
        raise FormatError(f"invalid value {blocks}", "blocks_per_branch")
    if att >= len(ATTENTION_VARIANTS):
        raise FormatError(f"invalid value {att}", "attention_variant")
    if act >= len(ACTIVATION_VARIANTS):
        raise FormatError(f"invalid value {act}", "activation_variant")
    if clamp not in (0, 1):
        raise FormatError(f"invalid value {clamp}", "clamp")
    config = ModelConfig(BLOCKS_TO_DEPTH[blocks], ATTENTION_VARIANTS[att],
                         ACTIVATION_VARIANTS[act], bool(clamp))
    params: dict[str, np.ndarray] = {}
    while rd.pos < rd.end:
        idx = len(params)
        (n,) = rd.unpack("<H", f"record {idx} name length")
        try:
            name = rd.take(n, f"record {idx} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not valid UTF-8", f"record {idx} name") from None
        (ndim,) = rd.unpack("<B", f"{name} ndims")
        dims = rd.unpack(f"<{ndim}I", f"{name} dims")
        count = int(np.prod(dims)) if dims else 1
        payload = rd.take(4 * count, f"{name} payload")
        params[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    expected = dict(param_spec(config))
    for name, shape in expected.items():
        if name not in params:
            raise FormatError("missing tensor", name)
        if params[name].shape != shape:
            raise FormatError(f"shape {params[name].shape} != expected {shape}", name)
    extra = set(params) - set(expected)
    if extra:
        raise FormatError("unexpected tensor", sorted(extra)[0])
    return MicroISPModel(config, params)


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(model: MicroISPModel, path: str | os.PathLike) -> None:
    atomic_write(path, encode_weights(model))


def load_weights(path: str | os.PathLike) -> MicroISPModel:
    return decode_weights(Path(path).read_bytes())


def iter_conv_names(model: MicroISPModel) -> Iterator[str]:
    for name in model.params:
        if name.endswith(".kernel"):
            yield name[: -len(".kernel")]
