"""RAW Bayer ingestion, CFA-aware packing, RGB output and synthetic data.

File formats
------------
``.braw`` (BRW1, little-endian)::

    "BRW1" u32 width u32 height u16 bit_depth u8 cfa u8 reserved(0)
    u16 black_level u16 white_level  width*height x u16 samples (row-major)

``.pgm``: binary P5 with ``maxval > 255`` (16-bit big-endian samples). CFA
and levels default to RGGB / 0 / maxval, and can be overridden by a JSON
sidecar ``<name>.pgm.json`` with any of the keys ``cfa``, ``black_level``,
``white_level``, ``bit_depth``.

``.ppm``: binary P6, 8- or 16-bit (big-endian), used for RGB targets and
inference output.
"""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .model import atomic_write
from .tensor import depth_to_space, space_to_depth

CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
BIT_DEPTHS = (10, 12, 14, 16)
RAW_SUFFIXES = (".braw", ".pgm")

# for each CFA: index into the row-major 2x2 cell scan of (R, G1, G2, B),
# where G1 shares a row with R and G2 shares a row with B
CFA_TO_CANONICAL = {
    "RGGB": (0, 1, 2, 3),
    "BGGR": (3, 2, 1, 0),
    "GRBG": (1, 0, 3, 2),
    "GBRG": (2, 3, 0, 1),
}

_BRW_HEADER = struct.Struct("<4sIIHBBHH")


@dataclass
class BayerImage:
    width: int
    height: int
    bit_depth: int
    cfa: str
    black_level: int
    white_level: int
    samples: np.ndarray  # (height, width) uint16

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.width % 2 or self.height % 2:
            raise FormatError(f"dimensions must be even and positive, got {self.width}x{self.height}",
                              "dimensions")
        if self.bit_depth not in BIT_DEPTHS:
            raise FormatError(f"unsupported bit depth {self.bit_depth}", "bit_depth")
        if self.cfa not in CFA_PATTERNS:
            raise FormatError(f"unknown pattern {self.cfa!r}", "cfa")
        if not 0 <= self.black_level < self.white_level <= 2 ** self.bit_depth - 1:
            raise FormatError(f"need 0 <= black ({self.black_level}) < white ({self.white_level}) "
                              f"<= {2 ** self.bit_depth - 1}", "levels")
        if self.samples.shape != (self.height, self.width):
            raise FormatError(f"samples shape {self.samples.shape} != ({self.height}, {self.width})",
                              "samples")


@dataclass
class TrainPair:
    packed_input: np.ndarray  # (h, w, 4), channels R, G1, G2, B
    target_rgb: np.ndarray  # (2h, 2w, 3) in [0, 1]

    def __post_init__(self):
        h, w = self.packed_input.shape[:2]
        if self.packed_input.shape[2:] != (4,) or self.target_rgb.shape != (2 * h, 2 * w, 3):
            raise ContractError(f"target {self.target_rgb.shape} must be exactly 2x packed "
                                f"{self.packed_input.shape} with 3 channels")


# ---------------------------------------------------------------------------
# RAW files

def encode_brw(img: BayerImage) -> bytes:
    head = _BRW_HEADER.pack(b"BRW1", img.width, img.height, img.bit_depth,
                            CFA_PATTERNS.index(img.cfa), 0, img.black_level, img.white_level)
    return head + np.ascontiguousarray(img.samples, dtype="<u2").tobytes()


def decode_brw(buf: bytes) -> BayerImage:
    if buf[:4] != b"BRW1":
        raise FormatError(f"bad magic {buf[:4]!r}", "magic")
    if len(buf) < _BRW_HEADER.size:
        raise FormatError("truncated header", "header")
    _, width, height, bit_depth, cfa, reserved, black, white = _BRW_HEADER.unpack_from(buf)
    if cfa >= len(CFA_PATTERNS):
        raise FormatError(f"invalid code {cfa}", "cfa")
    if reserved != 0:
        raise FormatError(f"must be 0, got {reserved}", "reserved")
    if width % 2 or height % 2 or width == 0 or height == 0:
        raise FormatError(f"dimensions must be even and positive, got {width}x{height}", "dimensions")
    expected = _BRW_HEADER.size + 2 * width * height
    if len(buf) < expected:
        raise FormatError(f"truncated: {len(buf)} bytes, expected {expected}", "samples")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} unexpected trailing bytes", "samples")
    samples = np.frombuffer(buf, dtype="<u2", offset=_BRW_HEADER.size).astype(np.uint16)
    return BayerImage(width, height, bit_depth, CFA_PATTERNS[cfa], black, white,
                      samples.reshape(height, width))


def _read_pnm_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Returns ``(width, height, maxval, data_offset)``."""
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}", "magic")
    tokens, pos = [], 2
    token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([0-9]+)")
    for what in ("width", "height", "maxval"):
        m = token_re.match(buf, pos)
        if not m:
            raise FormatError("missing or malformed header value", what)
        tokens.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError("missing whitespace after header", "header")
    width, height, maxval = tokens
    if not 0 < maxval < 65536:
        raise FormatError(f"out of range: {maxval}", "maxval")
    return width, height, maxval, pos + 1


def decode_pgm(buf: bytes, sidecar: dict | None = None) -> BayerImage:
    width, height, maxval, off = _read_pnm_header(buf, b"P5")
    if maxval <= 255:
        raise FormatError(f"only 16-bit PGM (maxval > 255) is accepted, got {maxval}", "maxval")
    if width % 2 or height % 2 or width == 0 or height == 0:
        raise FormatError(f"dimensions must be even and positive, got {width}x{height}", "dimensions")
    need = 2 * width * height
    if len(buf) - off < need:
        raise FormatError(f"truncated: {len(buf) - off} sample bytes, expected {need}", "samples")
    samples = np.frombuffer(buf, dtype=">u2", count=width * height, offset=off).astype(np.uint16)
    meta = dict(sidecar or {})
    bit_depth = meta.get("bit_depth") or next(b for b in BIT_DEPTHS if 2 ** b - 1 >= maxval)
    return BayerImage(width, height, int(bit_depth), str(meta.get("cfa", "RGGB")),
                      int(meta.get("black_level", 0)), int(meta.get("white_level", maxval)),
                      samples.reshape(height, width))


def load_raw(path: str | os.PathLike) -> BayerImage:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] == b"BRW1":
        return decode_brw(buf)
    if buf[:2] == b"P5":
        sidecar_path = path.with_name(path.name + ".json")
        sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else None
        return decode_pgm(buf, sidecar)
    raise FormatError(f"unrecognized magic {buf[:4]!r} (expected BRW1 or P5)", "magic")


def save_raw(img: BayerImage, path: str | os.PathLike) -> None:
    atomic_write(path, encode_brw(img))


def normalize_raw(img: BayerImage) -> np.ndarray:
    """``(sample - black) / (white - black)`` clamped to [0, 1], as ``(h, w, 1)`` float32."""
    x = (img.samples.astype(np.float64) - img.black_level) / (img.white_level - img.black_level)
    return np.clip(x, 0.0, 1.0).astype(np.float32)[:, :, None]


# ---------------------------------------------------------------------------
# packing

def pack_mosaic(x: np.ndarray, cfa: str = "RGGB") -> np.ndarray:
    """``(h, w, 1)`` mosaic to ``(h/2, w/2, 4)`` with channels always (R, G1, G2, B)."""
    if cfa not in CFA_TO_CANONICAL:
        raise ContractError(f"unknown CFA pattern {cfa!r}")
    if x.ndim != 3 or x.shape[2] != 1:
        raise ContractError(f"mosaic must be (h, w, 1), got {x.shape}")
    return np.ascontiguousarray(space_to_depth(x, 2)[..., list(CFA_TO_CANONICAL[cfa])])


def unpack_mosaic(packed: np.ndarray, cfa: str = "RGGB") -> np.ndarray:
    if cfa not in CFA_TO_CANONICAL:
        raise ContractError(f"unknown CFA pattern {cfa!r}")
    inverse = np.argsort(CFA_TO_CANONICAL[cfa])
    return depth_to_space(np.ascontiguousarray(packed[..., inverse]), 2)


def cfa_color_map(height: int, width: int, cfa: str = "RGGB") -> np.ndarray:
    """``(height, width)`` array of color indices (0=R, 1=G, 2=B) per photosite."""
    codes = {"R": 0, "G": 1, "B": 2}
    cell = np.array([[codes[cfa[0]], codes[cfa[1]]], [codes[cfa[2]], codes[cfa[3]]]])
    return np.tile(cell, (height // 2, width // 2))


def load_packed(path: str | os.PathLike) -> np.ndarray:
    img = load_raw(path)
    return pack_mosaic(normalize_raw(img), img.cfa)


# ---------------------------------------------------------------------------
# RGB files

def encode_ppm(img: np.ndarray, depth: int = 8) -> bytes:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"RGB image must be (h, w, 3), got {img.shape}")
    if depth not in (8, 16):
        raise ContractError(f"depth must be 8 or 16, got {depth}")
    maxval = 255 if depth == 8 else 65535
    q = np.floor(np.clip(img.astype(np.float64), 0.0, 1.0) * maxval + 0.5)
    body = q.astype(">u2" if depth == 16 else "u1").tobytes()
    return f"P6\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode() + body


def decode_ppm(buf: bytes) -> np.ndarray:
    width, height, maxval, off = _read_pnm_header(buf, b"P6")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * 3 * dtype.itemsize
    if len(buf) - off < need:
        raise FormatError(f"truncated: {len(buf) - off} sample bytes, expected {need}", "samples")
    data = np.frombuffer(buf, dtype=dtype, count=width * height * 3, offset=off)
    return (data.astype(np.float64) / maxval).astype(np.float32).reshape(height, width, 3)


def write_rgb(img: np.ndarray, path: str | os.PathLike, depth: int = 8) -> None:
    """Writes a binary PPM; values are clamped to [0, 1] and rounded half up."""
    atomic_write(path, encode_ppm(img, depth))


def read_rgb(path: str | os.PathLike) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def load_pairs(directory: str | os.PathLike) -> tuple[list[TrainPair], list[str]]:
    """Pairs ``<stem>.braw``/``<stem>.pgm`` inputs with ``<stem>.ppm`` targets.

    Returns ``(pairs, skipped)`` with pairs sorted by stem; ``skipped`` lists
    files whose counterpart is missing.
    """
    directory = Path(directory)
    raws = {p.stem: p for p in directory.iterdir() if p.suffix in RAW_SUFFIXES}
    targets = {p.stem: p for p in directory.iterdir() if p.suffix == ".ppm"}
    pairs, skipped = [], []
    for stem in sorted(set(raws) | set(targets)):
        if stem not in raws or stem not in targets:
            skipped.append((raws.get(stem) or targets[stem]).name)
            continue
        pairs.append(TrainPair(load_packed(raws[stem]), read_rgb(targets[stem])))
    return pairs, skipped


def pair_stems(directory: str | os.PathLike) -> list[str]:
    directory = Path(directory)
    raws = {p.stem for p in directory.iterdir() if p.suffix in RAW_SUFFIXES}
    targets = {p.stem for p in directory.iterdir() if p.suffix == ".ppm"}
    return sorted(raws & targets)


# ---------------------------------------------------------------------------
# synthetic data

def smooth_scene(rng: np.random.Generator, height: int, width: int,
                 components: int = 3, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    """Random low-frequency RGB image in [lo, hi]: a sum of a few 2-D cosines per channel."""
    yy = np.arange(height)[:, None] / height
    xx = np.arange(width)[None, :] / width
    scene = np.empty((height, width, 3))
    for c in range(3):
        acc = np.zeros((height, width))
        for _ in range(components):
            fy, fx = rng.uniform(0.0, 2.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        acc = (acc - acc.min()) / max(acc.max() - acc.min(), 1e-12)
        a, b = np.sort(rng.uniform(lo, hi, size=2))
        scene[..., c] = a + (b - a) * acc
    return scene


def degrade(scene: np.ndarray, gains=(0.6, 1.0, 0.7), gamma: float = 2.2) -> np.ndarray:
    """Display-referred RGB to sensor-linear RGB: undo gamma, apply channel gains."""
    return np.power(scene, gamma) * np.asarray(gains, dtype=np.float64)


def cfa_sample(rgb: np.ndarray, cfa: str = "RGGB") -> np.ndarray:
    """Pick one color per photosite; returns ``(h, w, 1)``."""
    colors = cfa_color_map(rgb.shape[0], rgb.shape[1], cfa)
    return np.take_along_axis(rgb, colors[:, :, None], axis=2)


def synthesize_mosaic(seed: int, height: int, width: int, noise_sigma: float = 0.005,
                      gains=(0.6, 1.0, 0.7), gamma: float = 2.2,
                      cfa: str = "RGGB") -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(mosaic (h, w, 1), scene (h, w, 3))`` in float64."""
    if height % 2 or width % 2 or height < 32 or width < 32:
        raise ContractError(f"synthetic dims must be even and >= 32, got {height}x{width}")
    rng = np.random.default_rng(seed)
    scene = smooth_scene(rng, height, width)
    mosaic = cfa_sample(degrade(scene, gains, gamma), cfa)
    if noise_sigma > 0:
        mosaic = mosaic + rng.normal(0.0, noise_sigma, size=mosaic.shape)
    return np.clip(mosaic, 0.0, 1.0), scene


def synthesize_pair(seed: int, dims: tuple[int, int] = (64, 64), noise_sigma: float = 0.005,
                    gains=(0.6, 1.0, 0.7), gamma: float = 2.2) -> TrainPair:
    """Smooth random scene as the target, its degraded RGGB mosaic (packed) as the input."""
    mosaic, scene = synthesize_mosaic(seed, dims[0], dims[1], noise_sigma, gains, gamma)
    return TrainPair(pack_mosaic(mosaic.astype(np.float32)), scene.astype(np.float32))


def synthesize_bayer(seed: int, dims: tuple[int, int] = (64, 64),
                     noise_sigma: float = 0.005) -> tuple[BayerImage, np.ndarray]:
    """Synthetic pair as a 16-bit :class:`BayerImage` plus its RGB target."""
    mosaic, scene = synthesize_mosaic(seed, dims[0], dims[1], noise_sigma)
    samples = np.floor(mosaic[:, :, 0] * 65535 + 0.5).astype(np.uint16)
    return BayerImage(dims[1], dims[0], 16, "RGGB", 0, 65535, samples), scene.astype(np.float32)
