"""PSNR / SSIM and dataset-level evaluation.

SSIM uses an 11x11 Gaussian window (sigma 1.5), ``C1 = 0.01**2`` and
``C2 = 0.03**2`` for a dynamic range of 1, "valid" filtering, computed per
channel and averaged over every map position and channel. The same kernel
returns an analytic gradient, which the training loss uses, so
``ssim_loss == 1 - ssim_metric`` holds exactly.

Everything is evaluated in float64 regardless of input dtype.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 99.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


_WINDOW = gaussian_window()


def _filter_valid(x: np.ndarray, g: np.ndarray = _WINDOW) -> np.ndarray:
    # separable valid correlation over axes (-3, -2) of (..., H, W, C)
    t = sliding_window_view(x, g.size, axis=-3) @ g
    return sliding_window_view(t, g.size, axis=-2) @ g


def _filter_adjoint(y: np.ndarray, g: np.ndarray = _WINDOW) -> np.ndarray:
    # transpose of _filter_valid: zero-pad by (k - 1) and correlate with the flipped window
    k = g.size - 1
    pad = [(0, 0)] * (y.ndim - 3) + [(k, k), (k, k), (0, 0)]
    return _filter_valid(np.pad(y, pad), g[::-1])


def _check_pair(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim not in (3, 4):
        raise ContractError(f"{what}: expected (H, W, C) or (N, H, W, C), got {a.shape}")


def ssim_with_grad(x: np.ndarray, y: np.ndarray, need_grad: bool = True):
    """Mean SSIM of ``x`` against ``y`` and, optionally, its gradient w.r.t. ``x``."""
    _check_pair(x, y, "ssim")
    if x.shape[-3] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise ContractError(f"ssim: image {x.shape[-3]}x{x.shape[-2]} smaller than the "
                            f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    x64 = x.astype(np.float64)
    y64 = y.astype(np.float64)
    mx, my = _filter_valid(x64), _filter_valid(y64)
    exx, eyy, exy = _filter_valid(x64 * x64), _filter_valid(y64 * y64), _filter_valid(x64 * y64)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    den = b1 * b2
    smap = a1 * a2 / den
    value = float(smap.mean())
    if not need_grad:
        return value, None
    w = 1.0 / smap.size
    d_mx = (2 * my * (a2 - a1) - 2 * mx * smap * (b2 - b1)) / den * w
    d_exx = -smap / b2 * w
    d_exy = 2 * a1 / den * w
    grad = _filter_adjoint(d_mx) + 2 * x64 * _filter_adjoint(d_exx) + y64 * _filter_adjoint(d_exy)
    return value, grad.astype(x.dtype)


def ssim_metric(a: np.ndarray, b: np.ndarray) -> float:
    return ssim_with_grad(a, b, need_grad=False)[0]


def psnr(a: np.ndarray, b: np.ndarray, max_value: float = 1.0) -> float:
    """PSNR in dB; identical images return ``PSNR_CAP`` (99 dB), and so does anything above it."""
    _check_pair(a, b, "psnr")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(max_value ** 2 / mse), PSNR_CAP)


@dataclass
class MetricsReport:
    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.names)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def add(self, name: str, p: float, s: float) -> None:
        self.names.append(name)
        self.psnr.append(p)
        self.ssim.append(s)

    def to_text(self) -> str:
        lines = ["# filename\tpsnr_db\tssim"]
        lines += [f"{n}\t{p:.4f}\t{s:.6f}" for n, p, s in zip(self.names, self.psnr, self.ssim)]
        lines.append(f"# mean over {self.count} images: psnr_db={self.mean_psnr:.4f} "
                     f"ssim={self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_pairs(model, pairs, names, mode: str = "sequential", threads: int = 1) -> MetricsReport:
    from .executor import build_plan, execute

    order = sorted(range(len(names)), key=lambda i: names[i])
    report = MetricsReport()
    plans = {}
    for i in order:
        packed, target = pairs[i].packed_input, pairs[i].target_rgb
        dims = packed.shape[:2]
        if dims not in plans:
            plans[dims] = build_plan(model, dims, mode)
        pred = np.clip(execute(plans[dims], model, packed, threads=threads), 0.0, 1.0)
        report.add(names[i], psnr(pred, target), ssim_metric(pred, target))
    return report


def evaluate_dataset(model, dataset_dir: str | os.PathLike, mode: str = "sequential",
                     threads: int = 1) -> MetricsReport:
    """Runs the model over every ``<stem>.braw|.pgm`` / ``<stem>.ppm`` pair in a
    directory; predictions are clamped to [0, 1] before scoring."""
    from .imaging import load_pairs, pair_stems

    pairs, _ = load_pairs(Path(dataset_dir))
    if not pairs:
        raise ConfigError(f"no complete raw/target pairs in {dataset_dir}")
    return evaluate_pairs(model, pairs, pair_stems(dataset_dir), mode, threads)
