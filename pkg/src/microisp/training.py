"""Losses, ADAM, CFA-preserving augmentation and the staged training loop."""

from __future__ import annotations

import configparser
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, TrainingError
from .imaging import TrainPair, cfa_color_map, pack_mosaic, unpack_mosaic
from .metrics import ssim_with_grad
from .model import (BRANCHES, MIN_PACKED_SIZE, MicroISPModel, ModelConfig, build_model,
                    forward_branch, forward_recorded)
from .tensor import frozen_activation_masks

log = logging.getLogger(__name__)

# callable(pred, target) -> (loss, grad w.r.t. pred); stands in for a perceptual feature network
FeatureLoss = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


# ---------------------------------------------------------------------------
# losses

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ContractError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff)), (2.0 * diff / diff.size).astype(pred.dtype)


def ssim_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """``1 - SSIM`` and its gradient."""
    value, grad = ssim_with_grad(pred, target)
    return 1.0 - value, -grad


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    ssim: float = 0.0
    vgg: float = 0.0

    def __post_init__(self):
        if min(self.mse, self.ssim, self.vgg) < 0:
            raise ConfigError(f"loss weights must be >= 0, got {self}")
        if max(self.mse, self.ssim, self.vgg) <= 0:
            raise ConfigError("at least one loss weight must be > 0")

    def active(self) -> list[str]:
        return [k for k in ("mse", "ssim", "vgg") if getattr(self, k) > 0]


def loss_terms(pred, target, weights: LossWeights,
               feature_loss: FeatureLoss | None = None) -> dict[str, tuple[float, np.ndarray]]:
    """Value and gradient of every active term (unweighted, unnormalized)."""
    terms = {}
    if weights.mse > 0:
        terms["mse"] = mse_loss(pred, target)
    if weights.ssim > 0:
        terms["ssim"] = ssim_loss(pred, target)
    if weights.vgg > 0:
        if feature_loss is None:
            raise ConfigError("vgg weight > 0 but no feature extractor was supplied")
        terms["vgg"] = feature_loss(pred, target)
    return terms


def composite_loss(pred, target, weights: LossWeights, normalizers: dict[str, float] | None = None,
                   feature_loss: FeatureLoss | None = None) -> tuple[float, np.ndarray]:
    """``sum_k w_k * L_k / n_k``; ``normalizers=None`` means every ``n_k = 1``."""
    terms = loss_terms(pred, target, weights, feature_loss)
    total, grad = 0.0, np.zeros(pred.shape, np.float64)
    for k, (value, g) in terms.items():
        n = 1.0 if normalizers is None else normalizers[k]
        if not n > 0:
            raise ConfigError(f"normalizer for {k} must be positive, got {n}")
        scale = getattr(weights, k) / n
        total += scale * value
        grad += scale * g
    return total, grad.astype(pred.dtype)


def freeze_normalizers(pred, target, weights: LossWeights,
                       feature_loss: FeatureLoss | None = None) -> dict[str, float]:
    """Each active term's value on one batch, used to scale that term to ~1 for a stage."""
    out = {}
    for k, (value, _) in loss_terms(pred, target, weights, feature_loss).items():
        out[k] = value if value > 1e-12 else 1.0
    return out


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """In-place bias-corrected ADAM update of ``params``."""
    if not lr > 0:
        raise ContractError(f"learning rate must be > 0, got {lr}")
    if set(grads) != set(params):
        raise ContractError("gradient names do not match parameter names")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# augmentation

def _realign_offset(colors: np.ndarray) -> tuple[int, int]:
    for dy in (0, 1):
        for dx in (0, 1):
            if colors[dy, dx] == 0 and colors[dy + 1, dx + 1] == 2:
                return dy, dx
    raise AssertionError("no RGGB phase found")  # unreachable for a Bayer layout


def augment_pair(pair: TrainPair, rng: np.random.Generator | int,
                 hflip: bool | None = None, vflip: bool | None = None,
                 rot90: int | None = None) -> TrainPair:
    """Random flips and 90-degree rotations applied to the mosaic and target together.

    A flip or odd rotation shifts the Bayer phase, so the result is cropped by
    one photosite row/column (and trimmed to even size) until its top-left
    cell reads RGGB again; each affected axis loses one packed unit. Explicit
    ``hflip``/``vflip``/``rot90`` values override the random draw.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    draw_h, draw_v, draw_k = bool(rng.random() < 0.5), bool(rng.random() < 0.5), int(rng.integers(4))
    hflip = draw_h if hflip is None else hflip
    vflip = draw_v if vflip is None else vflip
    k = (draw_k if rot90 is None else rot90) % 4
    if not (hflip or vflip or k):
        return pair

    mosaic = unpack_mosaic(pair.packed_input)[:, :, 0]
    planes = [mosaic, cfa_color_map(*mosaic.shape), pair.target_rgb]
    if hflip:
        planes = [p[:, ::-1] for p in planes]
    if vflip:
        planes = [p[::-1] for p in planes]
    if k:
        planes = [np.rot90(p, k, axes=(0, 1)) for p in planes]
    mosaic, colors, target = planes
    dy, dx = _realign_offset(colors)
    h = (mosaic.shape[0] - dy) // 2 * 2
    w = (mosaic.shape[1] - dx) // 2 * 2
    if h // 2 < MIN_PACKED_SIZE or w // 2 < MIN_PACKED_SIZE:
        return pair
    mosaic = np.ascontiguousarray(mosaic[dy:dy + h, dx:dx + w, None])
    target = np.ascontiguousarray(target[dy:dy + h, dx:dx + w])
    return TrainPair(pack_mosaic(mosaic), target)


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class Stage:
    epochs: int
    lr: float
    weights: LossWeights
    normalize_terms: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


@dataclass(frozen=True)
class TrainingSchedule:
    stages: tuple[Stage, ...]
    batch_size: int = 8
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("schedule needs at least one stage")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


PAPER_SCHEDULE = TrainingSchedule(
    stages=(
        Stage(200, 2e-5, LossWeights(mse=1.0)),
        Stage(200, 2e-5, LossWeights(mse=0.25, ssim=0.5, vgg=1.0), normalize_terms=True),
        Stage(100, 2e-5, LossWeights(mse=1.0, ssim=2.0), normalize_terms=True),
    ),
    batch_size=50,
)

# same three-stage structure at laptop scale; the perceptual term is dropped
DESK_SCHEDULE = TrainingSchedule(
    stages=(
        Stage(20, 1e-3, LossWeights(mse=1.0)),
        Stage(20, 1e-3, LossWeights(mse=0.25, ssim=0.5), normalize_terms=True),
        Stage(10, 1e-3, LossWeights(mse=1.0, ssim=2.0), normalize_terms=True),
    ),
    batch_size=8,
)

SCHEDULE_KEYS_HELP = """\
Schedule file (INI). Section [schedule]: batch_size (int), seed (int),
augment (bool). One section per stage, named stage1, stage2, ... in run
order, with: epochs (int), lr (float), w_mse, w_ssim, w_vgg (floats >= 0),
normalize (bool: scale each term by its value on the stage's first batch)."""


def parse_schedule(text: str) -> TrainingSchedule:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"schedule: {e}") from None
    try:
        head = cp["schedule"] if cp.has_section("schedule") else {}
        stage_names = sorted((s for s in cp.sections() if s.startswith("stage")),
                             key=lambda s: int(s[5:]))
        stages = []
        for name in stage_names:
            sec = cp[name]
            unknown = set(sec) - {"epochs", "lr", "w_mse", "w_ssim", "w_vgg", "normalize"}
            if unknown:
                raise ConfigError(f"schedule [{name}]: unknown keys {sorted(unknown)}")
            stages.append(Stage(
                epochs=sec.getint("epochs"),
                lr=sec.getfloat("lr"),
                weights=LossWeights(sec.getfloat("w_mse", 0.0), sec.getfloat("w_ssim", 0.0),
                                    sec.getfloat("w_vgg", 0.0)),
                normalize_terms=sec.getboolean("normalize", False),
            ))
        return TrainingSchedule(
            tuple(stages),
            batch_size=int(head.get("batch_size", 8)),
            seed=int(head.get("seed", 0)),
            augment=str(head.get("augment", "true")).lower() in ("1", "true", "yes", "on"),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(f"schedule: {e}") from None


def format_schedule(schedule: TrainingSchedule) -> str:
    lines = ["[schedule]", f"batch_size = {schedule.batch_size}", f"seed = {schedule.seed}",
             f"augment = {str(schedule.augment).lower()}"]
    for i, st in enumerate(schedule.stages, 1):
        lines += ["", f"[stage{i}]", f"epochs = {st.epochs}", f"lr = {st.lr!r}",
                  f"w_mse = {st.weights.mse!r}", f"w_ssim = {st.weights.ssim!r}",
                  f"w_vgg = {st.weights.vgg!r}", f"normalize = {str(st.normalize_terms).lower()}"]
    return "\n".join(lines) + "\n"


def load_schedule(path: str | os.PathLike) -> TrainingSchedule:
    with open(path) as f:
        return parse_schedule(f.read())


# ---------------------------------------------------------------------------
# gradients

def stack_batch(pairs: Sequence[TrainPair]) -> tuple[np.ndarray, np.ndarray]:
    """Stacks pairs into ``(N, h, w, 4)`` / ``(N, 2h, 2w, 3)``, cropping each to the
    smallest packed size in the batch (top-left, so the Bayer phase is kept)."""
    h = min(p.packed_input.shape[0] for p in pairs)
    w = min(p.packed_input.shape[1] for p in pairs)
    x = np.stack([p.packed_input[:h, :w] for p in pairs]).astype(np.float32)
    y = np.stack([p.target_rgb[:2 * h, :2 * w] for p in pairs]).astype(np.float32)
    return x, y


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def loss_and_grads(model: MicroISPModel, packed: np.ndarray, target: np.ndarray,
                   loss_fn: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]],
                   threads: int = 1) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Forward, loss and parameter gradients. Branches are independent given the
    input, so each gets its own tape and may run on its own thread.

    Returns ``(loss, grads, prediction)``.
    """
    def fwd(br):
        return forward_recorded(model, packed, branch=br)

    recorded = _map(fwd, BRANCHES, threads)
    pred = np.concatenate([out.data for _, out, _ in recorded], axis=-1)
    loss, gpred = loss_fn(pred, target)

    def bwd(i):
        tape, out, leaves = recorded[i]
        grads = tape.backward(out, np.ascontiguousarray(gpred[..., i:i + 1]))
        return tape.named_grads(grads, leaves)

    per_branch = _map(bwd, range(len(BRANCHES)), threads)
    merged = {}
    for g in per_branch:
        merged.update(g)
    return loss, {name: merged[name] for name in model.params}, pred


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochStats:
    stage: int
    epoch: int
    loss: float
    psnr: float


@dataclass
class TrainState:
    adam: AdamState = field(default_factory=AdamState)
    iterations: int = 0


def train_stage(model: MicroISPModel, dataset: Sequence[TrainPair], stage: Stage,
                state: TrainState, rng: np.random.Generator, batch_size: int,
                augment: bool = True, stage_index: int = 0, threads: int = 1,
                feature_loss: FeatureLoss | None = None, stop_at_psnr: float | None = None,
                max_iterations: int | None = None) -> tuple[MicroISPModel, list[EpochStats]]:
    if not dataset:
        raise ConfigError("training dataset is empty")
    if stage.weights.vgg > 0 and feature_loss is None:
        raise ConfigError("stage uses the vgg term but no feature extractor was supplied")
    normalizers: dict[str, float] | None = None
    stats: list[EpochStats] = []
    for epoch in range(stage.epochs):
        order = rng.permutation(len(dataset))
        sq_err, n_el, loss_sum, n_batches = 0.0, 0, 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [dataset[i] for i in order[start:start + batch_size]]
            if augment:
                batch = [augment_pair(p, rng) for p in batch]
            x, y = stack_batch(batch)
            if stage.normalize_terms and normalizers is None:
                tape_free_pred = _predict_unclamped(model, x, threads)
                normalizers = freeze_normalizers(tape_free_pred, y, stage.weights, feature_loss)
                log.info("stage %d normalizers: %s", stage_index + 1, normalizers)

            def loss_fn(p, t):
                return composite_loss(p, t, stage.weights, normalizers, feature_loss)

            loss, grads, pred = loss_and_grads(model, x, y, loss_fn, threads)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingError(f"non-finite loss/gradient at stage {stage_index + 1}, "
                                    f"epoch {epoch + 1}, iteration {state.iterations + 1} "
                                    f"(loss={loss})")
            adam_step(model.params, grads, state.adam, stage.lr)
            state.iterations += 1
            clipped = np.clip(pred.astype(np.float64), 0.0, 1.0)
            sq_err += float(((clipped - y) ** 2).sum())
            n_el += y.size
            loss_sum += loss
            n_batches += 1
            if max_iterations is not None and state.iterations >= max_iterations:
                break
        mse = sq_err / n_el
        ep = EpochStats(stage_index + 1, epoch + 1, loss_sum / n_batches,
                        99.0 if mse == 0 else min(10 * math.log10(1.0 / mse), 99.0))
        stats.append(ep)
        log.debug("stage %d epoch %d loss %.6f psnr %.3f", ep.stage, ep.epoch, ep.loss, ep.psnr)
        if stop_at_psnr is not None and ep.psnr >= stop_at_psnr:
            break
        if max_iterations is not None and state.iterations >= max_iterations:
            break
    return model, stats


def _predict_unclamped(model, x, threads):
    outs = _map(lambda br: forward_branch(model, br, x), BRANCHES, threads)
    return np.concatenate(outs, axis=-1)


def train_loop(model: MicroISPModel, dataset: Sequence[TrainPair], schedule: TrainingSchedule,
               threads: int = 1, feature_loss: FeatureLoss | None = None,
               stop_at_psnr: float | None = None, max_iterations: int | None = None,
               state: TrainState | None = None) -> tuple[MicroISPModel, list[EpochStats]]:
    """Runs every stage in order; parameters are updated in place and ADAM
    state carries across stages. Fully determined by ``schedule.seed``."""
    if not dataset:
        raise ConfigError("training dataset is empty")
    rng = np.random.default_rng(schedule.seed)
    state = state or TrainState()
    history: list[EpochStats] = []
    for i, stage in enumerate(schedule.stages):
        _, stats = train_stage(model, dataset, stage, state, rng, schedule.batch_size,
                               schedule.augment, i, threads, feature_loss, stop_at_psnr,
                               max_iterations)
        history += stats
        if stats and stop_at_psnr is not None and stats[-1].psnr >= stop_at_psnr:
            break
        if max_iterations is not None and state.iterations >= max_iterations:
            break
    return model, history


def format_history(history: Sequence[EpochStats]) -> str:
    lines = ["stage\tepoch\tloss\tpsnr_db"]
    lines += [f"{h.stage}\t{h.epoch}\t{h.loss:.8g}\t{h.psnr:.4f}" for h in history]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# gradient check

@dataclass
class GradcheckReport:
    tolerance: float
    errors: dict[str, float]
    kink_flips: int = 0

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def failures(self) -> dict[str, float]:
        return {k: e for k, e in self.errors.items() if e > self.tolerance}

    def to_text(self) -> str:
        lines = [f"{'PASS' if e <= self.tolerance else 'FAIL'}  {e:.3e}  {k}"
                 for k, e in self.errors.items()]
        lines.append(f"{'PASS' if self.passed else 'FAIL'}: {len(self.errors)} groups, "
                     f"max rel err {max(self.errors.values()):.3e} (tol {self.tolerance:g}), "
                     f"{self.kink_flips} activation sign flips held at the base pattern")
        return "\n".join(lines) + "\n"


def _gradcheck_loss(pred, target):
    a, ga = mse_loss(pred, target)
    b, gb = ssim_loss(pred, target)
    return a + 0.1 * b, ga + 0.1 * gb


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / den))


def gradcheck(config: ModelConfig, tolerance: float = 1e-4, size: int = 16, seed: int = 0,
              eps: float = 1e-3, zero_data: bool = False,
              model: MicroISPModel | None = None) -> GradcheckReport:
    """Whole-model parameter gradients vs central finite differences, in float64.

    Uses an ``MSE + 0.1 * (1 - SSIM)`` loss against a random target on a
    ``size x size`` packed input. One group per parameter tensor.
    """
    rng = np.random.default_rng(seed)
    model = (model or build_model(config, seed)).astype(np.float64)
    # perturb biases and slopes away from their init so every gradient path is exercised
    for name, p in model.params.items():
        if not name.endswith(".kernel"):
            p += rng.uniform(-0.1, 0.1, size=p.shape)
    if zero_data:
        x = np.zeros((size, size, 4))
        y = np.zeros((2 * size, 2 * size, 3))
    else:
        x = rng.uniform(0, 1, size=(size, size, 4))
        y = rng.uniform(0, 1, size=(2 * size, 2 * size, 3))

    _, grads, _ = loss_and_grads(model, x, y, _gradcheck_loss)

    def loss_at() -> float:
        outs = [forward_branch(model, br, x) for br in BRANCHES]
        return _gradcheck_loss(np.concatenate(outs, axis=-1), y)[0]

    errors = {}
    with frozen_activation_masks() as kinks:
        loss_at()
        for name, p in model.params.items():
            numeric = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + eps
                kinks.replay()
                up = loss_at()
                p[idx] = orig - eps
                kinks.replay()
                down = loss_at()
                p[idx] = orig
                numeric[idx] = (up - down) / (2 * eps)
            if not np.isfinite(grads[name]).all():
                errors[name] = float("inf")
            else:
                errors[name] = relative_error(grads[name], numeric)
        flips = kinks.flips
    return GradcheckReport(tolerance, errors, flips)
