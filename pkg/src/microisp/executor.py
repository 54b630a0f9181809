"""Planned inference: buffer liveness and reuse, peak-memory and MAC accounting,
and sequential or concurrent execution of the three color branches.

The network is lowered to a flat list of steps over numbered values. Each
value is assigned a buffer; a buffer is recycled once the value it holds has
been read for the last time. In ``branch-parallel`` mode the branches run in
lockstep on separate threads, so each branch draws from its own buffer pool;
in ``branch-sequential`` mode the branches run one after another and share a
single pool. Only activation buffers are counted (weights are excluded).
"""

from __future__ import annotations

import statistics
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import BRANCHES, LEAKY_SLOPE, MIN_PACKED_SIZE, MicroISPModel, ModelConfig
from .tensor import forward_op

MODES = ("sequential", "parallel")
BYTES_PER_VALUE = 4  # float32
SHARED = "shared"


@dataclass
class Step:
    index: int
    op: str
    name: str
    branch: str  # one of BRANCHES or SHARED
    inputs: tuple[int, ...]
    output: int
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    time: int = 0
    kernel_size: int = 0


@dataclass
class ExecutionPlan:
    config: ModelConfig
    input_dims: tuple[int, int]
    mode: str
    steps: list[Step]
    shapes: dict[int, tuple[int, int, int]]  # value id -> (h, w, c)
    buffers: dict[int, int]  # buffer id -> bytes
    assignment: dict[int, int]  # value id -> buffer id
    live: dict[int, tuple[int, int]]  # value id -> (first, last) time
    peak_bytes: int
    live_bytes: dict[int, int]  # time -> bytes of live buffers

    @property
    def output_value(self) -> int:
        return self.steps[-1].output

    def step_peak(self, step: Step) -> int:
        return self.live_bytes[step.time]


def _conv_out(shape, stride):
    h, w, _ = shape
    return (-(-h // stride), -(-w // stride), 4)


class _Lowering:
    def __init__(self, config: ModelConfig, dims: tuple[int, int]):
        self.config = config
        self.steps: list[Step] = []
        self.shapes: dict[int, tuple[int, int, int]] = {0: (dims[0], dims[1], 4)}

    def emit(self, op, name, branch, inputs, shape, params=(), **attrs) -> int:
        out = len(self.shapes)
        self.shapes[out] = shape
        self.steps.append(Step(len(self.steps), op, name, branch, tuple(inputs), out,
                               tuple(params), attrs))
        return out

    def conv(self, br, x, name, stride=1, k=3):
        out = self.emit("conv2d", name, br, [x], _conv_out(self.shapes[x], stride),
                        (f"{name}.kernel", f"{name}.bias"), stride=stride)
        self.steps[-1].kernel_size = k
        return out

    def act(self, br, x, name):
        if self.config.learned_activations:
            return self.emit("prelu", name, br, [x], self.shapes[x], (f"{name}.alpha",))
        return self.emit("leaky_relu", name, br, [x], self.shapes[x], slope=LEAKY_SLOPE)

    def attention(self, br, x, p):
        variant = self.config.attention_variant
        if variant == "none":
            return x
        t = x
        if variant == "enhanced":
            t = self.conv(br, t, f"{p}.reduce", 3, k=1)
            for j in range(3):
                t = self.act(br, self.conv(br, t, f"{p}.body{j}", 3), f"{p}.body{j}.act")
        t = self.emit("global_avg_pool", f"{p}.pool", br, [t], (1, 1, 4))
        t = self.act(br, self.conv(br, t, f"{p}.head1", k=1), f"{p}.head_act")
        t = self.emit("sigmoid", f"{p}.gate", br, [self.conv(br, t, f"{p}.head2", k=1)], (1, 1, 4))
        return self.emit("channel_scale", f"{p}.scale", br, [x, t], self.shapes[x])

    def branch(self, br):
        x = 0
        for i in range(max(self.config.blocks_per_branch, 1)):
            p = f"{br}.block{i}"
            t = self.act(br, self.conv(br, x, f"{p}.conv1"), f"{p}.act1")
            if not self.config.half_block:
                t = self.act(br, self.conv(br, t, f"{p}.conv2"), f"{p}.act2")
            t = self.attention(br, t, f"{p}.att")
            x = self.emit("add", f"{p}.residual", br, [x, t], self.shapes[x])
        x = self.conv(br, x, f"{br}.tail")
        h, w, _ = self.shapes[x]
        return self.emit("depth_to_space", f"{br}.depth_to_space", br, [x], (2 * h, 2 * w, 1), block=2)


def lower(config: ModelConfig, dims: tuple[int, int]) -> tuple[list[Step], dict]:
    lw = _Lowering(config, dims)
    outs = [lw.branch(br) for br in BRANCHES]
    h, w, _ = lw.shapes[outs[0]]
    lw.emit("concat_channels", "concat", SHARED, outs, (h, w, 3))
    return lw.steps, lw.shapes


def _schedule(steps: list[Step], mode: str) -> None:
    if mode == "sequential":
        for s in steps:
            s.time = s.index + 1
        return
    local = {br: 0 for br in BRANCHES}
    for s in steps:
        if s.branch == SHARED:
            s.time = max(local.values()) + 1
        else:
            local[s.branch] += 1
            s.time = local[s.branch]


def build_plan(model: MicroISPModel | ModelConfig, dims: tuple[int, int],
               mode: str = "sequential") -> ExecutionPlan:
    """Lowers the network for a packed input of ``dims = (h, w)`` and assigns buffers
    greedily: each new value takes the smallest free buffer (of its pool) that
    fits, otherwise a new buffer of exactly its size."""
    config = model.config if isinstance(model, MicroISPModel) else model
    mode = {"branch-sequential": "sequential", "branch-parallel": "parallel"}.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    h, w = dims
    if h < MIN_PACKED_SIZE or w < MIN_PACKED_SIZE:
        raise ConfigError(f"packed input {h}x{w} is smaller than {MIN_PACKED_SIZE}x{MIN_PACKED_SIZE}")
    steps, shapes = lower(config, (h, w))
    _schedule(steps, mode)

    first = {0: 0}
    last = {0: 0}
    owner = {0: SHARED}
    for s in steps:
        first[s.output] = s.time
        last[s.output] = s.time
        owner[s.output] = s.branch
        for v in s.inputs:
            last[v] = max(last[v], s.time)

    def nbytes(v):
        a, b, c = shapes[v]
        return a * b * c * BYTES_PER_VALUE

    def pool_of(v):
        return SHARED if mode == "sequential" else owner[v]

    buffers: dict[int, int] = {}
    assignment: dict[int, int] = {}
    free: dict[str, list[int]] = {}
    holder: dict[int, int] = {}  # buffer -> value currently held
    order = sorted(first, key=lambda v: (first[v], v))
    for v in order:
        t = first[v]
        for b, held in list(holder.items()):
            if last[held] < t:
                del holder[b]
                free.setdefault(pool_of(held), []).append(b)
        need = nbytes(v)
        candidates = sorted(free.get(pool_of(v), []), key=lambda b: (buffers[b], b))
        chosen = next((b for b in candidates if buffers[b] >= need), None)
        if chosen is None:
            chosen = len(buffers)
            buffers[chosen] = need
        else:
            free[pool_of(v)].remove(chosen)
        assignment[v] = chosen
        holder[chosen] = v

    times = range(0, max(s.time for s in steps) + 1)
    live_bytes = {}
    for t in times:
        live_bufs = {assignment[v] for v in first if first[v] <= t <= last[v]}
        live_bytes[t] = sum(buffers[b] for b in live_bufs)
    return ExecutionPlan(config, (h, w), mode, steps, shapes, buffers, assignment,
                         {v: (first[v], last[v]) for v in first}, max(live_bytes.values()),
                         live_bytes)


def replay_plan(plan: ExecutionPlan) -> list[str]:
    """Simulates buffer contents over time; returns read-after-reuse violations."""
    contents = {plan.assignment[0]: 0}
    problems = []
    by_time: dict[int, list[Step]] = {}
    for s in plan.steps:
        by_time.setdefault(s.time, []).append(s)
    for t in sorted(by_time):
        for s in by_time[t]:
            for v in s.inputs:
                b = plan.assignment[v]
                if contents.get(b) != v:
                    problems.append(f"step {s.index} ({s.name}) reads value {v} from buffer {b}, "
                                    f"which now holds {contents.get(b)}")
        written = {}
        for s in by_time[t]:
            b = plan.assignment[s.output]
            if b in written:
                problems.append(f"buffer {b} written twice at time {t}")
            written[b] = s.output
        contents.update(written)
    return problems


# ---------------------------------------------------------------------------
# execution

def _last_consumers(plan: ExecutionPlan) -> dict[int, int]:
    last = {}
    for s in plan.steps:
        for v in s.inputs:
            last[v] = s.index
    return last


def _run_steps(steps, plan, model, slots, last_consumer, timings=None):
    for s in steps:
        args = []
        for v in s.inputs:
            held, arr = slots[plan.assignment[v]]
            if held != v or arr is None:
                raise ContractError(f"step {s.name}: buffer {plan.assignment[v]} holds value {held}, "
                                    f"expected {v}")
            args.append(arr)
        args += [model.params[p] for p in s.params]
        t0 = time.perf_counter() if timings is not None else 0.0
        out = forward_op(s.op, args, **s.attrs)
        if timings is not None:
            timings[s.index] = time.perf_counter() - t0
        # drop dead values so resident memory follows the plan's live set; the
        # caller's input (value 0) is shared by all branches and never released
        for v in s.inputs:
            if v != 0 and last_consumer[v] == s.index:
                slots[plan.assignment[v]] = (v, None)
        slots[plan.assignment[s.output]] = (s.output, out)


def execute(plan: ExecutionPlan, model: MicroISPModel, packed: np.ndarray, threads: int = 1,
            timings: dict[int, float] | None = None) -> np.ndarray:
    """Runs the plan. In parallel mode the three branches run on up to
    ``threads`` worker threads; they share only the read-only input."""
    if model.config != plan.config:
        raise ContractError(f"plan was built for {plan.config}, model is {model.config}")
    if packed.shape != (*plan.input_dims, 4):
        raise ContractError(f"input shape {packed.shape} does not match plan {(*plan.input_dims, 4)}")
    slots: dict[int, tuple[int, np.ndarray]] = {plan.assignment[0]: (0, packed)}
    branch_steps = {br: [s for s in plan.steps if s.branch == br] for br in BRANCHES}
    shared_steps = [s for s in plan.steps if s.branch == SHARED]
    last = _last_consumers(plan)
    if plan.mode == "parallel" and threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(BRANCHES))) as pool:
            futures = [pool.submit(_run_steps, branch_steps[br], plan, model, slots, last, timings)
                       for br in BRANCHES]
            for f in futures:
                f.result()
    else:
        for br in BRANCHES:
            _run_steps(branch_steps[br], plan, model, slots, last, timings)
    _run_steps(shared_steps, plan, model, slots, last, timings)
    out = slots[plan.assignment[plan.output_value]][1]
    if model.config.clamp_output:
        out = np.clip(out, 0, 1)
    return out


# ---------------------------------------------------------------------------
# cost accounting

@dataclass
class LayerCost:
    name: str
    op: str
    macs: int
    bytes: int
    microseconds: float | None = None


@dataclass
class CostReport:
    layers: list[LayerCost]
    peak_bytes: int | None = None
    wall_times: list[float] = field(default_factory=list)
    measured_peak_bytes: int | None = None
    scratch_bound_bytes: int | None = None

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def median_wall_time(self) -> float | None:
        return statistics.median(self.wall_times) if self.wall_times else None

    def macs_where(self, prefix: str = "", contains: str = "") -> int:
        return sum(layer.macs for layer in self.layers
                   if layer.name.startswith(prefix) and contains in layer.name)

    def to_text(self) -> str:
        lines = ["# name\tmacs\tbytes\tmicroseconds"]
        for layer in self.layers:
            us = "-" if layer.microseconds is None else f"{layer.microseconds:.1f}"
            lines.append(f"{layer.name}\t{layer.macs}\t{layer.bytes}\t{us}")
        lines.append(f"# total_macs={self.total_macs}")
        if self.peak_bytes is not None:
            lines.append(f"# planned_peak_bytes={self.peak_bytes}")
        if self.wall_times:
            lines.append(f"# runs={len(self.wall_times)} median_seconds={self.median_wall_time:.6f}")
        if self.measured_peak_bytes is not None:
            overhead = self.measured_peak_bytes - (self.peak_bytes or 0)
            lines.append(f"# measured_peak_bytes={self.measured_peak_bytes} "
                         f"overhead_vs_plan_bytes={overhead}")
        if self.scratch_bound_bytes is not None:
            lines.append(f"# scratch_bound_bytes={self.scratch_bound_bytes} (per worker: padded "
                         f"input + im2col columns + result of the largest conv, plus "
                         f"{SCRATCH_CONSTANT} bytes)")
        return "\n".join(lines) + "\n"


def step_macs(step: Step, shapes: dict) -> int:
    """Conv: ``out_h * out_w * kh * kw * c_in * c_out``; channel_scale: one
    multiply per output element; every other op counts as 0."""
    oh, ow, oc = shapes[step.output]
    if step.op == "conv2d":
        k = step.kernel_size
        return oh * ow * k * k * shapes[step.inputs[0]][2] * oc
    if step.op == "channel_scale":
        return oh * ow * oc
    return 0


def count_flops(model: MicroISPModel | ModelConfig, dims: tuple[int, int],
                mode: str = "sequential") -> CostReport:
    plan = build_plan(model, dims, mode)
    layers = []
    for s in plan.steps:
        layers.append(LayerCost(s.name, s.op, step_macs(s, plan.shapes),
                                plan.step_peak(s)))
    return CostReport(layers, plan.peak_bytes)


SCRATCH_CONSTANT = 256 * 1024


def scratch_bound(plan: ExecutionPlan, threads: int = 1) -> int:
    """Upper bound on memory the kernels allocate beyond the planned buffers."""
    workers = min(threads, len(BRANCHES)) if plan.mode == "parallel" else 1
    worst = 0
    for s in plan.steps:
        if s.op != "conv2d":
            continue
        h, w, c = plan.shapes[s.inputs[0]]
        oh, ow, oc = plan.shapes[s.output]
        k = s.kernel_size
        padded = (h + k - 1) * (w + k - 1) * c
        worst = max(worst, 4 * (padded + oh * ow * k * k * c + oh * ow * oc))
    return workers * worst + SCRATCH_CONSTANT


def conv_macs(h: int, w: int, k: int = 3, c_in: int = 4, c_out: int = 4, stride: int = 1) -> int:
    return -(-h // stride) * -(-w // stride) * k * k * c_in * c_out


def benchmark(model: MicroISPModel, dims: tuple[int, int], mode: str = "sequential",
              repetitions: int = 3, threads: int = 1, seed: int = 0) -> CostReport:
    """Times ``repetitions`` planned runs on random input. Per-layer times are
    medians across runs; peak allocation is measured with tracemalloc on an
    extra run so tracing does not distort the timings."""
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    plan = build_plan(model, dims, mode)
    packed = np.random.default_rng(seed).uniform(0, 1, (*dims, 4)).astype(np.float32)
    per_layer: dict[int, list[float]] = {s.index: [] for s in plan.steps}
    walls = []
    for _ in range(repetitions):
        timings: dict[int, float] = {}
        t0 = time.perf_counter()
        execute(plan, model, packed, threads=threads, timings=timings)
        walls.append(time.perf_counter() - t0)
        for k, v in timings.items():
            per_layer[k].append(v)
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        execute(plan, model, packed, threads=threads)
        measured = tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()
    layers = [LayerCost(s.name, s.op, step_macs(s, plan.shapes), plan.step_peak(s),
                        statistics.median(per_layer[s.index]) * 1e6) for s in plan.steps]
    # the input array is allocated before tracing starts but is part of the plan
    measured += packed.nbytes
    return CostReport(layers, plan.peak_bytes, walls, measured, scratch_bound(plan, threads))
