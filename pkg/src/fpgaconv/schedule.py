"""Loop nest, two-stage load/compute pipeline and cycle accounting.

Steps are enumerated kernel group outermost, then channel offset, then the
output pixels row-major.  One step moves four 3x3 tiles (one per core) and
accumulates four output words; it costs eight cycles per stage.  With the
pipeline on, loading step ``s+1`` overlaps computing step ``s``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

from .banks import NUM_QUARTERS, ImageBankSet, OutputBankSet, WeightBankGrid, all_ledgers
from .datapath import STEP_CYCLES, CoreArray, array_step, load_tile
from .golden import (
    BiasVector,
    KernelTensor4D,
    LayerSpec,
    PsumTensor3D,
    QuantTensor3D,
    ShapeError,
    psum_count,
    requantize,
)

# Cycle offsets of the output read-modify-write within a compute stage.
RMW_READ_OFFSET = 6
RMW_WRITE_OFFSET = 7
MACS_PER_PSUM = 9
OPS_PER_MAC = 2


class StepIndex(NamedTuple):
    k: int       # kernel group
    c_off: int   # channel offset within each core's quarter
    i: int
    j: int


def step_count(spec: LayerSpec) -> int:
    return (spec.K // 4) * (spec.C // 4) * spec.out_h * spec.out_w


def enumerate_steps(spec: LayerSpec) -> Iterator[StepIndex]:
    for k in range(spec.K // 4):
        for c_off in range(spec.C // 4):
            for i in range(spec.out_h):
                for j in range(spec.out_w):
                    yield StepIndex(k, c_off, i, j)


def compute_cycles(spec: LayerSpec) -> int:
    return step_count(spec) * STEP_CYCLES


@dataclass(frozen=True)
class DmaModel:
    bus_bytes_per_cycle: int = 4

    def __post_init__(self):
        if self.bus_bytes_per_cycle < 1:
            raise ValueError("bus_bytes_per_cycle must be >= 1")

    def cycles(self, nbytes: int) -> int:
        return math.ceil(nbytes / self.bus_bytes_per_cycle)


def dma_cycles(model: DmaModel, spec: LayerSpec) -> Tuple[int, int, int]:
    """(input, bias preload, output) transfer cycles; bias is one 32-bit word per output element."""
    in_bytes = spec.H * spec.W * spec.C + 9 * spec.K * spec.C
    out_bytes = 4 * spec.K * spec.out_h * spec.out_w
    return model.cycles(in_bytes), model.cycles(out_bytes), model.cycles(out_bytes)


@dataclass
class CycleStats:
    dma_in_cycles: int
    bias_preload_cycles: int
    pipeline_fill_cycles: int
    compute_cycles: int
    dma_out_cycles: int
    clock_mhz: float
    psums: int

    @property
    def total_cycles(self) -> int:
        return (self.dma_in_cycles + self.bias_preload_cycles + self.pipeline_fill_cycles
                + self.compute_cycles + self.dma_out_cycles)

    @property
    def datapath_cycles(self) -> int:
        """Cycles from first tile load to last accumulate."""
        return self.pipeline_fill_cycles + self.compute_cycles

    @property
    def latency_s(self) -> float:
        # Steady-state compute only: excludes DMA, bias preload and fill.
        return self.compute_cycles / (self.clock_mhz * 1e6)

    @property
    def end_to_end_latency_s(self) -> float:
        return self.total_cycles / (self.clock_mhz * 1e6)

    @property
    def gops_psum(self) -> float:
        return self.psums / self.latency_s / 1e9

    @property
    def gops_mac(self) -> float:
        return OPS_PER_MAC * MACS_PER_PSUM * self.psums / self.latency_s / 1e9

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(
            total_cycles=self.total_cycles,
            datapath_cycles=self.datapath_cycles,
            latency_s=self.latency_s,
            end_to_end_latency_s=self.end_to_end_latency_s,
            gops_psum=self.gops_psum,
            gops_mac=self.gops_mac,
        )
        return d


def analytic_stats(spec: LayerSpec, dma: DmaModel = DmaModel(), pipeline: bool = True) -> CycleStats:
    steps = step_count(spec)
    dma_in, bias_c, dma_out = dma_cycles(dma, spec)
    return CycleStats(
        dma_in_cycles=dma_in,
        bias_preload_cycles=bias_c,
        pipeline_fill_cycles=STEP_CYCLES if pipeline else STEP_CYCLES * steps,
        compute_cycles=steps * STEP_CYCLES,
        dma_out_cycles=dma_out,
        clock_mhz=spec.clock_mhz,
        psums=psum_count(spec),
    )


def throughput(stats: CycleStats, spec: LayerSpec) -> Tuple[float, float, float]:
    """(latency_s, gops_psum, gops_mac) with latency from compute cycles only."""
    if not stats.clock_mhz > 0:
        raise ValueError("clock_mhz must be positive")
    latency = stats.compute_cycles / (stats.clock_mhz * 1e6)
    n = psum_count(spec)
    return latency, n / latency / 1e9, MACS_PER_PSUM * OPS_PER_MAC * n / latency / 1e9


def scale_cores(gops_psum: float, n_instances: int) -> float:
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    return n_instances * gops_psum


# -- full-layer simulation ----------------------------------------------------

@dataclass
class TraceRow:
    cycle: int
    step: int
    kernel_group: int
    channel_offset: int
    out_i: int
    out_j: int
    feature: Tuple[Tuple[int, ...], ...]   # three rows of 3 signed bytes
    weight: Tuple[Tuple[int, ...], ...]    # four slots of 9 signed bytes
    psum: Tuple[int, ...]
    delta: Tuple[int, ...]

    FIELDS = (
        ["cycle", "step", "kernel_group", "channel_offset", "out_i", "out_j"]
        + [f"feature{r}" for r in range(3)]
        + [f"weight{p}" for p in range(4)]
        + [f"psum{p}" for p in range(4)]
        + [f"delta{p}" for p in range(4)]
    )

    def as_csv_row(self) -> list:
        return ([self.cycle, self.step, self.kernel_group, self.channel_offset, self.out_i, self.out_j]
                + [bytes_to_hex(r) for r in self.feature]
                + [bytes_to_hex(w) for w in self.weight]
                + list(self.psum) + list(self.delta))


def bytes_to_hex(values: Sequence[int]) -> str:
    """Concatenate signed bytes, first element most significant."""
    return "".join(f"{v & 0xFF:02x}" for v in values)


def hex_to_bytes(text: str) -> List[int]:
    raw = bytes.fromhex(text)
    return [b - 256 if b > 127 else b for b in raw]


class PipelineState:
    """Two pipeline registers: the step being loaded and the step being computed."""

    def __init__(self):
        self.load = None
        self.compute = None

    def advance(self, incoming):
        self.compute, self.load = self.load, incoming
        return self.compute


@dataclass
class LayerResult:
    psums: PsumTensor3D
    output: object  # PsumTensor3D, or QuantTensor3D when requantized
    stats: CycleStats
    steps: int
    trace: List[TraceRow] = field(default_factory=list)
    image_banks: Optional[ImageBankSet] = None
    weight_banks: Optional[WeightBankGrid] = None
    output_banks: Optional[OutputBankSet] = None
    array: Optional[CoreArray] = None

    @property
    def peak_port_use(self) -> int:
        ledgers = all_ledgers(self.image_banks, self.weight_banks, self.output_banks)
        return max(l.peak for l in ledgers)


def run_layer(
    spec: LayerSpec,
    image: QuantTensor3D,
    kernels: KernelTensor4D,
    bias: BiasVector,
    *,
    pipeline: bool = True,
    dma: DmaModel = DmaModel(),
    trace: Optional[Tuple[int, int]] = None,
    fault: Optional[Callable[[ImageBankSet, WeightBankGrid, OutputBankSet], None]] = None,
    step_hook: Optional[Callable] = None,
) -> LayerResult:
    """Simulate one layer on the banked 4-core array.

    ``trace`` is an inclusive ``(first, last)`` step range to record.
    ``fault`` may corrupt bank contents after the DMA load (test hook).
    ``step_hook(ordinal, step, tiles, regs, psums, deltas)`` sees every step.
    """
    if (image.C, image.H, image.W) != (spec.C, spec.H, spec.W):
        raise ShapeError(f"image {image.data.shape} does not match spec (C,H,W)=({spec.C},{spec.H},{spec.W})")
    if (kernels.K, kernels.C) != (spec.K, spec.C):
        raise ShapeError(f"kernels (K,C)=({kernels.K},{kernels.C}) do not match spec ({spec.K},{spec.C})")
    if len(bias) != spec.K:
        raise ShapeError(f"bias length {len(bias)} != K={spec.K}")

    steps = step_count(spec)
    if trace is not None:
        lo, hi = trace
        if not (0 <= lo <= hi < steps):
            raise IndexError(f"trace range {lo}..{hi} outside 0..{steps - 1}")

    img_banks = ImageBankSet(spec)
    w_banks = WeightBankGrid(spec)
    out_banks = OutputBankSet(spec)
    img_banks.load(image)
    w_banks.load(kernels)
    out_banks.preload_bias(bias)
    if fault is not None:
        fault(img_banks, w_banks, out_banks)

    stats = analytic_stats(spec, dma, pipeline)
    array = CoreArray(spec.C)
    cores = array.cores
    cq = spec.C // NUM_QUARTERS
    plane = spec.out_h * spec.out_w
    out_w = spec.out_w
    obanks = out_banks.banks
    ledgers = all_ledgers(img_banks, w_banks, out_banks)
    rows: List[TraceRow] = []

    def load_stage(ordinal, st, t):
        tiles, regs = [], []
        for q, core in enumerate(cores):
            ch = q * cq + st.c_off
            regs.append(core.ensure_weights(w_banks, ch, st.k, t))
            tiles.append(load_tile(img_banks, ch, st.i, st.j, t, ("core", q)))
        return ordinal, st, tiles, regs

    def compute_stage(packet, t):
        ordinal, st, tiles, regs = packet
        deltas, psums = array_step(array, tiles, regs)
        base = st.k * plane + st.i * out_w + st.j
        for p in range(NUM_QUARTERS):
            obanks[p].accumulate(base, deltas[p], t + RMW_READ_OFFSET, t + RMW_WRITE_OFFSET, "reducer")
        if step_hook is not None:
            step_hook(ordinal, st, tiles, regs, psums, deltas)
        if trace is not None and trace[0] <= ordinal <= trace[1]:
            rows.append(TraceRow(
                cycle=t, step=ordinal, kernel_group=st.k, channel_offset=st.c_off,
                out_i=st.i, out_j=st.j,
                feature=tiles[0].rows(), weight=regs[0].slots,
                psum=tuple(psums[0]), delta=tuple(deltas),
            ))

    t0 = stats.dma_in_cycles + stats.bias_preload_cycles
    stage = STEP_CYCLES
    if pipeline:
        pipe = PipelineState()
        it = enumerate(enumerate_steps(spec))
        for s in range(steps + 1):
            t = t0 + s * stage
            nxt = next(it, None)
            incoming = load_stage(nxt[0], nxt[1], t) if nxt is not None else None
            current = pipe.advance(incoming)
            if current is not None:
                compute_stage(current, t)
            if s % 64 == 63:
                for led in ledgers:
                    led.retire_before(t)
    else:
        for ordinal, st in enumerate(enumerate_steps(spec)):
            t = t0 + ordinal * 2 * stage
            compute_stage(load_stage(ordinal, st, t), t + stage)
            if ordinal % 32 == 31:
                for led in ledgers:
                    led.retire_before(t)

    psums = out_banks.gather()
    output = psums if spec.requant_shift is None else requantize(psums, spec.requant_shift)
    return LayerResult(psums, output, stats, steps, rows, img_banks, w_banks, out_banks, array)


def run_chain(image: QuantTensor3D, layers: Sequence[Tuple[KernelTensor4D, BiasVector, int]],
              clock_mhz: float = 112.0, **kw) -> List[LayerResult]:
    """Run layers back to back, each output requantized with its shift and fed forward."""
    results = []
    x = image
    for kernels, bias, shift in layers:
        spec = LayerSpec.for_tensors(x, kernels, clock_mhz=clock_mhz, requant_shift=shift)
        res = run_layer(spec, x, kernels, bias, **kw)
        results.append(res)
        x = res.output
    return results
