"""Step-level model of the computing cores.

A PCORE is nine MAC lanes plus an adder tree.  A computing core holds four
PCOREs sharing one image tile, each PCORE paired with one weight slot.  Four
cores run in lockstep on the four channel quarters; their psums are reduced
per kernel into four accumulation deltas.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .banks import NUM_QUARTERS, ImageBankSet, StructuralError, WeightBankGrid

STEP_CYCLES = 8
TILE_SIZE = 9
# Cycle offset (within the 8-cycle load stage) of each of the nine reads.
READ_SLOTS = tuple(t * STEP_CYCLES // TILE_SIZE for t in range(TILE_SIZE))


@dataclass(frozen=True)
class ImageTile:
    """A 3x3 window of one channel; ``values`` are rows feature0..feature2 flattened."""

    values: Tuple[int, ...]
    channel: int = 0
    i: int = 0
    j: int = 0

    def __post_init__(self):
        if len(self.values) != TILE_SIZE:
            raise ValueError(f"tile must hold 9 values, got {len(self.values)}")

    def rows(self) -> Tuple[Tuple[int, ...], ...]:
        v = self.values
        return v[0:3], v[3:6], v[6:9]


class WeightReg:
    """Weight loader register: four kernel slots of nine weights for one channel."""

    __slots__ = ("slots", "channel", "step_k", "kernels")

    def __init__(self, slots, channel: int = 0, step_k: int = 0, kernels=(0, 1, 2, 3)):
        slots = tuple(tuple(int(w) for w in s) for s in slots)
        if len(slots) != NUM_QUARTERS or any(len(s) != TILE_SIZE for s in slots):
            raise ValueError("weight register must be 4 slots of 9 weights")
        self.slots = slots
        self.channel = channel
        self.step_k = step_k
        self.kernels = tuple(kernels)

    def state(self):
        return self.slots, self.channel, self.step_k, self.kernels


def mac9(tile: Sequence[int], weights: Sequence[int]) -> int:
    """Weighted sum of nine products, exact."""
    if isinstance(tile, ImageTile):
        tile = tile.values
    t0, t1, t2, t3, t4, t5, t6, t7, t8 = tile
    w0, w1, w2, w3, w4, w5, w6, w7, w8 = weights
    return (t0 * w0 + t1 * w1 + t2 * w2 + t3 * w3 + t4 * w4
            + t5 * w5 + t6 * w6 + t7 * w7 + t8 * w8)


class ComputingCore:
    """One computing core serving channels ``[core_id*C/4, (core_id+1)*C/4)``."""

    def __init__(self, core_id: int, C: int):
        if not 0 <= core_id < NUM_QUARTERS:
            raise ValueError("core id must be in [0, 4)")
        self.core_id = core_id
        quarter = C // NUM_QUARTERS
        self.channel_range = range(core_id * quarter, (core_id + 1) * quarter)
        self.weights: WeightReg | None = None
        self.weight_loads = 0

    def owns(self, channel: int) -> bool:
        return channel in self.channel_range

    def ensure_weights(self, grid: WeightBankGrid, channel: int, step_k: int, cycle_base: int) -> WeightReg:
        """Reload the weight register only when channel or kernel step changes."""
        reg = self.weights
        if reg is None or reg.channel != channel or reg.step_k != step_k:
            self.weights = load_weights(grid, self.core_id, channel, step_k, cycle_base)
            self.weight_loads += 1
        return self.weights


def core_step(core: ComputingCore, tile: ImageTile, weights: WeightReg) -> List[int]:
    """Four psums, one per weight slot, from one shared tile."""
    if not core.owns(tile.channel):
        raise StructuralError(
            f"core {core.core_id} got tile of channel {tile.channel}, owns {core.channel_range}"
        )
    v = tile.values
    return [mac9(v, s) for s in weights.slots]


class CoreArray:
    def __init__(self, C: int):
        self.cores = [ComputingCore(q, C) for q in range(NUM_QUARTERS)]

    @property
    def weight_loads(self) -> List[int]:
        return [c.weight_loads for c in self.cores]


def array_step(array: CoreArray, tiles: Sequence[ImageTile], regs: Sequence[WeightReg]):
    """Run all four cores on one step.

    Returns ``(deltas, psums)`` where ``psums[q][p]`` is core ``q``'s psum for
    slot ``p`` and ``deltas[p]`` is the cross-core sum for slot ``p``.
    """
    psums = [core_step(core, tile, reg) for core, tile, reg in zip(array.cores, tiles, regs)]
    deltas = [psums[0][p] + psums[1][p] + psums[2][p] + psums[3][p] for p in range(NUM_QUARTERS)]
    return deltas, psums


def load_tile(banks: ImageBankSet, channel: int, i: int, j: int, cycle_base: int, who=None) -> ImageTile:
    """Fetch the 3x3 window at ``(i, j)`` of ``channel`` over one 8-cycle load stage."""
    s = banks.spec
    if not (0 <= channel < s.C):
        raise IndexError(f"channel {channel} out of range")
    if not (0 <= i <= s.H - 3 and 0 <= j <= s.W - 3):
        raise IndexError(f"window ({i}, {j}) does not fit a {s.H}x{s.W} image")
    cq = s.C // NUM_QUARTERS
    bank = banks.banks[channel // cq]
    base = (channel % cq) * s.H * s.W + i * s.W + j
    W = s.W
    addrs = (base, base + 1, base + 2,
             base + W, base + W + 1, base + W + 2,
             base + 2 * W, base + 2 * W + 1, base + 2 * W + 2)
    read = bank.read
    values = tuple(read(a, cycle_base + slot, who) for a, slot in zip(addrs, READ_SLOTS))
    return ImageTile(values, channel, i, j)


def load_weights(grid: WeightBankGrid, core_id: int, channel: int, step_k: int, cycle_base: int) -> WeightReg:
    """Fill a weight register from row ``core_id`` of the grid.

    Slot ``p`` holds kernel ``p*K/4 + step_k``, read from bank ``(core_id, p)``,
    so the four slot streams never share a bank.
    """
    s = grid.spec
    cq, kq = s.C // NUM_QUARTERS, s.K // NUM_QUARTERS
    if not (core_id * cq <= channel < (core_id + 1) * cq):
        raise IndexError(f"channel {channel} not in core {core_id}'s quarter")
    if not 0 <= step_k < kq:
        raise IndexError(f"kernel step {step_k} outside [0, {kq})")
    base = (step_k * cq + channel % cq) * TILE_SIZE
    who = ("core", core_id)
    slots = []
    for p in range(NUM_QUARTERS):
        bank = grid.banks[core_id][p]
        slots.append(tuple(bank.read(base + t, cycle_base + READ_SLOTS[t], who) for t in range(TILE_SIZE)))
    kernels = tuple(p * kq + step_k for p in range(NUM_QUARTERS))
    return WeightReg(slots, channel, step_k, kernels)
