"""Block-RAM pool: image bank set, 4x4 weight grid, output bank set.

Each bank is a dual-port memory: at most two accesses (read or write) per
cycle.  Every access goes through a per-bank :class:`PortLedger` that raises
:class:`PortBudgetError` the moment a cycle's budget is exceeded.

Bulk ``load``/``gather`` methods model DMA traffic and are not port
accounted; DMA time is charged separately by the schedule.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .golden import (
    BiasVector,
    KernelTensor4D,
    LayerSpec,
    PsumTensor3D,
    QuantTensor3D,
    ShapeError,
    INT8_MAX,
    INT8_MIN,
)

PORTS_PER_BANK = 2
NUM_QUARTERS = 4


class StructuralError(RuntimeError):
    """A violation of the modeled hardware structure (a simulator bug signal)."""


class PortBudgetError(StructuralError):
    pass


class AddressError(IndexError):
    pass


class PortLedger:
    """Per-cycle port-use counts of one bank.

    ``retire_before`` drops history older than a cycle so long simulations
    stay bounded in memory; peak and total counters survive retirement.
    """

    def __init__(self, name: str = "", ports: int = PORTS_PER_BANK):
        self.name = name
        self.ports = ports
        self.uses: Dict[int, int] = {}
        self.peak = 0
        self.total = 0

    def record(self, cycle: int) -> None:
        n = self.uses.get(cycle, 0) + 1
        if n > self.ports:
            raise PortBudgetError(
                f"bank {self.name}: {n} port uses in cycle {cycle} (budget {self.ports})"
            )
        self.uses[cycle] = n
        self.total += 1
        if n > self.peak:
            self.peak = n

    def count(self, cycle: int) -> int:
        return self.uses.get(cycle, 0)

    def retire_before(self, cycle: int) -> None:
        old = [c for c in self.uses if c < cycle]
        for c in old:
            del self.uses[c]


class BmgBank:
    """A word-addressed dual-port memory with read-before-write semantics."""

    def __init__(self, depth: int, word_width: int, name: str = ""):
        if depth < 0:
            raise ValueError("depth must be non-negative")
        self.depth = depth
        self.word_width = word_width
        self.name = name
        self.lo = -(1 << (word_width - 1))
        self.hi = (1 << (word_width - 1)) - 1
        self.storage: List[int] = [0] * depth
        self.ledger = PortLedger(name)
        self.accessors: set = set()
        # addr -> (cycle, value before that cycle's write)
        self._last_write: Dict[int, Tuple[int, int]] = {}

    def _check(self, addr: int) -> None:
        if not 0 <= addr < self.depth:
            raise AddressError(f"bank {self.name}: address {addr} outside [0, {self.depth})")

    def read(self, addr: int, cycle: int, who=None) -> int:
        self._check(addr)
        self.ledger.record(cycle)
        if who is not None:
            self.accessors.add(who)
        hit = self._last_write.get(addr)
        if hit is not None and hit[0] == cycle:
            return hit[1]
        return self.storage[addr]

    def write(self, addr: int, value: int, cycle: int, who=None) -> None:
        self._check(addr)
        if not self.lo <= value <= self.hi:
            raise OverflowError(
                f"bank {self.name}: value {value} does not fit {self.word_width}-bit word"
            )
        self.ledger.record(cycle)
        if who is not None:
            self.accessors.add(who)
        prev = self._last_write.get(addr)
        old = prev[1] if prev is not None and prev[0] == cycle else self.storage[addr]
        self._last_write[addr] = (cycle, old)
        self.storage[addr] = value

    def accumulate(self, addr: int, delta: int, cycle_read: int, cycle_write: int, who=None) -> int:
        """Read-modify-write across two cycles; returns the new word."""
        if not cycle_read < cycle_write:
            raise ValueError("read must precede write in a read-modify-write")
        new = self.read(addr, cycle_read, who) + delta
        self.write(addr, new, cycle_write, who)
        return new

    def load(self, words: Iterable[int], offset: int = 0) -> None:
        """DMA fill: write words without port accounting."""
        words = [int(w) for w in words]
        if offset < 0 or offset + len(words) > self.depth:
            raise AddressError(f"bank {self.name}: load of {len(words)} words at {offset} overflows depth {self.depth}")
        for w in words:
            if not self.lo <= w <= self.hi:
                raise OverflowError(f"bank {self.name}: value {w} does not fit {self.word_width}-bit word")
        self.storage[offset:offset + len(words)] = words

    def words(self, n: Optional[int] = None) -> List[int]:
        return list(self.storage[: self.depth if n is None else n])


def bank_read(bank: BmgBank, addr: int, cycle: int) -> int:
    return bank.read(addr, cycle)


def bank_accumulate(bank: BmgBank, addr: int, delta: int, cycle_read: int, cycle_write: int) -> None:
    bank.accumulate(addr, delta, cycle_read, cycle_write)


# -- address maps -------------------------------------------------------------

def image_map(c: int, i: int, j: int, spec: LayerSpec) -> Tuple[int, int]:
    if not (0 <= c < spec.C and 0 <= i < spec.H and 0 <= j < spec.W):
        raise AddressError(f"image index ({c}, {i}, {j}) out of range for {spec.C}x{spec.H}x{spec.W}")
    cq = spec.C // 4
    return c // cq, (c % cq) * spec.H * spec.W + i * spec.W + j


def weight_map(k: int, c: int, m: int, n: int, spec: LayerSpec) -> Tuple[Tuple[int, int], int]:
    if not (0 <= k < spec.K and 0 <= c < spec.C and 0 <= m < 3 and 0 <= n < 3):
        raise AddressError(f"weight index ({k}, {c}, {m}, {n}) out of range")
    kq, cq = spec.K // 4, spec.C // 4
    return (c // cq, k // kq), ((k % kq) * cq + (c % cq)) * 9 + m * 3 + n


def output_map(k: int, i: int, j: int, spec: LayerSpec) -> Tuple[int, int]:
    if not (0 <= k < spec.K and 0 <= i < spec.out_h and 0 <= j < spec.out_w):
        raise AddressError(f"output index ({k}, {i}, {j}) out of range")
    kq = spec.K // 4
    return k // kq, (k % kq) * spec.out_h * spec.out_w + i * spec.out_w + j


# -- bank sets ----------------------------------------------------------------

class ImageBankSet:
    """Four 8-bit banks, bank ``q`` holding channels ``[q*C/4, (q+1)*C/4)``."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.banks = [BmgBank(spec.capacity, 8, f"img{q}") for q in range(NUM_QUARTERS)]

    @property
    def used_words(self) -> int:
        return self.spec.image_words_per_bank

    def load(self, image: QuantTensor3D) -> None:
        s = self.spec
        if (image.C, image.H, image.W) != (s.C, s.H, s.W):
            raise ShapeError(f"image shape {image.data.shape} does not match spec {(s.C, s.H, s.W)}")
        quarters = image.data.reshape(NUM_QUARTERS, s.C // 4 * s.H * s.W)
        for bank, words in zip(self.banks, quarters):
            bank.load(words.tolist())

    def gather(self) -> QuantTensor3D:
        s = self.spec
        flat = np.concatenate([np.array(b.words(self.used_words), dtype=np.int8) for b in self.banks])
        return QuantTensor3D(flat.reshape(s.C, s.H, s.W))


class WeightBankGrid:
    """4x4 grid of 8-bit banks; bank ``(g, j)`` holds channel quarter ``g`` of kernel quarter ``j``."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        depth = 9 * (spec.K // 4) * (spec.C // 4)
        self.banks = [[BmgBank(depth, 8, f"w{g}{j}") for j in range(NUM_QUARTERS)]
                      for g in range(NUM_QUARTERS)]

    def bank(self, g: int, j: int) -> BmgBank:
        return self.banks[g][j]

    def all_banks(self) -> List[BmgBank]:
        return [b for row in self.banks for b in row]

    def load(self, kernels: KernelTensor4D) -> None:
        s = self.spec
        if (kernels.K, kernels.C) != (s.K, s.C):
            raise ShapeError(f"kernel shape {kernels.data.shape[:2]} does not match spec {(s.K, s.C)}")
        # (K, C, 9) -> (j, k_local, g, c_local, 9)
        grid = kernels.data.reshape(NUM_QUARTERS, s.K // 4, NUM_QUARTERS, s.C // 4, 9)
        for g in range(NUM_QUARTERS):
            for j in range(NUM_QUARTERS):
                self.banks[g][j].load(grid[j, :, g].reshape(-1).tolist())

    def gather(self) -> KernelTensor4D:
        s = self.spec
        grid = np.zeros((NUM_QUARTERS, s.K // 4, NUM_QUARTERS, s.C // 4, 9), dtype=np.int8)
        for g in range(NUM_QUARTERS):
            for j in range(NUM_QUARTERS):
                grid[j, :, g] = np.array(self.banks[g][j].words(), dtype=np.int8).reshape(s.K // 4, s.C // 4, 9)
        return KernelTensor4D(grid.reshape(s.K, s.C, 3, 3))


class OutputBankSet:
    """Four 32-bit banks, bank ``j`` holding kernels ``[j*K/4, (j+1)*K/4)``.

    The address layout matches :class:`ImageBankSet` for an ``(OutH, OutW, K)``
    feature map, so a requantized output can feed the next layer unchanged.
    """

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        depth = (spec.K // 4) * spec.out_h * spec.out_w
        self.banks = [BmgBank(depth, 32, f"out{q}") for q in range(NUM_QUARTERS)]

    def load(self, psums: PsumTensor3D) -> None:
        quarters = psums.data.reshape(NUM_QUARTERS, -1)
        for bank, words in zip(self.banks, quarters):
            bank.load(words.tolist())

    def preload_bias(self, bias: BiasVector) -> None:
        s = self.spec
        if len(bias) != s.K:
            raise ShapeError(f"bias length {len(bias)} != K={s.K}")
        plane = s.out_h * s.out_w
        per_bank = np.repeat(bias.data.astype(np.int64), plane).reshape(NUM_QUARTERS, -1)
        for bank, words in zip(self.banks, per_bank):
            bank.load(words.tolist())

    def gather(self) -> PsumTensor3D:
        s = self.spec
        flat = np.concatenate([np.array(b.words(), dtype=np.int64) for b in self.banks])
        return PsumTensor3D(flat.reshape(s.K, s.out_h, s.out_w))

    def requantized_words(self, shift: int) -> List[List[int]]:
        """Per-bank 8-bit words after shift-saturate, in storage order."""
        return [[max(INT8_MIN, min(INT8_MAX, w >> shift)) for w in b.storage] for b in self.banks]


def preload_bias(outs: OutputBankSet, bias: BiasVector) -> OutputBankSet:
    outs.preload_bias(bias)
    return outs


def all_ledgers(*bank_sets) -> List[PortLedger]:
    out = []
    for bs in bank_sets:
        banks = bs.all_banks() if isinstance(bs, WeightBankGrid) else bs.banks
        out.extend(b.ledger for b in banks)
    return out
