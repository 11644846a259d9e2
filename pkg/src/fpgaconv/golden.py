"""Tensor containers and the reference int8 convolution.

All tensors are stored channel-outermost, row-major: a feature map is a
``(C, H, W)`` array, a kernel set ``(K, C, 3, 3)``, a psum tensor
``(K, OutH, OutW)``.  Convolution is valid (no padding) with stride 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
KSIZE = 3

# Maximum clock frequencies of the three synthesized devices, in MHz.
CLOCK_PRESETS = {
    "z7020-400": 112.0,
    "z7020-484": 93.0,
    "zu3eg": 161.0,
}


class ShapeError(ValueError):
    """Raised when tensor dimensions violate a layer constraint."""


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _as_int8(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype != np.int8:
        wide = arr.astype(np.int64)
        if wide.size and (wide.min() < INT8_MIN or wide.max() > INT8_MAX):
            raise ValueError("values outside signed 8-bit range")
        arr = wide
    return _frozen(arr, np.int8)


@dataclass(frozen=True)
class QuantTensor3D:
    """An ``H x W x C`` feature map of signed 8-bit elements."""

    data: np.ndarray  # (C, H, W) int8

    def __post_init__(self):
        arr = _as_int8(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"feature map must be 3-D (C, H, W), got shape {arr.shape}")
        object.__setattr__(self, "data", arr)
        # Requantized outputs may be smaller than 3x3; layers check H, W >= 3.
        if min(arr.shape) < 1:
            raise ShapeError(f"empty feature map {arr.shape}")

    @classmethod
    def from_flat(cls, flat, H: int, W: int, C: int) -> "QuantTensor3D":
        flat = np.asarray(flat)
        if flat.size != H * W * C:
            raise ShapeError(f"expected {H * W * C} elements, got {flat.size}")
        return cls(flat.reshape(C, H, W))

    @property
    def C(self) -> int:
        return self.data.shape[0]

    @property
    def H(self) -> int:
        return self.data.shape[1]

    @property
    def W(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, QuantTensor3D):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class KernelTensor4D:
    """``K`` kernels of ``C`` channels, each a 3x3 plane of signed 8-bit weights."""

    data: np.ndarray  # (K, C, 3, 3) int8

    def __post_init__(self):
        arr = _as_int8(self.data)
        if arr.ndim != 4 or arr.shape[2:] != (KSIZE, KSIZE):
            raise ShapeError(f"kernels must have shape (K, C, 3, 3), got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, flat, K: int, C: int) -> "KernelTensor4D":
        flat = np.asarray(flat)
        if flat.size != K * C * 9:
            raise ShapeError(f"expected {K * C * 9} elements, got {flat.size}")
        return cls(flat.reshape(K, C, KSIZE, KSIZE))

    @property
    def K(self) -> int:
        return self.data.shape[0]

    @property
    def C(self) -> int:
        return self.data.shape[1]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, KernelTensor4D):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class BiasVector:
    data: np.ndarray  # (K,) int32

    def __post_init__(self):
        arr = np.asarray(self.data).astype(np.int64).reshape(-1)
        if arr.size and (arr.min() < INT32_MIN or arr.max() > INT32_MAX):
            raise ValueError("bias outside signed 32-bit range")
        object.__setattr__(self, "data", _frozen(arr, np.int32))

    @classmethod
    def zeros(cls, K: int) -> "BiasVector":
        return cls(np.zeros(K, dtype=np.int32))

    def __len__(self):
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, BiasVector):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class PsumTensor3D:
    """32-bit accumulator tensor of shape ``(K, OutH, OutW)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"psum tensor must be 3-D (K, OutH, OutW), got {arr.shape}")
        wide = arr.astype(np.int64)
        if wide.size and (wide.min() < INT32_MIN or wide.max() > INT32_MAX):
            raise OverflowError("psum outside signed 32-bit range")
        object.__setattr__(self, "data", _frozen(wide, np.int32))

    @property
    def K(self) -> int:
        return self.data.shape[0]

    @property
    def out_h(self) -> int:
        return self.data.shape[1]

    @property
    def out_w(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, PsumTensor3D):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class LayerSpec:
    """Shape and run parameters of one convolution layer.

    ``bank_capacity`` is the word depth of each image bank; ``None`` sizes
    the banks to exactly fit this layer.
    """

    H: int
    W: int
    C: int
    K: int
    clock_mhz: float = CLOCK_PRESETS["z7020-400"]
    requant_shift: Optional[int] = None
    bank_capacity: Optional[int] = field(default=None)

    def __post_init__(self):
        for name in ("H", "W", "C", "K"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ShapeError(f"{name} must be an integer")
        if self.H < KSIZE:
            raise ShapeError("H >= 3 required")
        if self.W < KSIZE:
            raise ShapeError("W >= 3 required")
        if self.C < 4 or self.C % 4:
            raise ShapeError("C must be a multiple of 4")
        if self.K < 4 or self.K % 4:
            raise ShapeError("K must be a multiple of 4")
        if not self.clock_mhz > 0:
            raise ShapeError("clock_mhz must be positive")
        if self.requant_shift is not None and not 0 <= self.requant_shift <= 31:
            raise ShapeError("requant_shift must be in [0, 31]")
        if self.bank_capacity is not None and self.image_words_per_bank > self.bank_capacity:
            raise ShapeError(
                f"image needs {self.image_words_per_bank} words per bank, "
                f"capacity is {self.bank_capacity}"
            )

    @property
    def out_h(self) -> int:
        return self.H - 2

    @property
    def out_w(self) -> int:
        return self.W - 2

    @property
    def image_words_per_bank(self) -> int:
        return self.H * self.W * (self.C // 4)

    @property
    def capacity(self) -> int:
        return self.bank_capacity if self.bank_capacity is not None else self.image_words_per_bank

    @classmethod
    def for_tensors(cls, image: QuantTensor3D, kernels: KernelTensor4D, **kw) -> "LayerSpec":
        if image.C != kernels.C:
            raise ShapeError(f"channel mismatch: image C={image.C}, kernels C={kernels.C}")
        return cls(H=image.H, W=image.W, C=image.C, K=kernels.K, **kw)


def conv2d_channel(image_channel, kernel_channel) -> np.ndarray:
    """Valid 3x3 correlation of one 8-bit plane, returned as int64 ``(H-2, W-2)``."""
    img = np.asarray(image_channel, dtype=np.int64)
    ker = np.asarray(kernel_channel, dtype=np.int64)
    if img.ndim != 2 or img.shape[0] < KSIZE or img.shape[1] < KSIZE:
        raise ShapeError(f"image plane must be at least 3x3, got {img.shape}")
    if ker.shape != (KSIZE, KSIZE):
        raise ShapeError(f"kernel plane must be 3x3, got {ker.shape}")
    oh, ow = img.shape[0] - 2, img.shape[1] - 2
    out = np.zeros((oh, ow), dtype=np.int64)
    for m in range(KSIZE):
        for n in range(KSIZE):
            out += img[m:m + oh, n:n + ow] * ker[m, n]
    return out


def conv2d_layer(image: QuantTensor3D, kernels: KernelTensor4D, bias: BiasVector) -> PsumTensor3D:
    """Multi-channel valid convolution plus per-kernel bias."""
    if image.C != kernels.C:
        raise ShapeError(f"channel mismatch: image C={image.C}, kernels C={kernels.C}")
    if len(bias) != kernels.K:
        raise ShapeError(f"bias length {len(bias)} != K={kernels.K}")
    img = image.data.astype(np.int64)
    ker = kernels.data.astype(np.int64)
    oh, ow = image.H - 2, image.W - 2
    out = np.zeros((kernels.K, oh, ow), dtype=np.int64)
    for m in range(KSIZE):
        for n in range(KSIZE):
            window = img[:, m:m + oh, n:n + ow]  # (C, oh, ow)
            out += np.tensordot(ker[:, :, m, n], window, axes=([1], [0]))
    out += bias.data.astype(np.int64)[:, None, None]
    return PsumTensor3D(out)


def requantize(psums: PsumTensor3D, shift: int) -> QuantTensor3D:
    """Arithmetic right shift then saturate to int8."""
    if not 0 <= shift <= 31:
        raise ValueError("shift must be in [0, 31]")
    shifted = psums.data.astype(np.int64) >> shift
    return QuantTensor3D(np.clip(shifted, INT8_MIN, INT8_MAX).astype(np.int8))


def psum_count(spec: LayerSpec) -> int:
    """Number of 3x3 partial sums in the layer: one per (pixel, kernel, channel)."""
    return spec.out_h * spec.out_w * spec.K * spec.C
