"""Flat little-endian tensor files with a JSON sidecar, bank dumps, random inputs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Tuple

import numpy as np

from .banks import BmgBank
from .golden import BiasVector, KernelTensor4D, LayerSpec, QuantTensor3D

DTYPES = {"i8": np.dtype("<i1"), "i32": np.dtype("<i4")}


def _paths(base) -> Tuple[Path, Path]:
    base = Path(base)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    return base.with_suffix(".bin"), base.with_suffix(".json")


def write_tensor(base, data: np.ndarray, dtype: str) -> Path:
    """Write ``<base>.bin`` and ``<base>.json``; dims are listed outermost first."""
    bin_path, meta_path = _paths(base)
    arr = np.ascontiguousarray(data, dtype=DTYPES[dtype])
    bin_path.write_bytes(arr.tobytes())
    meta_path.write_text(json.dumps({"dims": list(arr.shape), "dtype": dtype}) + "\n")
    return bin_path


def read_tensor(base) -> np.ndarray:
    bin_path, meta_path = _paths(base)
    meta = json.loads(meta_path.read_text())
    dtype = DTYPES[meta["dtype"]]
    arr = np.frombuffer(bin_path.read_bytes(), dtype=dtype)
    dims = tuple(meta["dims"])
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"{bin_path}: {arr.size} elements, descriptor says {dims}")
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def save_inputs(out_dir, image: QuantTensor3D, kernels: KernelTensor4D, bias: BiasVector) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return {
        "image": str(write_tensor(out_dir / "image", image.data, "i8")),
        "kernels": str(write_tensor(out_dir / "kernels", kernels.data, "i8")),
        "bias": str(write_tensor(out_dir / "bias", bias.data, "i32")),
    }


def load_inputs(image_path, kernels_path, bias_path):
    return (
        QuantTensor3D(read_tensor(image_path)),
        KernelTensor4D(read_tensor(kernels_path)),
        BiasVector(read_tensor(bias_path)),
    )


def gen_random_inputs(seed: int, spec: LayerSpec):
    """Uniform int8 image and kernels, bias uniform over [-2**15, 2**15]."""
    rng = np.random.default_rng(seed)
    image = QuantTensor3D(rng.integers(-128, 128, size=(spec.C, spec.H, spec.W), dtype=np.int8))
    kernels = KernelTensor4D(rng.integers(-128, 128, size=(spec.K, spec.C, 3, 3), dtype=np.int8))
    bias = BiasVector(rng.integers(-(2**15), 2**15 + 1, size=spec.K, dtype=np.int32))
    return image, kernels, bias


def dump_bank(bank: BmgBank, base) -> Path:
    bin_path, meta_path = _paths(base)
    dtype = np.dtype("<i1") if bank.word_width == 8 else np.dtype("<i4")
    bin_path.write_bytes(np.array(bank.storage, dtype=dtype).tobytes())
    meta_path.write_text(json.dumps({"depth": bank.depth, "word_width": bank.word_width}) + "\n")
    return bin_path


def restore_bank(base, name: str = "") -> BmgBank:
    bin_path, meta_path = _paths(base)
    meta = json.loads(meta_path.read_text())
    dtype = np.dtype("<i1") if meta["word_width"] == 8 else np.dtype("<i4")
    bank = BmgBank(meta["depth"], meta["word_width"], name or bin_path.stem)
    bank.load(np.frombuffer(bin_path.read_bytes(), dtype=dtype).tolist())
    return bank
