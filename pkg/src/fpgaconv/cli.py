"""Command-line harness: run, verify, sweep, trace, gen.

Exit codes: 0 success, 1 verification mismatch, 2 configuration error,
3 structural simulation error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .banks import StructuralError
from .golden import CLOCK_PRESETS, LayerSpec, ShapeError, conv2d_layer, psum_count, requantize
from .schedule import DmaModel, TraceRow, analytic_stats, run_layer, step_count
from .tensor_io import dump_bank, gen_random_inputs, load_inputs, save_inputs, write_tensor

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_STRUCTURAL = 0, 1, 2, 3
SWEEP_HEADER = ["H", "W", "C", "K", "steps", "compute_cycles", "latency_s", "gops_psum", "gops_mac"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    H: int
    W: int
    C: int
    K: int
    clock_mhz: float = CLOCK_PRESETS["z7020-400"]
    requant_shift: Optional[int] = None
    bus_bytes: int = 4
    pipeline: bool = True
    seed: Optional[int] = None
    inputs: Optional[dict] = None
    out: Optional[Path] = None
    trace: Optional[Tuple[int, int]] = None
    bank_capacity: Optional[int] = None
    corrupt_weight: Optional[Tuple[int, int, int]] = None
    spec: LayerSpec = field(init=False, repr=False)

    def __post_init__(self):
        self.spec = LayerSpec(self.H, self.W, self.C, self.K, clock_mhz=self.clock_mhz,
                              requant_shift=self.requant_shift, bank_capacity=self.bank_capacity)


def parse_clock(value) -> float:
    if isinstance(value, str) and value in CLOCK_PRESETS:
        return CLOCK_PRESETS[value]
    try:
        mhz = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"clock: expected MHz or one of {sorted(CLOCK_PRESETS)}, got {value!r}")
    if not mhz > 0:
        raise ConfigError("clock_mhz must be positive")
    return mhz


def parse_range(text: str) -> Tuple[int, int]:
    try:
        lo, hi = text.split("..")
        return int(lo), int(hi)
    except ValueError:
        raise ConfigError(f"trace range must look like FROM..TO, got {text!r}")


def _int_field(raw: dict, name: str) -> int:
    if name not in raw:
        raise ConfigError(f"missing required field {name!r}")
    value = raw[name]
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"field {name!r} must be an integer, got {value!r}")
    return value


def parse_config(args: argparse.Namespace) -> RunConfig:
    """Merge an optional JSON config file with command-line flags (flags win)."""
    raw: dict = {}
    base_dir = Path(".")
    if getattr(args, "config", None):
        path = Path(args.config)
        base_dir = path.parent
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}")
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        if "clock_mhz" not in raw and args.clock is None:
            raise ConfigError("field 'clock_mhz' is required unless --clock is given")
    for name in ("H", "W", "C", "K"):
        flag = getattr(args, name, None)
        if flag is not None:
            raw[name] = flag

    H, W, C, K = (_int_field(raw, n) for n in ("H", "W", "C", "K"))
    clock = parse_clock(args.clock if args.clock is not None else raw.get("clock_mhz", CLOCK_PRESETS["z7020-400"]))
    shift = args.requant_shift if args.requant_shift is not None else raw.get("requant_shift")

    inputs = raw.get("inputs")
    seed = args.seed
    if inputs is not None:
        if not isinstance(inputs, dict):
            raise ConfigError("field 'inputs' must be an object")
        if "random_seed" in inputs:
            seed = seed if seed is not None else inputs["random_seed"]
            inputs = None
        else:
            missing = [k for k in ("image", "kernels", "bias") if k not in inputs]
            if missing:
                raise ConfigError(f"inputs: missing {', '.join(missing)} (or give random_seed)")
            inputs = {k: str(base_dir / inputs[k]) for k in ("image", "kernels", "bias")}
    if inputs is None and seed is None:
        seed = 0

    corrupt = None
    if getattr(args, "corrupt_weight", None):
        try:
            corrupt = tuple(int(x) for x in args.corrupt_weight.split(","))
            assert len(corrupt) == 3
        except (ValueError, AssertionError):
            raise ConfigError("--corrupt-weight expects G,J,ADDR")

    try:
        return RunConfig(
            H=H, W=W, C=C, K=K, clock_mhz=clock, requant_shift=shift,
            bus_bytes=args.bus_bytes if args.bus_bytes is not None else raw.get("bus_bytes_per_cycle", 4),
            pipeline=not args.no_pipeline and raw.get("pipeline", True),
            seed=seed, inputs=inputs,
            out=Path(args.out) if args.out else None,
            trace=parse_range(args.trace) if getattr(args, "trace", None) else None,
            bank_capacity=raw.get("bank_capacity"),
            corrupt_weight=corrupt,
        )
    except ShapeError as e:
        raise ConfigError(str(e))


# -- helpers --------------------------------------------------------------------

def _inputs(cfg: RunConfig):
    if cfg.inputs is not None:
        image, kernels, bias = load_inputs(cfg.inputs["image"], cfg.inputs["kernels"], cfg.inputs["bias"])
        s = cfg.spec
        if (image.C, image.H, image.W) != (s.C, s.H, s.W) or (kernels.K, kernels.C) != (s.K, s.C) or len(bias) != s.K:
            raise ConfigError("input tensor dimensions do not match H, W, C, K")
        return image, kernels, bias
    return gen_random_inputs(cfg.seed, cfg.spec)


def _fault(cfg: RunConfig):
    if cfg.corrupt_weight is None:
        return None
    g, j, addr = cfg.corrupt_weight

    def corrupt(img_banks, w_banks, out_banks):
        bank = w_banks.bank(g, j)
        bank.storage[addr] = ~bank.storage[addr]
    return corrupt


def first_mismatch(expected: np.ndarray, got: np.ndarray):
    diff = np.argwhere(expected != got)
    if diff.size == 0:
        return None
    k, i, j = (int(x) for x in diff[0])
    return {"k": k, "i": i, "j": j, "expected": int(expected[k, i, j]), "got": int(got[k, i, j])}


def build_report(cfg: RunConfig, result, verdict: Optional[dict]) -> dict:
    s = cfg.spec
    stats = result.stats
    report = {
        "spec": {"H": s.H, "W": s.W, "C": s.C, "K": s.K, "clock_mhz": s.clock_mhz,
                 "requant_shift": s.requant_shift, "bus_bytes_per_cycle": cfg.bus_bytes,
                 "pipeline": cfg.pipeline},
        "psum_count": psum_count(s),
        "steps": result.steps,
        "cycle_stats": stats.as_dict(),
        "latency_s": stats.latency_s,
        "gops_psum": stats.gops_psum,
        "gops_mac": stats.gops_mac,
    }
    if verdict is not None:
        report["verification"] = verdict
    return report


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_trace_csv(rows: List[TraceRow], stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(TraceRow.FIELDS)
    for row in rows:
        w.writerow(row.as_csv_row())


def _simulate(cfg: RunConfig, verify: bool):
    image, kernels, bias = _inputs(cfg)
    result = run_layer(cfg.spec, image, kernels, bias, pipeline=cfg.pipeline,
                       dma=DmaModel(cfg.bus_bytes), trace=cfg.trace, fault=_fault(cfg))
    verdict = None
    if verify:
        oracle = conv2d_layer(image, kernels, bias)
        mismatch = first_mismatch(oracle.data, result.psums.data)
        if mismatch is None and cfg.spec.requant_shift is not None:
            mismatch = first_mismatch(requantize(oracle, cfg.spec.requant_shift).data, result.output.data)
        verdict = {"status": "pass" if mismatch is None else "fail"}
        if mismatch is not None:
            verdict["first_mismatch"] = mismatch
    return result, verdict


# -- subcommands ----------------------------------------------------------------

def cmd_run(cfg: RunConfig, verify: bool = False) -> int:
    result, verdict = _simulate(cfg, verify)
    out = cfg.out or Path("sim_out")
    out.mkdir(parents=True, exist_ok=True)
    dtype = "i32" if cfg.spec.requant_shift is None else "i8"
    write_tensor(out / "output", result.output.data, dtype)
    report = build_report(cfg, result, verdict)
    (out / "report.json").write_text(_dump_json(report))
    if cfg.trace is not None:
        with open(out / "trace.csv", "w", newline="") as fh:
            write_trace_csv(result.trace, fh)
    if getattr(cfg, "dump_banks", False):
        bank_dir = out / "banks"
        bank_dir.mkdir(exist_ok=True)
        for bs in (result.image_banks, result.output_banks):
            for b in bs.banks:
                dump_bank(b, bank_dir / b.name)
        for b in result.weight_banks.all_banks():
            dump_bank(b, bank_dir / b.name)
    print(f"latency_s={result.stats.latency_s:.6f} gops_psum={result.stats.gops_psum:.6g} "
          f"gops_mac={result.stats.gops_mac:.6g}" + (f" verify={verdict['status']}" if verdict else ""))
    return EXIT_MISMATCH if verdict and verdict["status"] != "pass" else EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    result, verdict = _simulate(cfg, True)
    if cfg.out is not None:
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "report.json").write_text(_dump_json(build_report(cfg, result, verdict)))
    if verdict["status"] == "pass":
        print("pass")
        return EXIT_OK
    m = verdict["first_mismatch"]
    print(f"fail at (k={m['k']}, i={m['i']}, j={m['j']}): expected {m['expected']}, got {m['got']}")
    return EXIT_MISMATCH


def cmd_trace(cfg: RunConfig) -> int:
    if cfg.trace is None:
        raise ConfigError("trace needs --trace FROM..TO")
    steps = step_count(cfg.spec)
    lo, hi = cfg.trace
    if not 0 <= lo <= hi < steps:
        raise ConfigError(f"trace range {lo}..{hi} outside 0..{steps - 1}")
    result, _ = _simulate(cfg, False)
    if cfg.out is None:
        write_trace_csv(result.trace, sys.stdout)
    else:
        cfg.out.mkdir(parents=True, exist_ok=True)
        with open(cfg.out / "trace.csv", "w", newline="") as fh:
            write_trace_csv(result.trace, fh)
    return EXIT_OK


def cmd_gen(cfg: RunConfig) -> int:
    out = cfg.out or Path(".")
    paths = save_inputs(out, *gen_random_inputs(cfg.seed, cfg.spec))
    for p in paths.values():
        print(p)
    return EXIT_OK


def _read_sweep_rows(path: Path) -> List[dict]:
    text = path.read_text()
    if path.suffix == ".csv":
        return [{k: (v if k == "clock" else json.loads(v)) for k, v in row.items() if v not in (None, "")}
                for row in csv.DictReader(io.StringIO(text))]
    data = json.loads(text)
    if isinstance(data, dict):
        data = data.get("specs", [])
    if not isinstance(data, list):
        raise ConfigError(f"{path}: expected a list of specs")
    return data


def sweep_row(raw: dict, clock) -> list:
    if not isinstance(raw, dict):
        raise ConfigError("spec must be an object")
    H, W, C, K = (_int_field(raw, n) for n in ("H", "W", "C", "K"))
    mhz = parse_clock(clock if clock is not None else raw.get("clock_mhz", raw.get("clock", "z7020-400")))
    try:
        spec = LayerSpec(H, W, C, K, clock_mhz=mhz)
    except ShapeError as e:
        raise ConfigError(str(e))
    stats = analytic_stats(spec)
    return [H, W, C, K, step_count(spec), stats.compute_cycles,
            repr(stats.latency_s), repr(stats.gops_psum), repr(stats.gops_mac)]


def cmd_sweep(path, clock=None, out: Optional[Path] = None) -> int:
    try:
        rows = _read_sweep_rows(Path(path))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read sweep file: {e}")
    errors = 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for n, raw in enumerate(rows):
        try:
            w.writerow(sweep_row(raw, clock))
        except ConfigError as e:
            errors += 1
            print(f"row {n}: {e}", file=sys.stderr)
    if out is None:
        sys.stdout.write(buf.getvalue())
    else:
        out = Path(out)
        if out.suffix != ".csv":
            out.mkdir(parents=True, exist_ok=True)
            out = out / "sweep.csv"
        out.write_text(buf.getvalue())
    return EXIT_CONFIG if errors else EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    for name in ("H", "W", "C", "K"):
        common.add_argument(f"--{name}", type=int, dest=name)
    common.add_argument("--seed", type=int, help="random input seed")
    common.add_argument("--clock", help="MHz or preset: " + ", ".join(CLOCK_PRESETS))
    common.add_argument("--requant-shift", type=int)
    common.add_argument("--no-pipeline", action="store_true")
    common.add_argument("--bus-bytes", type=int)
    common.add_argument("--trace", metavar="FROM..TO")
    common.add_argument("--out")

    parser = argparse.ArgumentParser(prog="fpgaconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="simulate a layer, write output and report")
    run.add_argument("--verify", action="store_true")
    run.add_argument("--dump-banks", action="store_true")
    ver = sub.add_parser("verify", parents=[common], help="compare simulator against the reference")
    ver.add_argument("--corrupt-weight", metavar="G,J,ADDR", help="fault injection: invert one weight word")
    sub.add_parser("trace", parents=[common], help="emit per-step trace rows as CSV")
    sub.add_parser("gen", parents=[common], help="write random input tensors")
    sw = sub.add_parser("sweep", help="analytic cycle/throughput table for a list of specs")
    sw.add_argument("specs", help="JSON list or CSV of H,W,C,K[,clock_mhz]")
    sw.add_argument("--clock")
    sw.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "sweep":
            return cmd_sweep(args.specs, args.clock, args.out)
        cfg = parse_config(args)
        if args.command == "run":
            cfg.dump_banks = args.dump_banks
            return cmd_run(cfg, verify=args.verify)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "trace":
            return cmd_trace(cfg)
        return cmd_gen(cfg)
    except (ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StructuralError as e:
        print(f"structural error: {e}", file=sys.stderr)
        return EXIT_STRUCTURAL


if __name__ == "__main__":
    sys.exit(main())
