"""Command-line front end.

Subcommands: run, sample-size, expand-fault, infer, make-fixture.
Exit codes: 0 ok, 2 unreadable input (config, model, data), 3 validation
failure, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import signal
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .array import ConfigError, SystolicConfig, pe_grid
from .campaign import CampaignOptions, classify, default_workers, run_campaign
from .faults import (
    Fault,
    FaultError,
    FaultListSpec,
    FaultScope,
    dumps_fault_list,
    expand_fault,
    generate_fault_list,
    parse_fault,
    physical_trace,
    read_fault_list,
    sample_size,
    validate_fault,
    z_for_confidence,
)
from .lattice import PRESETS, LatticeError, Projection
from .numerics import NumberFormat, NumericsError, default_acc_format
from .runtime import (
    ExecutionPlan,
    ModelError,
    check_plan,
    forward,
    infer_hierarchical,
    infer_reference,
    load_inputs,
    load_model,
)

EXIT_OK = 0
EXIT_UNREADABLE = 2
EXIT_INVALID = 3
EXIT_RUNTIME = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _unreadable(msg):
    return CliError(msg, EXIT_UNREADABLE)


def _invalid(msg):
    return CliError(msg, EXIT_INVALID)


# --- campaign configuration --------------------------------------------------

DEFAULT_SYSTOLIC = {"n1": 8, "n2": 8, "n3": 16, "projection": "output-stationary", "acc_width": 32}


@dataclass
class CampaignConfig:
    raw: dict
    base: Path
    model_path: Path | None
    inputs_path: Path | None
    input_count: int | None
    systolic: dict
    faults: dict
    target_layer: int | None
    options: CampaignOptions
    output_dir: Path
    seed: int
    figures: bool

    def systolic_config(self, op_format: NumberFormat, acc_format: NumberFormat | None = None) -> SystolicConfig:
        return build_systolic(self.systolic, op_format, acc_format)


def build_systolic(section: dict, op_format: NumberFormat, acc_format: NumberFormat | None = None) -> SystolicConfig:
    s = {**DEFAULT_SYSTOLIC, **(section or {})}
    preset = s.get("projection", "output-stationary")
    try:
        if preset == "custom":
            if "P" not in s:
                raise _invalid("custom projection needs a 'P' matrix")
            proj = Projection(s["P"], s.get("pi", (1, 1, 1)))
        elif preset in PRESETS:
            proj = PRESETS[preset]
            if "pi" in s:
                proj = Projection(proj.p_matrix, s["pi"])
        else:
            raise _invalid(f"unknown projection preset {preset!r}; expected output-stationary, weight-stationary or custom")
        if acc_format is None:
            acc_format = default_acc_format(op_format, int(s.get("acc_width", 32)))
        return SystolicConfig(int(s["n1"]), int(s["n2"]), int(s["n3"]), proj, op_format, acc_format)
    except (ConfigError, LatticeError, NumericsError, TypeError, ValueError) as exc:
        if isinstance(exc, CliError):
            raise
        raise _invalid(f"invalid systolic section: {exc}") from exc


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise _unreadable(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise _unreadable(f"cannot parse config {path}: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise _unreadable(f"config {path} must be a mapping")
    return doc


def parse_campaign_config(doc: dict, base: Path, overrides: dict | None = None) -> CampaignConfig:
    doc = copy.deepcopy(doc)
    overrides = overrides or {}
    for key in ("seed", "workers", "target_layer", "output_dir"):
        if overrides.get(key) is not None:
            doc[key] = overrides[key]

    def rel(p):
        return None if p is None else (Path(p) if Path(p).is_absolute() else base / p)

    inputs = doc.get("inputs") or {}
    if isinstance(inputs, str):
        inputs = {"path": inputs}
    faults = doc.get("faults") or {}
    if not isinstance(faults, dict):
        raise _invalid("'faults' must be a mapping with 'list', 'inline' or 'generate'")
    explicit = [k for k in ("list", "inline") if k in faults]
    if explicit and "generate" in faults:
        raise _invalid(f"faults: '{explicit[0]}' and 'generate' are mutually exclusive; give exactly one")
    if len(explicit) > 1:
        raise _invalid("faults: 'list' and 'inline' are mutually exclusive")
    if not explicit and "generate" not in faults:
        raise _invalid("faults: need one of 'list', 'inline' or 'generate'")
    metrics = doc.get("metrics") or {}
    try:
        options = CampaignOptions(
            topk=int(metrics.get("topk", 5)),
            thresholds=tuple(float(t) for t in metrics.get("thresholds", (0.10, 0.20))),
            mismatch_tol=float(metrics.get("mismatch_tol", 1e-9)),
            bins=tuple(int(b) for b in metrics.get("bins", (50, 100))),
            workers=int(doc.get("workers") or default_workers()),
            fit_raw=None if metrics.get("fit_raw") is None else float(metrics["fit_raw"]),
        )
    except (TypeError, ValueError) as exc:
        raise _invalid(f"invalid metrics section: {exc}") from exc
    if any(not 0 < t < 1 for t in options.thresholds):
        raise _invalid("metric thresholds must lie in (0, 1)")
    if any(b < 1 for b in options.bins) or not options.bins:
        raise _invalid("histogram bins must be >= 1")
    seed = doc.get("seed", (faults.get("generate") or {}).get("seed", 0))
    target = doc.get("target_layer")
    doc["seed"] = int(seed)
    out_dir = overrides.get("output_dir")
    out_dir = Path(out_dir) if out_dir is not None else rel(doc.get("output_dir", "urefi-out"))
    return CampaignConfig(
        raw=doc,
        base=base,
        model_path=rel(doc.get("model")),
        inputs_path=rel(inputs.get("path")),
        input_count=None if inputs.get("count") is None else int(inputs["count"]),
        systolic=doc.get("systolic") or {},
        faults=faults,
        target_layer=None if target is None else int(target),
        options=options,
        output_dir=out_dir,
        seed=int(seed),
        figures=bool(doc.get("figures", True)),
    )


def load_campaign_config(path, overrides: dict | None = None) -> CampaignConfig:
    path = Path(path)
    return parse_campaign_config(read_config_file(path), path.parent, overrides)


def _scope_from(gen: dict) -> FaultScope:
    def tup(v):
        return None if v is None else tuple(v)

    pes = gen.get("pes")
    return FaultScope(
        lines=tuple(gen.get("lines", ("A", "B", "C"))),
        mode=gen.get("mode", "permanent"),
        kinds=tup(gen.get("kinds")),
        bits=tup(gen.get("bits")),
        pes=None if pes is None else tuple(tuple(p) for p in pes),
        cycles=tup(gen.get("cycles")),
        window=int(gen.get("window", 1)),
    )


def resolve_faults(cfg: CampaignConfig, config: SystolicConfig) -> list[Fault]:
    f = cfg.faults
    try:
        if "list" in f:
            path = Path(f["list"]) if Path(f["list"]).is_absolute() else cfg.base / f["list"]
            try:
                faults = read_fault_list(path)
            except OSError as exc:
                raise _unreadable(f"cannot read fault list {path}: {exc.strerror}") from exc
        elif "inline" in f:
            faults = [parse_fault(r) for r in f["inline"]]
        else:
            gen = dict(f["generate"])
            count = gen.get("count", "statistical")
            spec = FaultListSpec(
                count=count if count == "statistical" else int(count),
                confidence=float(gen.get("confidence", 0.95)),
                margin=float(gen.get("margin", 0.01)),
                p=float(gen.get("p", 0.5)),
                seed=cfg.seed,
                scope=_scope_from(gen),
            )
            faults = generate_fault_list(spec, config)
        faults += [parse_fault(r) for r in f.get("include", [])]
        for fault in faults:
            validate_fault(fault, config)
    except (FaultError, NumericsError, LatticeError, KeyError, TypeError) as exc:
        raise _invalid(f"invalid fault section: {exc}") from exc
    return faults


# --- output ------------------------------------------------------------------

def _emit(args, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def _load_model(path):
    if path is None:
        raise _invalid("no model given")
    try:
        return load_model(path)
    except ModelError as exc:
        raise _unreadable(str(exc)) from exc


def _load_inputs(path, model, count=None):
    if path is None:
        raise _invalid("no input set given")
    try:
        return load_inputs(path, model, count)
    except (ModelError, NumericsError, OSError) as exc:
        raise _unreadable(f"cannot load inputs: {exc}") from exc


# --- subcommands -------------------------------------------------------------

def cmd_run(args) -> int:
    if not args.config:
        raise _invalid("run needs --config")
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "target_layer": args.target_layer,
        "output_dir": args.out_dir,
    }
    cfg = load_campaign_config(args.config, overrides)
    model = _load_model(cfg.model_path)
    if cfg.target_layer is None:
        raise _invalid("no target_layer configured")
    config = cfg.systolic_config(model.op_format, model.acc_format)
    try:
        plan = ExecutionPlan(cfg.target_layer, config, (), cfg.systolic.get("activations_on", "A"))
        check_plan(model, plan)
    except ModelError as exc:
        raise _invalid(str(exc)) from exc
    faults = resolve_faults(cfg, config)
    inputs = _load_inputs(cfg.inputs_path, model, cfg.input_count)

    meta = {
        "seed": cfg.seed,
        # execution-only keys live in runtime.json so reports match across machines
        "config": {k: v for k, v in cfg.raw.items() if k not in ("workers", "output_dir")},
        "model": {"name": model.name, "layers": len(model.layers), "parameters": model.param_count()},
        "target_layer": cfg.target_layer,
        "array": config.as_dict(),
    }
    previous = signal.signal(signal.SIGTERM, _raise_interrupt)
    try:
        report = run_campaign(model, inputs, plan, faults, cfg.options, meta)
    except (ModelError, ValueError) as exc:
        raise CliError(f"campaign failed: {exc}", EXIT_RUNTIME) from exc
    finally:
        signal.signal(signal.SIGTERM, previous)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "records.csv").write_text(report.records_csv())
    bins = cfg.options.bins
    (out / "histogram.csv").write_text(report.histograms[bins[0]].to_csv())
    for b in bins[1:]:
        (out / f"histogram-{b}.csv").write_text(report.histograms[b].to_csv())
    (out / "faults.csv").write_text(dumps_fault_list(faults))
    (out / "runtime.json").write_text(
        json.dumps(
            {"elapsed_s": report.elapsed_s, "records": len(report.records), "sims_per_sec": report.sims_per_sec,
             "workers": cfg.options.workers, "output_dir": str(out)},
            indent=2,
        )
        + "\n"
    )
    if cfg.figures:
        from .plotting import plot_afd_histogram

        for b in bins:
            h = report.histograms[b]
            plot_afd_histogram(h.edges, h.counts, out / "figures" / f"afd_hist_{b}.png",
                               f"faulty distance, {b} bins")
    r = report.rates
    text = "\n".join(
        [f"records: {len(report.records)} ({report.n_faults} faults x {report.n_inputs} inputs)"]
        + [f"{k}: {v:.4f}" for k, v in r.items()]
        + [f"afd: {report.afd:.6f}", f"sims/sec: {report.sims_per_sec:.1f}", f"report: {out / 'report.json'}"]
        + ([] if report.complete else ["INCOMPLETE: interrupted"])
    )
    _emit(args, report.summary(), text)
    return EXIT_OK if report.complete else EXIT_RUNTIME


def _raise_interrupt(signum, frame):
    raise KeyboardInterrupt


def cmd_sample_size(args) -> int:
    if args.population < 1 or not 0 < args.margin < 1 or not 0 < args.confidence < 1 or not 0 < args.p < 1:
        raise _unreadable("need population >= 1 and margin, confidence, p in (0, 1)")
    z = z_for_confidence(args.confidence)
    n = sample_size(args.population, args.margin, z, args.p)
    _emit(args, {"sample_size": n, "population": args.population, "margin": args.margin,
                 "confidence": args.confidence, "z": z, "p": args.p}, str(n))
    return EXIT_OK


def _array_for(args, op_format: NumberFormat | None = None, acc_format: NumberFormat | None = None) -> SystolicConfig:
    section = {}
    if args.config:
        doc = read_config_file(args.config)
        section = doc.get("systolic") or {}
    for key in ("n1", "n2", "n3"):
        if getattr(args, key, None) is not None:
            section[key] = getattr(args, key)
    if getattr(args, "projection", None):
        section["projection"] = args.projection
    if op_format is None:
        op_format = NumberFormat.from_dict(section.get("op_format"))
    return build_systolic(section, op_format, acc_format)


def cmd_expand_fault(args) -> int:
    config = _array_for(args)
    try:
        fault = parse_fault(args.fault)
        points = expand_fault(fault, config, cycle_offset=args.cycle_offset)
    except (FaultError, NumericsError, LatticeError) as exc:
        raise _invalid(f"invalid fault: {exc}") from exc
    rows = sorted((t, *config.pe_of(p), *p) for p, t in points)
    header = ["cycle", "x", "y", "i", "j", "k"]
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    if args.csv:
        Path(args.csv).write_text("\n".join(lines) + "\n")
    if args.plot:
        from .plotting import plot_propagation

        plot_propagation(physical_trace(points, config), pe_grid(config), args.plot, f"fault {fault}")
    _emit(args, {"fault": str(fault), "points": [dict(zip(header, r)) for r in rows]}, "\n".join(lines))
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model(args.model)
    inputs = _load_inputs(args.input, model)
    if not 0 <= args.index < len(inputs):
        raise _invalid(f"input index {args.index} out of range ({len(inputs)} inputs)")
    input_id, x = inputs[args.index]
    faults: list[Fault] = []
    try:
        faults += [parse_fault(f) for f in args.fault or []]
        if args.fault_list:
            faults += read_fault_list(args.fault_list)
    except FaultError as exc:
        raise _invalid(str(exc)) from exc
    except OSError as exc:
        raise _unreadable(f"cannot read fault list: {exc}") from exc
    target = args.target_layer
    plan = None
    if target is not None or faults:
        if target is None:
            raise _invalid("faults need --target-layer")
        config = _array_for(args, model.op_format, model.acc_format)
        try:
            for f in faults:
                validate_fault(f, config)
            plan = ExecutionPlan(target, config, tuple(faults))
            check_plan(model, plan)
        except (ModelError, FaultError) as exc:
            raise _invalid(str(exc)) from exc
    golden = infer_reference(model, x)
    vec = infer_hierarchical(model, x, plan) if plan is not None else golden
    if args.trace:
        if plan is None:
            raise _invalid("--trace needs --target-layer")
        _write_first_pass_trace(model, x, plan, args.trace)
    payload = {"input": input_id, "vector": vec.tolist(), "top1": int(np.argmax(vec))}
    text = " ".join(repr(float(v)) for v in vec)
    if args.compare:
        flags, dist = classify(golden, vec, CampaignOptions())
        payload.update(golden=golden.tolist(), flags=flags, faulty_distance=dist)
        text = "\n".join(
            [f"golden: {' '.join(repr(float(v)) for v in golden)}", f"faulty: {text}"]
            + [f"{k}: {str(v).lower()}" for k, v in flags.items()]
            + [f"faulty_distance: {dist!r}"]
        )
    _emit(args, payload, text)
    return EXIT_OK


def _write_first_pass_trace(model, x, plan: ExecutionPlan, path) -> None:
    """Per-cycle trace of tile pass 0 of the target layer."""
    from .lolif import lower_activation, lower_weights
    from .numerics import QuantTensor
    from .systolic import simulate_matmul_wavefront, write_trace_csv

    t = plan.target_layer
    act = forward(model, x, stop=t)
    layer = model.layers[t]
    if layer.kind == "conv":
        a = lower_activation(act, model.conv_shape(t))
        b = lower_weights(layer.weights)
    else:
        a = act.reshape(1, -1)
        b = layer.weights.with_data(layer.weights.data.T)
    cfg = plan.config
    if plan.activations_on == "B":
        a, b = b.with_data(b.data.T), a.with_data(a.data.T)
    ta = np.zeros((cfg.n1, cfg.n3), dtype=a.data.dtype)
    tb = np.zeros((cfg.n3, cfg.n2), dtype=b.data.dtype)
    m, k = min(cfg.n1, a.shape[0]), min(cfg.n3, a.shape[1])
    n = min(cfg.n2, b.shape[1])
    ta[:m, :k] = a.data[:m, :k]
    tb[:k, :n] = b.data[:k, :n]
    _, trace = simulate_matmul_wavefront(
        QuantTensor(ta, a.format, a.scale), QuantTensor(tb, b.format, b.scale), cfg, plan.faults, 0, trace=True
    )
    write_trace_csv(path, trace)


EXAMPLE_CONFIG = """\
# Campaign over the synthetic LeNet-5 fixture.
model: model.json
inputs:
  path: inputs-images.idx
  count: 10
systolic:
  n1: 8
  n2: 8
  n3: 128
  projection: output-stationary
  acc_width: 32
target_layer: 11          # last fc layer
faults:
  generate:
    count: 100
    mode: permanent
    lines: [A, B, C]
seed: 1
metrics:
  topk: 5
  thresholds: [0.10, 0.20]
  bins: [50, 100]
  fit_raw: 1.0e-6
workers: 1
output_dir: out
"""


def cmd_make_fixture(args) -> int:
    from .fixtures import write_fixture

    fx = write_fixture(args.directory, width=args.width, n_inputs=args.inputs, seed=args.seed)
    cfg_path = Path(args.directory) / "campaign.yaml"
    cfg_path.write_text(EXAMPLE_CONFIG)
    _emit(args, {"manifest": str(fx["manifest"]), "inputs": str(fx["inputs"]), "config": str(cfg_path)},
          f"wrote {fx['manifest']}, {fx['inputs']}, {cfg_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")

    parser = argparse.ArgumentParser(prog="urefi", description="Fault injection on a URE-modeled systolic array.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run a fault-injection campaign")
    p.add_argument("--config", required=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--target-layer", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sample-size", parents=[common], help="statistical fault-injection sample size")
    p.add_argument("--population", "-N", type=int, required=True)
    p.add_argument("--margin", "-e", type=float, default=0.01)
    p.add_argument("--confidence", "-c", type=float, default=0.95)
    p.add_argument("--p", type=float, default=0.5)
    p.set_defaults(func=cmd_sample_size)

    p = sub.add_parser("expand-fault", parents=[common], help="list lattice points a fault corrupts")
    p.add_argument("--config")
    p.add_argument("--fault", required=True, help="line,x,y,t_start,t_end|inf,kind,bit")
    p.add_argument("--n1", type=int)
    p.add_argument("--n2", type=int)
    p.add_argument("--n3", type=int)
    p.add_argument("--projection", choices=sorted(PRESETS))
    p.add_argument("--cycle-offset", type=int, default=0)
    p.add_argument("--csv", help="also write rows to this CSV file")
    p.add_argument("--plot", help="render a space-time figure to this image file")
    p.set_defaults(func=cmd_expand_fault)

    p = sub.add_parser("infer", parents=[common], help="golden or faulty inference of one input")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="IDX image file or directory of tensor files")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--config", help="campaign config supplying the systolic section")
    p.add_argument("--target-layer", type=int)
    p.add_argument("--fault", action="append", help="repeatable fault record")
    p.add_argument("--fault-list")
    p.add_argument("--compare", action="store_true")
    p.add_argument("--trace", help="write a per-cycle CSV of the first tile pass")
    p.add_argument("--n1", type=int)
    p.add_argument("--n2", type=int)
    p.add_argument("--n3", type=int)
    p.add_argument("--projection", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("make-fixture", parents=[common], help="write a synthetic LeNet-5 model and inputs")
    p.add_argument("directory")
    p.add_argument("--width", type=int, choices=(8, 16), default=8)
    p.add_argument("--inputs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"urefi: error: {exc}", file=sys.stderr)
        return exc.code
    except (ModelError, ConfigError) as exc:
        print(f"urefi: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"urefi: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
