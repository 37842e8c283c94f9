"""``milr`` command-line interface."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import engine, experiments
from .datasets import load_cifar_bin, load_mnist_idx
from .faults import corrupt_layer, inject_bitflips, inject_whole_weight
from .io import FormatError, import_npz, load_weights, save_weights
from .network import ARCHITECTURES, DTYPES, Network, NetworkError, build_network, classify_accuracy, layer_names, predict

EXIT_OK, EXIT_ERROR = 0, 2


def _parse_list(text: str, cast=float) -> list:
    return [cast(t) for t in text.replace(",", " ").split()]


def load_network(args) -> Network:
    dtype = DTYPES[args.dtype]
    if args.network in ARCHITECTURES:
        net = build_network(args.network, dtype, args.seed)
    else:
        net = load_weights(args.network)
    if getattr(args, "weights", None):
        path = Path(args.weights)
        if path.suffix == ".npz":
            net = import_npz(net, path)
        else:
            loaded = load_weights(path)
            if [l.kind for l in loaded.layers] != [l.kind for l in net.layers]:
                raise FormatError(f"{path}: layer structure differs from {args.network}")
            net = loaded
    return net


def load_eval(args, net) -> experiments.EvalSet:
    if not getattr(args, "dataset", None):
        return experiments.synthetic_eval_set(net, args.samples or 256, args.seed)
    if net.input_shape == (28, 28, 1):
        x, y = load_mnist_idx(args.dataset)
    elif net.input_shape == (32, 32, 3):
        x, y = load_cifar_bin(args.dataset)
    else:
        raise FormatError(f"no dataset loader for input shape {net.input_shape}")
    n = min(args.samples, len(y)) if args.samples else len(y)
    return experiments.EvalSet(x[:n].astype(net.dtype), y[:n])


def _state_for(args, net) -> engine.MilrState:
    if getattr(args, "sidecar", None) and Path(args.sidecar).exists():
        return engine.load_state(args.sidecar)
    return engine.initialize(net, args.seed, sidecar_dtype=DTYPES[args.sidecar_dtype])


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=1, default=_json_default)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# --- subcommands -----------------------------------------------------------------


def cmd_init(args) -> int:
    net = load_network(args)
    state = engine.initialize(net, args.seed, sidecar_dtype=DTYPES[args.sidecar_dtype])
    out = args.out or "network.milr"
    engine.save_state(state, out)
    names = layer_names(net)
    print(f"sidecar written to {out}: {state.plan_cost_bytes} bytes, checkpoints at {state.checkpoint_ids}")
    for k in sorted(state.plans):
        print(f"  {k:3d} {names[k]:<14} {state.strategy(k)}")
    return EXIT_OK


def cmd_detect(args) -> int:
    net = load_network(args)
    state = engine.load_state(args.sidecar)
    log = engine.detect(net, state)
    names = layer_names(net)
    _emit([{"layer": e.layer, "name": names[e.layer], "left": e.left, "right": e.right,
            "crc_flagged": None if e.crc_coords is None else len(e.crc_coords)} for e in log.entries], args.out)
    return EXIT_OK


def cmd_recover(args) -> int:
    net = load_network(args)
    state = engine.load_state(args.sidecar)
    report = engine.recover(net, state)
    if args.save:
        save_weights(net, args.save)
    _emit({"outcomes": [asdict(o) for o in report.outcomes], "remaining": report.remaining.layers, "healed": report.healed}, args.out)
    return EXIT_OK


def cmd_inject(args) -> int:
    net = load_network(args)
    if args.kind == "bitflip":
        report = inject_bitflips(net, args.rate, args.seed)
    elif args.kind == "whole-weight":
        report = inject_whole_weight(net, args.rate, args.seed)
    else:
        if args.layer is None:
            raise experiments.DomainError("--layer is required for whole-layer injection")
        report = corrupt_layer(net, args.layer, args.seed)
    save_weights(net, args.save)
    if args.out:
        Path(args.out).write_text(report.to_jsonl())
    print(f"{report.flips} bit flips, {report.replaced} replaced parameters; weights written to {args.save}")
    return EXIT_OK


def cmd_predict(args) -> int:
    net = load_network(args)
    if args.inputs:
        x = np.load(args.inputs).astype(net.dtype)
        if x.shape[1:] != net.input_shape:
            raise FormatError(f"inputs of shape {x.shape[1:]} do not fit network input {net.input_shape}")
        _emit(predict(net, x).tolist(), args.out)
        return EXIT_OK
    ev = load_eval(args, net)
    _emit({"samples": len(ev), "accuracy": classify_accuracy(net, ev.inputs, ev.labels)}, args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    net = load_network(args)
    ev = load_eval(args, net)
    state = _state_for(args, net)
    rates = _parse_list(args.rates) if args.rates else [0.0, 1e-7, 1e-6, 1e-5]
    if args.kind == "whole-layer":
        rows = experiments.run_whole_layer(net, state, ev if args.dataset else None, args.seed)
        data = [asdict(r) for r in rows]
        if args.out and args.out.endswith(".csv"):
            with open(args.out, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(data[0]))
                w.writeheader()
                w.writerows(data)
        else:
            _emit(data, args.out)
        return EXIT_OK
    if args.kind == "rber":
        arms = _parse_list(args.arms, str) if args.arms else list(experiments.RBER_ARMS)
        results = experiments.run_rber(net, state, ev, rates, args.trials, arms, args.seed)
    else:
        arms = _parse_list(args.arms, str) if args.arms else list(experiments.WHOLE_WEIGHT_ARMS)
        results = experiments.run_whole_weight(net, state, ev, rates, args.trials, arms, args.seed)
    if args.out:
        experiments.write_results(results, args.out)
    for s in experiments.summarize(results):
        print(f"{s['arm']:<9} rate={s['rate']:<8g} median={s['median']:.4f} q1={s['q1']:.4f} q3={s['q3']:.4f} n={s['n']}")
    return EXIT_OK


def cmd_availability(args) -> int:
    t_be = args.t_be if args.t_be else experiments.time_between_errors(args.memory_bytes, args.fit)
    per_year = experiments.SECONDS_PER_YEAR / t_be
    acc = experiments.linear_accuracy(args.acc0, per_year, args.acc_year)
    params = experiments.AvailabilityParams(args.t_d, args.i, args.t_r, t_be, acc)
    grid = _parse_list(args.grid) if args.grid else list(1.0 - np.logspace(-1, -6, 26))
    a, acc_min = experiments.availability_curve(params, grid)
    n = experiments.errors_tolerated(params, a)
    rows = [{"a": float(x), "errors": float(e), "min_accuracy": float(y)} for x, e, y in zip(a, n, acc_min)]
    if args.out and args.out.endswith(".csv"):
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["a", "errors", "min_accuracy"])
            w.writeheader()
            w.writerows(rows)
    else:
        _emit(rows, args.out)
    return EXIT_OK


def cmd_storage(args) -> int:
    net = load_network(args)
    state = _state_for(args, net)
    report = experiments.storage_report(net, state)
    report["mb"] = {k: None if v is None else v / 1e6 for k, v in report.items() if k.endswith("_bytes")}
    _emit(report, args.out)
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, dataset=False) -> None:
    p.add_argument("--network", default="mnist", help="mnist | cifar-small | cifar-large | <weights file>")
    p.add_argument("--weights", help="trained parameters (.npz in layer order, or a milr weights file)")
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sidecar-dtype", choices=sorted(DTYPES), default="f64")
    p.add_argument("--out", help="output path (.csv or .json); stdout when omitted")
    if dataset:
        p.add_argument("--dataset", help="directory with the MNIST IDX or CIFAR-10 binary test files")
        p.add_argument("--samples", type=int, default=256, help="evaluation samples (0 = whole dataset)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milr", description="Detect and heal CNN parameter errors by algebraic layer recovery.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="compute and save the recovery sidecar")
    _common(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("detect", help="list layers whose parameters no longer match the sidecar")
    _common(p)
    p.add_argument("--sidecar", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("recover", help="heal flagged layers")
    _common(p)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--save", help="write healed weights here")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("inject", help="corrupt parameters and save the result")
    _common(p)
    p.add_argument("--kind", choices=["bitflip", "whole-weight", "whole-layer"], default="bitflip")
    p.add_argument("--rate", type=float, default=1e-6)
    p.add_argument("--layer", type=int)
    p.add_argument("--save", required=True, help="corrupted weights file")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("predict", help="classify a dataset or an .npy batch")
    _common(p, dataset=True)
    p.add_argument("--inputs", help=".npy array of inputs")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="fault-injection experiments")
    p.add_argument("kind", choices=["rber", "whole-weight", "whole-layer"])
    _common(p, dataset=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--rates", help="comma-separated error rates")
    p.add_argument("--arms", help="comma-separated arms: none, ecc, milr, ecc+milr")
    p.add_argument("--sidecar", help="reuse a saved sidecar instead of initializing")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("availability", help="availability vs minimum accuracy curve")
    p.add_argument("--t-d", type=float, default=0.010, help="detection time (s)")
    p.add_argument("--i", type=float, default=2, help="detection runs between errors")
    p.add_argument("--t-r", type=float, default=0.182, help="recovery time (s)")
    p.add_argument("--t-be", type=float, help="time between errors (s); derived from --memory-bytes and --fit when omitted")
    p.add_argument("--memory-bytes", type=float, default=6.68e6)
    p.add_argument("--fit", type=float, default=75_000.0, help="errors per 1e9 device hours per Mbit")
    p.add_argument("--acc0", type=float, default=1.0, help="error-free accuracy")
    p.add_argument("--acc-year", type=float, default=0.0, help="accuracy after one year of errors")
    p.add_argument("--grid", help="comma-separated availabilities in (0, 1)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_availability)

    p = sub.add_parser("storage-report", help="backup / ECC / MILR storage bytes")
    _common(p)
    p.add_argument("--sidecar", help="report a saved sidecar instead of initializing")
    p.set_defaults(func=cmd_storage)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, NetworkError, engine.StateMismatchError, experiments.DomainError, FileNotFoundError, ValueError) as exc:
        print(f"milr: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
