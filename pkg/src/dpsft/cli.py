"""Command-line interface: run, sweep, calibrate, inspect-mask.

Config files are JSON or TOML (by extension); command-line flags override the
file. Failures print a machine-readable error JSON to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
import tomllib
from pathlib import Path

from .accountant import calibrate_sigma, epsilon_for
from .errors import DpsftError
from .harness import TrainConfig, run_experiment, rows_to_csv, sweep


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if p.suffix == ".toml":
        with open(p, "rb") as f:
            return tomllib.load(f)
    with open(p) as f:
        return json.load(f)


def _apply_overrides(payload: dict, args) -> dict:
    if args.strategy is not None:
        payload["strategy"] = args.strategy
    if args.sparsity is not None:
        payload["sparsity"] = args.sparsity
    if args.grouping is not None:
        payload["grouping"] = args.grouping
    if args.delta is not None:
        payload["delta"] = args.delta
    if args.epsilon is not None:
        payload["epsilon"] = args.epsilon
        payload.setdefault("dpsgd", {}).pop("noise_multiplier", None)
    if args.sigma is not None:
        payload.setdefault("dpsgd", {})["noise_multiplier"] = args.sigma
        payload["epsilon"] = None
    if args.seed is not None:
        payload["seeds"] = [args.seed]
    return payload


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON or TOML run config")
    p.add_argument("--strategy", choices=[
        "sparta", "dpsgd-grad", "oracle", "mp", "random", "last", "bitfit", "all",
    ])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--grouping", choices=["singleton", "row", "random"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default="runs")


def _cmd_run(args) -> int:
    payload = _apply_overrides(_load_config_file(args.config), args)
    config = TrainConfig.from_dict(payload)
    report = run_experiment(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_path.write_text(report.to_json())
    csv_path = out_dir / "report.csv"
    csv_path.write_text(rows_to_csv(report.csv_rows()))
    print(json.dumps({
        "report": str(report_path),
        "csv": str(csv_path),
        "final_acc_mean": report.final_acc_mean,
        "final_epsilon": report.final_epsilon,
        "sigma": report.sigma,
        "not_dp": report.not_dp,
    }, sort_keys=True))
    return 0


def _cmd_sweep(args) -> int:
    doc = _load_config_file(args.config)
    base = doc.get("base", {})
    runs = doc.get("runs")
    if runs is None:
        # Grid form: every combination of the listed axis values over the base.
        grid = doc.get("grid", {})
        runs = [{}]
        for key, values in grid.items():
            runs = [dict(r, **{key: v}) for r in runs for v in values]
    configs = []
    for run_patch in runs:
        payload = json.loads(json.dumps(base))  # deep copy
        for key, value in run_patch.items():
            if key == "dpsgd":
                payload.setdefault("dpsgd", {}).update(value)
            else:
                payload[key] = value
        configs.append(TrainConfig.from_dict(payload))
    rows, errors, _ = sweep(configs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    csv_path.write_text(rows_to_csv(rows))
    if errors:
        (out_dir / "errors.json").write_text(json.dumps(errors, sort_keys=True))
    print(json.dumps({
        "csv": str(csv_path), "runs": len(configs),
        "rows": len(rows), "errors": len(errors),
    }, sort_keys=True))
    return 0


def _cmd_calibrate(args) -> int:
    if args.q is not None:
        q = args.q
    elif args.batch_size is not None and args.n is not None:
        q = min(1.0, args.batch_size / args.n)
    else:
        raise DpsftError("give --q or both --batch-size and --n")
    if args.steps is not None:
        steps = args.steps
    elif args.epochs is not None:
        import math

        steps = args.epochs * int(math.ceil(1.0 / q))
    else:
        raise DpsftError("give --steps or --epochs")
    sigma = calibrate_sigma(q, steps, args.epsilon, args.delta)
    print(json.dumps({
        "q_sample": q, "steps": steps, "target_epsilon": args.epsilon,
        "delta": args.delta, "sigma": sigma,
        "achieved_epsilon": epsilon_for(q, sigma, steps, args.delta),
    }, sort_keys=True))
    return 0


def _cmd_inspect_mask(args) -> int:
    with open(args.path) as f:
        doc = json.load(f)
    if doc.get("kind") != "mask":
        raise DpsftError(f"{args.path} is not a mask file")
    layers = {}
    import base64

    import numpy as np

    for name, layer in doc.get("layers", {}).items():
        raw = np.frombuffer(base64.b64decode(layer["z"]), dtype=np.uint8)
        z = np.unpackbits(raw, count=layer["n_groups"], bitorder="big")
        layers[name] = {
            "n_groups": layer["n_groups"],
            "selected": int(z.sum()),
            "density": float(z.mean()) if layer["n_groups"] else 0.0,
        }
    print(json.dumps({
        "model_hash": doc.get("model_hash"),
        "grouping": doc.get("grouping"),
        "sparsity": doc.get("sparsity"),
        "seed": doc.get("seed"),
        "always_trainable": doc.get("always_trainable"),
        "layers": layers,
    }, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpsft",
        description="Differentially private sparse fine-tuning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one experiment config")
    _add_run_flags(run_p)
    run_p.set_defaults(fn=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="execute a grid or list of configs")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--out-dir", default="sweeps")
    sweep_p.set_defaults(fn=_cmd_sweep)

    cal_p = sub.add_parser("calibrate", help="find the noise multiplier for a budget")
    cal_p.add_argument("--epsilon", type=float, required=True)
    cal_p.add_argument("--delta", type=float, default=1e-5)
    cal_p.add_argument("--q", type=float)
    cal_p.add_argument("--batch-size", type=int)
    cal_p.add_argument("--n", type=int)
    cal_p.add_argument("--steps", type=int)
    cal_p.add_argument("--epochs", type=int)
    cal_p.set_defaults(fn=_cmd_calibrate)

    ins_p = sub.add_parser("inspect-mask", help="summarize a saved mask file")
    ins_p.add_argument("path")
    ins_p.set_defaults(fn=_cmd_inspect_mask)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (DpsftError, OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
