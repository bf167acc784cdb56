"""Command-line entry point: gen, train, eval, ablate.

Option precedence is CLI flags over config file over defaults; every command
writes the merged result next to its outputs so any run can be replayed
bit-exactly from the snapshot plus the seed.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as da
from . import evaluation as ev
from . import objective as O
from .nets import CibModel, ModelConfig, load_model, save_model
from .seeding import stream
from .trainer import TrainConfig, build_and_fit, factual_nll


def _parse_ratios(raw) -> tuple[float, float, float]:
    if isinstance(raw, (list, tuple)):
        vals = [float(v) for v in raw]
    else:
        vals = [float(v) for v in str(raw).split(",")]
    if len(vals) != 3:
        raise ValueError(f"expected three ratios, got {raw!r}")
    return tuple(vals)


def _parse_hidden(raw) -> tuple[int, ...]:
    if isinstance(raw, (list, tuple)):
        return tuple(int(v) for v in raw)
    return tuple(int(v) for v in str(raw).split(","))


def _parse_ks(raw) -> list[float]:
    if isinstance(raw, (list, tuple)):
        return [float(v) for v in raw]
    return [float(v) for v in str(raw).split(",")]


GEN_DEFAULTS = {"n": 2000, "dx": 25, "bias": 2.0, "noise_sd": 1.0, "seed": 0}

TRAIN_DEFAULTS = {
    "seed": 0,
    "split_ratios": (0.63, 0.27, 0.10),
    "repr_dim": 64,
    "hidden": (64,),
    "activation": "elu",
    "beta": 1.0,
    "lambda_m": 1.0,
    "lambda_v": 1.0,
    "lr": 1e-4,
    "max_iter": 2000,
    "batch_size": 128,
    "critic_steps": 1,
    "critic_warmup": 20,
    "validate_every": 20,
    "patience": 10,
    "gamma": 1.0,
    "cpvr_k": 10,
    "iteration_unit": "step",
    "deterministic_encoder": False,
    "use_propensity": False,
}

EVAL_DEFAULTS = {"samples": 100, "reject_ks": None, "deterministic": False,
                 "require": None}

METRIC_REQUIREMENTS = {
    "sqrtPehe": "mu0/mu1 or ycf",
    "ateError": "mu0/mu1 or ycf",
    "policyRisk": "e",
    "auc": "ycf (binary outcomes)",
}

ABLATE_DEFAULTS = dict(TRAIN_DEFAULTS, repeats=1, jobs=1, samples=100)


def _resolve(defaults: dict, args: argparse.Namespace, keys) -> dict:
    """defaults < config file < explicit CLI flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        file_cfg.pop("command", None)
        unknown = set(file_cfg) - set(defaults) - {"data", "out", "run", "seed"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_cfg)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = val
    if "split_ratios" in resolved:
        resolved["split_ratios"] = _parse_ratios(resolved["split_ratios"])
    if "hidden" in resolved:
        resolved["hidden"] = _parse_hidden(resolved["hidden"])
    if resolved.get("reject_ks") is not None:
        resolved["reject_ks"] = _parse_ks(resolved["reject_ks"])
    return resolved


def _write_snapshot(out_dir: Path, command: str, resolved: dict) -> None:
    doc = {"command": command}
    for key, val in resolved.items():
        if isinstance(val, tuple):
            val = list(val)
        elif isinstance(val, Path):
            val = str(val)
        doc[key] = val
    with open(out_dir / f"{command}.config.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _load_dataset(data_dir: Path) -> da.ObservationalDataset:
    schema = da.CsvSchema.from_json(data_dir / "schema.json")
    return da.load_csv(data_dir / "data.csv", schema)


def cmd_gen(args) -> int:
    resolved = _resolve(GEN_DEFAULTS, args,
                        ["n", "dx", "bias", "noise_sd", "seed"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = da.synthesize_benchmark(int(resolved["n"]), int(resolved["dx"]),
                                 float(resolved["bias"]),
                                 float(resolved["noise_sd"]),
                                 int(resolved["seed"]))
    schema = da.write_csv(ds, out_dir / "data.csv")
    schema.to_json(out_dir / "schema.json")
    resolved["out"] = str(out_dir)
    _write_snapshot(out_dir, "gen", resolved)
    print(f"wrote {ds.n} rows with {ds.d_x} covariates to {out_dir / 'data.csv'}")
    return 0


def _configs_from_resolved(resolved: dict, d_x: int,
                           outcome_kind: str) -> tuple[ModelConfig, TrainConfig]:
    model_config = ModelConfig(
        d_x=d_x,
        repr_dim=int(resolved["repr_dim"]),
        hidden_dims=_parse_hidden(resolved["hidden"]),
        activation=resolved["activation"],
        outcome_kind=outcome_kind,
        use_propensity=bool(resolved["use_propensity"]),
    )
    train_config = TrainConfig(
        learning_rate=float(resolved["lr"]),
        max_iterations=int(resolved["max_iter"]),
        early_stop_patience=int(resolved["patience"]),
        validate_every=int(resolved["validate_every"]),
        batch_size=int(resolved["batch_size"]),
        critic_steps=int(resolved["critic_steps"]),
        critic_warmup=int(resolved["critic_warmup"]),
        beta=float(resolved["beta"]),
        lambda_m=float(resolved["lambda_m"]),
        lambda_v=float(resolved["lambda_v"]),
        gradient_penalty=float(resolved["gamma"]),
        cpvr_samples=int(resolved["cpvr_k"]),
        deterministic_encoder=bool(resolved["deterministic_encoder"]),
        iteration_unit=resolved["iteration_unit"],
        seed=int(resolved["seed"]),
    )
    return model_config, train_config


def _split_and_standardize(ds, resolved):
    spec = da.SplitSpec(ratios=_parse_ratios(resolved["split_ratios"]),
                        seed=int(resolved["seed"]))
    train, valid, test = da.split(ds, spec)
    train, valid, test, transform = da.standardize(train, valid, test)
    return train, valid, test, transform


def cmd_train(args) -> int:
    resolved = _resolve(TRAIN_DEFAULTS, args, list(TRAIN_DEFAULTS))
    data_dir = Path(args.data if args.data else resolved.get("data"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(data_dir)
    train, valid, test, transform = _split_and_standardize(ds, resolved)
    model_config, train_config = _configs_from_resolved(
        resolved, ds.d_x, ds.outcome_kind)
    result = build_and_fit(model_config, train, valid, train_config)
    resolved["data"] = str(data_dir)
    resolved["out"] = str(out_dir)
    # hash only the semantic config: paths do not affect the trained model
    hashed = {k: (list(v) if isinstance(v, tuple) else v)
              for k, v in resolved.items() if k not in ("data", "out")}
    save_model(out_dir / "model.json", result.model, hashed,
               int(resolved["seed"]))
    result.write_log(out_dir / "train.log.jsonl")
    transform.to_json(out_dir / "transform.json")
    _write_snapshot(out_dir, "train", resolved)
    final_valid = result.best_valid
    if final_valid is None:
        final_valid = factual_nll(result.model, valid)
    print(f"trained {result.stopped_at} iterations; "
          f"best validation NLL {final_valid:.6f}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    train_snapshot = run_dir / "train.config.json"
    if not train_snapshot.exists():
        raise FileNotFoundError(f"no train snapshot at {train_snapshot}")
    with open(train_snapshot) as fh:
        train_resolved = json.load(fh)
    resolved = _resolve(EVAL_DEFAULTS, args, ["samples", "reject_ks",
                                              "deterministic", "seed", "require"])
    resolved.setdefault("seed", train_resolved["seed"])
    data_dir = Path(args.data if args.data else train_resolved["data"])
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    ds = _load_dataset(data_dir)
    train, valid, test, _ = _split_and_standardize(ds, train_resolved)
    model, _doc = load_model(run_dir / "model.json")

    seed = int(resolved["seed"])
    ks = resolved.get("reject_ks")
    in_report = ev.evaluate_split(model, train.concat(valid), in_sample=True,
                                  samples=int(resolved["samples"]), seed=seed,
                                  reject_ks=ks)
    out_report = ev.evaluate_split(model, test, in_sample=False,
                                   samples=int(resolved["samples"]), seed=seed,
                                   reject_ks=ks)
    doc = {"inSample": in_report.as_dict(), "outSample": out_report.as_dict()}
    required = resolved.get("require")
    if required:
        names = ([required] if isinstance(required, str) and "," not in required
                 else (required.split(",") if isinstance(required, str)
                       else list(required)))
        for name in names:
            name = name.strip()
            if name not in doc["outSample"]:
                need = METRIC_REQUIREMENTS.get(name, "unknown")
                raise ev.MetricError(
                    f"metric {name!r} requires column(s) {need}, "
                    f"missing from the dataset")
    with open(out_dir / "eval.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    if ks:
        ev.write_curve_csv(out_dir / "curve.csv",
                           {"inSample": in_report.rejection_curve,
                            "outSample": out_report.rejection_curve})
    resolved["run"] = str(run_dir)
    resolved["data"] = str(data_dir)
    resolved["out"] = str(out_dir)
    _write_snapshot(out_dir, "eval", resolved)
    summary = {k: v for k, v in doc["outSample"].items()
               if isinstance(v, (int, float)) and not isinstance(v, bool)}
    print("out-sample: " + json.dumps(summary, sort_keys=True))
    return 0


def _ablate_one(payload: tuple) -> tuple[int, dict]:
    (repeat, arrays, outcome_kind, resolved) = payload
    ds = da.ObservationalDataset(outcome_kind=outcome_kind, **{
        k: v for k, v in arrays.items()})
    seed = int(resolved["seed"]) + repeat
    local = dict(resolved, seed=seed)
    train, valid, test, _ = _split_and_standardize(ds, local)
    model_config, train_config = _configs_from_resolved(
        local, ds.d_x, outcome_kind)
    table = ev.ablation_run(model_config, train, valid, test, train_config,
                            samples=int(resolved["samples"]))
    return repeat, table


def cmd_ablate(args) -> int:
    resolved = _resolve(ABLATE_DEFAULTS, args,
                        list(TRAIN_DEFAULTS) + ["repeats", "jobs", "samples"])
    data_dir = Path(args.data if args.data else resolved.get("data"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(data_dir)
    repeats = int(resolved["repeats"])
    jobs = int(resolved["jobs"])
    arrays = {"x": ds.x, "t": ds.t, "y_f": ds.y_f, "y_cf": ds.y_cf,
              "mu0": ds.mu0, "mu1": ds.mu1, "e": ds.e}
    payloads = [(r, arrays, ds.outcome_kind, resolved) for r in range(repeats)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_ablate_one, payloads))
    else:
        results = dict(map(_ablate_one, payloads))
    tables = [results[r] for r in range(repeats)]

    rows = {}
    for arm, _ in ev.ABLATION_ARMS:
        rows[arm] = {}
        for side in ("in", "out"):
            metrics = {}
            keys = [k for k, v in tables[0][arm][side].items()
                    if isinstance(v, (int, float)) and not isinstance(v, bool)]
            for key in keys:
                values = [t[arm][side][key] for t in tables]
                mean = float(np.mean(values))
                se = float(np.std(values, ddof=1) / np.sqrt(len(values))) \
                    if len(values) > 1 else 0.0
                metrics[key] = {"mean": mean, "se": se, "values": values}
            rows[arm][side] = metrics
        rows[arm]["config"] = tables[0][arm]["config"]
    doc = {"rows": rows,
           "seeds": [int(resolved["seed"]) + r for r in range(repeats)]}
    with open(out_dir / "ablation.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    resolved["data"] = str(data_dir)
    resolved["out"] = str(out_dir)
    _write_snapshot(out_dir, "ablate", resolved)
    for arm in rows:
        line = {k: f"{v['mean']:.4f}+-{v['se']:.4f}"
                for k, v in rows[arm]["out"].items()}
        print(f"{arm}: " + json.dumps(line, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cib",
        description="Train and evaluate an information-bottleneck "
                    "treatment-effect estimator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int)

    g = sub.add_parser("gen", help="generate a synthetic benchmark dataset")
    common(g)
    g.add_argument("--n", type=int)
    g.add_argument("--dx", type=int)
    g.add_argument("--bias", type=float)
    g.add_argument("--noise-sd", dest="noise_sd", type=float)
    g.set_defaults(func=cmd_gen)

    def train_flags(p):
        p.add_argument("--data", help="directory with data.csv and schema.json")
        p.add_argument("--split-ratios", dest="split_ratios")
        p.add_argument("--repr-dim", dest="repr_dim", type=int)
        p.add_argument("--hidden")
        p.add_argument("--activation", choices=["elu", "relu"])
        p.add_argument("--beta", type=float)
        p.add_argument("--lambda-m", dest="lambda_m", type=float)
        p.add_argument("--lambda-v", dest="lambda_v", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--max-iter", dest="max_iter", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--critic-steps", dest="critic_steps", type=int)
        p.add_argument("--critic-warmup", dest="critic_warmup", type=int)
        p.add_argument("--validate-every", dest="validate_every", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--gamma", type=float)
        p.add_argument("--cpvr-k", dest="cpvr_k", type=int)
        p.add_argument("--iteration-unit", dest="iteration_unit",
                       choices=["step", "epoch"])
        p.add_argument("--deterministic-encoder", dest="deterministic_encoder",
                       action="store_const", const=True)
        p.add_argument("--use-propensity", dest="use_propensity",
                       action="store_const", const=True)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    common(t)
    train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run")
    common(e)
    e.add_argument("--run", required=True, help="train output directory")
    e.add_argument("--data", help="override the dataset directory")
    e.add_argument("--samples", type=int)
    e.add_argument("--reject-ks", dest="reject_ks")
    e.add_argument("--require", help="comma list of metrics that must be "
                                     "computable, else the command fails")
    e.add_argument("--deterministic", action="store_const", const=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the regularizer ablation table")
    common(a)
    train_flags(a)
    a.add_argument("--repeats", type=int)
    a.add_argument("--samples", type=int)
    a.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is None and args.command != "eval":
        parser.error(f"{args.command}: --out is required")
    try:
        return args.func(args)
    except (da.DataError, ev.MetricError, O.DegenerateBatchError, ValueError,
            FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
