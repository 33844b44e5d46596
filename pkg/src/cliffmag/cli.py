"""Command-line interface: gen-data, precompute, train, eval, verify, ablate.

Every option can come from a flat TOML file (``--config``), from a ``CLIFFMAG_<KEY>``
environment variable, or from the command line; later sources win in that order.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .aha import ABLATIONS, interaction_layout, load_checkpoint, save_checkpoint
from .data import SynthConfig, dataset_hash, generate_synthetic, homophily, load_mag, load_text_mag, save_mag
from .errors import CliffmagError, ConfigurationError, StaleCacheError
from .propagation import LAYOUTS, ROTOR_MODES, CGPSettings, energy_trace, load_stack, precompute, save_stack
from .train import (
    TASKS,
    Model,
    TaskSpec,
    TrainConfig,
    apply_ablation,
    evaluate,
    fit_classification,
    run_task,
)
from .verify import run_verify

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "CLIFFMAG_"
COMMANDS = ("gen-data", "precompute", "train", "eval", "verify", "ablate")
DATA_FILE, STACK_FILE, MODEL_FILE = "dataset.mag1", "stack.cgp1", "model.aha1"

_CGP = ("precompute", "train", "eval", "ablate")
_FIT = ("train", "ablate")


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Option:
    key: str
    kind: type  # int, float, str, bool or list
    default: object
    commands: tuple
    help: str
    choices: tuple | None = None
    item: type = str  # element type of list options

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")

    def coerce(self, value):
        """Convert a file or environment value, raising ConfigurationError on bad input."""
        try:
            if self.kind is list:
                items = []
                for x in [value] if isinstance(value, str) else list(value):
                    items += [p.strip() for p in x.split(",") if p.strip()] if isinstance(x, str) else [x]
                out = [self.item(v) for v in items]
            elif self.kind is bool:
                out = value if isinstance(value, bool) else _bool(value)
            elif self.kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
                out = float(value)
            elif self.kind is int and isinstance(value, float):
                raise ValueError("expected an integer")
            else:
                out = None if value is None else self.kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{self.key}: {exc}") from None
        for v in out if isinstance(out, list) else [out]:
            if self.choices is not None and v is not None and v not in self.choices:
                raise ConfigurationError(f"{self.key}: {v!r} not in {self.choices}")
        return out


OPTIONS = (
    Option("seed", int, 0, COMMANDS, "random seed"),
    Option("data", str, None, _CGP, f"dataset file (default OUT/{DATA_FILE})"),
    # dataset generation
    Option("n_nodes", int, 600, ("gen-data",), "number of nodes"),
    Option("n_classes", int, 4, ("gen-data",), "number of classes"),
    Option("dims", list, [16, 16], ("gen-data",), "per-modality feature widths, comma separated", item=int),
    Option("p_in", float, 0.03, ("gen-data",), "within-class edge probability"),
    Option("p_out", float, 0.02, ("gen-data",), "between-class edge probability"),
    Option("rho", float, 0.3, ("gen-data",), "modality cross-correlation"),
    Option("signal", float, 2.0, ("gen-data",), "class-mean scale"),
    Option("noise", float, 1.0, ("gen-data",), "feature noise scale"),
    Option("features", list, [], ("gen-data",), "text feature matrices to import instead of generating"),
    Option("edges", str, None, ("gen-data",), "text edge list for --features"),
    Option("labels", str, None, ("gen-data",), "text label vector for --features"),
    # propagation
    Option("depth", int, 2, _CGP, "propagation depth L"),
    Option("damping", float, 0.5, _CGP, "damping alpha"),
    Option("epsilon", float, 1e-6, _CGP, "potential stabiliser"),
    Option("rotor_angle_mode", str, None, _CGP + ("verify",), "rotor angle convention (default squared)", ROTOR_MODES),
    Option("literal_eq3", bool, False, _CGP, "use the undamped literal update"),
    Option("layout", str, "block", _CGP, "coefficient layout of the lifting", LAYOUTS),
    Option("task", str, "node_classification", ("precompute", "train", "eval"), "task", TASKS),
    Option("ablate", list, [], ("precompute", "train"), "ablated modules, repeatable or comma separated", ABLATIONS),
    # training
    Option("epochs", int, 100, _FIT, "training epochs"),
    Option("lr", float, None, _FIT, "learning rate (default 5e-3, 1e-3 for link prediction)"),
    Option("weight_decay", float, 1e-5, _FIT, "decoupled weight decay"),
    Option("batch_size", int, 0, _FIT, "mini-batch size, 0 for full batch"),
    Option("patience", int, 0, _FIT, "early-stopping patience, 0 to disable"),
    Option("d_f", int, 64, _FIT, "fused embedding width"),
    Option("h", int, 64, _FIT, "attention width"),
    Option("checkpoint", str, "best", _FIT, "keep the best-validation or the last parameters", ("best", "last")),
    Option("n_candidates", int, 100, ("train", "eval"), "negatives per positive in link ranking"),
    Option("neg_ratio", int, 1, ("train",), "negatives per positive edge during training"),
    Option("n_clusters", int, None, ("train", "eval"), "k-means clusters (default: number of classes)"),
    Option("direction", list, [0, 1], ("train", "eval"), "retrieval query and candidate modality", item=int),
    Option("skip_training", bool, False, ("verify",), "skip the noise-suppression training check"),
)
BY_KEY = {o.key: o for o in OPTIONS}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cliffmag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="flat TOML file of option values")
        p.add_argument("--out", default="run", help="output directory (default: run)")
        for o in OPTIONS:
            if cmd not in o.commands:
                continue
            if o.kind is bool:
                p.add_argument(o.flag, dest=o.key, action="store_const", const=True, default=None, help=o.help)
            elif o.kind is list:
                p.add_argument(o.flag, dest=o.key, action="append", default=None, help=o.help)
            else:
                p.add_argument(o.flag, dest=o.key, type=o.kind, choices=o.choices, default=None, help=o.help)
    return parser


def resolve(command: str, args: argparse.Namespace, environ=os.environ) -> tuple[dict, dict]:
    """Merge defaults < config file < environment < flags; returns (values, source per key)."""
    values = {o.key: o.default for o in OPTIONS if command in o.commands}
    sources = dict.fromkeys(values, "default")
    if args.config:
        with open(args.config, "rb") as fh:
            table = tomllib.load(fh)
        for key, raw in table.items():
            if key not in BY_KEY or isinstance(raw, dict):
                raise ConfigurationError(f"unknown config key {key!r} in {args.config}")
            if key in values:  # keys for other subcommands are allowed in a shared file
                values[key], sources[key] = BY_KEY[key].coerce(raw), "file"
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower()
        if key not in BY_KEY:
            raise ConfigurationError(f"unknown environment variable {name}")
        if key in values:
            values[key], sources[key] = BY_KEY[key].coerce(raw), "env"
    for key in values:
        raw = getattr(args, key, None)
        if raw is not None:
            values[key], sources[key] = BY_KEY[key].coerce(raw), "flag"
    return values, sources


# ---------------------------------------------------------------- helpers


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(v)


def write_echo(out: Path, command: str, values: dict, sources: dict) -> None:
    """Resolved options as TOML (reusable with --config), with each value's source as a comment."""
    lines = [f"# cliffmag {command}"]
    for key in sorted(values):
        if values[key] is not None:
            lines.append(f"{key} = {_toml_value(values[key])}  # {sources[key]}")
    (out / "config.echo").write_text("\n".join(lines) + "\n")


def run_hash(command: str, values: dict, data_hash: str = "") -> str:
    blob = json.dumps({"command": command, "values": values, "data": data_hash}, sort_keys=True, default=str)
    return hashlib.sha1(blob.encode()).hexdigest()


def write_csv(path: Path, rows: list[dict]) -> None:
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_json_ready(doc), indent=2, sort_keys=True) + "\n")


def cgp_settings(v: dict) -> CGPSettings:
    s = CGPSettings(
        L=v["depth"],
        alpha=v["damping"],
        eps=v["epsilon"],
        rotor_mode=v["rotor_angle_mode"] or "squared",
        layout=v["layout"],
        literal=v["literal_eq3"],
    )
    return apply_ablation(s, v.get("ablate", []))


def task_spec(v: dict) -> TaskSpec:
    return TaskSpec(
        v["task"],
        neg_ratio=v.get("neg_ratio", 1),
        n_clusters=v.get("n_clusters"),
        direction=tuple(v.get("direction", (0, 1))),
        n_candidates=v.get("n_candidates", 100),
    )


def train_config(v: dict, task: str = "node_classification") -> TrainConfig:
    lr = v["lr"] if v["lr"] is not None else (1e-3 if task == "link_prediction" else 5e-3)
    return TrainConfig(
        epochs=v["epochs"],
        lr=lr,
        weight_decay=v["weight_decay"],
        batch_size=v["batch_size"],
        seed=v["seed"],
        patience=v["patience"],
        d_f=v["d_f"],
        h=v["h"],
        ablation=frozenset(v.get("ablate", [])),
        checkpoint=v["checkpoint"],
    )


def _data_path(out: Path, v: dict) -> Path:
    path = Path(v["data"]) if v["data"] else out / DATA_FILE
    if not path.exists():
        raise ConfigurationError(f"dataset {path} not found; run `cliffmag gen-data --out {out}` or pass --data")
    return path


def _propagation_graph(ds, task: str):
    return ds.train_graph() if task == "link_prediction" else ds


def _load_cache(out: Path, ds, v: dict):
    path = out / STACK_FILE
    if not path.exists():
        raise ConfigurationError(f"no propagation cache at {path}; run `cliffmag precompute --out {out}` first")
    graph = _propagation_graph(ds, v["task"])
    return load_stack(path, expect_hash=dataset_hash(graph), expect_settings=cgp_settings(v).as_dict())


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(out: Path, v: dict) -> dict:
    if v["features"]:
        if not v["edges"]:
            raise ConfigurationError("--features needs --edges")
        ds = load_text_mag(v["features"], v["edges"], v["labels"], seed=v["seed"])
    else:
        cfg = SynthConfig(
            n_nodes=v["n_nodes"],
            n_classes=v["n_classes"],
            K=len(v["dims"]),
            dims=tuple(v["dims"]),
            p_in=v["p_in"],
            p_out=v["p_out"],
            signal_split=tuple([1.0 / len(v["dims"])] * len(v["dims"])),
            rho=v["rho"],
            signal=v["signal"],
            noise=v["noise"],
            seed=v["seed"],
        )
        ds = generate_synthetic(cfg)
    save_mag(ds, out / DATA_FILE)
    h = homophily(ds) if ds.labels is not None else float("nan")
    print(f"wrote {out / DATA_FILE}: {ds.n_nodes} nodes, {ds.n_edges} edges, dims {ds.dims}, homophily {h:.3f}")
    return {"dataset_hash": dataset_hash(ds)}


def cmd_precompute(out: Path, v: dict) -> dict:
    ds = load_mag(_data_path(out, v))
    graph = _propagation_graph(ds, v["task"])
    t0 = time.perf_counter()
    stack, geo = precompute(graph, cgp_settings(v))
    seconds = time.perf_counter() - t0
    save_stack(stack, out / STACK_FILE)
    energies = energy_trace(stack, geo)
    write_csv(out / "energies.csv", [{"layer": l, "dirichlet_energy": float(e)} for l, e in enumerate(energies)])
    print(f"precompute: {seconds:.4f} s for {graph.n_edges} edges, L={stack.L}; wrote {out / STACK_FILE}")
    return {"dataset_hash": stack.graph_hash, "seconds": seconds}


def _save_model(out: Path, model: Model, v: dict, stack_settings: dict) -> None:
    meta = {"ablation": sorted(model.ablation), "task": v["task"], "settings": stack_settings}
    save_checkpoint(out / MODEL_FILE, model.params, model.head, meta)


def _load_model(out: Path, stack) -> tuple[Model, dict]:
    path = out / MODEL_FILE
    if not path.exists():
        raise ConfigurationError(f"no checkpoint at {path}; run `cliffmag train --out {out}` first")
    params, head, meta = load_checkpoint(path)
    if params.dims().L != stack.L or params.dims().d != stack.d:
        raise ConfigurationError(f"checkpoint {path} does not match the cached stack; retrain")
    layout = interaction_layout(stack.K, stack.blocks)
    return Model(params, layout, frozenset(meta.get("ablation", [])), head), meta


def cmd_train(out: Path, v: dict) -> dict:
    ds = load_mag(_data_path(out, v))
    task = task_spec(v)
    cfg = train_config(v, task.task)
    stack = _load_cache(out, ds, v)
    res = run_task(ds, cgp_settings(v), task, cfg, stack=stack)
    write_csv(out / "train.csv", res.history)
    _save_model(out, res.model, v, stack.settings)
    print(" ".join(f"{k}={val:.4f}" if isinstance(val, float) else f"{k}={val}" for k, val in res.metrics.items()))
    return {"dataset_hash": dataset_hash(ds), "metrics": res.metrics}


def cmd_eval(out: Path, v: dict) -> dict:
    ds = load_mag(_data_path(out, v))
    path = out / STACK_FILE
    if not path.exists():
        raise ConfigurationError(f"no propagation cache at {path}; run `cliffmag precompute --out {out}` first")
    stack = load_stack(path, expect_hash=dataset_hash(_propagation_graph(ds, v["task"])))
    model, meta = _load_model(out, stack)
    if meta.get("task") != v["task"]:
        raise ConfigurationError(f"checkpoint was trained for {meta.get('task')}, not {v['task']}")
    if meta.get("settings") != stack.settings:
        raise StaleCacheError(f"{path} was recomputed with other settings after training; retrain")
    metrics = evaluate(model, ds, stack, task_spec(v), v["seed"])
    print(" ".join(f"{k}={val:.4f}" if isinstance(val, float) else f"{k}={val}" for k, val in metrics.items()))
    return {"dataset_hash": dataset_hash(ds), "metrics": metrics}


def cmd_ablate(out: Path, v: dict) -> dict:
    ds = load_mag(_data_path(out, v))
    rows = []
    for variant in ("full",) + ABLATIONS:
        ablation = frozenset() if variant == "full" else frozenset({variant})
        t0 = time.perf_counter()
        stack, _ = precompute(ds, cgp_settings({**v, "ablate": sorted(ablation)}))
        res = fit_classification(stack, ds, replace(train_config(v), ablation=ablation))
        rows.append(
            {
                "variant": variant,
                "val_acc": res.metrics["val_acc"],
                "test_acc": res.metrics["test_acc"],
                "test_macro_f1": res.metrics["test_macro_f1"],
                "best_epoch": res.best_epoch,
                "seconds": time.perf_counter() - t0,
            }
        )
        print(f"{variant:<10} val_acc={rows[-1]['val_acc']:.4f} test_acc={rows[-1]['test_acc']:.4f}")
    write_csv(out / "ablation.csv", rows)
    return {"dataset_hash": dataset_hash(ds), "rows": rows}


def cmd_verify(out: Path, v: dict) -> dict:
    modes = (v["rotor_angle_mode"],) if v["rotor_angle_mode"] else ROTOR_MODES

    def show(res):
        print(f"  {'PASS' if res.passed else 'FAIL'} {res.name} ({res.seconds:.2f} s) {res.detail}", flush=True)

    report = run_verify(rotor_modes=modes, include_training=not v["skip_training"], progress=show)
    (out / "verify.json").write_text(report.to_json() + "\n")
    print(report.table())
    return {"passed": report.passed}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "precompute": cmd_precompute,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "ablate": cmd_ablate,
}


def main(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    environ = os.environ if environ is None else environ
    try:
        values, sources = resolve(args.command, args, environ)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_echo(out, args.command, values, sources)
        result = HANDLERS[args.command](out, values)
    except (CliffmagError, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"cliffmag {args.command}: error: {exc}", file=sys.stderr)
        return 2
    if args.command in ("train", "eval", "ablate"):
        doc = {
            "command": args.command,
            "run_hash": run_hash(args.command, values, result.get("dataset_hash", "")),
            "config": values,
            **result,
        }
        path = out / "metrics.json"
        if args.command == "eval" and path.exists():  # keep the training record next to the evaluation
            previous = json.loads(path.read_text())
            doc = {**previous, "eval": doc}
        write_json(path, doc)
    if args.command == "verify":
        return 0 if result["passed"] else 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
