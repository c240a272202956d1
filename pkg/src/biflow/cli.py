"""Command-line entry point: gen, train, eval, infer, bench, check."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import bench as bench_mod
from .fileio import FormatError, atomic_write_text, read_flow, read_pair, write_flow, write_pair
from .metrics import evaluate
from .model import (
    ModelConfig,
    checkpoint_bytes,
    init_params,
    load_checkpoint,
    parse_key_values,
    predict,
)
from .synthdata import SceneSpec, make_dataset
from .training import TrainConfig, train, write_loss_csv


class CliError(Exception):
    def __init__(self, kind: str, msg: str):
        super().__init__(msg)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# flag name -> (type, default); None defaults mean "fall back to the library default"
SCENE_FLAGS = {
    "n_points": (int, None),
    "n_objects": (int, None),
    "max_rotation": (float, None),
    "max_translation": (float, None),
    "noise_sigma": (float, None),
    "occlusion": (float, None),
    "feat_channels": (int, None),
    "extent": (float, None),
    "noncorresponding": (int, 1),
}
MODEL_FLAGS = {
    "points_per_level": (str, None),
    "channels": (str, None),
    "k_extract": (int, None),
    "k_bfp": (int, None),
    "k_fe": (int, None),
    "k_pred": (int, None),
    "interp_k": (int, None),
    "slope": (float, None),
    "use_bfp": (int, None),
    "decomposed": (int, None),
}
TRAIN_FLAGS = {
    "epochs": (int, 10),
    "lr": (float, None),
    "halve_every": (int, None),
    "alpha": (str, None),
}


def _add_flags(p: argparse.ArgumentParser, table: dict) -> None:
    for name, (kind, _) in table.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="biflow", description="Bidirectional point-cloud scene flow.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=Path, default=None, help="key=value file; flags override it")

    p = sub.add_parser("gen", help="generate synthetic pair and flow files")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=1)
    _add_flags(p, SCENE_FLAGS)

    p = sub.add_parser("train", help="train on a directory of pair/flow files")
    common(p)
    p.add_argument("--pairs", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--loss-csv", dest="loss_csv", type=Path, default=None)
    _add_flags(p, MODEL_FLAGS)
    _add_flags(p, TRAIN_FLAGS)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--pairs", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--preds", type=Path, help="directory of flow_XXXX.txt predictions")

    p = sub.add_parser("infer", help="predict the flow of one pair")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--pair", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("bench", help="time naive vs decomposed BFE")
    common(p)
    p.add_argument("--sizes", action="append", default=None, help="Np,Mp,K,C,Cout (repeatable)")
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("check", help="run equivalence, op-count and gradient suites")
    common(p)
    p.add_argument("--instances", type=int, default=None)
    return parser


def _merge_config(args: argparse.Namespace) -> dict[str, Any]:
    """Explicit flags win over ``--config`` entries."""
    merged: dict[str, Any] = {}
    if args.config is not None:
        if not args.config.exists():
            raise CliError("missing-file", f"config file not found: {args.config}")
        for k, v in parse_key_values(args.config.read_text()).items():
            merged[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command"):
            merged[k] = v
    return merged


def _get(opts, name, kind, default):
    v = opts.get(name)
    if v is None:
        return default
    try:
        return kind(v)
    except (TypeError, ValueError):
        raise CliError("config", f"bad value for {name}: {v!r}") from None


def _scene_spec(opts) -> SceneSpec:
    kw = {}
    for name, (kind, _) in SCENE_FLAGS.items():
        if name in ("noncorresponding",):
            continue
        v = _get(opts, name, kind, None)
        if v is not None:
            kw[name] = v
    kw["seed"] = _get(opts, "seed", int, 0)
    return SceneSpec(**kw)


def _model_config(opts, in_channels: int) -> ModelConfig:
    kv = {name: str(opts[name]) for name in MODEL_FLAGS if opts.get(name) is not None}
    kv["in_channels"] = str(in_channels)
    kv["seed"] = str(_get(opts, "seed", int, 0))
    return ModelConfig.from_mapping(kv)


def _pair_files(directory: Path) -> list[tuple[Path, Path]]:
    if not directory.is_dir():
        raise CliError("missing-file", f"not a directory: {directory}")
    out = []
    for pair in sorted(directory.glob("pair_*.txt")):
        flow = directory / pair.name.replace("pair_", "flow_", 1)
        if not flow.exists():
            raise CliError("missing-file", f"no flow file for {pair}")
        out.append((pair, flow))
    if not out:
        raise CliError("missing-file", f"no pair_*.txt files in {directory}")
    return out


def cmd_gen(opts) -> int:
    spec = _scene_spec(opts)
    out = Path(opts["out"])
    count = _get(opts, "count", int, 1)
    if count < 1:
        raise CliError("config", "count must be positive")
    nonc = bool(_get(opts, "noncorresponding", int, 1))
    data = make_dataset(spec, count, noncorresponding=nonc)
    out.mkdir(parents=True, exist_ok=True)
    for i, (pair, gt, mask) in enumerate(data):
        write_pair(pair, out / f"pair_{i:04d}.txt")
        write_flow(gt, out / f"flow_{i:04d}.txt", mask)
    return 0


def _load_items(directory: Path):
    items = []
    for pair_path, flow_path in _pair_files(directory):
        pair = read_pair(pair_path)
        flow, mask = read_flow(flow_path)
        if len(flow) != pair.source.n:
            raise CliError("format", f"{flow_path}: {len(flow)} rows for {pair.source.n} source points")
        items.append((pair, flow, mask))
    return items


def cmd_train(opts) -> int:
    items = _load_items(Path(opts["pairs"]))
    config = _model_config(opts, items[0][0].source.width)
    alpha = opts.get("alpha")
    defaults = TrainConfig()
    halve = _get(opts, "halve_every", int, defaults.halve_every)
    tcfg = TrainConfig(
        lr=_get(opts, "lr", float, defaults.lr),
        halve_every=halve or None,
        alpha=tuple(float(a) for a in str(alpha).split(",")) if alpha else None,
        shuffle_seed=_get(opts, "seed", int, 0),
    )
    epochs = _get(opts, "epochs", int, 10)
    net = init_params(config)
    net, history = train(net, [(p, g) for p, g, _ in items], epochs, tcfg)
    blob = checkpoint_bytes(net)
    ck = Path(opts["checkpoint"])
    tmp = ck.with_name(ck.name + ".tmp")
    tmp.write_bytes(blob)
    if opts.get("loss_csv"):
        write_loss_csv(history, opts["loss_csv"])
    tmp.replace(ck)
    return 0


def cmd_eval(opts) -> int:
    items = _load_items(Path(opts["pairs"]))
    if opts.get("checkpoint"):
        net = load_checkpoint(opts["checkpoint"])
        preds = [predict(net, p) for p, _, _ in items]
    else:
        pred_dir = Path(opts["preds"])
        preds = []
        for i, (pair_path, _) in enumerate(_pair_files(Path(opts["pairs"]))):
            path = pred_dir / pair_path.name.replace("pair_", "flow_", 1)
            if not path.exists():
                raise CliError("missing-file", f"prediction not found: {path}")
            preds.append(read_flow(path)[0])
    pred = np.concatenate(preds)
    gt = np.concatenate([g for _, g, _ in items])
    masks = [m if m is not None else np.ones(len(g), dtype=bool) for _, g, m in items]
    print(evaluate(pred, gt, np.concatenate(masks)).to_line())
    return 0


def cmd_infer(opts) -> int:
    net = load_checkpoint(opts["checkpoint"])
    pair = read_pair(opts["pair"])
    write_flow(predict(net, pair), opts["out"])
    return 0


def cmd_bench(opts) -> int:
    raw = opts.get("sizes") or [",".join(map(str, bench_mod.REFERENCE_SIZES))]
    if isinstance(raw, str):
        raw = [raw]
    reports = []
    for text in raw:
        try:
            sizes = bench_mod.Sizes(*(int(x) for x in str(text).split(",")))
        except (TypeError, ValueError) as exc:
            raise CliError("config", f"bad sizes {text!r}: {exc}") from None
        reports.append(
            bench_mod.time_compare(
                sizes,
                repetitions=_get(opts, "repetitions", int, 30),
                warmup=_get(opts, "warmup", int, 5),
                seed=_get(opts, "seed", int, 0),
            )
        )
    text = bench_mod.timing_csv(reports)
    if opts.get("out"):
        atomic_write_text(opts["out"], text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_check(opts) -> int:
    from .checks import run_all

    results = run_all(seed=_get(opts, "seed", int, 0), instances=_get(opts, "instances", int, 20))
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "check": cmd_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        opts = _merge_config(args)
        return COMMANDS[args.command](opts)
    except CliError as exc:
        kind, msg = exc.kind, str(exc)
    except FormatError as exc:
        kind, msg = "format", str(exc)
    except FileNotFoundError as exc:
        kind, msg = "missing-file", str(exc)
    except (ValueError, RuntimeError, IndexError) as exc:
        kind, msg = "invalid", str(exc)
    print(json.dumps({"error": kind, "message": " ".join(msg.split())}), file=sys.stderr)
    return 2 if kind == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
