"""``edgeo`` command line: data generation, training, evaluation, experiments.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import config as config_mod

log = logging.getLogger("edgeo")

RUN_ROOT_ENV = "EDGEO_RUN_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (sections: data, model, cem, posenc, train, experiment)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. cem.kernel_length=15 (repeatable)")
    p.add_argument("--seed", type=int, help="override data.seed and train.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edgeo", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        epilog = "config keys read:\n" + config_mod.describe_keys(config_mod.SECTIONS_READ[name])
        p = sub.add_parser(name, help=help_, description=help_, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
        return p

    p = add("gen-data", "generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of samples (default data.n_train)")
    p.add_argument("--start", type=int, default=0, help="first sample index")

    p = add("train", "train a model; writes checkpoint, losses.csv and eval.csv into a run directory")
    p.add_argument("--dataset", help="training dataset directory (default: generate from config)")
    p.add_argument("--val-dataset")
    p.add_argument("--run-dir")

    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory (default: generated validation split)")
    p.add_argument("--out", help="write accuracy CSV here")

    p = add("robustness", "marking-point shift sweep, KPE vs MPE")
    p.add_argument("--kpe-checkpoint")
    p.add_argument("--mpe-checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--val-dataset")
    p.add_argument("--run-dir")

    p = add("ablation", "train/evaluate the four {+-MPE, +-CEM} configurations")
    p.add_argument("--dataset")
    p.add_argument("--val-dataset")
    p.add_argument("--run-dir")

    p = add("kernel-sweep", "train/evaluate one model per strip-kernel length")
    p.add_argument("--dataset")
    p.add_argument("--val-dataset")
    p.add_argument("--run-dir")

    p = add("visualize", "export attention and encoding overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--shift", type=float, default=0.0, help="marking-point shift in pixels")
    p.add_argument("--out", required=True)

    p = add("anchors", "cluster anchor shapes from dataset boxes; prints a JSON list")
    p.add_argument("--dataset", help="dataset directory (default: generated training split)")
    p.add_argument("--k", type=int, default=9)
    return parser


def _run_root(cfg: dict[str, Any]) -> Path:
    return Path(cfg["experiment"]["run_root"] or os.environ.get(RUN_ROOT_ENV) or "runs")


@contextlib.contextmanager
def _locked(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"run directory {run_dir} is locked by another process") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def _open_run(cfg: dict[str, Any], name: str, run_dir: str | None):
    from .harness import atomic_write, make_run_dir

    if run_dir:
        path = Path(run_dir)
        path.mkdir(parents=True, exist_ok=True)
        atomic_write(path / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    else:
        path = make_run_dir(_run_root(cfg), cfg, name)
    return _locked(path)


def _datasets(cfg: dict[str, Any], args) -> tuple[list, list]:
    if getattr(args, "dataset", None):
        cfg["data"]["train_dir"] = args.dataset
    if getattr(args, "val_dataset", None):
        cfg["data"]["val_dir"] = args.val_dataset
    from .harness import load_datasets

    return load_datasets(cfg)


def _cmd_gen_data(cfg, args) -> int:
    from .harness import scene_config
    from .synthdata import write_dataset

    n = args.n if args.n is not None else cfg["data"]["n_train"]
    write_dataset(scene_config(cfg), n, args.out, start=args.start)
    print(args.out)
    return EXIT_OK


def _cmd_train(cfg, args) -> int:
    from .harness import evaluate, train, write_eval

    train_set, val_set = _datasets(cfg, args)
    with _open_run(cfg, "train", args.run_dir) as run:
        res = train(train_set, cfg, run)
        rep = evaluate(val_set, res.model, cfg, split="val")
        write_eval(rep, run / "eval.csv")
        print(json.dumps({"run_dir": str(run), "checkpoint": str(res.checkpoint),
                          "acc@0.25": rep.acc25, "acc@0.5": rep.acc50}))
    return EXIT_OK


def _cmd_eval(cfg, args) -> int:
    from .harness import evaluate, load_datasets, write_eval
    from .synthdata import read_dataset

    samples = read_dataset(args.dataset) if args.dataset else load_datasets(cfg)[1]
    rep = evaluate(samples, args.checkpoint)
    if args.out:
        write_eval(rep, args.out)
    print(json.dumps({"n": len(samples), **{f"acc@{k}": v for k, v in sorted(rep.accuracy.items())}}))
    return EXIT_OK


def _cmd_robustness(cfg, args) -> int:
    from .harness import robustness_sweep, train

    train_set, val_set = _datasets(cfg, args)
    samples = val_set if cfg["experiment"]["split"] == "val" else train_set
    with _open_run(cfg, "robustness", args.run_dir) as run:
        ckpts = {"kpe": args.kpe_checkpoint, "mpe": args.mpe_checkpoint}
        for mode in ("kpe", "mpe"):
            if not ckpts[mode]:
                c = json.loads(json.dumps(cfg))
                c["posenc"]["mode"] = mode
                ckpts[mode] = train(train_set, c, run / mode).checkpoint
        rows = robustness_sweep(samples, ckpts["kpe"], ckpts["mpe"], cfg["experiment"]["shifts"], cfg, run)
        print(json.dumps({"run_dir": str(run), "rows": rows}))
    return EXIT_OK


def _cmd_ablation(cfg, args) -> int:
    from .harness import ablation

    train_set, val_set = _datasets(cfg, args)
    with _open_run(cfg, "ablation", args.run_dir) as run:
        rows = ablation(train_set, val_set, cfg, run)
        print(json.dumps({"run_dir": str(run), "rows": rows}))
    return EXIT_OK


def _cmd_kernel_sweep(cfg, args) -> int:
    from .harness import kernel_sweep

    train_set, val_set = _datasets(cfg, args)
    with _open_run(cfg, "kernel-sweep", args.run_dir) as run:
        rows, _ = kernel_sweep(train_set, val_set, cfg, run)
        print(json.dumps({"run_dir": str(run), "rows": rows}))
    return EXIT_OK


def _cmd_visualize(cfg, args) -> int:
    import numpy as np

    from .harness import export_attention, load_datasets, load_model, shift_point
    from .synthdata import read_dataset

    model, manifest = load_model(args.checkpoint)
    samples = read_dataset(args.dataset) if args.dataset else load_datasets(manifest["config"])[1]
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index {args.index} out of range for {len(samples)} samples")
    s = samples[args.index]
    point, tag = s.point, "noshift"
    if args.shift:
        rng = np.random.Generator(np.random.PCG64([cfg["train"]["seed"], args.index]))
        point, _ = shift_point(s.point, s.mask, args.shift, rng, cfg["experiment"]["shift_retries"])
        tag = f"shift{args.shift:g}"
    out = export_attention(s, model, args.out, manifest["config"], point=point, tag=tag)
    print(json.dumps({k: str(v) for k, v in out["paths"].items()}))
    return EXIT_OK


def _cmd_anchors(cfg, args) -> int:
    from .geometry import cluster_anchors
    from .harness import load_datasets
    from .synthdata import read_dataset

    samples = read_dataset(args.dataset) if args.dataset else load_datasets(cfg)[0]
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    anchors = cluster_anchors([(s.gt_box.w, s.gt_box.h) for s in samples], args.k, seed=cfg["train"]["seed"])
    print(anchors.to_json())
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "robustness": _cmd_robustness,
    "ablation": _cmd_ablation,
    "kernel-sweep": _cmd_kernel_sweep,
    "visualize": _cmd_visualize,
    "anchors": _cmd_anchors,
}


def cli_dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(_COMMANDS))
        cfg = config_mod.load(args.config, args.overrides, args.seed)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"edgeo: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"edgeo: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"edgeo: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
