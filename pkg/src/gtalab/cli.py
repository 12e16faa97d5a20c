"""Command-line entry point: ``gtalab <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O or container error. Every command writes ``config.resolved`` into its
output directory; the default directory is ``$GTALAB_OUT/<command>`` (or
``./gtalab-out/<command>``). An existing, non-empty output directory is
refused unless ``--force`` is given, in which case it is replaced whole.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis
from . import numeric_core as nc
from .errors import (ConfigError, ContractError, DimensionError, FormatError, IntegrityError,
                     NumericError)
from .model import ModelSpec, build_model, load_checkpoint, save_checkpoint
from .plan import __doc__ as PLAN_GRAMMAR
from .plan import parse_plan
from .synthetic_data import TASKS, generate, load_dataset, save_dataset
from .training import Hyper, cross_entropy, evaluate, train, write_metrics

OUT_ENV = "GTALAB_OUT"
TRAIN_FILE = "train.gtad"
TEST_FILE = "test.gtad"
GRADCHECK_SPEC = ModelSpec(t=4, h=4, w=4, patch=2, c=8,
                           blocks=parse_plan("nl,sa,ta,tape,dnl,gta[g=2,k=2,ccmh=on]"))
GRADCHECK_LIMIT = 1e-4

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------- helpers

def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV) or "gtalab-out"
    return Path(root) / command


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise ConfigError(f"output directory {path} exists; pass --force to replace it")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(out: Path, command: str, sections: dict[str, dict]) -> None:
    lines = [f"command={command}"]
    for section, pairs in sections.items():
        for k, v in pairs.items():
            lines.append(f"{section}.{k}={v}")
    (out / "config.resolved").write_text("\n".join(lines) + "\n")


def _spec_pairs(text: str) -> dict[str, str]:
    """``--spec`` is a key=value file or inline ``k=v;k=v``."""
    path = Path(text)
    if path.is_file():
        source = path.read_text().splitlines()
    else:
        source = text.split(";")
    pairs: dict[str, str] = {}
    for item in source:
        item = item.strip()
        if not item or item.startswith("#"):
            continue
        if "=" not in item:
            raise ConfigError(f"spec entry {item!r} is not key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        if k in pairs:
            raise ConfigError(f"spec key {k!r} repeated")
        pairs[k] = v
    return pairs


def _resolve_spec(args, base: ModelSpec = ModelSpec()) -> ModelSpec:
    pairs = _spec_pairs(args.spec) if args.spec else {}
    if args.blocks is not None:
        pairs["blocks"] = args.blocks
    if getattr(args, "seed", None) is not None:
        pairs.setdefault("seed", str(args.seed))
    spec = ModelSpec.from_pairs(pairs, base)
    spec.validate()
    return spec


def _spec_section(spec: ModelSpec) -> dict[str, str]:
    return dict(line.split("=", 1) for line in spec.to_text().splitlines())


def _dataset_pair(path: Path):
    if path.is_dir():
        train_set = load_dataset(path / TRAIN_FILE)
        test_path = path / TEST_FILE
        return train_set, load_dataset(test_path) if test_path.exists() else None
    return load_dataset(path), None


def _eval_set(path: Path):
    if path.is_dir():
        path = path / TEST_FILE if (path / TEST_FILE).exists() else path / TRAIN_FILE
    return load_dataset(path)


def randomize(model, rng: np.random.Generator, std: float = 0.25) -> None:
    """Overwrite every trainable parameter so no path sits at its zero init."""
    for p in model.trainable():
        p.value = rng.normal(0.0, std, size=p.shape)


def run_gradcheck(spec: ModelSpec = GRADCHECK_SPEC, seed: int = 0, batch: int = 2) -> float:
    """Max relative gradient error of a randomized model under cross-entropy."""
    model = build_model(spec)
    rng = np.random.default_rng(seed)
    randomize(model, rng)
    frames = rng.random((batch, spec.t, spec.h, spec.w, spec.c_in))
    labels = rng.integers(0, spec.classes, size=batch)
    return nc.grad_check(lambda: cross_entropy(model(frames), labels), model.trainable())


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    out = _prepare_out(_out_dir(args, "gen-data"), args.force)
    train_set = generate(args.task, args.n, args.t, args.h, args.w, args.seed, "train")
    test_set = generate(args.task, args.n_test, args.t, args.h, args.w, args.seed, "test")
    save_dataset(train_set, out / TRAIN_FILE)
    save_dataset(test_set, out / TEST_FILE)
    _write_resolved(out, "gen-data", {"data": {
        "task": args.task, "n": args.n, "n_test": args.n_test, "t": args.t,
        "h": args.h, "w": args.w, "seed": args.seed, "noise": train_set.recipe.noise}})
    for ds in (train_set, test_set):
        counts = ", ".join(f"class {k}: {v}" for k, v in ds.class_counts().items())
        print(f"{ds.split}: {len(ds)} samples ({counts}) sha256={ds.checksum()[:16]}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _resolve_spec(args)
    hyper = Hyper(epochs=args.epochs, batch=args.batch, lr=args.lr, seed=args.seed, clip=args.clip)
    hyper.validate()
    if (args.task is None) == (args.data is None):
        raise ConfigError("give exactly one of --task and --data")
    if args.data is not None:
        train_set, test_set = _dataset_pair(Path(args.data))
        data_section = {"data": args.data}
    else:
        if args.task not in TASKS:
            raise ConfigError(f"unknown task {args.task!r}; expected one of {', '.join(TASKS)}")
        train_set = generate(args.task, args.n, spec.t, spec.h, spec.w, args.seed, "train")
        test_set = generate(args.task, args.n_test, spec.t, spec.h, spec.w, args.seed, "test")
        data_section = {"task": args.task, "n": args.n, "n_test": args.n_test, "seed": args.seed}
    model = build_model(spec)
    out = _prepare_out(_out_dir(args, "train"), args.force)
    _write_resolved(out, "train", {"model": _spec_section(spec), "hyper": hyper.to_pairs(),
                                    "data": data_section})
    start = time.perf_counter()

    def report(r):
        print(f"epoch {r.epoch:3d}  train loss {r.train_loss:.4f} acc {r.train_acc:.3f}  "
              f"test loss {r.test_loss:.4f} acc {r.test_acc:.3f}  ({time.perf_counter() - start:.0f}s)",
              flush=True)

    history = train(model, train_set, test_set, hyper, on_epoch=None if args.quiet else report)
    write_metrics(history, out / "metrics.csv")
    save_checkpoint(model, out / "model.ckpt")
    print(f"parameters: {model.param_count}; wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    ds = _eval_set(Path(args.data))
    acc, loss = evaluate(model, ds)
    out = _prepare_out(_out_dir(args, "eval"), args.force)
    _write_resolved(out, "eval", {"model": _spec_section(model.spec),
                                   "data": {"path": args.data, "split": ds.split, "n": len(ds)}})
    print(f"accuracy {acc!r}\nloss {loss!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    spec = _resolve_spec(args, GRADCHECK_SPEC)
    out = _prepare_out(_out_dir(args, "gradcheck"), args.force)
    _write_resolved(out, "gradcheck", {"model": _spec_section(spec),
                                        "check": {"seed": args.seed, "step": 1e-6, "limit": GRADCHECK_LIMIT}})
    start = time.perf_counter()
    err = run_gradcheck(spec, args.seed)
    print(f"max relative error {err:.3e} over {build_model(spec).param_count} parameters "
          f"({time.perf_counter() - start:.1f}s)")
    if err >= GRADCHECK_LIMIT:
        print(f"FAIL: error exceeds {GRADCHECK_LIMIT:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_flops(args) -> int:
    sites = analysis.parse_dims(args.dims)
    plans = args.blocks or ["nl", "dnl", "sa,gta"]
    out = _prepare_out(_out_dir(args, "flops"), args.force)
    _write_resolved(out, "flops", {"flops": {"dims": args.dims, "blocks": " | ".join(plans),
                                              "convention": analysis.CONVENTION}})
    reports = {}
    for plan in plans:
        report = analysis.count_plan(plan, sites)
        reports[plan] = report
        name = "".join(ch if ch.isalnum() else "_" for ch in plan)
        (out / f"flops_{name}.csv").write_text(report.to_csv())
        print(f"== {plan}")
        print(report.table())
        print()
    ranked = sorted(reports.items(), key=lambda kv: -kv[1].flops)
    print("extra-cost ordering: " + " > ".join(f"{p} ({r.flops / 1e9:.2f} G)" for p, r in ranked))
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    model = load_checkpoint(args.ckpt)
    ds = _eval_set(Path(args.data))
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index {args.index} outside the dataset's {len(ds)} samples")
    out = _prepare_out(_out_dir(args, "dump-attn"), args.force)
    _write_resolved(out, "dump-attn", {"model": _spec_section(model.spec),
                                        "dump": {"ckpt": args.ckpt, "data": args.data, "index": args.index}})
    model.set_retain_attention(True)
    sample = ds.samples[args.index]
    dump = analysis.dump_attention(model, sample, out, sample_id=args.index)
    print(f"wrote {len(dump.files)} matrices for sample {args.index} (label {sample.label}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtalab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        p.add_argument("--force", action="store_true", help="replace an existing output directory")
        return p

    def model_flags(p, default_blocks=None):
        p.add_argument("--spec", help="model spec file or inline 'k=v;k=v' (t,h,w,c_in,patch,c,classes,seed,stem_bias)")
        p.add_argument("--blocks", default=default_blocks, help="block plan, e.g. 'sa,gta[g=8]'; see the grammar below")

    grammar = argparse.RawDescriptionHelpFormatter
    p = common(sub.add_parser("gen-data", help="write train/test dataset containers"))
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--n", type=int, default=2500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--t", type=int, default=8)
    p.add_argument("--h", type=int, default=16)
    p.add_argument("--w", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train a classifier", epilog=PLAN_GRAMMAR, formatter_class=grammar))
    model_flags(p)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--data", help="directory from gen-data, or one dataset file")
    p.add_argument("--n", type=int, default=2500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--epochs", type=int, default=Hyper.epochs)
    p.add_argument("--batch", type=int, default=Hyper.batch)
    p.add_argument("--lr", type=float, default=Hyper.lr)
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="accuracy and loss of a checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("gradcheck", help="tape gradients vs central differences",
                              epilog=PLAN_GRAMMAR, formatter_class=grammar))
    model_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("flops", help="analytic FLOP and parameter counts",
                              epilog=PLAN_GRAMMAR, formatter_class=grammar))
    p.add_argument("--dims", default="reference", help="'reference' (two 28x28x512 and three 14x14x1024 sites, T=8) or 'T,H,W,C[*n];...'")
    p.add_argument("--blocks", action="append", help="plan to count; repeat to compare")
    p.set_defaults(func=cmd_flops)

    p = common(sub.add_parser("dump-attn", help="export attention matrices as CSV"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_dump_attn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, IntegrityError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
