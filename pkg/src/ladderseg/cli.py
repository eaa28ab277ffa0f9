"""Command line front end: one executable, one subcommand per workflow.

Exit codes: 0 on success, 1 when inputs fail validation (bad flags,
malformed configs, failed gradient or equivalence checks), 2 when a run
dies at runtime.  Commands that write files scrub their declared outputs
on failure so a rerun never sees partial artifacts.  Everything printed
for machines (CSV files, key=value lines, tables) is stable-ordered.

Precedence for settings is flag > config file > built-in default.  The
optional --threads N caps kernel parallelism in the underlying BLAS;
--threads 1 is the bitwise-reproducibility baseline.
"""

import argparse
import contextlib
import csv
import dataclasses
import json
import os
import shutil
import sys

import numpy as np

from . import analyzer
from . import autograd as ag
from . import dataio
from . import gradcheck as gc
from . import membench as mb
from . import nets as N
from . import plots
from . import trainer


class CheckFailure(Exception):
    """A check command completed and the checked property does not hold."""


# ---------------------------------------------------------------------------
# shared plumbing

def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _load_arch(path):
    """ArchSpec from a spec file; combined train configs work here too."""
    doc = _read_json(path)
    if isinstance(doc, dict) and "arch" in doc:
        doc = doc["arch"]
    return N.ArchSpec.from_json(doc)


def _parse_res(text):
    try:
        h, w = text.lower().split("x")
        h, w = int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"resolution must be positive, got {text!r}")
    return h, w


def _parse_scales(text):
    try:
        scales = tuple(float(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")
    if not scales or any(s <= 0 for s in scales):
        raise argparse.ArgumentTypeError(f"scales must be positive, got {text!r}")
    return scales


@contextlib.contextmanager
def _scrub_on_failure(paths):
    """Remove the listed artifacts if the body fails; reruns start clean."""
    try:
        yield
    except BaseException:
        for p in paths:
            if os.path.isdir(p):
                shutil.rmtree(p, ignore_errors=True)
            elif os.path.exists(p):
                try:
                    os.remove(p)
                except OSError:
                    pass
        raise


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    import threadpoolctl
    return threadpoolctl.threadpool_limits(limits=n)


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def _table(rows):
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
            for r in rows]


def _checkpoint_dir(path):
    """Accept either the bundle directory or its manifest.json."""
    if os.path.basename(path) == "manifest.json":
        return os.path.dirname(path) or "."
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_analyze(args):
    spec = _load_arch(args.spec)
    rep = analyzer.analyze(spec, res=args.res)
    print("\n".join(rep.lines()))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        paths = [os.path.join(args.out, "report.csv"),
                 os.path.join(args.out, "cost.png")]
        with _scrub_on_failure(paths):
            _write_csv(paths[0], rep.csv_rows())
            plots.cost_figure(rep, paths[1])
        print(f"wrote {paths[0]} and {paths[1]}")
    return 0


def cmd_membench(args):
    spec = _load_arch(args.spec)
    if args.budget_mb is not None and args.policy == "all":
        raise ValueError("--budget-mb needs a single --policy, not all")
    model = N.build_ladder_model(spec, seed=args.seed)
    h, w = args.res
    policies = list(ag.VARIANTS) if args.policy == "all" else [args.policy]
    reports = mb.benchmark(model, args.batch, h, w, policies=policies,
                           steps=args.steps, seed=args.seed)
    print("\n".join(_table(mb.table_rows(reports, args.batch))))
    if args.budget_mb is not None:
        budget = mb.max_batch_for_budget(model, h, w, args.policy,
                                         int(args.budget_mb * mb.MB),
                                         seed=args.seed)
        for key in sorted(budget):
            print(f"{key}={budget[key]}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        paths = [os.path.join(args.out, "report.csv"),
                 os.path.join(args.out, "memory.png")]
        with _scrub_on_failure(paths):
            rows = [list(type(reports[0]).CSV_FIELDS)]
            rows += [r.row() for r in reports]
            _write_csv(paths[0], rows)
            plots.memory_figure(reports, args.batch, paths[1])
        print(f"wrote {paths[0]} and {paths[1]}")
    return 0


def cmd_gradcheck(args):
    names = sorted(gc.KERNEL_CHECKS) if args.kernel == "all" else [args.kernel]
    worst = gc.run(names, trials=args.trials, seed=args.seed)
    failed = []
    for name in names:
        ok = worst[name] <= gc.TOLERANCE
        print(f"kernel={name} max_rel_err={worst[name]:.3e} "
              f"tol={gc.TOLERANCE:g} {'pass' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        raise CheckFailure(f"gradient check failed for {', '.join(failed)}")
    return 0


def cmd_ckptcheck(args):
    spec = _load_arch(args.spec)
    model = N.build_ladder_model(spec, seed=args.seed)
    h, w = args.res if args.res else (2 * spec.downsample_factor,) * 2
    diffs = [("none", 0.0)]
    diffs += mb.policy_gradient_diffs(model, args.batch, h, w, seed=args.seed)
    bad = []
    for pol, d in diffs:
        print(f"policy={pol} max_abs_diff={d:g}")
        if d != 0.0:
            bad.append(pol)
    if bad:
        raise CheckFailure(f"gradients diverge under {', '.join(bad)}")
    return 0


def cmd_make_dataset(args):
    doc = _read_json(args.spec)
    if not isinstance(doc, dict):
        raise ValueError(f"dataset spec must be an object, got {type(doc).__name__}")
    count = doc.pop("count", 500)
    if args.count is not None:
        count = args.count
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = dataio.SynthSpec.from_json(doc)
    paths = [os.path.join(args.out, p) for p in ("images", "labels", "meta.json")]
    with _scrub_on_failure(paths):
        dataio.generate_synthetic(spec, count, args.out)
    print(f"wrote {count} samples under {args.out}")
    return 0


def cmd_train(args):
    arch, cfg = trainer.load_config(args.config)
    overrides = {k: v for k, v in
                 (("seed", args.seed), ("epochs", args.epochs),
                  ("batch", args.batch), ("policy", args.policy))
                 if v is not None}
    if args.no_aux:
        overrides["use_aux"] = False
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    dataset = dataio.load_dataset(args.data)
    if dataset.num_classes != arch.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes but the "
                         f"model expects {arch.num_classes}")
    model = N.build_ladder_model(arch, seed=cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    paths = [os.path.join(args.out, p)
             for p in ("train_log.csv", "checkpoint", "training.png")]
    with _scrub_on_failure(paths):
        result = trainer.train(model, cfg, dataset, args.out)
        plots.training_figure(result["rows"], paths[2])
    print(f"final_val_miou={result['final_val_miou']:.6f}")
    print(f"rejected_steps={result['rejected_steps']}")
    print(f"checkpoint={result['checkpoint']}")
    return 0


def cmd_eval(args):
    if (args.scales is not None or args.flip) and not args.ms:
        raise ValueError("--scales and --flip need --ms")
    model, manifest = trainer.load_checkpoint(_checkpoint_dir(args.checkpoint))
    dataset = dataio.load_dataset(args.data)
    classes = model.spec.num_classes
    if dataset.num_classes != classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes but the "
                         f"checkpoint expects {classes}")
    # pad with the training-time mean pixel when the bundle records one
    mean = manifest.get("dataset", {}).get("mean_pixel")
    mean = dataset.mean_pixel if mean is None else np.asarray(mean, np.float32)
    samples = dataset.samples
    if args.val_fraction:
        _, samples = trainer.split_dataset(dataset, args.val_fraction)
    mean_iou, per_class, _ = trainer.evaluate(
        model, samples, classes, ms=args.ms, mean_pixel=mean,
        batch=args.batch, scales=args.scales,
        flips=args.flip if args.ms else None)
    print(f"miou={mean_iou:.6f}")
    for c, iou in enumerate(per_class):
        print(f"class={c} iou=" + ("nan" if np.isnan(iou) else f"{iou:.6f}"))
    return 0


def cmd_infer(args):
    model, manifest = trainer.load_checkpoint(_checkpoint_dir(args.checkpoint))
    image = dataio.u8_to_image(dataio.read_ppm(args.image))
    meta = manifest.get("dataset", {})
    mean = meta.get("mean_pixel")
    mean = None if mean is None else np.asarray(mean, np.float32)
    palette = meta.get("palette")
    palette = (dataio.PALETTE[:model.spec.num_classes] if palette is None
               else tuple(tuple(int(v) for v in c) for c in palette))
    pred = trainer.Predictor(model, mean).predict(image)
    with _scrub_on_failure([args.out]):
        dataio.write_ppm(args.out, dataio.colorize(pred, palette))
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract reserves 2 for runtime
    errors, so usage problems are remapped to the validation code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common():
    # fresh parser per subcommand: parents share action objects, and a
    # set_defaults on one subparser would otherwise leak into the rest
    p = _Parser(add_help=False)
    p.add_argument("--threads", type=int, metavar="N",
                   help="cap BLAS parallelism (1 = bitwise baseline)")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for synthetic inputs and init")
    return p


def build_parser():
    top = _Parser(prog="ladderseg", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("analyze", parents=[_common()],
                       help="parameter/MAC/caching cost report for a spec")
    p.add_argument("--spec", required=True, help="architecture spec JSON")
    p.add_argument("--res", type=_parse_res, metavar="HxW",
                   help="input resolution; enables the MAC columns")
    p.add_argument("--out", help="directory for report.csv and cost.png")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("membench", parents=[_common()],
                       help="peak-memory and throughput report per policy")
    p.add_argument("--spec", required=True)
    p.add_argument("--res", type=_parse_res, required=True, metavar="HxW")
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--policy", default="all", choices=("all",) + ag.VARIANTS)
    p.add_argument("--steps", type=int, default=1,
                   help="repeat runs and keep the fastest timing")
    p.add_argument("--budget-mb", type=float, metavar="MB",
                   help="also project the largest batch fitting this budget")
    p.add_argument("--out", help="directory for report.csv and memory.png")
    p.set_defaults(func=cmd_membench)

    p = sub.add_parser("gradcheck", parents=[_common()],
                       help="finite-difference check of every kernel")
    p.add_argument("--kernel", default="all",
                   choices=("all",) + tuple(sorted(gc.KERNEL_CHECKS)))
    p.add_argument("--trials", type=int, default=25)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ckptcheck", parents=[_common()],
                       help="gradient equivalence across checkpointing policies")
    p.add_argument("--spec", required=True)
    p.add_argument("--res", type=_parse_res, metavar="HxW",
                   help="default: twice the downsample factor")
    p.add_argument("--batch", type=int, default=2)
    p.set_defaults(func=cmd_ckptcheck)

    p = sub.add_parser("make-dataset", parents=[_common()],
                       help="generate a synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", required=True,
                   help="generator settings JSON, plus an optional count field")
    p.add_argument("--count", type=int, help="override the sample count")
    p.set_defaults(func=cmd_make_dataset, seed=None)

    p = sub.add_parser("train", parents=[_common()], help="train on a dataset")
    p.add_argument("--config", required=True, help="JSON with arch/train sections")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--policy", choices=ag.VARIANTS)
    p.add_argument("--no-aux", action="store_true",
                   help="drop the auxiliary losses")
    p.set_defaults(func=cmd_train, seed=None)

    p = sub.add_parser("eval", parents=[_common()], help="score a checkpoint")
    p.add_argument("--checkpoint", required=True,
                   help="bundle directory (or its manifest.json)")
    p.add_argument("--data", required=True)
    p.add_argument("--ms", action="store_true", help="multi-scale ensemble")
    p.add_argument("--scales", type=_parse_scales, metavar="S,S,...",
                   help="override the multi-scale list (needs --ms)")
    p.add_argument("--flip", action="store_true",
                   help="add mirror averaging to --ms")
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="score only the training-style tail split")
    p.add_argument("--batch", type=int, default=8)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[_common()],
                       help="colorized prediction for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM input")
    p.add_argument("--out", required=True, help="PPM output")
    p.set_defaults(func=cmd_infer)
    return top


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse exits; keep main returning an int
        return int(e.code or 0)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 1
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (CheckFailure, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
