"""Command-line entry point: ``niff <subcommand> ...``.

Exit codes: 0 success, 1 usage, config or invalid-setting error, 2 data / IO error,
3 numerical failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("niff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_data(cfg, root=None):
    from .data import ingest

    train_ds, test_ds = ingest(cfg["data.dataset"], root or cfg["data.root"])
    if cfg["data.limit_train"]:
        train_ds = train_ds.subset(cfg["data.limit_train"])
    if cfg["data.limit_test"]:
        test_ds = test_ds.subset(cfg["data.limit_test"])
    return train_ds, test_ds


def _apply_overrides(cfg, pairs):
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects section.key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        cfg.set(key.strip(), raw.strip())
    return cfg


def cmd_train(args):
    from .config import RunConfig
    from .train import train

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.defaults()
    _apply_overrides(cfg, args.set)
    train_ds, test_ds = _load_data(cfg)
    c, h, w = train_ds.images.shape[1:]
    n_classes = int(max(train_ds.labels.max(), test_ds.labels.max())) + 1
    spec = cfg.model_spec(c, (h, w), max(n_classes, 10))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as f:
        f.write(cfg.to_text())
    _, rows = train(spec, train_ds, test_ds, cfg.train_config(), out_dir=args.out, resume=args.resume,
                    run_config=cfg.to_dict())
    if cfg["analysis.figures"] and not args.no_figures:
        from . import plots

        plots.training_curves(rows, os.path.join(args.out, "training.png"))
    last = rows[-1]
    print(f"epoch={last['epoch']} train_loss={last['train_loss']!r} test_acc={last['test_acc']!r}")
    return EXIT_OK


def cmd_eval(args):
    from .config import RunConfig
    from .data import ingest, normalize
    from .train import evaluate, load_trained

    model, meta = load_trained(args.checkpoint)
    cfg = RunConfig.from_dict(meta.get("run_config") or {})
    dataset = args.dataset or cfg["data.dataset"]
    _, test_ds = ingest(dataset, args.data)
    if cfg["data.limit_test"] and not args.all:
        test_ds = test_ds.subset(cfg["data.limit_test"])
    norm = meta["normalization"]
    x = normalize(test_ds.images, norm["mean"], norm["std"])
    acc = evaluate(model, x, test_ds.labels)
    print(f"test_acc={acc!r} samples={len(test_ds)}")
    logged = meta["metrics"][-1]["test_acc"] if meta.get("metrics") else None
    if logged is not None:
        print(f"logged_test_acc={logged!r} difference={abs(acc - logged):.3g}")
    return EXIT_OK


def cmd_analyze(args):
    from .analysis import analyze_checkpoint

    report = analyze_checkpoint(args.checkpoint, args.out, args.threshold, figures=not args.no_figures,
                                absolute=not args.raw_mass)
    print("layer,name,kind,size,mean_effective_size,fraction_below_side")
    for la in report.layers:
        print(f"{la.index},{la.name},{la.kind},{la.size[0]}x{la.size[1]},{la.mean_effective_size:.3f},"
              f"{la.fraction_below_side:.3f}")
    print(f"wrote {len(report.files)} files to {args.out}")
    return EXIT_OK


def cmd_bench(args):
    from . import bench
    from .config import RunConfig
    from .data import channel_stats, normalize

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.defaults()
    _apply_overrides(cfg, args.set)
    b = cfg.section("bench")
    threads = args.threads or b["threads"]
    if args.suite == "conv":
        report = bench.conv_suite(iterations=b["iterations"], warmup=b["warmup"], threads=threads,
                                  quick=b["quick"] or args.quick)
    else:
        train_ds, _ = _load_data(cfg, args.data)
        if b["limit"]:
            train_ds = train_ds.subset(b["limit"])
        mean, std = channel_stats(train_ds.images)
        x = normalize(train_ds.images, mean, std)
        report = bench.epoch_suite(x, train_ds.labels, desk=cfg["model.desk"], epochs=b["epochs"],
                                   batch_size=b["batch_size"], threads=threads)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    report.write(args.out)
    stem = os.path.splitext(args.out)[0]
    bench.write_summary(report, stem + "_summary.csv")
    if args.suite == "conv" and cfg["analysis.figures"] and not args.no_figures:
        from . import plots

        plots.bench_figure(report.rows, stem + ".png")
    for k, v in {**report.slopes, **report.crossover}.items():
        print(f"{k}={v!r}")
    return EXIT_OK


def cmd_export(args):
    from .analysis import export_kernels

    files = export_kernels(args.checkpoint, args.layer, args.out)
    for f in files:
        print(os.path.join(args.out, f))
    return EXIT_OK


def cmd_prepare(args):
    from .data import prepare_mnist5k

    n_train, n_test = prepare_mnist5k(args.out, seed=args.seed)
    print(f"wrote {n_train} training and {n_test} test digits to {args.out}")
    return EXIT_OK


def cmd_defaults(args):
    from .config import describe_defaults

    print(describe_defaults())
    return EXIT_OK


def build_parser():
    p = _Parser(prog="niff", description="Neural implicit frequency filters: train, evaluate, analyze, benchmark.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", help="section.key = value file (defaults apply to missing keys)")
    t.add_argument("--out", required=True, help="output directory for checkpoint and metrics")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--dataset", choices=["mnist_idx", "cifar10_binary"], help="default: as trained")
    e.add_argument("--all", action="store_true", help="ignore the training run's test-set limit")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="kernel extraction, mass ratios and PCA for a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--threshold", type=float, default=0.95)
    a.add_argument("--raw-mass", action="store_true", help="signed kernel sums instead of |k|")
    a.add_argument("--no-figures", action="store_true")
    a.set_defaults(fn=cmd_analyze)

    b = sub.add_parser("bench", help="microbenchmarks")
    b.add_argument("--suite", choices=["conv", "epoch"], required=True)
    b.add_argument("--out", required=True, help="CSV path; a _summary.csv (and .png) land beside it")
    b.add_argument("--config")
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.add_argument("--data", help="dataset root for the epoch suite (default: data.root)")
    b.add_argument("--threads", type=int, help="override bench.threads")
    b.add_argument("--quick", action="store_true")
    b.add_argument("--no-figures", action="store_true")
    b.set_defaults(fn=cmd_bench)

    x = sub.add_parser("export-kernels", help="write one NIFF layer's kernels and spectra")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--layer", required=True, help="NIFF layer index or name (e.g. blocks.0.conv)")
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export)

    m = sub.add_parser("prepare-mnist5k", help="write the 5000-digit MNIST subset as IDX files")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=cmd_prepare)

    d = sub.add_parser("defaults", help="print every config key with its default")
    d.set_defaults(fn=cmd_defaults)
    return p


def _thread_limit():
    raw = os.environ.get("NIFF_THREADS")
    if not raw:
        return None
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"NIFF_THREADS must be an integer, got {raw!r}") from None


def main(argv=None) -> int:
    from .analysis import NoNiffLayers
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import DataError
    from .model import SpecError
    from .train import NumericalFailure

    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        logging.getLogger("matplotlib").setLevel(logging.WARNING)
        if not getattr(args, "fn", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        limit = _thread_limit()
        if limit is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=limit):
                return args.fn(args)
        return args.fn(args)
    except (UsageError, ConfigError, SpecError, NoNiffLayers, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
