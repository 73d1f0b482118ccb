"""Command-line front end.

Exit status: 0 on success, 1 for invalid arguments or flag values (nothing has
been written yet), 2 for failures while running.
"""
import argparse
import contextlib
import os
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from .embedder import NetworkConfig, init_kaiming, load_model, save_model
from .errors import SigmatchError
from .featurestore import FORMATS, generate_synthetic, load_dataset, save_dataset, split_dataset
from ._io import atomic_write
from .matcher import TemplateDB, load_db, match_batch, save_db
from .metrics import (benchmark, default_thresholds, enrollment_plan, plot_curves, read_report,
                      timing_csv, write_report)
from .trainer import (TrainConfig, parse_key_values, train, train_config_from_mapping)

THREADS_ENV = "SIGMATCH_THREADS"
NETWORK_KEYS = ("hidden_dim", "signature_dim", "hidden_activation", "normalization", "norm_scale",
                "batch_norm_epsilon", "batch_norm_momentum")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _threads_default():
    raw = os.environ.get(THREADS_ENV)
    if raw in (None, ""):
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _add_common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help=f"BLAS threads; 1 guarantees bit-determinism (default: ${THREADS_ENV})")


def _add_format(p, *names):
    for name in names:
        p.add_argument(f"--{name}", choices=FORMATS, default=None,
                       help="file format (default: by extension, .csv or binary)")


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sigmatch", description="Train signature networks and match templates.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic clustered dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--intra", type=float, default=0.05, help="within-class spread")
    p.add_argument("--inter", type=float, default=1.0, help="between-class spread")
    p.add_argument("--out", required=True)
    _add_format(p, "format")
    _add_common(p)

    p = sub.add_parser("split", help="class-disjoint train/val/bench split")
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default="0.6,0.2,0.2")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-val", required=True)
    p.add_argument("--out-bench", required=True)
    _add_format(p, "format", "out-format")
    _add_common(p)

    p = sub.add_parser("train", help="train an embedding network")
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--config", default=None, help="key=value file; flags override it")
    p.add_argument("--init-model", default=None, help="start from an existing model file")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--history", default=None, help="per-epoch history CSV")
    _add_format(p, "format")
    for f in fields(NetworkConfig):
        if f.name in NETWORK_KEYS:
            p.add_argument(_flag(f.name), dest=f.name, default=None)
    for f in fields(TrainConfig):
        if f.name != "seed":
            p.add_argument(_flag(f.name), dest=f.name, default=None)
    _add_common(p)
    p.set_defaults(seed=None)

    p = sub.add_parser("enroll", help="build a template database, one example per class")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None, help="embed with this model (default: raw features)")
    p.add_argument("--out", required=True)
    p.add_argument("--template-selection", choices=("first", "random"), default="first")
    _add_format(p, "format")
    _add_common(p)

    p = sub.add_parser("match", help="match query examples against a template database")
    p.add_argument("--db", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--out", default=None, help="write results CSV here instead of stdout")
    _add_format(p, "format")
    _add_common(p, seed=False)

    p = sub.add_parser("benchmark", help="enroll a fraction of classes, query the rest, sweep thresholds")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--enroll-fraction", type=float, default=0.6)
    p.add_argument("--grid", type=int, default=200, help="number of thresholds over [0, 2]")
    p.add_argument("--template-selection", choices=("first", "random"), default="first")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--timing-out", default=None, help="also write the timing summary here")
    _add_format(p, "format")
    _add_common(p)

    p = sub.add_parser("roc-plot", help="SVG charts from a benchmark report")
    p.add_argument("--report", required=True)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("inspect-model", help="print a model's configuration and parameter statistics")
    p.add_argument("--model", required=True)
    return parser


@contextlib.contextmanager
def _thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _network_overrides(args, file_values):
    out = {}
    for key in NETWORK_KEYS:
        raw = getattr(args, key, None)
        if raw is None:
            raw = file_values.get(key)
        if raw is None:
            continue
        if key in ("hidden_dim", "signature_dim"):
            out[key] = int(raw)
        elif key in ("norm_scale", "batch_norm_epsilon", "batch_norm_momentum"):
            out[key] = float(raw)
        else:
            out[key] = str(raw)
    return out


def _prepare_train(args):
    file_values = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_values = parse_key_values(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    net_values = _network_overrides(args, file_values)
    train_values = {k: v for k, v in file_values.items() if k not in NETWORK_KEYS}
    for f in fields(TrainConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            train_values[f.name] = str(raw)
    cfg = train_config_from_mapping(train_values)
    return cfg, net_values


def _cmd_synth(args):
    ds = generate_synthetic(args.classes, args.per_class, args.dim, args.intra, args.inter, args.seed)
    save_dataset(ds, args.out, args.format)
    print(f"wrote {len(ds)} examples, {ds.n_classes} classes, dim {ds.dimension} -> {args.out}")


def _cmd_split(args, fractions):
    ds = load_dataset(args.data, args.format)
    parts = split_dataset(ds, fractions, args.seed)
    for part, path in zip(parts, (args.out_train, args.out_val, args.out_bench)):
        save_dataset(part, path, args.out_format)
        print(f"{path}: {len(part)} examples, {part.n_classes} classes")


def _cmd_train(args, cfg, net_values):
    ds = load_dataset(args.data, args.format)
    val = load_dataset(args.val, args.format) if args.val else None
    if args.init_model:
        net = load_model(args.init_model)
        if net_values:
            current = {k: getattr(net.config, k) for k in net_values}
            if current != net_values:
                raise SigmatchError("network flags conflict with --init-model configuration")
    else:
        net = init_kaiming(NetworkConfig(input_dim=ds.dimension, **net_values), seed=cfg.seed)
    net, history = train(net, ds, val, cfg)
    save_model(net, args.out)
    if args.history:
        history.save(args.history)
    last = len(history) - 1
    print(f"trained {len(history)} epoch(s); final loss {history.loss[last]:.6g}, "
          f"active {history.active_triplets[last]} -> {args.out}")


def _signatures(model_path, features):
    if model_path is None:
        return np.asarray(features, dtype=np.float64)
    return load_model(model_path).embed(features)


def _cmd_enroll(args):
    ds = load_dataset(args.data, args.format)
    templates, _, _ = enrollment_plan(ds, 1.0, args.seed, args.template_selection)
    sigs = _signatures(args.model, ds.features[templates])
    db = TemplateDB(sigs.shape[1])
    db.enroll_many([str(c) for c in ds.labels[templates].tolist()], sigs)
    save_db(db, args.out)
    print(f"enrolled {len(db)} identities (dim {db.dimension}) -> {args.out}")


def _cmd_match(args):
    db = load_db(args.db)
    ds = load_dataset(args.query, args.format)
    sigs = _signatures(args.model, ds.features)
    batch = match_batch(db, sigs, args.threshold)
    lines = ["example_id,decision,identity,distance"]
    for eid, res in zip(ds.ids, batch):
        decision = "accepted" if res.accepted else "rejected"
        ident = res.identity if res.accepted else ""
        lines.append(f"{eid},{decision},{ident},{res.distance!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with atomic_write(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_benchmark(args):
    ds = load_dataset(args.data, args.format)
    model = load_model(args.model) if args.model else None
    report = benchmark(model, ds, args.enroll_fraction, args.seed, default_thresholds(args.grid),
                       args.template_selection)
    write_report(report.curve, args.out)
    timing = timing_csv(report)
    if args.timing_out:
        with atomic_write(args.timing_out, "w", encoding="utf-8", newline="") as fh:
            fh.write(timing)
    sys.stdout.write(timing)


def _cmd_roc_plot(args):
    for path in plot_curves(read_report(args.report), args.out_prefix):
        print(path)


def _cmd_inspect(args):
    net = load_model(args.model)
    for f in fields(NetworkConfig):
        print(f"{f.name}={getattr(net.config, f.name)}")
    for name, arr in net.state().items():
        print(f"{name}: shape={arr.shape} mean={arr.mean():.6g} std={arr.std():.6g} "
              f"min={arr.min():.6g} max={arr.max():.6g}")


def _validate(args):
    """Checks that must pass before any file is touched."""
    threads = args.threads if getattr(args, "threads", None) is not None else _threads_default()
    if threads is not None and threads < 1:
        raise UsageError("--threads must be at least 1")
    extra = ()
    if args.command == "split":
        try:
            fractions = tuple(float(x) for x in args.fractions.split(","))
        except ValueError:
            raise UsageError(f"bad --fractions {args.fractions!r}") from None
        if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
            raise UsageError("--fractions needs three non-negative values summing to 1")
        extra = (fractions,)
    elif args.command == "train":
        try:
            cfg, net_values = _prepare_train(args)
            probe = dict(net_values)
            NetworkConfig(input_dim=1, **probe)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid training configuration: {exc}") from None
        if args.seed is not None:
            cfg = train_config_from_mapping({"seed": args.seed}, cfg)
        extra = (cfg, net_values)
    elif args.command == "synth":
        if args.classes < 1 or args.per_class < 1 or args.dim < 2 or args.intra <= 0 or args.inter <= 0:
            raise UsageError("synth needs classes, per-class >= 1, dim >= 2 and positive spreads")
    elif args.command == "benchmark":
        if not 0 < args.enroll_fraction <= 1:
            raise UsageError("--enroll-fraction must lie in (0, 1]")
        if args.grid < 1:
            raise UsageError("--grid must be positive")
    return threads, extra


COMMANDS = {
    "synth": _cmd_synth, "split": _cmd_split, "train": _cmd_train, "enroll": _cmd_enroll,
    "match": _cmd_match, "benchmark": _cmd_benchmark, "roc-plot": _cmd_roc_plot,
    "inspect-model": _cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads, extra = _validate(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    try:
        with _thread_limit(threads):
            COMMANDS[args.command](args, *extra)
    except (SigmatchError, OSError, ValueError, KeyError) as exc:
        print(f"sigmatch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
