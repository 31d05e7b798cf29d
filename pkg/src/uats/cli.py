"""Command line: ``uats generate|train|evaluate|noise-sweep|ratio-sweep|compare``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
The data directory defaults to ``$UATS_DATA_ROOT`` (or ``./data``).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .data import CLASS_NAMES, MANIFEST, SyntheticSpec, class_frequencies, default_data_root, generate_dataset, \
    write_dataset
from .experiments import (
    COMPARE_HEADER,
    EVAL_HEADER,
    NOISE_HEADER,
    PAPER_RATIOS,
    PAPER_SIGMAS,
    SWEEP_HEADER,
    SWEEP_SUMMARY_HEADER,
    SWEEP_VARIANTS,
    DataError,
    compare,
    load_split,
    noise_sweep,
    provenance,
    ratio_sweep,
    ratio_tag,
    read_records,
    record_rows,
    run_dir,
    summary_rows,
    train_run,
    write_csv,
)
from .tensor import ConfigurationError, TrainingError
from .trainer import VARIANTS, TrainConfig, evaluate_model, get_variant, load_checkpoint, load_config

log = logging.getLogger("uats")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def variant_id(text: str) -> str:
    try:
        return get_variant(text).id
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def variant_list(text: str) -> list[str]:
    return [variant_id(t.strip()) for t in text.split(",") if t.strip()]


def load_train_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "max_epochs", "patience") if getattr(args, k, None) is not None}
    if overrides:
        d = config.to_dict()
        d.update(overrides)
        config = TrainConfig.from_dict(d)
    return config


def print_summary(records) -> None:
    print(f"{'variant':<8}{'class':<10}{'metric':<7}{'mean':>9}{'sd':>9}{'n':>5}")
    for v, s, m, mean, sd, n in summary_rows(records):
        print(f"{v:<8}{CLASS_NAMES[s]:<10}{m:<7}{mean:>9.4f}{sd:>9.4f}{n:>5}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out or default_data_root())
    if (out / MANIFEST).exists():
        if not args.force:
            raise DataError(f"{out} already holds a dataset; pass --force to overwrite")
        for p in list(out.glob("*.img")) + list(out.glob("*.lbl")) + [out / MANIFEST]:
            p.unlink()
    spec = SyntheticSpec(size=args.size, seed=args.seed, labeled_fraction=args.labeled_fraction,
                         test_fraction=args.test_fraction)
    samples = generate_dataset(spec, args.n)
    write_dataset(out, samples, spec)
    pools = {p: sum(s.pool == p for s in samples) for p in ("labeled", "test", "unlabeled")}
    print(f"wrote {len(samples)} samples to {out}: " + ", ".join(f"{v} {k}" for k, v in pools.items()))
    counts = class_frequencies([s.label for s in samples if s.label is not None])
    total = counts.sum()
    for name, c in zip(CLASS_NAMES, counts):
        print(f"  {name:<10} {c:>9d} px  {100 * c / total:6.2f}%")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_train_config(args)
    split = load_split(args.data or default_data_root(), args.ratio, args.repeat, seed=config.seed)
    d = run_dir(args.out, args.experiment, args.variant, args.ratio, args.repeat)
    if (d / "model.ckpt").exists() and not args.force:
        raise DataError(f"{d} already holds a run; pass --force to overwrite")
    res = train_run(config, split, args.variant, d, pretrained_path=args.from_ckpt)
    print(f"variant {res.variant} ratio {ratio_tag(args.ratio)} repeat {args.repeat} -> {d}")
    print_summary(res.records)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ck = load_checkpoint(args.ckpt)
    extra = ck.extra
    ratio, repeat = extra.get("ratio", 0.0), extra.get("repeat", 0)
    split = load_split(args.data or default_data_root(), ratio, repeat,
                       seed=ck.config.seed if ck.config else 0)
    variant = args.variant or extra.get("variant", "model")
    records = evaluate_model(ck.model, split.test, variant)
    if args.out:
        seed = ck.config.seed if ck.config else 0
        write_csv(args.out, EVAL_HEADER, record_rows(records, ratio, repeat),
                  provenance(ck.config, seed, variant=variant, checkpoint=Path(args.ckpt).name))
    print_summary(records)
    return EXIT_OK


def cmd_noise_sweep(args) -> int:
    ck = load_checkpoint(args.ckpt)
    extra = ck.extra
    split = load_split(args.data or default_data_root(), extra.get("ratio", 0.0), extra.get("repeat", 0),
                       seed=ck.config.seed if ck.config else 0)
    if any(s <= 0 for s in args.sigmas):
        raise UsageError("noise sigmas must be positive (the clean baseline row is always included)")
    rows = noise_sweep(ck.model, split.test, args.sigmas, seed=args.seed, variant=extra.get("variant", "model"))
    write_csv(args.out, NOISE_HEADER, rows, provenance(ck.config, args.seed, checkpoint=Path(args.ckpt).name))
    print(f"{'sigma':>7}{'snr':>8}  mean DC over foreground classes")
    by_sigma = {}
    for row in rows:
        by_sigma.setdefault((row[0], row[1]), []).append(row[4])
    for (sigma, snr), dcs in by_sigma.items():
        print(f"{sigma:>7g}{snr:>8.2f}  {np.mean(dcs):.4f}")
    return EXIT_OK


def cmd_ratio_sweep(args) -> int:
    config = load_train_config(args)
    rows, summary = ratio_sweep(args.data or default_data_root(), config, args.ratios, args.repeats, args.variants,
                                args.out, args.experiment, args.jobs)
    prov = provenance(config, config.seed, ratios=",".join(map(ratio_tag, args.ratios)), repeats=args.repeats)
    base = Path(args.out) / args.experiment
    write_csv(base / "ratio_sweep.csv", SWEEP_HEADER, rows, prov)
    write_csv(base / "ratio_summary.csv", SWEEP_SUMMARY_HEADER, summary, prov)
    for ratio, variant, s, name, mean, sd, n in summary:
        print(f"ratio {ratio:<5} {variant} {name:<10} DC {mean:.4f} +- {sd:.4f} (n={n})")
    skipped = sum(r[-1] != "ok" for r in rows)
    if skipped:
        print(f"warning: {skipped} rows skipped (infeasible ratios)", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    paths = []
    for p in args.records:
        p = Path(p)
        paths += sorted(p.rglob("eval.csv")) if p.is_dir() else [p]
    if not paths:
        raise DataError("no eval.csv records found")
    rows = compare(read_records(paths), baseline=args.baseline)
    write_csv(args.out, COMPARE_HEADER, rows, provenance(None, "-", baseline=args.baseline, files=len(paths)))
    for v, s, m, mean, sd, n, p, stars in rows:
        print(f"{v:<3}{CLASS_NAMES[s]:<10}{m:<5}{mean:>9.4f}{sd:>9.4f}{n:>5}  p={p:.4g} {stars}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _train_options(p) -> None:
    p.add_argument("--data", help="dataset directory (default $UATS_DATA_ROOT or ./data)")
    p.add_argument("--config", help="YAML training config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--max-epochs", type=int, help="override max_epochs")
    p.add_argument("--patience", type=int, help="override patience")
    p.add_argument("--out", default="out", help="output root")


def build_parser() -> Parser:
    parser = Parser(prog="uats", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"uats {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=120)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labeled-fraction", type=float, default=0.5)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", help="dataset directory (default $UATS_DATA_ROOT or ./data)")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one variant on one split")
    _train_options(p)
    p.add_argument("--variant", type=variant_id, default="G", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--ratio", type=float, default=0.1)
    p.add_argument("--repeat", type=int, default=0)
    p.add_argument("--from", dest="from_ckpt", help="Stage-I checkpoint; skips Stage I")
    p.add_argument("--experiment", default="train")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test pool")
    p.add_argument("ckpt")
    p.add_argument("--data")
    p.add_argument("--variant", help="label written into the records")
    p.add_argument("--out", help="per-sample CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("noise-sweep", help="evaluate under additive Gaussian noise")
    p.add_argument("ckpt")
    p.add_argument("--data")
    p.add_argument("--sigmas", type=float_list, default=list(PAPER_SIGMAS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="noise_sweep.csv")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("ratio-sweep", help="train over labeled ratios and repeats")
    _train_options(p)
    p.add_argument("--ratios", type=float_list, default=list(PAPER_RATIOS))
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--variants", type=variant_list, default=list(SWEEP_VARIANTS))
    p.add_argument("--experiment", default="ratio-sweep")
    p.add_argument("--jobs", type=int, default=1, help="parallel ratio x repeat cells")
    p.set_defaults(func=cmd_ratio_sweep)

    p = sub.add_parser("compare", help="paired significance table against a baseline")
    p.add_argument("records", nargs="+", help="eval.csv files or directories searched for them")
    p.add_argument("--baseline", type=variant_id, default="B")
    p.add_argument("--out", default="compare.csv")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
