"""Experiment protocols behind the command line: runs, sweeps, comparisons.

Every table is a CSV with one provenance comment line (tool version,
config hash, seed) followed by a header row.  Nothing time-dependent is
written, so rerunning a command with the same inputs reproduces its files
byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import warnings
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import CLASS_NAMES, DatasetSplit, add_gaussian_noise, make_split, read_dataset
from .metrics import EvalRecord, aggregate, significance_stars, wilcoxon_signed_rank
from .trainer import (
    TrainConfig,
    dump_config,
    evaluate_model,
    get_variant,
    load_checkpoint,
    save_checkpoint,
    stack_images,
    train_supervised,
    train_uats,
    write_epoch_csv,
)
from .unet import UNet

log = logging.getLogger(__name__)

PAPER_SIGMAS = (0.01, 0.025, 0.05, 0.1, 0.2)
PAPER_RATIOS = (0.05, 0.10, 0.25, 0.50, 1.0)
SWEEP_VARIANTS = ("B", "G", "F")


class DataError(RuntimeError):
    """Missing, inconsistent or unpaired input data."""


# ---------------------------------------------------------------------------
# csv plumbing
# ---------------------------------------------------------------------------

def config_hash(config: TrainConfig | None) -> str:
    text = dump_config(config) if config is not None else ""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def provenance(config: TrainConfig | None, seed, **extra) -> str:
    parts = [f"uats {__version__}", f"config={config_hash(config)}", f"seed={seed}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows, prov: str) -> Path:
    buf = io.StringIO()
    buf.write(f"# {prov}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    return path


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def ratio_tag(ratio: float) -> str:
    return f"{ratio:g}"


# ---------------------------------------------------------------------------
# per-sample evaluation records
# ---------------------------------------------------------------------------

EVAL_HEADER = ["sample_id", "variant", "ratio", "repeat", "class", "class_name", "dc", "abd"]


def record_rows(records, ratio, repeat) -> list[list]:
    rows = []
    for r in records:
        for s in sorted(r.dc):
            rows.append([r.sample_id, r.variant, ratio_tag(ratio), repeat, s, CLASS_NAMES[s],
                         float(r.dc[s]), float(r.abd.get(s, math.nan))])
    return rows


@dataclass(frozen=True)
class PairKey:
    ratio: str
    repeat: str
    sample_id: str


def read_records(paths) -> dict:
    """Per-variant records keyed by ``PairKey`` from one or more eval CSVs."""
    out: dict = defaultdict(dict)
    for path in paths:
        try:
            rows = read_csv(path)
        except FileNotFoundError:
            raise DataError(f"no such records file: {path}") from None
        if rows and set(EVAL_HEADER) - set(rows[0]):
            raise DataError(f"{path}: missing columns {sorted(set(EVAL_HEADER) - set(rows[0]))}")
        for row in rows:
            key = PairKey(row["ratio"], row["repeat"], row["sample_id"])
            rec = out[row["variant"]].setdefault(key, EvalRecord(row["sample_id"], row["variant"]))
            s = int(row["class"])
            if s in rec.dc:
                raise DataError(f"{path}: duplicate record for {row['variant']} {key} class {s}")
            rec.dc[s] = float(row["dc"])
            rec.abd[s] = float(row["abd"])
    return dict(out)


def summary_rows(records) -> list[list]:
    """(variant, class, metric, mean, sd, n) recomputed from per-sample records."""
    return [[v, s, m, st.mean, st.sd, st.n] for (v, s, m), st in aggregate(records).items()]


# ---------------------------------------------------------------------------
# single training run
# ---------------------------------------------------------------------------

def run_dir(root, experiment, variant, ratio, repeat) -> Path:
    return Path(root) / experiment / variant / ratio_tag(ratio) / str(repeat)


def split_ids(split: DatasetSplit) -> dict:
    return {"labeled": [s.id for s in split.labeled], "validation": [s.id for s in split.validation]}


def load_split(data_dir, ratio, repeat, seed=0) -> DatasetSplit:
    data_dir = Path(data_dir)
    try:
        dataset = read_dataset(data_dir)
    except FileNotFoundError as exc:
        raise DataError(f"{exc}; run `uats generate` first") from None
    try:
        return make_split(dataset, ratio, repeat=repeat, seed=seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None


@dataclass
class RunResult:
    variant: str
    ratio: float
    repeat: int
    model: UNet
    records: list
    directory: Path


def _write_run(directory, variant, model, logs, records, config, split, stage) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    prov = provenance(config, config.seed, variant=variant, ratio=ratio_tag(split.ratio), repeat=split.repeat)
    extra = {"stage": stage, "variant": variant, "ratio": split.ratio, "repeat": split.repeat,
             "split": split_ids(split), "test_hash": split.test_hash()}
    save_checkpoint(directory / "model.ckpt", model, config, extra=extra)
    write_epoch_csv(directory / "epochs.csv", logs, config.model.num_classes, prov)
    write_csv(directory / "eval.csv", EVAL_HEADER, record_rows(records, split.ratio, split.repeat), prov)


def train_run(config: TrainConfig, split: DatasetSplit, variant: str, out_dir, pretrained_path=None,
              pretrained: UNet | None = None) -> RunResult:
    """Stage I (unless a pretrained model is given), then Stage II unless ``variant`` is B."""
    v = get_variant(variant)
    if pretrained_path is not None:
        pretrained = load_pretrained(pretrained_path, split)
    logs = []
    if pretrained is None:
        pretrained, logs = train_supervised(config, split)
    model, stage = pretrained, 1
    if v.stage2:
        model, logs2 = train_uats(config, split, pretrained, v)
        logs = logs + logs2
        stage = 2
    elif pretrained_path is not None:
        raise DataError("variant B is Stage I only; drop --from")
    records = evaluate_model(model, split.test, v.id)
    _write_run(Path(out_dir), v.id, model, logs, records, config, split, stage)
    return RunResult(v.id, split.ratio, split.repeat, model, records, Path(out_dir))


def load_pretrained(path, split: DatasetSplit) -> UNet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Stage-I checkpoint {path} does not exist")
    ck = load_checkpoint(path)
    stage = ck.extra.get("stage")
    if stage != 1:
        raise DataError(f"{path} holds a stage-{stage} model; Stage II needs a Stage-I checkpoint")
    if ck.extra.get("split") != split_ids(split):
        raise DataError(f"{path} was trained on a different split (ratio/repeat/seed mismatch)")
    return ck.model


# ---------------------------------------------------------------------------
# noise sweep
# ---------------------------------------------------------------------------

NOISE_HEADER = ["sigma", "snr", "class", "class_name", "dc_mean", "dc_sd", "abd_mean", "abd_sd", "n", "n_abd_undefined"]


def noise_sweep(model: UNet, samples, sigmas=PAPER_SIGMAS, seed: int = 0, variant: str = "model") -> list[list]:
    """Per-sigma, per-class DC/ABD on noise-injected copies of ``samples``; sigma 0 is the clean baseline.

    Sample ``i`` always draws the same standard normal field, scaled by sigma.
    """
    clean = stack_images(samples)
    rows = []
    for sigma in (0.0, *sigmas):
        if sigma == 0:
            images, snr = clean, math.inf
        else:
            noisy, snrs = [], []
            for i, img in enumerate(clean):
                out, r = add_gaussian_noise(img, sigma, seed=[seed, i])
                noisy.append(out)
                snrs.append(r)
            images, snr = np.stack(noisy), float(np.mean(snrs))
        summ = aggregate(evaluate_model(model, samples, variant, images=images))
        for s in range(1, model.config.num_classes):
            dc, abd = summ[(variant, s, "dc")], summ[(variant, s, "abd")]
            rows.append([float(sigma), snr, s, CLASS_NAMES[s], dc.mean, dc.sd, abd.mean, abd.sd, dc.n,
                         abd.n_undefined])
    return rows


def mean_dc_by_sigma(rows) -> dict:
    out = defaultdict(list)
    for row in rows:
        out[row[0]].append(row[4])
    return {k: float(np.mean(v)) for k, v in out.items()}


# ---------------------------------------------------------------------------
# ratio sweep
# ---------------------------------------------------------------------------

SWEEP_HEADER = ["ratio", "repeat", "variant", "class", "class_name", "dc", "status"]
SWEEP_SUMMARY_HEADER = ["ratio", "variant", "class", "class_name", "dc_mean", "dc_sd", "n_repeats"]


@dataclass(frozen=True)
class SweepJob:
    data_dir: str
    config: dict
    ratio: float
    repeat: int
    variants: tuple
    out_root: str
    experiment: str


def run_sweep_job(job: SweepJob) -> list[list]:
    """One ratio x repeat cell: a shared Stage-I model, then every Stage-II variant from it."""
    config = TrainConfig.from_dict(job.config)
    try:
        split = load_split(job.data_dir, job.ratio, job.repeat, seed=config.seed)
    except DataError as exc:
        log.warning("skipping ratio %s repeat %d: %s", job.ratio, job.repeat, exc)
        return [[ratio_tag(job.ratio), job.repeat, v, "", "", math.nan, f"skipped: {exc}"] for v in job.variants]
    stage1, logs1 = train_supervised(config, split)
    rows = []
    for vid in job.variants:
        d = run_dir(job.out_root, job.experiment, vid, job.ratio, job.repeat)
        if get_variant(vid).stage2:
            res = train_run(config, split, vid, d, pretrained=stage1)
        else:
            records = evaluate_model(stage1, split.test, vid)
            _write_run(d, vid, stage1, logs1, records, config, split, 1)
            res = RunResult(vid, job.ratio, job.repeat, stage1, records, d)
        summ = aggregate(res.records)
        for s in range(1, config.model.num_classes):
            rows.append([ratio_tag(job.ratio), job.repeat, vid, s, CLASS_NAMES[s], summ[(vid, s, "dc")].mean, "ok"])
    return rows


def ratio_sweep(data_dir, config: TrainConfig, ratios=PAPER_RATIOS, repeats: int = 3, variants=SWEEP_VARIANTS,
                out_root="out", experiment="ratio-sweep", jobs: int = 1) -> tuple[list, list]:
    """Rows of (ratio, repeat, variant, class, dc) plus the mean-over-repeats summary."""
    for v in variants:
        get_variant(v)
    cells = [SweepJob(str(data_dir), config.to_dict(), float(r), k, tuple(variants), str(out_root), experiment)
             for r in ratios for k in range(repeats)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run_sweep_job, cells))
    else:
        parts = [run_sweep_job(c) for c in cells]
    rows = [row for part in parts for row in part]
    return rows, sweep_summary(rows)


def sweep_summary(rows) -> list[list]:
    groups = defaultdict(list)
    for ratio, _, variant, s, name, dc, status in rows:
        if status == "ok":
            groups[(float(ratio), variant, s, name)].append(dc)
    out = []
    for (ratio, variant, s, name), vals in sorted(groups.items()):
        a = np.asarray(vals)
        out.append([ratio_tag(ratio), variant, s, name, float(a.mean()), float(a.std()), a.size])
    return out


# ---------------------------------------------------------------------------
# significance comparison
# ---------------------------------------------------------------------------

COMPARE_HEADER = ["variant", "class", "metric", "mean", "sd", "n", "p_vs_baseline", "stars"]


def compare(by_variant: dict, baseline: str = "B") -> list[list]:
    """Paired Wilcoxon test of every variant against ``baseline`` per class and metric."""
    if baseline not in by_variant:
        raise DataError(f"no records for baseline variant {baseline!r}; found {sorted(by_variant)}")
    base = by_variant[baseline]
    rows = []
    for variant in sorted(by_variant):
        recs = by_variant[variant]
        if set(recs) != set(base):
            missing = len(set(base) - set(recs))
            extra = len(set(recs) - set(base))
            raise DataError(f"records of {variant} are not paired with {baseline}: "
                            f"{missing} missing, {extra} unmatched samples")
        keys = sorted(recs, key=lambda k: (k.ratio, k.repeat, k.sample_id))
        summ = aggregate(recs[k] for k in keys)
        for (v, s, metric), st in summ.items():
            a = np.array([getattr(recs[k], metric)[s] for k in keys])
            b = np.array([getattr(base[k], metric)[s] for k in keys])
            ok = ~(np.isnan(a) | np.isnan(b))
            if ok.sum() == 0:
                p = math.nan
            else:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    p = wilcoxon_signed_rank(a[ok], b[ok]).pvalue
            stars = significance_stars(p) if not math.isnan(p) else ""
            rows.append([v, s, metric, st.mean, st.sd, st.n, p, stars])
    return rows
