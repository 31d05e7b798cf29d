"""Two-stage training: supervised warm-up, then uncertainty-aware self-learning.

Stage II runs one fixed sequence per epoch::

    validate -> gate classes -> update ensemble -> pseudo labels + mask -> train

The registry in ``VARIANTS`` switches individual mechanisms on and off to
give the baseline, the comparison methods and the ablations.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint
from .data import AugmentConfig, DatasetSplit, GeometricTransform
from .losses import consistency_loss, effective_lambda, per_class_dice, task_loss
from .metrics import EvalRecord, evaluate_labels
from .ssl import (
    ConfidenceConfig,
    EnsembleBuffer,
    build_confidence_mask,
    extract_pseudo_labels,
    gate_classes,
    init_ensemble,
    mc_entropy_confidence,
    one_hot,
    softmax_confidence,
    update_ensemble,
)
from .tensor import AdamState, ConfigurationError, TrainingError, adam_update
from .unet import UNet, UNetConfig, predict_batched

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariantSpec:
    """Which Stage-II mechanisms a training variant uses.

    ``pl_source`` is where pseudo labels come from ("ensemble", "prediction"
    or "none"); ``pl_update_rule`` is when they are refreshed;
    ``ensemble_update`` is when the ensemble absorbs new predictions.
    """
    id: str
    name: str
    stage2: bool = True
    use_consistency: bool = True
    use_confidence: bool = True
    pl_source: str = "ensemble"
    pl_update_rule: str = "class-gated"
    ensemble_update: str = "class-gated"
    confidence_measure: str = "softmax"

    @property
    def use_ensemble_pl(self) -> bool:
        return self.pl_source == "ensemble"

    @property
    def uses_unlabeled(self) -> bool:
        return self.stage2

    @property
    def needs_ensemble(self) -> bool:
        return self.use_consistency or self.pl_source == "ensemble"


VARIANTS = {
    "B": VariantSpec("B", "supervised", stage2=False, use_consistency=False, use_confidence=False,
                     pl_source="none", pl_update_rule="never", ensemble_update="none"),
    "C": VariantSpec("C", "temporal ensembling", use_consistency=True, use_confidence=False,
                     pl_source="none", pl_update_rule="never", ensemble_update="every-epoch"),
    "D": VariantSpec("D", "self-learning", use_consistency=False, use_confidence=False,
                     pl_source="prediction", pl_update_rule="interval", ensemble_update="none"),
    "E": VariantSpec("E", "pseudo-update", use_consistency=False, use_confidence=False,
                     pl_source="prediction", pl_update_rule="on-val-improve", ensemble_update="none"),
    "F": VariantSpec("F", "UATS entropy", confidence_measure="mc_entropy"),
    "G": VariantSpec("G", "UATS softmax"),
    "H": VariantSpec("H", "UATS without consistency", use_consistency=False),
    "I": VariantSpec("I", "UATS without confidence", use_confidence=False),
    "J": VariantSpec("J", "UATS without ensemble pseudo labels", pl_source="prediction",
                     pl_update_rule="every-epoch"),
}


def get_variant(variant_id) -> VariantSpec:
    if isinstance(variant_id, VariantSpec):
        return variant_id
    try:
        return VARIANTS[str(variant_id).upper()]
    except KeyError:
        raise ConfigurationError(
            f"unknown variant {variant_id!r}; valid ids: {', '.join(VARIANTS)}"
        ) from None


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    max_epochs: int = 300
    patience: int = 30
    stage2_max_epochs: int | None = None
    stage2_patience: int | None = None
    # fine-tuning a converged Stage-I model at the Stage-I rate undoes it
    stage2_lr: float | None = 5e-5
    alpha: float = 0.6
    lam: float = 1.0
    variant: str = "G"
    seed: int = 0
    pl_interval: int = 50
    augment: bool = True
    min_batches: int = 1
    prior_bias: bool = False  # see set_prior_bias
    model: UNetConfig = field(default_factory=UNetConfig)
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.stage2_lr is not None and self.stage2_lr <= 0:
            raise ConfigurationError("stage2_lr must be positive")
        if self.patience >= self.max_epochs:
            raise ConfigurationError(f"patience ({self.patience}) must be below max_epochs ({self.max_epochs})")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.min_batches < 1:
            raise ConfigurationError("min_batches must be >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        get_variant(self.variant)
        if len(self.confidence.fractions) != self.model.num_classes:
            raise ConfigurationError(
                f"{len(self.confidence.fractions)} confidence fractions for {self.model.num_classes} classes"
            )

    @property
    def s2_max_epochs(self) -> int:
        return self.stage2_max_epochs or self.max_epochs

    @property
    def s2_lr(self) -> float:
        return self.stage2_lr or self.lr

    def stage_lr(self, stage: int) -> float:
        return self.lr if stage == 1 else self.s2_lr

    @property
    def s2_patience(self) -> int:
        return self.stage2_patience or self.patience

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["confidence"]["fractions"] = list(self.confidence.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = UNetConfig(**d.pop("model", {}))
        conf = dict(d.pop("confidence", {}))
        if "fractions" in conf:
            conf["fractions"] = tuple(float(f) for f in conf["fractions"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(model=model, confidence=ConfidenceConfig(**conf), **d)


PRESETS = {
    # hyper-parameters reported for the prostate task
    "paper": {"lr": 5e-5, "batch_size": 2, "max_epochs": 300, "patience": 30, "alpha": 0.6, "lam": 1.0,
              "confidence": {"measure": "softmax", "passes": 10, "fractions": [0.5, 0.5, 0.5, 0.1, 0.1]}},
    "desk": {"lr": 1e-3, "batch_size": 4},
}


def load_config(path) -> TrainConfig:
    """Read a YAML config; an optional ``preset`` key supplies defaults."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    preset = raw.pop("preset", None)
    base = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = {k: (dict(v) if isinstance(v, dict) else v) for k, v in PRESETS[preset].items()}
    for k, v in raw.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k].update(v)
        else:
            base[k] = v
    return TrainConfig.from_dict(base)


def dump_config(config: TrainConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def stack_images(samples) -> np.ndarray:
    if not samples:
        return np.zeros((0, 1, 0, 0))
    return np.stack([s.image for s in samples]).astype(np.float64)


def stack_labels(samples) -> np.ndarray:
    return np.stack([s.label for s in samples]).astype(np.int64)


def validation_loss(model: UNet, images, labels, num_classes):
    """Per-class validation loss ``-cDC_s`` of the deterministic prediction."""
    probs = predict_batched(model, images)
    values, _, _ = per_class_dice(one_hot(labels, num_classes), probs)
    return -values


@dataclass
class EpochLog:
    stage: int
    epoch: int
    train_task: float
    train_cons: float
    lambda_effective: float
    val_loss: float
    val_per_class: list
    gated: list = field(default_factory=list)
    pl_refreshed: bool = False
    selected: list = field(default_factory=list)
    wall_time: float = 0.0

    def row(self) -> list:
        return [self.stage, self.epoch, repr(self.train_task), repr(self.train_cons),
                repr(self.lambda_effective), repr(self.val_loss),
                *(repr(v) for v in self.val_per_class),
                " ".join(map(str, self.gated)), int(self.pl_refreshed),
                " ".join(map(str, self.selected))]

    def comparable(self) -> tuple:
        """Everything except the wall-clock time."""
        return tuple(self.row())


def log_header(num_classes: int) -> list:
    return (["stage", "epoch", "train_task", "train_cons", "lambda_effective", "val_loss"]
            + [f"val_c{s}" for s in range(num_classes)] + ["gated", "pl_refreshed", "selected"])


def write_epoch_csv(path, logs, num_classes, provenance: str = "") -> None:
    buf = io.StringIO()
    if provenance:
        buf.write(f"# {provenance}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(log_header(num_classes))
    for entry in logs:
        w.writerow(entry.row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# training session
# ---------------------------------------------------------------------------

class Session:
    """Resumable state of one training stage.

    Stage 1 trains on labeled data only.  Stage 2 additionally uses the
    unlabeled pool according to ``variant``.  All randomness of epoch ``e``
    derives from ``(seed, stage, e)`` so a restored session continues
    exactly as an uninterrupted one.
    """

    def __init__(self, config: TrainConfig, split: DatasetSplit, stage: int, model: UNet,
                 variant: VariantSpec | None = None):
        self.config = config
        self.split = split
        self.stage = stage
        self.variant = get_variant(variant or config.variant)
        self.model = model
        self.K = config.model.num_classes
        self.adam = AdamState(lr=config.stage_lr(stage))
        self.epoch = 0
        self.best_val = math.inf
        self.best_epoch = -1
        self.best_snapshot = model.snapshot()
        self.logs: list[EpochLog] = []
        self.prev_task: float | None = None
        self.prev_cons: float | None = None
        self.stopped = False

        self.lab_images = stack_images(split.labeled)
        self.lab_labels = stack_labels(split.labeled)
        self.val_images = stack_images(split.validation)
        self.val_labels = stack_labels(split.validation)
        if len(self.lab_images) == 0 or len(self.val_images) == 0:
            raise ConfigurationError("split needs labeled training and validation samples")
        use_unl = stage == 2 and self.variant.uses_unlabeled
        self.unl_images = stack_images(split.unlabeled) if use_unl and split.unlabeled else np.zeros(
            (0,) + self.lab_images.shape[1:])
        self.n_lab = len(self.lab_images)
        self.n_unl = len(self.unl_images)

        self.ensemble: EnsembleBuffer | None = None
        self.pl_probs: np.ndarray | None = None  # unlabeled probabilities behind the current pseudo labels
        self.pl_best_val = math.inf
        self.current_val_pc = None
        if stage == 2:
            self._init_stage2()

    @property
    def max_epochs(self) -> int:
        return self.config.max_epochs if self.stage == 1 else self.config.s2_max_epochs

    @property
    def patience(self) -> int:
        return self.config.patience if self.stage == 1 else self.config.s2_patience

    # -- stage II bookkeeping ---------------------------------------------

    def _all_train_images(self):
        return np.concatenate([self.lab_images, self.unl_images], axis=0)

    def _init_stage2(self):
        self.current_val_pc = validation_loss(self.model, self.val_images, self.val_labels, self.K)
        self.pl_best_val = float(self.current_val_pc.sum())
        ids = [s.id for s in self.split.labeled] + [s.id for s in self.split.unlabeled][:self.n_unl]
        if self.variant.needs_ensemble:
            self.ensemble = init_ensemble(self.model, self._all_train_images(), self.current_val_pc,
                                          alpha=self.config.alpha, ids=ids)
        if self.variant.pl_source == "prediction" and self.n_unl:
            self.pl_probs = predict_batched(self.model, self.unl_images)

    def _prepare_targets(self, e):
        """Steps before training in a Stage-II epoch: gate, ensemble update, pseudo labels, mask."""
        v = self.variant
        info = {"gated": [], "pl_refreshed": False, "selected": []}
        val_pc = self.current_val_pc
        need_now = v.ensemble_update != "none" or v.pl_update_rule in ("every-epoch", "interval", "on-val-improve")
        preds = predict_batched(self.model, self._all_train_images()) if need_now else None

        if self.ensemble is not None:
            if v.ensemble_update == "class-gated":
                improved = gate_classes(self.ensemble, val_pc)
            elif v.ensemble_update == "every-epoch":
                improved = set(range(self.K)) if e > 0 else set()
            else:
                improved = set()
            update_ensemble(self.ensemble, preds, improved)
            info["gated"] = sorted(improved)

        if self.n_unl == 0 or v.pl_source == "none":
            return None, None, info
        unl_now = preds[self.n_lab:] if preds is not None else None
        if v.pl_source == "ensemble":
            src = self.ensemble.E[self.n_lab:]
            info["pl_refreshed"] = bool(info["gated"])
        else:
            refresh = False
            if v.pl_update_rule == "every-epoch":
                refresh = True
            elif v.pl_update_rule == "interval":
                refresh = e > 0 and e % self.config.pl_interval == 0
            elif v.pl_update_rule == "on-val-improve":
                total = float(val_pc.sum())
                refresh = e > 0 and total < self.pl_best_val
                if refresh:
                    self.pl_best_val = total
            if refresh:
                self.pl_probs = unl_now
            info["pl_refreshed"] = refresh
            src = self.pl_probs
        labels = extract_pseudo_labels(src)
        if v.use_confidence:
            fractions = self.config.confidence.fractions
            if v.confidence_measure == "mc_entropy":
                conf = mc_entropy_confidence(self.model, self.unl_images, self.config.confidence.passes,
                                             seed=int(self._seed(e, 7)))
            else:
                conf = softmax_confidence(src, labels)
        else:
            fractions = (1.0,) * self.K
            conf = np.zeros(labels.shape)
        mask, counts = build_confidence_mask(conf, labels, np.zeros(self.n_unl, dtype=bool), fractions)
        info["selected"] = [counts[s] for s in range(self.K)]
        return labels, mask, info

    # -- epochs -------------------------------------------------------------

    def _seed(self, e, *extra):
        return np.random.SeedSequence([self.config.seed, self.stage, e, *extra]).generate_state(1)[0]

    def _batches(self, rng):
        """Lists of (pool, index) pairs; stage II batches mix pools and always hold a labeled sample."""
        B = self.config.batch_size
        lab = [("L", int(i)) for i in rng.permutation(self.n_lab)]
        if self.n_unl == 0:
            if math.ceil(self.n_lab / B) >= self.config.min_batches:
                return [lab[i:i + B] for i in range(0, len(lab), B)]
            # tiny labeled sets: cycle through fresh permutations
            while len(lab) < self.config.min_batches * B:
                lab += [("L", int(i)) for i in rng.permutation(self.n_lab)]
            return [lab[i * B:(i + 1) * B] for i in range(self.config.min_batches)]
        unl = [("U", int(i)) for i in rng.permutation(self.n_unl)]
        k_lab = min(B - 1, max(1, round(B * self.n_lab / (self.n_lab + self.n_unl)))) if B > 1 else 1
        k_unl = max(B - k_lab, 1)
        n_batches = max(math.ceil(self.n_unl / k_unl), math.ceil(self.n_lab / k_lab))
        batches = []
        lab_cycle = []
        for b in range(n_batches):
            while len(lab_cycle) < k_lab:
                lab_cycle += [("L", int(i)) for i in rng.permutation(self.n_lab)]
            chunk = lab_cycle[:k_lab]
            lab_cycle = lab_cycle[k_lab:]
            chunk += unl[b * k_unl:(b + 1) * k_unl]
            batches.append(chunk)
        return batches

    def run_epoch(self) -> EpochLog:
        if self.stopped:
            raise RuntimeError("session already finished")
        t0 = time.perf_counter()
        e = self.epoch
        cfg = self.config
        v = self.variant
        K = self.K
        rng = np.random.default_rng(self._seed(e))
        pl_labels = mask_unl = None
        info = {"gated": [], "pl_refreshed": False, "selected": []}
        lam_eff = 0.0
        if self.stage == 2:
            pl_labels, mask_unl, info = self._prepare_targets(e)
            if v.use_consistency:
                lam_eff = effective_lambda(cfg.lam, self.prev_task, self.prev_cons)

        tasks, conss = [], []
        for bi, batch in enumerate(self._batches(rng)):
            xs, ys, ms, es = [], [], [], []
            for pool, i in batch:
                if pool == "L":
                    x = self.lab_images[i]
                    y = self.lab_labels[i]
                    m = np.ones(y.shape, dtype=bool)
                    ens_i = i
                else:
                    x = self.unl_images[i]
                    if pl_labels is not None:
                        y = pl_labels[i]
                        m = mask_unl[i]
                    else:
                        y = np.zeros(x.shape[1:], dtype=np.int64)
                        m = np.zeros(x.shape[1:], dtype=bool)
                    ens_i = self.n_lab + i
                ens = self.ensemble.E[ens_i] if (self.ensemble is not None and v.use_consistency) else None
                if cfg.augment:
                    t = GeometricTransform.sample(rng.integers(2 ** 63))
                    x = t.apply(x, order=1)
                    y = t.apply(y, order=0)
                    m = t.apply(m, order=0)
                    if ens is not None:
                        ens = t.apply(ens, order=1)
                xs.append(x)
                ys.append(y)
                ms.append(m)
                es.append(ens)
            X = np.stack(xs)
            Y = one_hot(np.stack(ys), K)
            M = np.stack(ms)
            probs = self.model.forward(X, train=True, seed=self._seed(e, 1, bi))
            grad = np.zeros_like(probs)
            if M.any():
                t_val, _, g_task = task_loss(Y, probs, M)
                grad += g_task
                tasks.append(t_val)
            if self.stage == 2 and v.use_consistency:
                E = np.stack(es)
                c_val, g_cons = consistency_loss(probs, E)
                grad += lam_eff * g_cons
                conss.append(c_val)
            if not np.isfinite(grad).all():
                raise TrainingError(f"non-finite loss gradient in stage {self.stage}, epoch {e}, batch {bi}")
            grads = self.model.backward(grad)
            adam_update(self.adam, self.model.params, grads)

        mean_task = float(np.mean(tasks)) if tasks else 0.0
        mean_cons = float(np.mean(conss)) if conss else 0.0
        if not (math.isfinite(mean_task) and math.isfinite(mean_cons)):
            raise TrainingError(f"training diverged in stage {self.stage}, epoch {e}")
        self.prev_task, self.prev_cons = mean_task, mean_cons

        val_pc = validation_loss(self.model, self.val_images, self.val_labels, K)
        self.current_val_pc = val_pc
        val_total = float(val_pc.sum())
        if val_total < self.best_val:
            self.best_val = val_total
            self.best_epoch = e
            self.best_snapshot = self.model.snapshot()
        entry = EpochLog(self.stage, e, mean_task, mean_cons, lam_eff, val_total, [float(x) for x in val_pc],
                         info["gated"], info["pl_refreshed"], info["selected"], time.perf_counter() - t0)
        self.logs.append(entry)
        self.epoch += 1
        if self.epoch >= self.max_epochs or self.epoch - 1 - self.best_epoch >= self.patience:
            self.stopped = True
        log.debug("stage %d epoch %d task %.4f cons %.4f val %.4f", self.stage, e, mean_task, mean_cons, val_total)
        return entry

    def run(self) -> tuple[UNet, list[EpochLog]]:
        while not self.stopped:
            self.run_epoch()
        return self.best_model(), self.logs

    def best_model(self) -> UNet:
        m = UNet(self.model.config)
        m.load_arrays(self.best_snapshot)
        return m

    # -- persistence ----------------------------------------------------------

    def state(self) -> tuple[dict, dict]:
        arrays = dict(self.model.state_arrays())
        arrays.update({f"best/{k}": v for k, v in self.best_snapshot.items()})
        for name in self.adam.m:
            arrays[f"adam_m/{name}"] = self.adam.m[name]
            arrays[f"adam_v/{name}"] = self.adam.v[name]
        if self.ensemble is not None:
            arrays.update(self.ensemble.arrays())
        if self.pl_probs is not None:
            arrays["pl_probs"] = self.pl_probs
        if self.current_val_pc is not None:
            arrays["current_val_pc"] = self.current_val_pc
        meta = {
            "kind": "session",
            "stage": self.stage,
            "variant": self.variant.id,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "best_val": self.best_val,
            "best_epoch": self.best_epoch,
            "prev_task": self.prev_task,
            "prev_cons": self.prev_cons,
            "pl_best_val": self.pl_best_val,
            "stopped": self.stopped,
            "adam_t": self.adam.t,
            "logs": [dataclasses.asdict(entry) | {"wall_time": 0.0} for entry in self.logs],
            "split": {"labeled": [s.id for s in self.split.labeled],
                      "unlabeled": [s.id for s in self.split.unlabeled],
                      "validation": [s.id for s in self.split.validation]},
        }
        return arrays, meta

    def save(self, path) -> Path:
        arrays, meta = self.state()
        return checkpoint.save(path, arrays, meta)

    @classmethod
    def restore(cls, path, split: DatasetSplit) -> "Session":
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "session":
            raise checkpoint.CheckpointError(f"{path} does not hold a training session")
        config = TrainConfig.from_dict(meta["config"])
        model = UNet(config.model)
        # the constructor of a stage-2 session initialises the ensemble; restoring overwrites it
        model.load_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("best/")})
        sess = cls(config, split, meta["stage"], model, meta["variant"])
        sess.model.load_arrays(arrays)
        sess.best_snapshot = {k[5:]: v.copy() for k, v in arrays.items() if k.startswith("best/")}
        sess.adam.t = meta["adam_t"]
        for k, v in arrays.items():
            if k.startswith("adam_m/"):
                sess.adam.m[k[7:]] = v.copy()
            elif k.startswith("adam_v/"):
                sess.adam.v[k[7:]] = v.copy()
        if sess.ensemble is not None:
            sess.ensemble = EnsembleBuffer.from_arrays(arrays, config.alpha, sess.ensemble.ids)
        if "pl_probs" in arrays:
            sess.pl_probs = arrays["pl_probs"].copy()
        if "current_val_pc" in arrays:
            sess.current_val_pc = arrays["current_val_pc"].copy()
        sess.epoch = meta["epoch"]
        sess.best_val = meta["best_val"]
        sess.best_epoch = meta["best_epoch"]
        sess.prev_task = meta["prev_task"]
        sess.prev_cons = meta["prev_cons"]
        sess.pl_best_val = meta["pl_best_val"]
        sess.stopped = meta["stopped"]
        sess.logs = [EpochLog(**entry) for entry in meta["logs"]]
        return sess


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def train_supervised(config: TrainConfig, split: DatasetSplit) -> tuple[UNet, list[EpochLog]]:
    """Stage I: labeled data only; returns the lowest-validation-loss model."""
    model = UNet(dataclasses.replace(config.model, seed=config.seed))
    if config.prior_bias:
        set_prior_bias(model, [s.label for s in split.labeled])
    return Session(config, split, 1, model, "B").run()


def set_prior_bias(model: UNet, labels) -> np.ndarray:
    """Start the softmax head at the labeled class frequencies.

    Off by default: the continuous Dice of a class is blind to the scale of
    its in-region probability, so once the out-of-region mass is small its
    gradient vanishes.  Starting small classes near zero everywhere leaves
    them there and their argmax never forms.
    """
    K = model.config.num_classes
    counts = np.zeros(K)
    for lab in labels:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=K)[:K]
    prior = (counts + 1.0) / (counts.sum() + K)
    model.params["head.b"] = np.log(prior) - np.log(prior).mean()
    return prior


def train_uats(config: TrainConfig, split: DatasetSplit, pretrained: UNet | None,
               variant=None) -> tuple[UNet, list[EpochLog]]:
    """Stage II starting from a Stage-I model."""
    if pretrained is None:
        raise ConfigurationError("Stage II needs a pretrained Stage-I model")
    v = get_variant(variant or config.variant)
    if not v.stage2:
        raise ConfigurationError(f"variant {v.id} has no Stage II")
    return Session(config, split, 2, pretrained.copy(), v).run()


def evaluate_model(model: UNet, samples, variant: str, spacing=(1.0, 1.0), images=None) -> list[EvalRecord]:
    """Per-sample DC/ABD for every foreground class on labeled ``samples``."""
    imgs = stack_images(samples) if images is None else images
    labels = extract_pseudo_labels(predict_batched(model, imgs))
    K = model.config.num_classes
    return [evaluate_labels(labels[i], s.label, K, s.id, variant, spacing) for i, s in enumerate(samples)]


@dataclass
class VariantResult:
    variant: VariantSpec
    model: UNet
    records: list
    logs: list
    pretrained: UNet


def run_variant(variant, config: TrainConfig, split: DatasetSplit, pretrained: UNet | None = None) -> VariantResult:
    """Train (Stage I if needed, then Stage II unless the variant is supervised) and evaluate on test."""
    v = get_variant(variant)
    logs = []
    if pretrained is None:
        pretrained, logs = train_supervised(config, split)
    model = pretrained
    if v.stage2:
        model, logs2 = train_uats(config, split, pretrained, v)
        logs = logs + logs2
    records = evaluate_model(model, split.test, v.id) if split.test else []
    return VariantResult(v, model, records, logs, pretrained)


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: UNet, config: TrainConfig | None = None, ensemble: EnsembleBuffer | None = None,
                    adam: AdamState | None = None, epoch: int = 0, extra: dict | None = None) -> Path:
    arrays = dict(model.state_arrays())
    if ensemble is not None:
        arrays.update(ensemble.arrays())
    if adam is not None:
        for name in adam.m:
            arrays[f"adam_m/{name}"] = adam.m[name]
            arrays[f"adam_v/{name}"] = adam.v[name]
    meta = {
        "kind": "model",
        "unet": model.config.to_dict(),
        "config": config.to_dict() if config is not None else None,
        "epoch": epoch,
        "adam_t": adam.t if adam is not None else 0,
        "adam_lr": adam.lr if adam is not None else None,
        "alpha": ensemble.alpha if ensemble is not None else None,
        "ensemble_ids": ensemble.ids if ensemble is not None else None,
        "extra": extra or {},
    }
    return checkpoint.save(path, arrays, meta)


@dataclass
class LoadedCheckpoint:
    model: UNet
    config: TrainConfig | None
    ensemble: EnsembleBuffer | None
    adam: AdamState | None
    epoch: int
    extra: dict


def load_checkpoint(path) -> LoadedCheckpoint:
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "model":
        raise checkpoint.CheckpointError(f"{path} is not a model checkpoint")
    model = UNet(UNetConfig(**meta["unet"]))
    model.load_arrays(arrays)
    config = TrainConfig.from_dict(meta["config"]) if meta["config"] else None
    ensemble = None
    if "ensemble/E" in arrays:
        ensemble = EnsembleBuffer.from_arrays(arrays, meta["alpha"], meta["ensemble_ids"])
    adam = None
    if meta["adam_t"]:
        lr = meta.get("adam_lr") or (config.lr if config else 1e-3)
        adam = AdamState(lr=lr, t=meta["adam_t"])
        for k, v in arrays.items():
            if k.startswith("adam_m/"):
                adam.m[k[7:]] = v
            elif k.startswith("adam_v/"):
                adam.v[k[7:]] = v
    return LoadedCheckpoint(model, config, ensemble, adam, meta["epoch"], meta["extra"])
