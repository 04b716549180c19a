"""Training loops: plain cross entropy, adversarial training on PGD
examples (optionally with cutout augmentation), and the gradient-aligned
variant that adds a cosine penalty between the student's and a frozen
teacher's input gradients.

The aligned objective on a batch is

    CE(f(x_adv), y) - lam * mean_b cos(flat d f^y/dx (x), flat d t^y/dx (x))

with the CE term on the adversarial images and the alignment term on the
clean ones. The teacher gradient enters as a constant, so nothing
propagates into the teacher. At lam = 0 the cosine branch is skipped
outright rather than multiplied by zero: adding a exact-zero term still
flips -0.0 bit patterns, and the lam=0 run is contractually bit-identical
to plain adversarial training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ag
from .attacks import PGD_EPS, PGD_ITERS, PGD_STEP, pgd
from .attribution import input_gradients
from .data import ImageBatch, cutout, train_val_split
from .inequality import gini
from .models import Model, build_model, load_checkpoint, predict
from .seeding import seed_stream

METHODS = ("standard", "pgdat", "pgdat_cutout", "igd")
GINI_PROBE_CAP = 64  # saliency-gini probe size per epoch; keeps eval cheap


@dataclass(frozen=True)
class TrainConfig:
    method: str
    model: dict  # build_model config
    lam: float = 0.0
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    pgd_eps: float = PGD_EPS
    pgd_step: float = PGD_STEP
    pgd_iters: int = PGD_ITERS
    cutout_hole: int = 8
    val_fraction: float = 0.1
    seed: int = 0
    teacher: str | None = None  # checkpoint path, aligned method only

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown training method {self.method!r}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.method != "igd" and self.lam != 0.0:
            raise ValueError(f"lam has no effect under {self.method}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epoch/batch settings")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0,1)")

    @property
    def selection_metric(self) -> str:
        return "clean_acc" if self.method == "standard" else "adv_acc"


@dataclass(frozen=True)
class LossParts:
    """One batch objective: value, components, and parameter gradients."""

    total: float
    ce: float
    cos_mean: float
    degenerate: np.ndarray  # [B] rows whose cosine was guarded to zero
    grads: dict[str, np.ndarray] = field(repr=False)


def igd_loss(student: Model, teacher: Model | None, x: np.ndarray,
             x_adv: np.ndarray, y: np.ndarray, lam: float) -> LossParts:
    """Gradient-aligned adversarial objective; lam=0 is plain CE on x_adv.

    The alignment compares per-sample input gradients of the true-class
    logit, both taken at the clean x; the student's side stays on the
    tape so the parameter gradient sees through it (double backward).
    """
    y = np.asarray(y)
    g = ag.Graph()
    pv = student.bind(g)
    xa = g.const(np.asarray(x_adv, dtype=np.float64))
    ce = ag.cross_entropy_mean(student.graph_logits(xa, pv), y)
    if lam == 0.0:
        total = ce
        cos_val = 0.0
        flags = np.zeros(len(y), dtype=bool)
    else:
        if teacher is None:
            raise ValueError("gradient alignment needs a teacher model")
        ref = input_gradients(teacher, x, y).reshape(len(y), -1)
        xv = g.var(np.asarray(x, dtype=np.float64))
        score = ag.class_score_rows(student.graph_logits(xv, pv), y)
        (gx,) = ag.grad(ag.sum_all(score), [xv], create_graph=True)
        cos, flags = ag.cosine_rows(ag.flatten(gx), ref)
        cmean = ag.mean_all(cos)
        total = ag.add(ce, ag.scale(cmean, -lam))
        cos_val = float(cmean.value)
    names = list(pv)
    grads = dict(zip(names, ag.grad(total, [pv[n] for n in names])))
    return LossParts(float(total.value), float(ce.value), cos_val, flags, grads)


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    lr: float
    loss: float
    ce: float
    cos: float
    degenerate_frac: float
    clean_acc: float
    adv_acc: float
    saliency_gini: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "epoch", "lr", "loss", "ce", "cos", "degenerate_frac",
            "clean_acc", "adv_acc", "saliency_gini")}


@dataclass(frozen=True)
class TrainRecord:
    method: str
    lam: float
    selection_metric: str
    rows: tuple[EpochRow, ...]
    best_epoch: int  # -1 when no epoch ran
    aborted: bool = False


def accuracy(model: Model, pixels: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, pixels) == np.asarray(labels)))


def pgd_accuracy(model: Model, pixels: np.ndarray, labels: np.ndarray,
                 config: TrainConfig, rng: np.random.Generator) -> float:
    adv = pgd(model, pixels, labels, config.pgd_eps, config.pgd_step,
              config.pgd_iters, rng).x_adv
    return accuracy(model, adv, labels)


def mean_saliency_gini(model: Model, pixels: np.ndarray, labels: np.ndarray,
                       cap: int = GINI_PROBE_CAP) -> float:
    """Mean Gini of per-sample channel-summed |input gradient| maps.

    A sample whose gradient vanishes everywhere has no defined
    concentration and is skipped; all-skipped probes report nan.
    """
    x, y = pixels[:cap], np.asarray(labels)[:cap]
    grads = input_gradients(model, x, y)
    vals = []
    for gi in grads:
        red = np.abs(gi).sum(axis=0) if gi.ndim == 3 else np.abs(gi)
        if red.sum() > 0:
            vals.append(gini(red.reshape(-1)))
    return float(np.mean(vals)) if vals else float("nan")


def _load_teacher(config: TrainConfig, teacher: Model | None) -> Model | None:
    if teacher is not None or config.method != "igd":
        return teacher
    if config.teacher is None:
        raise ValueError("igd config needs a teacher checkpoint or model")
    model, _ = load_checkpoint(config.teacher)
    return model


def train(config: TrainConfig, data: ImageBatch,
          teacher: Model | None = None) -> tuple[Model, TrainRecord]:
    """SGD with momentum, weight decay, and plateau LR decay.

    The held-out validation split drives both the plateau scheduler and
    the returned parameters: the best epoch by clean accuracy for
    standard training, by PGD-eval accuracy for the adversarial methods.
    A non-finite loss aborts and returns the record so far.
    """
    teacher = _load_teacher(config, teacher)
    if config.method == "igd" and teacher is None:
        raise ValueError("igd training needs a teacher")
    student = build_model(config.model, seed=config.seed)
    tr, val = train_val_split(data, config.val_fraction, config.seed)

    velocity = {n: np.zeros_like(p, dtype=np.float64)
                for n, p in student.params.items()}
    lr = config.lr
    best_metric, best_epoch = -np.inf, -1
    best_params = {n: p.copy() for n, p in student.params.items()}
    bad_epochs = 0
    rows: list[EpochRow] = []
    aborted = False

    for epoch in range(config.epochs):
        order = seed_stream(config.seed, "shuffle", epoch).permutation(len(tr))
        sums = np.zeros(3)  # loss, ce, cos accumulators
        degen = 0
        seen = 0
        for bi in range(0, len(order), config.batch_size):
            idx = order[bi:bi + config.batch_size]
            xb, yb = tr.pixels[idx], tr.labels[idx]
            if config.method == "pgdat_cutout":
                xb = cutout(tr.subset(idx), config.cutout_hole,
                            seed_stream(config.seed, "cutout", epoch, bi)).pixels
            try:
                if config.method == "standard":
                    parts = igd_loss(student, None, xb, xb, yb, 0.0)
                else:
                    adv = pgd(student, xb, yb, config.pgd_eps, config.pgd_step,
                              config.pgd_iters,
                              seed_stream(config.seed, "pgd", epoch, bi)).x_adv
                    lam = config.lam if config.method == "igd" else 0.0
                    parts = igd_loss(student, teacher, xb, adv, yb, lam)
            except ag.NonFiniteError:
                aborted = True
                break
            if not np.isfinite(parts.total):
                aborted = True
                break
            # a diverging run overflows here and is caught as a non-finite
            # loss on the next batch, so the cast may warn spuriously
            with np.errstate(over="ignore"):
                for name, p in student.params.items():
                    g = parts.grads[name] + config.weight_decay * p.astype(np.float64)
                    velocity[name] = config.momentum * velocity[name] + g
                    updated = p.astype(np.float64) - lr * velocity[name]
                    student.params[name] = updated.astype(p.dtype)
            sums += (parts.total * len(idx), parts.ce * len(idx),
                     parts.cos_mean * len(idx))
            degen += int(parts.degenerate.sum())
            seen += len(idx)
        if aborted:
            break

        clean = accuracy(student, val.pixels, val.labels)
        adv_acc = pgd_accuracy(student, val.pixels, val.labels, config,
                               seed_stream(config.seed, "eval-pgd", epoch))
        row = EpochRow(epoch, lr, *(sums / max(seen, 1)),
                       degen / max(seen, 1), clean, adv_acc,
                       mean_saliency_gini(student, val.pixels, val.labels))
        rows.append(row)

        metric = getattr(row, config.selection_metric)
        if metric > best_metric:
            best_metric, best_epoch = metric, epoch
            best_params = {n: p.copy() for n, p in student.params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.plateau_patience:
                lr *= config.plateau_factor
                bad_epochs = 0

    student.params = best_params
    record = TrainRecord(config.method, config.lam, config.selection_metric,
                         tuple(rows), best_epoch, aborted)
    return student, record
