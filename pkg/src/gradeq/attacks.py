"""Perturbation suite: PGD, attribution-guided noise and occlusion,
random-pixel noise, synthetic corruptions, and the joint-correct
error-rate protocol.

Conventions: images are [C, H, W] in [0,1]; batches stack on a leading
axis. Attribution-guided attacks take a Mask over pixels (all channels
of a masked pixel are touched). Every stochastic op draws from a caller
supplied Generator, so identical streams reproduce identical outputs
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ag
from .attribution import attribute
from .models import Model, predict
from .seeding import seed_stream

PGD_EPS = 8.0 / 255.0
PGD_STEP = 2.0 / 255.0
PGD_ITERS = 10

COLORS = {"black": 0.0, "gray": 0.5, "white": 1.0}


@dataclass(frozen=True)
class Mask:
    """Binary pixel selection over an [H, W] grid."""

    m: np.ndarray

    def __post_init__(self):
        assert self.m.ndim == 2
        assert self.m.dtype == bool

    @property
    def k(self) -> int:
        return int(self.m.sum())

    def indices(self) -> tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.m)


def topk_flags(values: np.ndarray, k: int) -> np.ndarray:
    """Flat boolean selection of the k largest entries; ties resolved by
    row-major (flattened) index."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if not 0 <= k <= flat.size:
        raise ValueError(f"k must be in [0, {flat.size}], got {k}")
    m = np.zeros(flat.size, dtype=bool)
    if k:
        order = np.argsort(-flat, kind="stable")  # stable: earlier index wins ties
        m[order[:k]] = True
    return m


def build_topk_mask(reduced: np.ndarray, k: int) -> Mask:
    """Pixel-grid form of topk_flags for [H, W] attribution maps."""
    return Mask(topk_flags(reduced, k).reshape(np.shape(reduced)))


# ---------------------------------------------------------------------------
# PGD


@dataclass(frozen=True)
class PgdResult:
    x_adv: np.ndarray
    aborted: np.ndarray  # [N] bool; sample hit a non-finite gradient
    iterates: tuple[np.ndarray, ...] = ()


def _ce_input_grads(model: Model, x: np.ndarray, y: np.ndarray,
                    aborted: np.ndarray) -> np.ndarray:
    def one(xi, yi):
        g = ag.Graph()
        xv = g.var(xi[None])
        loss = ag.cross_entropy_mean(model.graph_logits(xv, model.bind(g)), np.array([yi]))
        return ag.grad(loss, [xv])[0][0]

    try:
        g = ag.Graph()
        xv = g.var(x)
        loss = ag.cross_entropy_mean(model.graph_logits(xv, model.bind(g)), y)
        return ag.grad(loss, [xv])[0]
    except ag.NonFiniteError:
        grads = np.zeros_like(x)
        for i in range(len(x)):
            if aborted[i]:
                continue
            try:
                grads[i] = one(x[i], int(y[i]))
            except ag.NonFiniteError:
                aborted[i] = True
        return grads


def pgd(model: Model, x: np.ndarray, y: np.ndarray, eps: float = PGD_EPS,
        step: float = PGD_STEP, iters: int = PGD_ITERS,
        rng: np.random.Generator | None = None, random_start: bool = True,
        record: bool = False) -> PgdResult:
    """Projected sign-gradient ascent on cross entropy.

    Every iterate is projected to the l-inf eps-ball around x intersected
    with [0,1]. A sample whose gradient goes non-finite is frozen at its
    last valid iterate and flagged rather than poisoning the batch.
    """
    if eps < 0 or step < 0 or iters < 0:
        raise ValueError("eps, step, iters must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        cur = np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    else:
        cur = x.copy()
    aborted = np.zeros(len(x), dtype=bool)
    iterates = [cur.copy()] if record else []
    for _ in range(iters):
        g = _ce_input_grads(model, cur, y, aborted)
        g[aborted] = 0.0
        cur = cur + step * np.sign(g)
        cur = np.clip(x + np.clip(cur - x, -eps, eps), 0.0, 1.0)
        if record:
            iterates.append(cur.copy())
    return PgdResult(cur, aborted, tuple(iterates))


# ---------------------------------------------------------------------------
# Inductive noise attacks


def ina1(x: np.ndarray, mask: Mask, rng: np.random.Generator) -> np.ndarray:
    """Additive standard-normal noise on masked pixels, clipped to [0,1]."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    ys, xs = mask.indices()
    if len(ys):
        noise = rng.normal(size=(x.shape[0], len(ys)))  # one draw per channel
        out[:, ys, xs] = np.clip(out[:, ys, xs] + noise, 0.0, 1.0)
    return out


def ina2(x: np.ndarray, mask: Mask, rng: np.random.Generator) -> np.ndarray:
    """Masked pixels replaced by clipped standard-normal draws."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    ys, xs = mask.indices()
    if len(ys):
        out[:, ys, xs] = np.clip(rng.normal(size=(x.shape[0], len(ys))), 0.0, 1.0)
    return out


def rn(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Additive clipped noise on k distinct uniformly chosen pixels."""
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    if not 0 <= k <= h * w:
        raise ValueError(f"k must be in [0, {h * w}], got {k}")
    flat = rng.choice(h * w, size=k, replace=False)
    m = np.zeros(h * w, dtype=bool)
    m[flat] = True
    return ina1(x, Mask(m.reshape(h, w)), rng)


# ---------------------------------------------------------------------------
# Inductive occlusion attack


def clipped_square(cy: int, cx: int, r: int, h: int, w: int) -> tuple[int, int, int, int]:
    """Bounds (y0, y1, x0, x1) of the (2r+1)-sided square about a center,
    clipped to the image; slice convention, so area is (y1-y0)*(x1-x0)."""
    return max(0, cy - r), min(h, cy + r + 1), max(0, cx - r), min(w, cx + r + 1)


@dataclass(frozen=True)
class IoaStep:
    n: int
    r: int
    centers: tuple[tuple[int, int], ...]
    areas: tuple[int, ...]
    prediction: int


@dataclass(frozen=True)
class IoaOutcome:
    x_adv: np.ndarray
    success: bool
    steps: tuple[IoaStep, ...]
    aborted: bool = False  # attribution went non-finite mid-loop


def ioa(model: Model, x: np.ndarray, y: int, n_max: int, r_max: int,
        color: float, method: str = "saliency") -> IoaOutcome:
    """Paint pure-color squares over the currently most-attributed pixels.

    Outer loop grows the number of centers, inner loop the square radius;
    each step re-attributes on the already painted image, paints, and
    stops as soon as the prediction leaves class y.
    """
    if n_max < 1 or r_max < 1:
        raise ValueError("need n_max >= 1 and r_max >= 1")
    if not 0.0 <= color <= 1.0:
        raise ValueError(f"color must be in [0,1], got {color}")
    x = np.asarray(x, dtype=np.float64)
    assert x.ndim == 3, "occlusion needs [C,H,W] images"
    _, h, w = x.shape
    cur = x.copy()
    steps: list[IoaStep] = []
    for n in range(1, n_max + 1):
        for r in range(1, r_max + 1):
            try:
                red = attribute(model, cur[None], np.array([y]), method)[0].reduced
            except ag.NonFiniteError:
                return IoaOutcome(cur, False, tuple(steps), aborted=True)
            order = np.argsort(-red.reshape(-1), kind="stable")[:n]
            centers = [(int(i) // w, int(i) % w) for i in order]
            areas = []
            for cy, cx in centers:
                y0, y1, x0, x1 = clipped_square(cy, cx, r, h, w)
                cur[:, y0:y1, x0:x1] = color
                areas.append((y1 - y0) * (x1 - x0))
            pred = int(predict(model, cur[None])[0])
            steps.append(IoaStep(n, r, tuple(centers), tuple(areas), pred))
            if pred != y:
                return IoaOutcome(cur, True, tuple(steps))
    return IoaOutcome(cur, False, tuple(steps))


# ---------------------------------------------------------------------------
# Synthetic corruptions

CORRUPT_KINDS = ("gaussian", "shot", "impulse")


def corrupt(x: np.ndarray, kind: str, param: float,
            rng: np.random.Generator) -> np.ndarray:
    """gaussian: additive N(0, param); shot: Poisson at rate scale param;
    impulse: salt-and-pepper with pixel probability param (half salt,
    half pepper, all channels of a hit pixel). All outputs clipped."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "gaussian":
        if param < 0:
            raise ValueError("gaussian sigma must be nonnegative")
        if param == 0:
            return x.copy()
        return np.clip(x + rng.normal(0.0, param, size=x.shape), 0.0, 1.0)
    if kind == "shot":
        if param <= 0:
            raise ValueError("shot rate scale must be positive")
        return np.clip(rng.poisson(x * param) / param, 0.0, 1.0)
    if kind == "impulse":
        if not 0.0 <= param <= 1.0:
            raise ValueError("impulse probability must be in [0,1]")
        out = x.copy()
        pix = rng.random(size=x.shape[-2:])
        salt = pix < param / 2.0
        pepper = (pix >= param / 2.0) & (pix < param)
        out[:, salt] = 1.0
        out[:, pepper] = 0.0
        return out
    raise ValueError(f"unknown corruption kind {kind!r}")


# ---------------------------------------------------------------------------
# Declarative specs and the error-rate protocol


@dataclass(frozen=True)
class AttackSpec:
    """Parameters of one attack; `apply` runs it on a single sample."""

    kind: str  # pgd | ina1 | ina2 | ioa | rn | corrupt
    eps: float = PGD_EPS
    step: float = PGD_STEP
    iters: int = PGD_ITERS
    k: int = 0
    n: int = 10
    r: int = 4
    color: float = COLORS["gray"]
    corrupt_kind: str = "gaussian"
    param: float = 0.08
    method: str = "saliency"

    def __post_init__(self):
        if self.kind not in ("pgd", "ina1", "ina2", "ioa", "rn", "corrupt"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "pgd" and (self.eps < 0 or self.step < 0 or self.iters < 0):
            raise ValueError("pgd parameters must be nonnegative")
        if self.kind in ("ina1", "ina2", "rn") and self.k < 0:
            raise ValueError("k must be nonnegative")

    def label(self) -> str:
        if self.kind == "pgd":
            return f"pgd(eps={self.eps:.4g})"
        if self.kind in ("ina1", "ina2", "rn"):
            return f"{self.kind}(k={self.k})"
        if self.kind == "ioa":
            return f"ioa(n={self.n},r={self.r})"
        return f"corrupt({self.corrupt_kind},{self.param:g})"


def apply_spec(spec: AttackSpec, model: Model, x: np.ndarray, y: int,
               rng: np.random.Generator) -> np.ndarray:
    """One perturbed [C,H,W] sample for the given attack."""
    if spec.kind == "pgd":
        return pgd(model, x[None], np.array([y]), spec.eps, spec.step, spec.iters,
                   rng).x_adv[0]
    if spec.kind in ("ina1", "ina2"):
        red = attribute(model, x[None], np.array([y]), spec.method)[0].reduced
        mask = build_topk_mask(red, spec.k)
        return (ina1 if spec.kind == "ina1" else ina2)(x, mask, rng)
    if spec.kind == "ioa":
        return ioa(model, x, y, spec.n, spec.r, spec.color, spec.method).x_adv
    if spec.kind == "rn":
        return rn(x, spec.k, rng)
    return corrupt(x, spec.corrupt_kind, spec.param, rng)


@dataclass(frozen=True)
class ErrorRateReport:
    rates: tuple[float, ...]
    evaluated: int
    joint_indices: np.ndarray
    wrong: np.ndarray = field(repr=False)  # [models, evaluated] bool


def error_rate(models: list[Model], spec: AttackSpec, pixels: np.ndarray,
               labels: np.ndarray, seed: int,
               indices: np.ndarray | None = None) -> ErrorRateReport:
    """Attack error rates over the jointly-correct subset.

    Only samples every model classifies correctly when clean count; each
    model is then attacked independently, but a given sample uses the
    same noise stream against every model (keyed by the sample's index),
    so differences in rates come from the models, not the draws.
    """
    if not models:
        raise ValueError("need at least one model")
    labels = np.asarray(labels)
    if indices is None:
        indices = np.arange(len(labels))
    correct = np.stack([predict(m, pixels) == labels for m in models])
    joint = np.nonzero(correct.all(axis=0))[0]
    if len(joint) == 0:
        raise ValueError("no sample is classified correctly by every model")
    wrong = np.zeros((len(models), len(joint)), dtype=bool)
    for mi, model in enumerate(models):
        for ji, si in enumerate(joint):
            rng = seed_stream(seed, "attack", spec.label(), int(indices[si]))
            x_adv = apply_spec(spec, model, pixels[si], int(labels[si]), rng)
            wrong[mi, ji] = int(predict(model, x_adv[None])[0]) != int(labels[si])
    rates = tuple(float(w.mean()) for w in wrong)
    return ErrorRateReport(rates, len(joint), indices[joint], wrong)
