"""Expected squared deviation of a linear class score under masked
perturbations, plus mask-statistic sweeps over a dataset.

For score y = w.x + b and a perturbation touching coordinates d_1..d_k,
the deviation y' - y is a weighted sum of the per-coordinate changes, so
its second moment reduces to the two sums S1 = sum(w_{d_i}) and
S2 = sum(w_{d_i}^2):

    additive       x' = x + m*delta        E = mu_d^2 S1^2 + sd_d^2 S2
    mult-additive  x' = x + m*(delta - x)  E = (mu_d-mu_x)^2 S1^2 + (sd_d^2+sd_x^2) S2
    occlusion      delta = constant color  E = (mu_d-mu_x)^2 S1^2 + sd_x^2 S2

Nonlinear models enter through their first-order surrogate at each
input, so everything downstream of `linearize` is approximate for them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import math

from .attacks import Mask, topk_flags
from .models import Model, linearize

NOISE_KINDS = ("additive", "mult_additive", "occlusion")


@dataclass(frozen=True)
class NoiseSpec:
    """Moments of the perturbation and of the pixels it lands on."""

    kind: str
    mu_delta: float = 0.0
    sigma_delta: float = 0.0
    mu_x: float = 0.0
    sigma_x: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma_delta < 0 or self.sigma_x < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.kind == "occlusion" and self.sigma_delta != 0.0:
            raise ValueError("occlusion paints a constant color; sigma_delta must be 0")

    @classmethod
    def occlusion(cls, color: float, mu_x: float, sigma_x: float) -> "NoiseSpec":
        return cls("occlusion", mu_delta=color, mu_x=mu_x, sigma_x=sigma_x)


@dataclass(frozen=True)
class MaskStats:
    """S1, S2 and the absolute sum over one masked coordinate set."""

    k: int
    sum_sq: float
    sum: float
    sum_abs: float

    def __post_init__(self):
        slack = 1e-9 * max(1.0, self.k * self.sum_sq)
        assert self.sum ** 2 <= self.k * self.sum_sq + slack
        assert self.sum_abs ** 2 >= self.sum ** 2 - slack


def _flat_mask(mask, size: int) -> np.ndarray:
    m = mask.m if isinstance(mask, Mask) else np.asarray(mask)
    m = m.astype(bool).reshape(-1)
    if m.size != size:
        raise ValueError(f"mask covers {m.size} coordinates, weights have {size}")
    return m


def coordinate_mask(mask: Mask, channels: int) -> np.ndarray:
    """Expand a pixel mask to the flat [C*H*W] coordinate layout."""
    return np.broadcast_to(mask.m, (channels,) + mask.m.shape).reshape(-1)


def mask_stats(w: np.ndarray, mask) -> MaskStats:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    sel = w[_flat_mask(mask, w.size)]
    # fsum: correctly rounded, so the result is independent of term order
    return MaskStats(sel.size, math.fsum(v * v for v in sel), math.fsum(sel),
                     math.fsum(abs(v) for v in sel))


def predicted_deviation(model, mask, spec: NoiseSpec) -> float:
    """Closed-form E{(y'-y)^2} for a linear score under the masked noise."""
    st = mask_stats(model.w, mask)
    s1sq, s2 = st.sum ** 2, st.sum_sq
    if spec.kind == "additive":
        return spec.mu_delta ** 2 * s1sq + spec.sigma_delta ** 2 * s2
    shift = (spec.mu_delta - spec.mu_x) ** 2 * s1sq
    if spec.kind == "mult_additive":
        return shift + (spec.sigma_delta ** 2 + spec.sigma_x ** 2) * s2
    return shift + spec.sigma_x ** 2 * s2  # occlusion


def monte_carlo_deviation(model, mask, spec: NoiseSpec, samples: int,
                          rng: np.random.Generator) -> tuple[float, float]:
    """Sample mean and standard error of (y'-y)^2 under the noise model.

    Pixels and noise are Gaussian with the given moments, unclipped, so
    the estimate targets exactly what the closed form describes.
    """
    if samples < 2:
        raise ValueError("need at least two samples for a standard error")
    w = np.asarray(model.w, dtype=np.float64).reshape(-1)
    wm = w[_flat_mask(mask, w.size)]
    k = wm.size
    sq = np.empty(samples)
    chunk = max(1, (1 << 22) // max(k, 1))  # cap transient memory
    done = 0
    while done < samples:
        c = min(chunk, samples - done)
        if spec.kind == "additive":
            dev = rng.normal(spec.mu_delta, spec.sigma_delta, (c, k)) @ wm
        elif spec.kind == "mult_additive":
            x = rng.normal(spec.mu_x, spec.sigma_x, (c, k))
            dev = (rng.normal(spec.mu_delta, spec.sigma_delta, (c, k)) - x) @ wm
        else:
            x = rng.normal(spec.mu_x, spec.sigma_x, (c, k))
            dev = (spec.mu_delta - x) @ wm
        sq[done:done + c] = dev ** 2
        done += c
    return float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(samples))


@dataclass(frozen=True)
class CurvePoint:
    k: int
    selection: str
    mean_sum_sq: float
    stderr_sum_sq: float
    mean_sum2: float  # mean of S1^2
    stderr_sum2: float
    count: int


def _mean_stderr(vals: np.ndarray) -> tuple[float, float]:
    if vals.size < 2:
        return float(vals.mean()), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))


def sweep_mask_stats(model: Model, pixels: np.ndarray, labels: np.ndarray,
                     ks, selection: str, rng: np.random.Generator,
                     draws: int = 16) -> list[CurvePoint]:
    """Average S2 and S1^2 over the dataset for each mask size.

    Each input contributes through its linearized score. `random` draws
    `draws` pixel subsets per input; `attribution_ranked` takes the top-k
    pixels of the surrogate's channel-summed magnitude, the ranking the
    inductive attacks use.
    """
    if selection not in ("random", "attribution_ranked"):
        raise ValueError(f"unknown selection {selection!r}")
    if selection == "random" and draws < 1:
        raise ValueError("random selection needs draws >= 1")
    pixels = np.asarray(pixels, dtype=np.float64)
    labels = np.asarray(labels)
    per_image = pixels[0].ndim == 3
    channels = pixels.shape[1] if per_image else 1
    pix_n = int(np.prod(pixels.shape[-2:])) if per_image else pixels.shape[-1]
    surrogates = []
    for i in range(len(pixels)):
        lin = linearize(model, pixels[i], int(labels[i]))
        w = lin.w
        red = np.abs(w.reshape(pixels[i].shape)).sum(axis=0) if per_image else np.abs(w)
        surrogates.append((w, red))

    points = []
    for k in ks:
        if not 0 <= k <= pix_n:
            raise ValueError(f"k must be in [0, {pix_n}], got {k}")
        ss, s2 = [], []
        for w, red in surrogates:
            if selection == "attribution_ranked":
                masks = [topk_flags(red, k)]
            else:
                masks = []
                for _ in range(draws):
                    m = np.zeros(pix_n, dtype=bool)
                    m[rng.choice(pix_n, size=k, replace=False)] = True
                    masks.append(m)
            for m in masks:
                if per_image:
                    grid = m.reshape(pixels.shape[-2:])
                    coords = coordinate_mask(Mask(grid), channels)
                else:
                    coords = m
                st = mask_stats(w, coords)
                ss.append(st.sum_sq)
                s2.append(st.sum ** 2)
        m_ss, e_ss = _mean_stderr(np.array(ss))
        m_s2, e_s2 = _mean_stderr(np.array(s2))
        points.append(CurvePoint(int(k), selection, m_ss, e_ss, m_s2, e_s2, len(ss)))
    return points
