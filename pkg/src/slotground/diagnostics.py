"""Domain-gap and reliance diagnostics: MMD, similarity-ranked splits, window perturbation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .metrics import recall_at_iou

PERTURB_MODES = ("gt_window", "random_window")


def pool_video_repr(hidden) -> np.ndarray:
    """Mean over every token of every frame: (T, N, D) -> (D,)."""
    h = np.asarray(getattr(hidden, "data", hidden), dtype=np.float64)
    if h.size == 0 or h.ndim < 2:
        raise ValueError(f"cannot pool an empty representation of shape {h.shape}")
    if not np.isfinite(h).all():
        raise ValueError("non-finite hidden states")
    return h.reshape(-1, h.shape[-1]).mean(axis=0)


@dataclass(frozen=True)
class MMDResult:
    estimate: float  # max(raw, 0)
    raw: float  # signed unbiased estimate
    biased: float
    bandwidth: float
    n_x: int
    n_y: int
    bandwidth_fallback: bool = False

    def as_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "raw": self.raw,
            "biased": self.biased,
            "bandwidth": self.bandwidth,
            "n_x": self.n_x,
            "n_y": self.n_y,
            "bandwidth_fallback": self.bandwidth_fallback,
        }


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(pooled: np.ndarray) -> tuple[float, bool]:
    """Median pairwise Euclidean distance over distinct pairs; 1.0 if that is zero."""
    d = np.sqrt(_sqdist(pooled, pooled))
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(d[iu]))
    if med <= 0.0:
        return 1.0, True
    return med, False


def mmd2(x, y, bandwidth: float | None = None) -> MMDResult:
    """Squared MMD with a Gaussian kernel k(a, b) = exp(-|a-b|^2 / (2 s^2))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"expected (n, d) sets with equal d, got {x.shape} and {y.shape}")
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError("unbiased MMD needs at least 2 points per set")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("non-finite representations")
    fallback = False
    if bandwidth is None:
        bandwidth, fallback = median_bandwidth(np.concatenate([x, y]))
        if fallback:
            warnings.warn("all pooled points coincide; using bandwidth 1.0", RuntimeWarning, stacklevel=2)
    g = 1.0 / (2.0 * bandwidth**2)
    kxx = np.exp(-g * _sqdist(x, x))
    kyy = np.exp(-g * _sqdist(y, y))
    kxy = np.exp(-g * _sqdist(x, y))
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    raw = float(sxx + syy - 2.0 * kxy.mean())
    biased = float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    return MMDResult(max(raw, 0.0), raw, max(biased, 0.0), float(bandwidth), n, m, fallback)


def simrank_split(train_feats, test_feats, fraction: float, ids: Sequence | None = None):
    """Rank test vectors by max cosine similarity to the training set.

    Returns (top ids, bottom ids, scores); ties are broken by sample id.
    """
    tr = np.asarray(train_feats, dtype=np.float64)
    te = np.asarray(test_feats, dtype=np.float64)
    if tr.size == 0 or te.size == 0:
        raise ValueError("simrank_split needs non-empty train and test sets")
    if not 0.0 < fraction <= 0.5:
        raise ValueError(f"fraction must be in (0, 0.5], got {fraction}")
    ids = list(range(len(te))) if ids is None else list(ids)
    if len(ids) != len(te):
        raise ValueError("one id per test vector required")

    def unit(v):
        n = np.linalg.norm(v, axis=1, keepdims=True)
        return v / np.maximum(n, 1e-12)

    scores = (unit(te) @ unit(tr).T).max(axis=1)
    k = int(round(fraction * len(te)))
    order = sorted(range(len(te)), key=lambda i: (-scores[i], ids[i]))
    top = [ids[i] for i in order[:k]]
    rev = sorted(range(len(te)), key=lambda i: (scores[i], ids[i]))
    bottom = [ids[i] for i in rev[:k]]
    return top, bottom, scores


@dataclass(frozen=True)
class PerturbSpec:
    mode: str = "gt_window"
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in PERTURB_MODES:
            raise ValueError(f"mode must be one of {PERTURB_MODES}, got {self.mode!r}")
        if not self.noise_scale >= 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")


def _window_frames(times: np.ndarray, window) -> np.ndarray:
    return np.flatnonzero((times >= window[0]) & (times <= window[1]))


def choose_random_frames(rng: np.random.Generator, T: int, gt_frames: np.ndarray) -> tuple[np.ndarray, bool]:
    """A contiguous run of ``len(gt_frames)`` frames avoiding the GT run when there is room.

    Returns (frames, overlapped).
    """
    L = len(gt_frames)
    if L == 0:
        return gt_frames, False
    gt = set(gt_frames.tolist())
    starts = [s for s in range(T - L + 1) if not gt.intersection(range(s, s + L))]
    if starts:
        s = starts[int(rng.integers(len(starts)))]
        return np.arange(s, s + L), False
    s = int(rng.integers(T - L + 1))
    return np.arange(s, s + L), True


def perturb_sample(sample, spec: PerturbSpec, rng: np.random.Generator):
    """Copy of ``sample`` with Gaussian noise on the chosen window's visual tokens."""
    frames = np.array(sample.frames, dtype=np.float64)
    times = np.asarray(sample.times)
    gt_frames = _window_frames(times, sample.gt_window)
    overlapped = False
    if spec.mode == "gt_window":
        chosen = gt_frames
    else:
        chosen, overlapped = choose_random_frames(rng, len(times), gt_frames)
        if overlapped:
            warnings.warn(f"{sample.sample_id}: no room for a disjoint random window", RuntimeWarning, stacklevel=2)
    std = frames.reshape(-1, frames.shape[-1]).std(axis=0)
    noise = rng.normal(size=(len(chosen),) + frames.shape[1:]) * (spec.noise_scale * std)
    frames[chosen] = frames[chosen] + noise
    extra = dict(getattr(sample, "extra", {}) or {})
    extra.update(perturbed_frames=chosen.tolist(), perturb_overlap=overlapped)
    return replace(sample, frames=frames, extra=extra) if hasattr(sample, "extra") else replace(sample, frames=frames)


@dataclass
class PerturbResult:
    clean: float
    perturbed: float
    drop: float
    tau: float
    mode: str
    n: int
    overlapped: int = 0
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "clean": self.clean,
            "perturbed": self.perturbed,
            "drop": self.drop,
            "tau": self.tau,
            "mode": self.mode,
            "n": self.n,
            "overlapped": self.overlapped,
        }


def relative_drop(clean: float, perturbed: float) -> float:
    if clean == 0:
        return 0.0 if perturbed == 0 else float("-inf")
    return (clean - perturbed) / clean


def perturb_eval(
    predict: Callable[[Sequence], list],
    samples: Sequence,
    spec: PerturbSpec,
    tau: float = 0.7,
    clean_preds: list | None = None,
) -> PerturbResult:
    """R1@tau before and after noising each sample's chosen window.

    ``predict`` maps a list of samples to predicted windows (or parse failures),
    e.g. ``functools.partial(decoder.predict_samples, model)``.
    """
    if not samples:
        raise ValueError("perturb_eval needs at least one sample")
    gts = [s.gt_window for s in samples]
    duration = samples[0].duration
    if clean_preds is None:
        clean_preds = predict(samples)
    clean = recall_at_iou(clean_preds, gts, tau, duration)
    rng = np.random.default_rng([spec.seed, 0x5EED])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        noisy = [perturb_sample(s, spec, rng) for s in samples]
    overlapped = sum(bool(getattr(s, "extra", {}).get("perturb_overlap")) for s in noisy)
    pert = recall_at_iou(predict(noisy), gts, tau, duration)
    return PerturbResult(clean, pert, relative_drop(clean, pert), tau, spec.mode, len(samples), overlapped)
