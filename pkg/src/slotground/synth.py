"""Synthetic videos with planted entity structure, plus slot-recovery scoring."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

ENTITY_WORDS = ("person", "dog", "car", "ball", "chair", "cup", "tree", "bike")


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DomainShift:
    """Orthogonal rotation plus a constant bias applied to every feature vector."""

    rotation_seed: int = 1234
    bias: float = 1.0

    def matrix(self, dim: int) -> np.ndarray:
        q, r = np.linalg.qr(np.random.default_rng(self.rotation_seed).normal(size=(dim, dim)))
        return q * np.sign(np.diag(r))

    def apply(self, features: np.ndarray) -> np.ndarray:
        dim = features.shape[-1]
        return features @ self.matrix(dim).T + self.bias


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    T: int = 20
    N: int = 64
    n_entities: int = 4
    feature_dim: int = 16
    n_classes: int = 8
    n_event_classes: int = 4  # classes [0, n_event) can be queried targets; the rest are scenery
    separation: float = 3.0  # centroid std / token noise std
    frame_interval: float = 0.5
    min_window: int = 3  # frames
    max_window: int = 10
    world_seed: int = 0  # entity appearance, shared by every video of a dataset
    domain_shift: DomainShift | None = None

    def __post_init__(self):
        if self.n_entities < 1 or self.n_entities > self.N:
            raise SynthConfigError(f"n_entities={self.n_entities} must be in [1, N={self.N}]")
        if not 1 <= self.n_event_classes < self.n_classes:
            raise SynthConfigError(f"n_event_classes must be in [1, n_classes), got {self.n_event_classes}")
        if self.n_entities - 1 > self.n_classes - self.n_event_classes:
            raise SynthConfigError("not enough scenery classes for the non-target entities")
        if self.separation <= 0:
            raise SynthConfigError("separation must be positive")
        if self.T < 1 or self.feature_dim < 1:
            raise SynthConfigError("T and feature_dim must be positive")
        if not 1 <= self.min_window <= self.max_window <= self.T:
            raise SynthConfigError(f"need 1 <= min_window <= max_window <= T, got {self.min_window}, {self.max_window}")

    @property
    def grid(self) -> tuple[int, int]:
        h = int(np.sqrt(self.N))
        while self.N % h:
            h -= 1
        return h, self.N // h

    @property
    def duration(self) -> float:
        return self.T * self.frame_interval


def entity_word(k: int) -> str:
    return ENTITY_WORDS[k] if k < len(ENTITY_WORDS) else f"entity{k}"


def class_centroids(spec: SynthSpec) -> np.ndarray:
    return np.random.default_rng([spec.world_seed, 7]).normal(size=(spec.n_classes, spec.feature_dim))


@dataclass
class SynthVideo:
    frames: np.ndarray  # (T, N, feature_dim)
    times: np.ndarray  # (T,)
    query: tuple[str, ...]
    gt_window: tuple[float, float]
    planted_labels: np.ndarray  # (T, N) local entity ids
    entity_words: tuple[str, ...]  # word per local entity id; index 0 is the target
    duration: float
    sample_id: str = ""
    extra: dict = field(default_factory=dict)

    @cached_property
    def gt_affinity(self) -> np.ndarray:
        lab = self.planted_labels
        return np.where(lab[:, :, None] == lab[:, None, :], 1.0, -1.0)


def partition_grid(rng: np.random.Generator, grid: tuple[int, int], parts: int) -> np.ndarray:
    """Split the grid into ``parts`` contiguous rectangles by repeated guillotine cuts."""
    h, w = grid
    if parts > h * w:
        raise SynthConfigError(f"cannot split a {h}x{w} grid into {parts} blocks")
    rects = [(0, 0, h, w)]
    while len(rects) < parts:
        areas = [r[2] * r[3] for r in rects]
        splittable = [i for i, a in enumerate(areas) if a > 1]
        i = max(splittable, key=lambda j: (areas[j], -j))
        r0, c0, rh, rw = rects.pop(i)
        vertical = rh > rw or (rh == rw and rng.random() < 0.5)
        if vertical and rh > 1:
            s = int(rng.integers(1, rh))
            rects += [(r0, c0, s, rw), (r0 + s, c0, rh - s, rw)]
        elif rw > 1:
            s = int(rng.integers(1, rw))
            rects += [(r0, c0, rh, s), (r0, c0 + s, rh, rw - s)]
        else:
            s = int(rng.integers(1, rh))
            rects += [(r0, c0, s, rw), (r0 + s, c0, rh - s, rw)]
    order = rng.permutation(parts)
    labels = np.empty((h, w), dtype=np.int64)
    for k, (r0, c0, rh, rw) in zip(order, rects):
        labels[r0 : r0 + rh, c0 : c0 + rw] = k
    return labels.reshape(-1)


def gen_video(spec: SynthSpec, sample_id: str = "") -> SynthVideo:
    """One video; local entity 0 is the queried target, visible only inside its window.

    The target is drawn from the event classes, the other entities from the
    scenery classes, so every event-class token marks a frame inside the window.
    """
    rng = np.random.default_rng([spec.world_seed, spec.seed])
    cents = class_centroids(spec)
    target = int(rng.integers(spec.n_event_classes))
    scenery = rng.choice(np.arange(spec.n_event_classes, spec.n_classes), size=spec.n_entities - 1, replace=False)
    classes = np.concatenate([[target], scenery]).astype(np.int64)
    length = int(rng.integers(spec.min_window, spec.max_window + 1))
    first = int(rng.integers(0, spec.T - length + 1))
    last = first + length - 1
    noise = 1.0 / spec.separation
    frames = np.empty((spec.T, spec.N, spec.feature_dim))
    labels = np.empty((spec.T, spec.N), dtype=np.int64)
    for t in range(spec.T):
        present = np.arange(spec.n_entities) if first <= t <= last else np.arange(1, spec.n_entities)
        if len(present) == 0:
            # single-entity video outside its window: background only
            present = np.array([0])
        block = partition_grid(rng, spec.grid, len(present))
        labels[t] = present[block]
        frames[t] = cents[classes[labels[t]]] + noise * rng.normal(size=(spec.N, spec.feature_dim))
    if spec.domain_shift is not None:
        frames = spec.domain_shift.apply(frames)
    times = np.arange(spec.T) * spec.frame_interval
    words = tuple(entity_word(int(c)) for c in classes)
    return SynthVideo(
        frames=frames,
        times=times,
        query=(words[0],),
        gt_window=(float(times[first]), float(times[last])),
        planted_labels=labels,
        entity_words=words,
        duration=spec.duration,
        sample_id=sample_id or f"s{spec.seed}",
    )


def video_seeds(seed: int, split: str, n: int) -> list[int]:
    tag = {"train": 0, "eval": 1}[split]
    ss = np.random.SeedSequence([seed, tag])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def gen_dataset(spec: SynthSpec, n_train: int, n_eval: int, ood: bool = False, shift: DomainShift | None = None):
    """Train and eval lists; eval carries the domain shift when ``ood``."""
    if n_train < 1 or n_eval < 1:
        raise SynthConfigError("n_train and n_eval must be >= 1")
    base = replace(spec, domain_shift=None)
    train = [gen_video(replace(base, seed=s), f"train{i}") for i, s in enumerate(video_seeds(spec.seed, "train", n_train))]
    eval_shift = (shift or spec.domain_shift or DomainShift()) if ood else None
    ev = replace(base, domain_shift=eval_shift)
    evals = [gen_video(replace(ev, seed=s), f"eval{i}") for i, s in enumerate(video_seeds(spec.seed, "eval", n_eval))]
    return train, evals


def slot_assignment(attn) -> np.ndarray:
    """Highest-attending slot per token; ties go to the lowest slot index."""
    a = attn.data if hasattr(attn, "data") else np.asarray(attn)
    return np.argmax(a, axis=-1)


def _comb2(x):
    return x * (x - 1) / 2.0


def ari_single(a, b) -> float:
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"label shapes differ: {a.shape} vs {b.shape}")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    cont = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(cont, (ai, bi), 1.0)
    index = _comb2(cont).sum()
    sa = _comb2(cont.sum(1)).sum()
    sb = _comb2(cont.sum(0)).sum()
    expected = sa * sb / _comb2(n) if n > 1 else 0.0
    top = 0.5 * (sa + sb)
    if top == expected:
        # 0/0: only identical partitions count as agreement
        same = cont.shape[0] == cont.shape[1] and np.count_nonzero(cont) == cont.shape[0]
        return 1.0 if same else 0.0
    return float((index - expected) / (top - expected))


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index per frame (last axis = tokens), averaged over frames."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"label shapes differ: {a.shape} vs {b.shape}")
    a2 = a.reshape(-1, a.shape[-1])
    b2 = b.reshape(-1, b.shape[-1])
    return float(np.mean([ari_single(x, y) for x, y in zip(a2, b2)]))
