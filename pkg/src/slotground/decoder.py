"""Toy generative grounding decoder.

A small pre-norm causal transformer reads the interleaved sequence
``[f_1, t_1, ..., f_T, t_T, q]`` and writes the answer window as text,
e.g. ``[1.5s, 4.0s]``. Slot adapters rewrite the visual rows at the exit
of the early layers; deeper layers carry LoRA deltas. Text rows are never
touched by an adapter.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapter import (
    AdapterConfig,
    ConfigError,
    SlotAttentionOutput,
    adapter_forward,
    init_adapter_params,
    init_self_attention_params,
    self_attention_adapter_forward,
    xavier_uniform,
)
from .autodiff import ParamSet, Tensor
from .metrics import ParseFailure, Window
from .synth import ENTITY_WORDS

VISUAL, TIMESTAMP, QUERY, TARGET = 0, 1, 2, 3
ADAPTER_TYPES = ("slot", "self_attention", "none")
LORA_TARGETS = ("W_qkv", "W_o", "W_f1", "W_f2")


class Vocab:
    SPECIAL = ("BOS", "EOS", "PAD", "VIS")
    CHARS = tuple("0123456789") + (".", "s", ",", "[", "]", " ")

    def __init__(self, words: Sequence[str] = ENTITY_WORDS):
        self.symbols: list[str] = list(self.CHARS) + list(self.SPECIAL) + list(words)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")
        self.words = tuple(words)

    def __len__(self) -> int:
        return len(self.symbols)

    def __getitem__(self, sym: str) -> int:
        return self.index[sym]

    @property
    def eos(self) -> int:
        return self.index["EOS"]

    @property
    def vis(self) -> int:
        return self.index["VIS"]

    def encode_text(self, text: str) -> list[int]:
        try:
            return [self.index[c] for c in text]
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} not in vocabulary") from None

    def encode_words(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise ValueError(f"query word {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        """Text for character tokens; words are space-joined; specials are dropped."""
        out = []
        for i in ids:
            s = self.symbols[int(i)]
            if s in self.SPECIAL:
                continue
            out.append(s if len(s) == 1 else f" {s} ")
        return "".join(out)


def format_seconds(seconds: float) -> str:
    if not math.isfinite(seconds) or seconds < 0:
        raise ValueError(f"timestamp must be finite and >= 0, got {seconds}")
    q = Decimal(repr(float(seconds))).quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN)
    return f"{q}s"


def tokenize_timestamp(seconds: float, vocab: Vocab) -> list[int]:
    return vocab.encode_text(format_seconds(seconds))


def render_window(start: float, end: float) -> str:
    return f"[{format_seconds(start)}, {format_seconds(end)}]"


_WINDOW_RE = re.compile(r"^\[(\d+\.\d)s, (\d+\.\d)s\]$")


def parse_window(text: str, clamp_inverted: bool = False):
    """``(start, end)`` from ``[Xs, Ys]`` text, or a ParseFailure."""
    m = _WINDOW_RE.match(text.strip())
    if not m:
        return ParseFailure("malformed", text)
    a, b = float(m[1]), float(m[2])
    if a > b:
        if not clamp_inverted:
            return ParseFailure("start>end", text)
        a, b = b, a
    return (a, b)


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, N, D_feat)
    times: np.ndarray  # (T,)
    query: tuple[str, ...]
    gt_window: tuple[float, float] | None = None
    target_affinity: np.ndarray | None = None  # (T, N, N)
    sample_id: str = ""
    duration: float | None = None


@dataclass
class TokenSequence:
    ids: np.ndarray
    kinds: np.ndarray
    frame_index: np.ndarray  # frame id on VISUAL rows, -1 elsewhere

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def visual_positions(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == VISUAL)

    def layout_key(self) -> tuple:
        return (len(self.ids), self.kinds.tobytes(), self.frame_index.tobytes())


def build_sequence(sample, vocab: Vocab, with_target: bool = False) -> TokenSequence:
    """Lay out ``[f_1, t_1, ..., f_T, t_T, q]`` (+ target text and EOS when training)."""
    frames = np.asarray(sample.frames)
    times = np.asarray(sample.times, dtype=np.float64)
    if frames.ndim != 3:
        raise ValueError(f"frames must be (T, N, D), got {frames.shape}")
    T, N = frames.shape[:2]
    if T == 0:
        raise ValueError("a video needs at least one frame")
    if len(times) != T:
        raise ValueError(f"{T} frames but {len(times)} timestamps")
    if T > 1 and not np.all(np.diff(times) > 0):
        raise ValueError("timestamps must be strictly increasing")
    ids: list[int] = []
    kinds: list[int] = []
    fidx: list[int] = []
    for t in range(T):
        ids += [vocab.vis] * N
        kinds += [VISUAL] * N
        fidx += [t] * N
        ts = tokenize_timestamp(times[t], vocab)
        ids += ts
        kinds += [TIMESTAMP] * len(ts)
        fidx += [-1] * len(ts)
    q = vocab.encode_words(sample.query)
    ids += q
    kinds += [QUERY] * len(q)
    fidx += [-1] * len(q)
    if with_target:
        if sample.gt_window is None:
            raise ValueError("training sequence needs a ground-truth window")
        tgt = vocab.encode_text(render_window(*sample.gt_window)) + [vocab.eos]
        ids += tgt
        kinds += [TARGET] * len(tgt)
        fidx += [-1] * len(tgt)
    return TokenSequence(np.array(ids, dtype=np.int64), np.array(kinds, dtype=np.int8), np.array(fidx, dtype=np.int64))


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 6
    dim: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    feature_dim: int = 16
    max_len: int = 2048
    adapter_layers: tuple[int, ...] = (1, 2)
    lora_layers: tuple[int, ...] = (3, 4, 5, 6)
    lora_rank: int = 16
    lora_alpha: float = 64.0
    lora_targets: tuple[str, ...] = LORA_TARGETS
    adapter_type: str = "slot"
    max_decode_len: int = 16
    frames_per_video: int = 20
    shared_frame_positions: bool = True  # all tokens of one frame share a position id

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim={self.dim} not divisible by heads={self.heads}")
        layers = set(range(1, self.n_layers + 1))
        if not set(self.adapter_layers) <= layers or not set(self.lora_layers) <= layers:
            raise ConfigError(f"layer indices must lie in 1..{self.n_layers}")
        if set(self.adapter_layers) & set(self.lora_layers):
            raise ConfigError("adapter_layers and lora_layers overlap")
        if tuple(sorted(self.adapter_layers)) != tuple(range(1, len(self.adapter_layers) + 1)):
            raise ConfigError(f"adapter_layers must be an early prefix 1..k, got {self.adapter_layers}")
        if self.adapter_type not in ADAPTER_TYPES:
            raise ConfigError(f"adapter_type must be one of {ADAPTER_TYPES}")
        bad = set(self.lora_targets) - set(LORA_TARGETS)
        if bad:
            raise ConfigError(f"unknown lora targets {sorted(bad)}")
        if self.lora_layers and self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.max_decode_len < 1:
            raise ConfigError("max_decode_len must be >= 1")


def _weight_shapes(cfg: DecoderConfig) -> dict[str, tuple[int, int]]:
    D, H = cfg.dim, cfg.dim * cfg.mlp_ratio
    return {"W_qkv": (D, 3 * D), "W_o": (D, D), "W_f1": (D, H), "W_f2": (H, D)}


def init_base_params(cfg: DecoderConfig, vocab_size: int, rng: np.random.Generator) -> dict[str, Tensor]:
    D = cfg.dim
    p: dict[str, Tensor] = {}
    p["tok_emb"] = Tensor(rng.normal(size=(vocab_size, D)))
    p["pos_emb"] = Tensor(rng.normal(0.0, 0.02, size=(cfg.max_len, D)))
    p["W_vis"] = Tensor(xavier_uniform(rng, cfg.feature_dim, D))
    p["b_vis"] = Tensor(np.zeros(D))
    for layer in range(1, cfg.n_layers + 1):
        pre = f"layer{layer}."
        for ln in ("ln1", "ln2"):
            p[pre + ln + ".g"] = Tensor(np.ones(D))
            p[pre + ln + ".b"] = Tensor(np.zeros(D))
        for name, (m, n) in _weight_shapes(cfg).items():
            p[pre + name] = Tensor(xavier_uniform(rng, m, n))
            p[pre + "b" + name[1:]] = Tensor(np.zeros(n))
    p["ln_f.g"] = Tensor(np.ones(D))
    p["ln_f.b"] = Tensor(np.zeros(D))
    p["W_head"] = Tensor(xavier_uniform(rng, D, vocab_size))
    p["b_head"] = Tensor(np.zeros(vocab_size))
    return p


def lora_apply(base: np.ndarray, A: np.ndarray, B: np.ndarray, alpha: float, r: int) -> np.ndarray:
    """Effective weight W + (alpha / r) B A for W (m, n), B (m, r), A (r, n)."""
    m, n = base.shape
    if r > min(m, n):
        raise ConfigError(f"LoRA rank {r} exceeds min({m}, {n})")
    if B.shape != (m, r) or A.shape != (r, n):
        raise ad.DimensionError(f"LoRA factors B{B.shape} A{A.shape} do not fit W{base.shape} at rank {r}")
    return base + (alpha / r) * (B @ A)


def init_lora_params(cfg: DecoderConfig, rng: np.random.Generator) -> ParamSet:
    p = ParamSet()
    for layer in cfg.lora_layers:
        for name, (m, n) in _weight_shapes(cfg).items():
            if name not in cfg.lora_targets:
                continue
            if cfg.lora_rank > min(m, n):
                raise ConfigError(f"LoRA rank {cfg.lora_rank} exceeds min({m}, {n}) for {name}")
            p[f"layer{layer}.{name}.B"] = Tensor(np.zeros((m, cfg.lora_rank)), requires_grad=True)
            bound = 1.0 / math.sqrt(n)
            p[f"layer{layer}.{name}.A"] = Tensor(rng.uniform(-bound, bound, size=(cfg.lora_rank, n)), requires_grad=True)
    return p


@dataclass
class GroundingModel:
    cfg: DecoderConfig
    adapter_cfg: AdapterConfig
    vocab: Vocab
    base: dict[str, Tensor]
    adapters: dict[int, ParamSet] = field(default_factory=dict)
    lora: ParamSet = field(default_factory=ParamSet)

    @classmethod
    def create(cls, cfg: DecoderConfig, adapter_cfg: AdapterConfig, vocab: Vocab, rng: np.random.Generator) -> "GroundingModel":
        if adapter_cfg.D != cfg.dim:
            raise ConfigError(f"adapter D={adapter_cfg.D} must equal decoder dim={cfg.dim}")
        base = init_base_params(cfg, len(vocab), rng)
        model = cls(cfg, adapter_cfg, vocab, base)
        model.reset_finetune(rng)
        return model

    def reset_finetune(self, rng: np.random.Generator) -> None:
        """Fresh adapters (zero W_up) and LoRA (zero B)."""
        self.adapters = {}
        if self.cfg.adapter_type == "slot":
            for layer in self.cfg.adapter_layers:
                self.adapters[layer] = init_adapter_params(self.adapter_cfg, rng)
        elif self.cfg.adapter_type == "self_attention":
            for layer in self.cfg.adapter_layers:
                self.adapters[layer] = init_self_attention_params(self.adapter_cfg, rng)
        self.lora = init_lora_params(self.cfg, rng)

    def set_base_trainable(self, flag: bool) -> None:
        for k, t in list(self.base.items()):
            self.base[k] = Tensor(t.data, requires_grad=flag)

    def base_params(self) -> ParamSet:
        p = ParamSet()
        for k, t in self.base.items():
            if t.requires_grad:
                p[f"base.{k}"] = t
        return p

    def trainable_params(self) -> ParamSet:
        p = ParamSet()
        for layer, ps in self.adapters.items():
            for k, t in ps.items():
                p[f"adapter{layer}.{k}"] = t
        for k, t in self.lora.items():
            p[f"lora.{k}"] = t
        for k, t in self.base_params().items():
            p[k] = t
        return p

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {f"base.{k}": t.data for k, t in self.base.items()}
        for layer, ps in self.adapters.items():
            out.update({f"adapter{layer}.{k}": t.data for k, t in ps.items()})
        out.update({f"lora.{k}": t.data for k, t in self.lora.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = self.named_arrays()
        missing = set(mine) - set(arrays)
        extra = set(arrays) - set(mine)
        if missing or extra:
            raise ad.ContractError(f"checkpoint mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, arr in arrays.items():
            if arr.shape != mine[name].shape:
                raise ad.DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {mine[name].shape}")
        for k, t in self.base.items():
            t.data = np.array(arrays[f"base.{k}"], dtype=np.float64)
        for layer, ps in self.adapters.items():
            for k, t in ps.items():
                t.data = np.array(arrays[f"adapter{layer}.{k}"], dtype=np.float64)
        for k, t in self.lora.items():
            t.data = np.array(arrays[f"lora.{k}"], dtype=np.float64)


@dataclass
class Batch:
    ids: np.ndarray  # (B, L)
    kinds: np.ndarray  # (L,)
    frame_index: np.ndarray  # (L,)
    frames: np.ndarray  # (B, T, N, D_feat)
    target_affinity: np.ndarray | None = None  # (B, T, N, N)

    @property
    def visual_positions(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == VISUAL)


def collate(samples: Sequence, vocab: Vocab, with_target: bool = False, affinity: bool = False) -> Batch:
    """Stack samples that share one layout (same T, N and timestamp text)."""
    seqs = [build_sequence(s, vocab, with_target) for s in samples]
    key = seqs[0].layout_key()
    for s in seqs[1:]:
        if s.layout_key() != key:
            raise ValueError("samples in a batch must share the same sequence layout")
    aff = None
    if affinity:
        aff = np.stack([_target_affinity(s) for s in samples])
    return Batch(
        ids=np.stack([s.ids for s in seqs]),
        kinds=seqs[0].kinds,
        frame_index=seqs[0].frame_index,
        frames=np.stack([np.asarray(s.frames, dtype=np.float64) for s in samples]),
        target_affinity=aff,
    )


def _target_affinity(sample) -> np.ndarray:
    aff = getattr(sample, "target_affinity", None)
    if aff is None:
        aff = getattr(sample, "gt_affinity", None)
    if aff is None:
        raise ValueError(f"sample {getattr(sample, 'sample_id', '?')} has no target affinity")
    return np.asarray(aff, dtype=np.float64)


def _linear(x: Tensor, model: GroundingModel, layer: int, name: str) -> Tensor:
    pre = f"layer{layer}."
    y = x @ model.base[pre + name] + model.base[pre + "b" + name[1:]]
    key = f"{pre}{name}.B"
    if key in model.lora:
        s = model.cfg.lora_alpha / model.cfg.lora_rank
        y = y + ad.scale((x @ model.lora[key]) @ model.lora[f"{pre}{name}.A"], s)
    return y


def position_ids(kinds: np.ndarray, shared_frames: bool = True) -> np.ndarray:
    """Position per row; with ``shared_frames`` a run of VISUAL rows takes a single id."""
    kinds = np.asarray(kinds)
    if not shared_frames:
        return np.arange(len(kinds))
    vis = kinds == VISUAL
    new = np.ones(len(kinds), dtype=bool)
    new[1:] = ~(vis[1:] & vis[:-1])
    return np.cumsum(new) - 1


def _causal_mask(L: int) -> np.ndarray:
    return np.triu(np.full((L, L), -1e9), k=1)


def _block(x: Tensor, model: GroundingModel, layer: int, mask: np.ndarray) -> Tensor:
    cfg = model.cfg
    pre = f"layer{layer}."
    B, L, D = x.shape
    H = cfg.heads
    dh = D // H
    h = ad.layer_norm(x, model.base[pre + "ln1.g"], model.base[pre + "ln1.b"])
    qkv = _linear(h, model, layer, "W_qkv")
    qkv = ad.transpose(ad.reshape(qkv, (B, L, 3, H, dh)), (2, 0, 3, 1, 4))  # (3, B, H, L, dh)
    q, k, v = (ad.reshape(t, (B, H, L, dh)) for t in ad.split_axis(qkv, [1, 1, 1], 0))
    scores = ad.scale(q @ ad.transpose_last2(k), 1.0 / math.sqrt(dh)) + mask
    att = ad.softmax_axis(scores, -1) @ v
    att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, L, D))
    x = x + _linear(att, model, layer, "W_o")
    h = ad.layer_norm(x, model.base[pre + "ln2.g"], model.base[pre + "ln2.b"])
    return x + _linear(ad.gelu(_linear(h, model, layer, "W_f1")), model, layer, "W_f2")


@dataclass
class DecoderOutput:
    logits: Tensor  # (B, L, V) or (B, P, V) for selected positions
    slot_outputs: dict[int, SlotAttentionOutput]
    hidden: dict[int, Tensor]  # layer -> (B, L, D) exit activations, when requested

    @property
    def last_slot_output(self) -> SlotAttentionOutput | None:
        if not self.slot_outputs:
            return None
        return self.slot_outputs[max(self.slot_outputs)]


def decoder_forward(
    batch: Batch,
    model: GroundingModel,
    positions: np.ndarray | None = None,
    use_adapters: bool = True,
    keep_hidden: Sequence[int] = (),
    ids: np.ndarray | None = None,
) -> DecoderOutput:
    """Logits for every position (or only ``positions``) plus slot attention of each adapter layer."""
    cfg = model.cfg
    ids = batch.ids if ids is None else ids
    B, L = ids.shape
    if L > cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    vis = np.flatnonzero(batch.kinds[:L] == VISUAL)
    T, N = batch.frames.shape[1:3]
    if len(vis) != T * N:
        raise ValueError(f"layout has {len(vis)} visual rows for {T}x{N} frame tokens")
    x = ad.take(model.base["tok_emb"], ids, axis=0)
    feats = Tensor(batch.frames.reshape(B, T * N, -1))
    xv = feats @ model.base["W_vis"] + model.base["b_vis"]
    x = ad.scatter_rows(x, xv, vis)
    x = x + ad.take(model.base["pos_emb"], position_ids(batch.kinds[:L], cfg.shared_frame_positions), axis=0)
    mask = _causal_mask(L)
    slot_outs: dict[int, SlotAttentionOutput] = {}
    hidden: dict[int, Tensor] = {}
    for layer in range(1, cfg.n_layers + 1):
        x = _block(x, model, layer, mask)
        if use_adapters and layer in model.adapters:
            X = ad.reshape(ad.take(x, vis, axis=1), (B, T, N, cfg.dim))
            if cfg.adapter_type == "slot":
                X_out, sa = adapter_forward(X, model.adapters[layer], model.adapter_cfg)
                slot_outs[layer] = sa
            else:
                X_out = self_attention_adapter_forward(X, model.adapters[layer], model.adapter_cfg)
            x = ad.scatter_rows(x, ad.reshape(X_out, (B, T * N, cfg.dim)), vis)
        if layer in keep_hidden:
            hidden[layer] = x
    if positions is not None:
        x = ad.take(x, np.asarray(positions), axis=1)
    h = ad.layer_norm(x, model.base["ln_f.g"], model.base["ln_f.b"])
    logits = h @ model.base["W_head"] + model.base["b_head"]
    return DecoderOutput(logits, slot_outs, hidden)


def ce_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over masked positions.

    logits (..., V); targets (...) int; mask (...) bool.
    """
    V = logits.shape[-1]
    flat = ad.reshape(logits, (-1, V))
    tgt = np.asarray(targets).reshape(-1)
    if mask is not None:
        sel = np.flatnonzero(np.asarray(mask).reshape(-1))
        if sel.size == 0:
            raise ValueError("cross-entropy mask selects no positions")
        flat = ad.take(flat, sel, axis=0)
        tgt = tgt[sel]
    if tgt.size == 0:
        raise ValueError("cross-entropy over zero positions")
    onehot = np.zeros((tgt.size, V))
    onehot[np.arange(tgt.size), tgt] = 1.0
    logp = ad.log_softmax_axis(flat, -1)
    return ad.scale(ad.sum_axis(logp * onehot), -1.0 / tgt.size)


def target_positions(kinds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows whose logits predict a TARGET token, and the index of that token."""
    tgt = np.flatnonzero(kinds == TARGET)
    return tgt - 1, tgt


def lm_loss(batch: Batch, model: GroundingModel, kinds_to_predict: Sequence[int] = (TARGET,), use_adapters: bool = True):
    """Teacher-forced next-token CE on the rows of the given kinds; returns (loss, DecoderOutput)."""
    want = np.flatnonzero(np.isin(batch.kinds, kinds_to_predict))
    want = want[want > 0]
    rows = want - 1
    out = decoder_forward(batch, model, positions=rows, use_adapters=use_adapters)
    targets = batch.ids[:, want]
    return ce_loss(out.logits, targets), out


def greedy_decode(batch: Batch, model: GroundingModel, max_len: int | None = None, use_adapters: bool = True) -> list[str]:
    """Argmax decoding from the prompt in ``batch`` (no target rows) until EOS or ``max_len`` tokens."""
    limit = model.cfg.max_decode_len if max_len is None else max_len
    prompt = np.flatnonzero(batch.kinds != TARGET)
    ids = batch.ids[:, : len(prompt)]
    kinds = batch.kinds[: len(prompt)]
    B = ids.shape[0]
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    for _ in range(limit):
        if done.all() or ids.shape[1] >= model.cfg.max_len:
            break
        step_batch = Batch(ids, kinds, batch.frame_index[: len(kinds)], batch.frames)
        logits = decoder_forward(step_batch, model, positions=np.array([ids.shape[1] - 1]), use_adapters=use_adapters).logits
        nxt = np.argmax(logits.data[:, -1], axis=-1)
        for b in range(B):
            if done[b]:
                continue
            if nxt[b] == model.vocab.eos:
                done[b] = True
            else:
                out[b].append(int(nxt[b]))
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
        kinds = np.concatenate([kinds, [TARGET]]).astype(np.int8)
    return [model.vocab.decode(o) for o in out]


def predict_windows(texts: Sequence[str], clamp_inverted: bool = False) -> list:
    preds = []
    for text in texts:
        r = parse_window(text, clamp_inverted)
        preds.append(r if isinstance(r, ParseFailure) else Window(*r))
    return preds


def predict_samples(model: GroundingModel, samples: Sequence, batch_size: int = 50, use_adapters: bool = True,
                    return_text: bool = False, clamp_inverted: bool = False):
    """Greedy-decode and parse every sample, batching samples that share a layout; order is preserved."""
    texts: list[str] = [""] * len(samples)
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(build_sequence(s, model.vocab).layout_key(), []).append(i)
    for idx in groups.values():
        for j in range(0, len(idx), batch_size):
            chunk = idx[j : j + batch_size]
            batch = collate([samples[i] for i in chunk], model.vocab)
            for i, t in zip(chunk, greedy_decode(batch, model, use_adapters=use_adapters)):
                texts[i] = t
    preds = predict_windows(texts, clamp_inverted)
    return (texts, preds) if return_text else preds
