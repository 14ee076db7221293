"""Training and evaluation orchestration for the synthetic grounding task."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .alignment import feature_affinity, labels_affinity, sa_loss, slot_similarity, total_loss
from .autodiff import OptimizerState, adamw_step
from .config import RunConfig, save_config
from .decoder import (
    TARGET,
    TIMESTAMP,
    GroundingModel,
    Vocab,
    collate,
    decoder_forward,
    lm_loss,
    predict_samples,
)
from .io import Checkpoint, load_checkpoint, save_checkpoint
from .metrics import ParseFailure, summarize
from .synth import ENTITY_WORDS, gen_dataset

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for data order, parameter init, eval noise and base pretraining."""
    names = ("data", "init", "noise", "pretrain")
    return {k: np.random.default_rng(s) for k, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def make_datasets(cfg: RunConfig):
    """(train, ID eval, OOD eval) lists of SynthVideo."""
    spec = cfg.synth_spec()
    train, id_eval = gen_dataset(spec, cfg.n_train, cfg.n_eval)
    _, ood_eval = gen_dataset(spec, 1, cfg.n_eval, ood=True, shift=cfg.domain_shift())
    return train, id_eval, ood_eval


def build_model(cfg: RunConfig, rng: np.random.Generator) -> GroundingModel:
    return GroundingModel.create(cfg.decoder_config(), cfg.adapter_config(), Vocab(ENTITY_WORDS), rng)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def lr_at(step: int, total: int, base_lr: float, schedule: str = "constant", warmup: int = 0) -> float:
    """Learning rate for 0-based ``step`` of ``total``: linear warmup, then constant or cosine to 0."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if schedule == "constant":
        return base_lr
    span = max(total - warmup, 1)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step - warmup, span) / span))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def sa_term(out, batch, cfg: RunConfig):
    """Alignment loss on the configured adapter layer(s), or None without slot outputs."""
    if not out.slot_outputs:
        return None
    layers = sorted(out.slot_outputs)
    if cfg.sa_placement == "last_adapter_layer":
        layers = layers[-1:]
    if cfg.sa_target == "planted":
        target = batch.target_affinity
    else:
        target = feature_affinity(batch.frames).data
    terms = [sa_loss(slot_similarity(out.slot_outputs[l].attn), target) for l in layers]
    s = terms[0]
    for t in terms[1:]:
        s = s + t
    return ad.scale(s, 1.0 / len(terms)) if len(terms) > 1 else s


def training_step(model: GroundingModel, samples: Sequence, cfg: RunConfig, params, opt: OptimizerState):
    batch = collate(samples, model.vocab, with_target=True, affinity=cfg.sa_target == "planted")
    ce, out = lm_loss(batch, model)
    sa = sa_term(out, batch, cfg)
    loss = total_loss(ce, sa, cfg.lambda_sa)
    params.zero_grad()
    ad.backward(loss)
    adamw_step(params, opt)
    return {"ce": float(ce.item()), "sa": None if sa is None else float(sa.item()), "total": float(loss.item())}


def pretrain_base(model: GroundingModel, samples: Sequence, cfg: RunConfig, rng: np.random.Generator) -> list[dict]:
    """Brief next-token training of the toy base, then freeze it.

    The base learns the timestamp vocabulary, the answer grammar and a
    first grounding skill; adapters and LoRA are created afterwards.
    """
    records = []
    if cfg.pretrain_steps == 0:
        return records
    model.set_base_trainable(True)
    params = model.base_params()
    opt = OptimizerState(lr=cfg.pretrain_lr)
    step = 0
    while step < cfg.pretrain_steps:
        for idx in batches(len(samples), cfg.batch_size, rng):
            opt.lr = lr_at(step, cfg.pretrain_steps, cfg.pretrain_lr, cfg.lr_schedule, cfg.warmup_steps)
            batch = collate([samples[i] for i in idx], model.vocab, with_target=True)
            loss, _ = lm_loss(batch, model, kinds_to_predict=(TIMESTAMP, TARGET), use_adapters=False)
            params.zero_grad()
            ad.backward(loss)
            adamw_step(params, opt)
            records.append({"pretrain_step": step, "ce": float(loss.item())})
            step += 1
            if step >= cfg.pretrain_steps:
                break
    model.set_base_trainable(False)
    return records


@dataclass
class TrainResult:
    model: GroundingModel
    log: list[dict]
    pretrain_log: list[dict] = field(default_factory=list)
    opt: OptimizerState | None = None


def checkpoint_of(model: GroundingModel, cfg: RunConfig, opt: OptimizerState | None = None, meta: dict | None = None) -> Checkpoint:
    o = None
    if opt is not None:
        o = {"step": opt.step, "m": dict(opt.m), "v": dict(opt.v)}
    return Checkpoint(cfg.to_dict(), model.named_arrays(), o, meta or {})


def train(cfg: RunConfig, out_dir=None, train_set: Sequence | None = None, base_arrays: dict | None = None) -> TrainResult:
    """Pretrain (or load) the base, then fit adapters + LoRA with CE + lambda * SA."""
    streams = seed_streams(cfg.seed)
    if train_set is None:
        train_set = make_datasets(cfg)[0]
    if not train_set:
        raise TrainingError("empty training set")
    model = build_model(cfg, streams["init"])
    pre_log: list[dict] = []
    if base_arrays is not None:
        for k, t in model.base.items():
            arr = base_arrays.get(f"base.{k}")
            if arr is None or np.shape(arr) != t.shape:
                raise TrainingError(f"base weights do not match the configured model at base.{k}")
            t.data = np.array(arr, dtype=np.float64)
    else:
        pre_set = train_set
        spec = cfg.pretrain_spec()
        if spec is not None:
            pre_set = gen_dataset(spec, cfg.pretrain_n_train, 1)[0]
        pre_log = pretrain_base(model, pre_set, cfg, streams["pretrain"])
    model.reset_finetune(streams["init"])
    if cfg.train_base:
        model.set_base_trainable(True)
    params = model.trainable_params()
    if not params:
        raise TrainingError("no trainable parameters")
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.json")
        if pre_log:
            (out / "pretrain_log.jsonl").write_text("".join(json.dumps(r) + "\n" for r in pre_log))
        logf = open(out / "train_log.jsonl", "w")
    records: list[dict] = []
    step = 0
    total = cfg.epochs * steps_per_epoch(len(train_set), cfg.batch_size)
    try:
        for epoch in range(cfg.epochs):
            for idx in batches(len(train_set), cfg.batch_size, streams["data"]):
                opt.lr = lr_at(step, total, cfg.lr, cfg.lr_schedule, cfg.warmup_steps)
                try:
                    rec = training_step(model, [train_set[i] for i in idx], cfg, params, opt)
                except ad.NumericError as e:
                    raise TrainingError(f"numeric failure at step {step}: {e}") from e
                rec = {"step": step, "epoch": epoch, **rec}
                records.append(rec)
                if logf is not None:
                    logf.write(json.dumps(rec) + "\n")
                step += 1
                if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(out / "checkpoint.sgck", checkpoint_of(model, cfg, opt, {"step": step}))
    finally:
        if logf is not None:
            logf.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.sgck", checkpoint_of(model, cfg, opt, {"step": step}))
    return TrainResult(model, records, pre_log, opt)


def load_model(path) -> tuple[GroundingModel, RunConfig]:
    from .config import build_config

    ck = load_checkpoint(path)
    cfg = build_config(ck.config)
    model = build_model(cfg, np.random.default_rng(0))
    model.load_arrays(ck.arrays)
    return model, cfg


def evaluate(model: GroundingModel, samples: Sequence, cfg: RunConfig | None = None, out_dir=None, tag: str = "eval",
             use_adapters: bool = True) -> dict:
    """Greedy-decode every sample and score; optionally write metrics JSON and per-sample JSON lines."""
    if not samples:
        raise ValueError("empty evaluation set")
    bs = cfg.eval_batch_size if cfg is not None else 50
    texts, preds = predict_samples(model, samples, batch_size=bs, use_adapters=use_adapters, return_text=True)
    gts = [s.gt_window for s in samples]
    metrics = summarize(preds, gts, duration=samples[0].duration)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{tag}_predictions.jsonl", "w") as fh:
            for s, text, p in zip(samples, texts, preds):
                ok = not isinstance(p, ParseFailure)
                fh.write(json.dumps({
                    "sample_id": s.sample_id,
                    "text": text,
                    "t_start": p.start if ok else None,
                    "t_end": p.end if ok else None,
                    "parse_ok": ok,
                    "gt_start": s.gt_window[0],
                    "gt_end": s.gt_window[1],
                }) + "\n")
        (out / f"{tag}_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


def metrics_from_predictions(path, duration: float | None = None) -> dict:
    """Recompute the summary from a per-sample predictions file."""
    from .metrics import Window

    preds, gts = [], []
    for line in Path(path).read_text().splitlines():
        r = json.loads(line)
        preds.append(Window(r["t_start"], r["t_end"]) if r["parse_ok"] else ParseFailure("parse", r["text"]))
        gts.append((r["gt_start"], r["gt_end"]))
    return summarize(preds, gts, duration=duration)


def pooled_representations(model: GroundingModel, samples: Sequence, layer: int | None = None, batch_size: int = 50,
                           use_adapters: bool = True) -> np.ndarray:
    """Mean visual-token hidden state per video at the exit of ``layer`` (default: last adapter layer)."""
    if layer is None:
        layer = max(model.cfg.adapter_layers) if model.cfg.adapter_layers else 1
    out = []
    for i in range(0, len(samples), batch_size):
        batch = collate(samples[i : i + batch_size], model.vocab)
        res = decoder_forward(batch, model, positions=np.array([0]), use_adapters=use_adapters, keep_hidden=(layer,))
        h = res.hidden[layer].data[:, batch.visual_positions]
        out.append(h.mean(axis=1))
    return np.concatenate(out)


def slot_recovery(model: GroundingModel, samples: Sequence, layer: int | None = None, batch_size: int = 50) -> float:
    """Mean per-frame ARI between argmax slot assignment and the planted entity labels."""
    from .synth import ari, slot_assignment

    if not model.cfg.adapter_layers:
        raise ValueError("model has no adapter layers")
    if layer is None:
        layer = max(model.cfg.adapter_layers)
    scores = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        batch = collate(chunk, model.vocab)
        out = decoder_forward(batch, model, positions=np.array([0]))
        labels = slot_assignment(out.slot_outputs[layer].attn)
        scores += [ari(lab, s.planted_labels) for lab, s in zip(labels, chunk)]
    return float(np.mean(scores))
