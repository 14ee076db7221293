"""Synthetic analogues of the adapter's qualitative claims, shared by scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, save_config
from .diagnostics import PerturbSpec, mmd2, perturb_eval
from .decoder import predict_samples
from .io import save_checkpoint
from .train import checkpoint_of, evaluate, make_datasets, pooled_representations, slot_recovery, train


def _seeded(cfg: RunConfig, seed: int) -> RunConfig:
    # a fresh synthetic world per seed, so seeds differ in data as well as init
    return replace(cfg, seed=seed, world_seed=seed)


def slot_recovery_experiment(cfg: RunConfig, seeds: Sequence[int], lambdas: Sequence[float] = (0.1, 0.0)) -> dict:
    """Held-out ARI of argmax slot maps vs planted entities, and the SA trajectory, per seed and lambda."""
    t0 = time.perf_counter()
    out = {"seeds": list(seeds), "ari": {}, "sa_first": {}, "sa_last": {}}
    for lam in lambdas:
        out["ari"][lam], out["sa_first"][lam], out["sa_last"][lam] = [], [], []
    for seed in seeds:
        c = _seeded(cfg, seed)
        tr, ev, _ = make_datasets(c)
        for lam in lambdas:
            res = train(replace(c, lambda_sa=lam), train_set=tr)
            sa = [r["sa"] for r in res.log]
            out["ari"][lam].append(slot_recovery(res.model, ev))
            out["sa_first"][lam].append(sa[0])
            out["sa_last"][lam].append(sa[-1])
    out["seconds"] = time.perf_counter() - t0
    return out


def domain_gap(model, id_samples: Sequence, ood_samples: Sequence, layer: int | None = None) -> dict:
    """Source-to-target MMD^2 of pooled hidden states at the last adapter layer, with and without the adapters."""
    res = {}
    for name, use in (("adapter", True), ("baseline", False)):
        a = pooled_representations(model, id_samples, layer=layer, use_adapters=use)
        b = pooled_representations(model, ood_samples, layer=layer, use_adapters=use)
        res[name] = mmd2(a, b).estimate
    return res


def mmd_gap_experiment(cfg: RunConfig, seeds: Sequence[int]) -> dict:
    """Per seed: train with slot adapters, then compare ID-vs-OOD MMD^2 with the adapters on and bypassed."""
    t0 = time.perf_counter()
    rows = []
    for seed in seeds:
        c = _seeded(cfg, seed)
        tr, ev, ood = make_datasets(c)
        res = train(c, train_set=tr)
        rows.append({"seed": seed, **domain_gap(res.model, ev, ood)})
    return {"rows": rows, "seconds": time.perf_counter() - t0}


def grounding_experiment(cfg: RunConfig, lambdas: Sequence[float] = (0.1, 0.0), out_dir=None, base_arrays=None) -> dict:
    """Pretrain one frozen base, fine-tune adapters + LoRA once per lambda on the same seed, score ID and OOD.

    Returns metrics per lambda plus the trained models (key ``models``).
    """
    t0 = time.perf_counter()
    tr, ev, ood = make_datasets(cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics, models = {}, {}
    base = base_arrays
    for lam in lambdas:
        c = replace(cfg, lambda_sa=lam)
        run_dir = out / f"lambda_{lam:g}" if out is not None else None
        res = train(c, run_dir, train_set=tr, base_arrays=base)
        if base is None:
            base = {f"base.{k}": t.data.copy() for k, t in res.model.base.items()}
        models[lam] = res.model
        metrics[lam] = {
            "id": evaluate(res.model, ev, c, run_dir, tag="id"),
            "ood": evaluate(res.model, ood, c, run_dir, tag="ood"),
            "final_ce": res.log[-1]["ce"],
            "pretrain_final_ce": res.pretrain_log[-1]["ce"] if res.pretrain_log else None,
        }
    if out is not None:
        save_config(cfg, out / "config.json")
        save_checkpoint(out / "base.sgck", checkpoint_of(models[lambdas[0]], cfg, meta={"role": "base"}))
    return {"metrics": metrics, "models": models, "base": base, "data": (tr, ev, ood),
            "seconds": time.perf_counter() - t0}


def perturbation_experiment(model, samples: Sequence, seeds: Sequence[int], noise_scale: float = 1.0, tau: float = 0.7,
                            batch_size: int = 50) -> dict:
    """R1@tau drop under GT-window vs equal-length random-window noise, per perturbation seed."""

    def predict(batch):
        return predict_samples(model, batch, batch_size=batch_size)

    clean = predict(samples)
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for mode in ("gt_window", "random_window"):
            r = perturb_eval(predict, samples, PerturbSpec(mode, noise_scale=noise_scale, seed=seed), tau=tau,
                             clean_preds=clean)
            row[mode] = r.as_dict()
        rows.append(row)
    gt = float(np.mean([r["gt_window"]["drop"] for r in rows]))
    rnd = float(np.mean([r["random_window"]["drop"] for r in rows]))
    return {"rows": rows, "gt_drop": gt, "random_drop": rnd}
