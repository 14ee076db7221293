"""Finite-difference check of the full training loss (CE + lambda * SA) on a tiny instance."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapter import AdapterConfig
from .alignment import sa_loss, slot_similarity, total_loss
from .autodiff import numerical_grad, rel_error
from .decoder import DecoderConfig, GroundingModel, Vocab, collate, lm_loss
from .synth import ENTITY_WORDS, SynthSpec, gen_video


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tol: float
    seconds: float

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def ok(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())


def tiny_instance(seed: int = 0, T: int = 2, N: int = 16, n_slots: int = 2, randomize: bool = True,
                  train_base: bool = True, lam: float = 0.1):
    """Model, batch and loss closure for T frames of N tokens with ``n_slots`` slots.

    ``randomize`` replaces the zero-initialised W_up and LoRA B with random values
    so every parameter receives a non-trivial gradient.
    """
    rng = np.random.default_rng(seed)
    spec = SynthSpec(T=T, N=N, n_entities=2, min_window=1, max_window=T, feature_dim=4)
    samples = [gen_video(SynthSpec(**{**spec.__dict__, "seed": s}), f"g{s}") for s in range(2)]
    dcfg = DecoderConfig(n_layers=3, dim=8, heads=2, mlp_ratio=2, feature_dim=4, max_len=128,
                         adapter_layers=(1,), lora_layers=(2, 3), lora_rank=2, lora_alpha=4.0, max_decode_len=16)
    acfg = AdapterConfig(D=8, d=4, n_slots=n_slots, iters=2, heads=2)
    model = GroundingModel.create(dcfg, acfg, Vocab(ENTITY_WORDS), rng)
    if randomize:
        for ps in list(model.adapters.values()) + [model.lora]:
            for name, t in ps.items():
                if name.endswith("W_up") or name.endswith(".B"):
                    t.data = rng.normal(0.0, 0.3, size=t.shape)
    if train_base:
        model.set_base_trainable(True)
    batch = collate(samples, model.vocab, with_target=True, affinity=True)

    def loss():
        ce, out = lm_loss(batch, model)
        sa = sa_loss(slot_similarity(out.last_slot_output.attn), batch.target_affinity)
        return total_loss(ce, sa, lam)

    return model, loss


def run_gradcheck(seed: int = 0, tol: float = 1e-4, h: float = 1e-5, floor: float = 1e-6, max_entries: int | None = None,
                  randomize: bool = True) -> GradcheckReport:
    """Relative error (elementwise, floored) between reverse-mode and central-difference gradients per parameter."""
    t0 = time.perf_counter()
    model, loss = tiny_instance(seed, randomize=randomize)
    params = model.trainable_params()
    params.zero_grad()
    ad.backward(loss())
    rng = np.random.default_rng(seed + 1)
    errors = {}
    for name, t in params.items():
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            idx = rng.choice(t.data.size, size=max_entries, replace=False)
        num = numerical_grad(loss, t, h=h, indices=idx)
        ana = t.grad
        if idx is not None:
            num = num.reshape(-1)[idx]
            ana = ana.reshape(-1)[idx]
        errors[name] = rel_error(ana, num, floor=floor)
    return GradcheckReport(errors, tol, time.perf_counter() - t0)
