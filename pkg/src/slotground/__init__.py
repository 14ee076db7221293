"""Slot adapters for temporal grounding in a small numpy decoder.

Modules: ``autodiff`` (reverse-mode engine), ``adapter`` (slot adapter),
``alignment`` (slot alignment loss), ``decoder`` (toy grounding decoder),
``diagnostics`` (MMD, similarity splits, perturbation), ``metrics``,
``synth`` (synthetic videos), ``config`` / ``train`` / ``io`` / ``cli``.
"""

__version__ = "0.1.0"
