"""End-to-end gradient verification of the full training objective."""

from __future__ import annotations

import numpy as np

from ..config import ModelConfig
from ..encoders import init_params
from ..numerics import GradCheckReport, grad_check, precision
from ..synthdata import CorpusSpec, generate_corpus
from .train import assemble_batch, forward_loss

E2E_TOLERANCE = 1e-3


def end_to_end_grad_check(cfg: ModelConfig, tolerance: float = E2E_TOLERANCE, h: float = 1e-5) -> tuple[GradCheckReport, list[str]]:
    """Finite-difference check of ``total_loss`` w.r.t. every parameter.

    Gumbel noise and the batch are fixed by the step index, so both sides see
    the same function.  Hard assignment must be off: its forward pass is
    piecewise constant, which central differences cannot follow.
    """
    if cfg.hard_assign:
        raise ValueError("end-to-end gradient check needs hard_assign=false")
    cfg = cfg.replace(float64=True)
    scenes = generate_corpus(
        CorpusSpec(count=cfg.batch_size, seed=cfg.seed, image_size=cfg.image_size, max_len=cfg.max_len)
    )
    with precision(np.float64):
        params = init_params(cfg)
        images, tokens, prompts = assemble_batch(cfg, scenes, 0)
    names = list(params)
    tensors = [params[n] for n in names]

    def objective(*_):
        return forward_loss(params, images, tokens, prompts, 0).total

    return grad_check(objective, tensors, h=h, tolerance=tolerance), names
