"""Mask prediction and the MixReorg loss terms."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .encoders import TAU_MAX, TAU_MIN
from .numerics import Tensor, cross_entropy, log_softmax, logsumexp, softmax


def _tau_value(tau) -> Tensor | float:
    if isinstance(tau, Tensor):
        return tau
    if not TAU_MIN <= tau <= TAU_MAX:
        warnings.warn(f"temperature {tau} clamped to [{TAU_MIN}, {TAU_MAX}]", stacklevel=3)
        tau = min(max(tau, TAU_MIN), TAU_MAX)
    return float(tau)


def similarity(seg_embed: Tensor, text_embed: Tensor, tau) -> Tensor:
    """S[m, s, b]: softmax over the batch texts of ``cos(seg_ms, text_b) / tau``."""
    logits = (seg_embed @ text_embed.T) / _tau_value(tau)
    return softmax(logits, axis=-1)


def predict_masks(attn: Tensor, sim: Tensor) -> Tensor:
    """M_p = A @ S, ``[B_I, N, B]``."""
    if attn.shape[-1] != sim.shape[-2] or attn.shape[0] != sim.shape[0]:
        raise ValueError(f"attention {attn.shape} incompatible with similarity {sim.shape}")
    return attn @ sim


def seg_loss(pred_mask: Tensor, mixed_mask) -> Tensor:
    return cross_entropy(pred_mask, mixed_mask, axis=-1)


def _logits(a: Tensor, b: Tensor, tau) -> Tensor:
    return (a @ b.T) / _tau_value(tau)


def contrastive_pair_loss(z_img: Tensor, z_txt: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE: image->text plus text->image, each averaged over B."""
    b = z_img.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    diag = (np.arange(b), np.arange(b))
    i2t = -log_softmax(_logits(z_img, z_txt, tau), axis=-1)[diag].mean()
    t2i = -log_softmax(_logits(z_txt, z_img, tau), axis=-1)[diag].mean()
    return i2t + t2i


def multilabel_contrastive_loss(z_img: Tensor, z_prompts: Tensor, tau) -> Tensor:
    """Image vs. K prompt labels per image (``z_prompts`` is ``[K, B, D]``).

    Image->labels: the K positives share one log-ratio whose denominator runs
    over all K x B prompts.  Labels->image: a standard softmax over images for
    every (k, i), averaged over K and B.
    """
    if z_prompts.ndim != 3 or z_prompts.shape[0] == 0:
        raise ValueError("need K >= 1 prompt sets shaped [K, B, D]")
    k, b, d = z_prompts.shape
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    # [B, K, B]: image i against prompt set k of image j
    logits = (z_img @ z_prompts.reshape(k * b, d).T).reshape(b, k, b) / _tau_value(tau)
    idx = np.arange(b)
    pos = logits[idx, :, idx]  # [B, K]
    i2t = (logsumexp(logits.reshape(b, k * b), axis=-1) - logsumexp(pos, axis=-1)).mean()
    # [K, B, B]: prompt i of set k against image j
    t_logits = (z_prompts @ z_img.T) / _tau_value(tau)
    t2i = -log_softmax(t_logits, axis=-1)[:, idx, idx].mean()
    return i2t + t2i


@dataclass
class LossBundle:
    l_seg: Tensor
    l_re_pair: Tensor
    l_re_multilabel: Tensor
    l_ori_pair: Tensor
    l_ori_multilabel: Tensor
    total: Tensor

    FIELDS = ("l_seg", "l_re_pair", "l_re_multilabel", "l_ori_pair", "l_ori_multilabel", "total")

    def values(self) -> dict[str, float]:
        return {f: float(getattr(self, f).data) for f in self.FIELDS}


def total_loss(
    branches,
    mixed_mask: np.ndarray,
    z_text: Tensor,
    z_prompts: Tensor,
    tau,
    use_seg: bool = True,
    use_re: bool = True,
) -> LossBundle:
    """Unit-weighted sum of the segmentation, restored and original losses.

    ``branches`` carries ``original``, ``mixed`` and ``restored`` branch
    outputs; disabled terms are still reported but do not enter ``total``.
    """
    mixed = branches.mixed
    sim = similarity(mixed.seg_embed, z_text, tau)
    l_seg = seg_loss(predict_masks(mixed.attn, sim), mixed_mask)
    l_re_pair = contrastive_pair_loss(branches.restored.z, z_text, tau)
    l_re_ml = multilabel_contrastive_loss(branches.restored.z, z_prompts, tau)
    l_ori_pair = contrastive_pair_loss(branches.original.z, z_text, tau)
    l_ori_ml = multilabel_contrastive_loss(branches.original.z, z_prompts, tau)
    terms = ([l_seg] if use_seg else []) + ([l_re_pair, l_re_ml] if use_re else []) + [l_ori_pair, l_ori_ml]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossBundle(l_seg, l_re_pair, l_re_ml, l_ori_pair, l_ori_ml, total)
