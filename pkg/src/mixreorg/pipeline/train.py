"""Training loop: batch assembly, three-branch forward, AdamW and logging."""

from __future__ import annotations

import logging
import math
from collections import deque
from pathlib import Path
from typing import Sequence

import numpy as np

from ..config import ModelConfig
from ..encoders import EncoderParams, encode_text, init_params
from ..losses import LossBundle, total_loss
from ..mixing import batch_plans_for_step, build_batch_mask, encode_branches
from ..numerics import NonFiniteError, exp, precision
from ..numerics import rng as rngmod
from ..synthdata import SyntheticScene, prompt_labels, tokenize
from .checkpoint import METRIC_COLUMNS, RING_SIZE, TrainState, checkpoint_path, save_checkpoint

log = logging.getLogger(__name__)

# excluded from weight decay besides every 1-D tensor
NO_DECAY = frozenset({"pos", "group1", "group2", "text_pos"})


class TrainingAborted(RuntimeError):
    """Training stopped early; checkpoints already on disk are left untouched."""


class NumericalAbort(TrainingAborted):
    pass


class StorageAbort(TrainingAborted):
    pass


def lr_at(cfg: ModelConfig, step: int) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, cosine decay to zero after."""
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(1, cfg.steps - warm)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(step - warm, span) / span))


def decays(name: str, value) -> bool:
    return value.ndim >= 2 and name not in NO_DECAY


def adamw_step(state: TrainState, lr: float) -> None:
    cfg = state.config
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in state.params.items():
        g = p.grad
        if g is None:
            continue
        m = state.adam_m.get(name)
        if m is None:
            m = state.adam_m[name] = np.zeros_like(p.data)
            state.adam_v[name] = np.zeros_like(p.data)
        v = state.adam_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        if decays(name, p.data):
            update = update + cfg.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return rngmod.stream(seed, "epoch-order", epoch).permutation(n)


def batch_indices(cfg: ModelConfig, step: int, n: int) -> np.ndarray:
    """Scene indices for ``step``: consecutive slices of per-epoch permutations."""
    if n < cfg.batch_size:
        raise ValueError(f"dataset of {n} scenes is smaller than batch {cfg.batch_size}")
    per_epoch = n // cfg.batch_size
    epoch, slot = divmod(step, per_epoch)
    order = epoch_order(cfg.seed, epoch, n)
    return order[slot * cfg.batch_size : (slot + 1) * cfg.batch_size]


def assemble_batch(cfg: ModelConfig, scenes: Sequence[SyntheticScene], step: int):
    """Images ``[B,H,W,3]``, caption tokens ``[B,L]`` and prompt tokens ``[K,B,L]``."""
    idx = batch_indices(cfg, step, len(scenes))
    batch = [scenes[i] for i in idx]
    images = np.stack([s.image for s in batch])
    tokens = np.stack([s.tokens for s in batch])
    prompts = np.empty((cfg.K, len(batch), cfg.max_len), dtype=np.int64)
    for j, s in enumerate(batch):
        rng = rngmod.stream(cfg.seed, "prompts", step, j)
        for k, text in enumerate(prompt_labels(s.nouns, rng, cfg.K, caption=s.caption)):
            prompts[k, j] = tokenize(text, cfg.max_len)
    return images, tokens, prompts


def forward_loss(params: EncoderParams, images, tokens, prompts, step: int) -> LossBundle:
    """Full training objective for one batch (plans and noise derived from ``step``)."""
    cfg = params.config
    b = images.shape[0]
    plans = batch_plans_for_step(cfg, step, b)
    noise = rngmod.stream(cfg.seed, rngmod.GUMBEL, step) if cfg.gumbel else None
    branches = encode_branches(params, images, plans, noise)
    # captions and prompts share one text-encoder pass
    z = encode_text(params, np.concatenate([tokens, prompts.reshape(-1, prompts.shape[-1])]))
    z_text = z[:b]
    z_prompts = z[b:].reshape(cfg.K, b, cfg.joint_dim)
    tau = exp(params["log_tau"])
    return total_loss(branches, build_batch_mask(plans, b), z_text, z_prompts, tau, cfg.use_seg, cfg.use_re)


def train_step(state: TrainState, scenes: Sequence[SyntheticScene]) -> tuple:
    """One optimisation step; returns and records the metrics row."""
    cfg = state.config
    step = state.step
    images, tokens, prompts = assemble_batch(cfg, scenes, step)
    try:
        bundle = forward_loss(state.params, images, tokens, prompts, step)
        values = bundle.values()
        if not all(math.isfinite(v) for v in values.values()):
            raise NonFiniteError(f"non-finite loss {values}")
        state.params.zero_grad()
        bundle.total.backward()
    except NonFiniteError as exc:
        raise NumericalAbort(f"numerical failure at step {step}: {exc}") from exc
    lr = lr_at(cfg, step)
    adamw_step(state, lr)
    state.params.clamp_tau()
    state.params.zero_grad()
    state.step += 1
    row = (step, lr, state.params.tau) + tuple(values[f] for f in LossBundle.FIELDS)
    state.metrics.append(row)
    return row


def _save(out_dir: Path | None, state: TrainState) -> None:
    if out_dir is None:
        return
    try:
        save_checkpoint(checkpoint_path(out_dir, state.step), state)
    except OSError as exc:
        raise StorageAbort(f"could not write checkpoint at step {state.step}: {exc}") from exc


def _format_row(row: tuple) -> str:
    return "\t".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]])


def train(
    cfg: ModelConfig,
    scenes: Sequence[SyntheticScene],
    out_dir=None,
    state: TrainState | None = None,
) -> TrainState:
    """Run ``cfg.steps`` optimisation steps; resumes from ``state`` when given.

    With ``out_dir`` set, writes ``metrics.tsv`` plus checkpoints at step 0,
    every ``ckpt_every`` steps and at the end.
    """
    cfg.validate()
    dtype = np.float64 if cfg.float64 else np.float32
    with precision(dtype):
        if state is None:
            state = TrainState(step=0, params=init_params(cfg), metrics=deque(maxlen=RING_SIZE))
        out = Path(out_dir) if out_dir is not None else None
        metrics_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_path = out / "metrics.tsv"
            fresh = state.step == 0 or not metrics_path.exists()
            metrics_fh = open(metrics_path, "w" if fresh else "a", encoding="utf-8")
            if fresh:
                metrics_fh.write("\t".join(METRIC_COLUMNS) + "\n")
                _save(out, state)
        try:
            while state.step < cfg.steps:
                row = train_step(state, scenes)
                step = int(row[0])
                if metrics_fh is not None:
                    metrics_fh.write(_format_row(row) + "\n")
                    metrics_fh.flush()
                if step % 50 == 0:
                    log.info("step %d total %.4f l_seg %.4f", step, row[-1], row[3])
                if cfg.ckpt_every and state.step % cfg.ckpt_every == 0 and state.step < cfg.steps:
                    _save(out, state)
            if out is not None and state.step > 0 and not checkpoint_path(out, state.step).exists():
                _save(out, state)
        except OSError as exc:
            raise StorageAbort(f"I/O failure: {exc}") from exc
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
    return state


def final_seg_loss(state: TrainState, window: int = 50) -> float:
    """Mean ``l_seg`` over the last ``window`` logged steps."""
    rows = list(state.metrics)[-window:]
    if not rows:
        raise ValueError("no logged steps")
    col = METRIC_COLUMNS.index("l_seg")
    return float(np.mean([r[col] for r in rows]))
