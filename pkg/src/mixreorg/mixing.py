"""Patch mixing across images, its ground-truth masks, and exact restoration.

A mix group of ``M`` consecutive batch images is turned into ``M`` mixed
images.  At every patch position the sources form a permutation of the
group, so each original patch lands in exactly one mixed image and the mix
can be inverted bitwise.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import (
    BranchOutput,
    EncoderParams,
    contextual,
    expand_tokens,
    group_and_project,
    patch_embed,
    stage1,
    transformer_layer,
)
from .numerics import Tensor, concat, gather_positions
from .numerics import rng as rngmod
from .synthdata import FormatError

# incremented whenever mixed-branch machinery runs; evaluation paths assert it stays put
COUNTERS: Counter = Counter()


@dataclass(frozen=True)
class MixPlan:
    M: int
    N: int
    group_offset: int
    source: np.ndarray  # M x N local image indices

    def __post_init__(self):
        src = np.asarray(self.source)
        if src.shape != (self.M, self.N):
            raise ValueError(f"source shape {src.shape} != ({self.M}, {self.N})")
        if not (np.sort(src, axis=0) == np.arange(self.M)[:, None]).all():
            raise ValueError("every source column must be a permutation of 0..M-1")
        object.__setattr__(self, "source", src.astype(np.int64))

    @property
    def inverse(self) -> np.ndarray:
        """``inverse[j, i]`` = mixed image that received patch ``i`` of image ``j``."""
        inv = np.empty_like(self.source)
        np.put_along_axis(inv, self.source, np.repeat(np.arange(self.M)[:, None], self.N, 1), axis=0)
        return inv

    def __eq__(self, other):
        if not isinstance(other, MixPlan):
            return NotImplemented
        return (self.M, self.N, self.group_offset) == (other.M, other.N, other.group_offset) and np.array_equal(
            self.source, other.source
        )

    __hash__ = None


def make_mix_plan(rng: np.random.Generator, M: int, N: int, group_offset: int = 0) -> MixPlan:
    """Independent Fisher-Yates shuffle of the ``M`` sources at every position."""
    if M < 1:
        raise ValueError("M must be >= 1")
    COUNTERS["make_mix_plan"] += 1
    src = np.repeat(np.arange(M, dtype=np.int64)[:, None], N, axis=1)
    cols = np.arange(N)
    for j in range(M - 1, 0, -1):
        r = rng.integers(0, j + 1, size=N)
        top = src[j, cols].copy()
        src[j, cols] = src[r, cols]
        src[r, cols] = top
    return MixPlan(M, N, group_offset, src)


def make_batch_plans(rng: np.random.Generator, batch: int, M: int, N: int) -> list[MixPlan]:
    if batch % M:
        raise ValueError(f"M={M} does not divide batch {batch}")
    return [make_mix_plan(rng, M, N, g * M) for g in range(batch // M)]


def _as_plans(plans) -> list[MixPlan]:
    return [plans] if isinstance(plans, MixPlan) else list(plans)


def global_source(plans: Sequence[MixPlan]) -> np.ndarray:
    """Batch-wide index array: row ``offset + m`` holds ``offset + source[m]``."""
    plans = sorted(_as_plans(plans), key=lambda p: p.group_offset)
    return np.concatenate([p.group_offset + p.source for p in plans], axis=0)


def _check(features: Tensor, plans: list[MixPlan]) -> None:
    total = sum(p.M for p in plans)
    n = plans[0].N
    if features.ndim < 2 or features.shape[0] != total or features.shape[1] != n:
        raise ValueError(f"features {features.shape} do not match plan(s) covering {total} images x {n} patches")


def apply_mix(features: Tensor, plans) -> Tensor:
    """``out[m, i] = features[source[m, i], i]`` (pure gather).

    ``plans`` is one plan applied to that group's ``M`` images, or the plans
    of consecutive groups covering a whole batch.
    """
    plans = _as_plans(plans)
    _check(features, plans)
    src = plans[0].source if len(plans) == 1 else global_source(plans)
    return gather_positions(features, src)


def restore(features: Tensor, plans) -> Tensor:
    """Inverse of :func:`apply_mix`: ``out[j, i] = features[m, i]`` where ``source[m, i] = j``."""
    plans = _as_plans(plans)
    _check(features, plans)
    if len(plans) == 1:
        return gather_positions(features, plans[0].inverse)
    inv = np.concatenate([p.group_offset + p.inverse for p in sorted(plans, key=lambda p: p.group_offset)], axis=0)
    return gather_positions(features, inv)


def build_mixed_mask(plan: MixPlan, batch: int) -> np.ndarray:
    """``M x N x B`` one-hot: mixed patch ``(m, i)`` belongs to caption ``offset + source[m, i]``."""
    if plan.group_offset < 0 or plan.group_offset + plan.M > batch:
        raise ValueError(f"group offset {plan.group_offset} + M {plan.M} exceeds batch {batch}")
    mask = np.zeros((plan.M, plan.N, batch))
    np.put_along_axis(mask, (plan.group_offset + plan.source)[..., None], 1.0, axis=-1)
    return mask


def build_batch_mask(plans: Sequence[MixPlan], batch: int) -> np.ndarray:
    return np.concatenate([build_mixed_mask(p, batch) for p in sorted(plans, key=lambda p: p.group_offset)], axis=0)


def progressive_inject(mixed_tokens: Tensor, original_prev: Tensor, plans) -> Tensor:
    """Mixed-branch patch tokens plus the mixed original-branch features of the previous layer."""
    if mixed_tokens.shape != original_prev.shape:
        raise ValueError(f"shape mismatch {mixed_tokens.shape} vs {original_prev.shape}")
    return mixed_tokens + apply_mix(original_prev, plans)


@dataclass
class Branches:
    original: BranchOutput
    mixed: BranchOutput
    restored: BranchOutput
    plans: list


def encode_branches(
    params: EncoderParams,
    images: np.ndarray,
    plans: Sequence[MixPlan],
    rng: np.random.Generator | None = None,
) -> Branches:
    """Forward all three branches for a batch partitioned into mix groups."""
    cfg = params.config
    plans = _as_plans(plans)
    COUNTERS["encode_mixed"] += 1
    embedded = patch_embed(params, images)
    b = embedded.shape[0]
    if sum(p.M for p in plans) != b or any(p.M != cfg.M for p in plans):
        raise ValueError(f"plans must cover the batch of {b} in groups of M={cfg.M}")

    ctx = contextual(params, embedded)
    x_orig, orig_inputs = stage1(params, ctx)
    original = group_and_project(params, x_orig[:, : cfg.s1], x_orig[:, cfg.s1 :], rng)

    if cfg.cm:
        mixed = apply_mix(ctx, plans)
    else:
        mixed = contextual(params, apply_mix(embedded, plans))
    x = concat([expand_tokens(params["group1"], b), mixed], axis=1)
    for i in range(cfg.stage1_layers):
        if i < cfg.P:
            # averaged so that a degenerate (M=1) mix reproduces the original branch
            patches = progressive_inject(x[:, cfg.s1 :], orig_inputs[i], plans) * 0.5
            x = concat([x[:, : cfg.s1], patches], axis=1)
        x = transformer_layer(params, f"stage1.{i}", x, cfg.heads)

    group_m, patches_m = x[:, : cfg.s1], x[:, cfg.s1 :]
    mixed_out = group_and_project(params, group_m, patches_m, rng)
    restored_out = group_and_project(params, group_m, restore(patches_m, plans), rng)
    return Branches(original, mixed_out, restored_out, plans)


def encode_image_mixed(params: EncoderParams, images: np.ndarray, plans, rng=None) -> tuple[BranchOutput, BranchOutput]:
    br = encode_branches(params, images, plans, rng)
    return br.mixed, br.restored


def batch_plans_for_step(cfg, step: int, batch: int) -> list[MixPlan]:
    return make_batch_plans(rngmod.stream(cfg.seed, rngmod.MIXING, step), batch, cfg.M, cfg.N)


# ---------------------------------------------------------------------------
# golden plan files

PLAN_MAGIC = b"MXPL"
PLAN_VERSION = 1
_PLAN_HEADER = struct.Struct("<4sIIII")


def write_plan(path, plan: MixPlan) -> None:
    with open(path, "wb") as fh:
        fh.write(_PLAN_HEADER.pack(PLAN_MAGIC, PLAN_VERSION, plan.M, plan.N, plan.group_offset))
        fh.write(plan.source.astype("<u2").tobytes())


def read_plan(path) -> MixPlan:
    blob = Path(path).read_bytes()
    if len(blob) < _PLAN_HEADER.size:
        raise FormatError(f"plan file truncated at offset {len(blob)}")
    magic, version, M, N, offset = _PLAN_HEADER.unpack_from(blob)
    if magic != PLAN_MAGIC:
        raise FormatError(f"bad plan magic {magic!r}")
    if version != PLAN_VERSION:
        raise FormatError(f"unsupported plan version {version}")
    need = _PLAN_HEADER.size + 2 * M * N
    if len(blob) != need:
        raise FormatError(f"plan payload size {len(blob)} != expected {need}")
    src = np.frombuffer(blob, "<u2", M * N, _PLAN_HEADER.size).reshape(M, N)
    return MixPlan(M, N, offset, src)
