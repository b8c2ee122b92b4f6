"""Zero-shot segmentation, mIoU, classification and reorganization metrics.

Segmentation and classification only run the original-image branch; the
reorganization metric is the one evaluation that builds mixed batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..encoders import EncoderParams, encode_image_original, encode_text
from ..losses import predict_masks, similarity
from ..mixing import apply_mix, encode_branches, make_batch_plans
from ..numerics import Tensor, no_grad, precision
from ..numerics import rng as rngmod
from ..synthdata import NUM_CLASSES, SyntheticScene, class_id, tokenize
from .checkpoint import TrainState, load_checkpoint

EVAL_CHUNK = 16


def resolve_params(checkpoint) -> EncoderParams:
    """Accept a checkpoint path, a ``TrainState`` or ``EncoderParams``."""
    if isinstance(checkpoint, EncoderParams):
        return checkpoint
    if isinstance(checkpoint, TrainState):
        return checkpoint.params
    return load_checkpoint(checkpoint).params


def _dtype(params: EncoderParams):
    return np.float64 if params.config.float64 else np.float32


def class_text_embeddings(params: EncoderParams, class_captions: Sequence[str]) -> np.ndarray:
    if not class_captions:
        raise ValueError("need at least one class caption")
    ids = np.stack([tokenize(c, params.config.max_len) for c in class_captions])
    with no_grad(), precision(_dtype(params)):
        return encode_text(params, ids).data


def _upsample(patch_labels: np.ndarray, grid: int, patch: int) -> np.ndarray:
    lab = patch_labels.reshape(patch_labels.shape[:-1] + (grid, grid))
    return np.repeat(np.repeat(lab, patch, axis=-2), patch, axis=-1)


def segment_batch(params: EncoderParams, images: np.ndarray, class_embed: np.ndarray, threshold: float) -> np.ndarray:
    """``[B, H, W]`` ids: 0 is background, ``c + 1`` is ``class_captions[c]``."""
    cfg = params.config
    with no_grad(), precision(_dtype(params)):
        out = encode_image_original(params, images, rng=None)
    cos = out.seg_embed.data @ class_embed.T  # B x s2 x C
    seg_label = cos.argmax(-1) + 1
    seg_label[cos.max(-1) < threshold] = 0
    patch_seg = out.attn.data.argmax(-1)  # B x N
    patch_label = np.take_along_axis(seg_label, patch_seg, axis=1)
    return _upsample(patch_label, cfg.grid, cfg.patch_size).astype(np.int64)


def segment(checkpoint, image: np.ndarray, class_captions: Sequence[str], threshold: float | None = None) -> np.ndarray:
    """Zero-shot ``H x W`` label map for one ``H x W x 3`` image."""
    params = resolve_params(checkpoint)
    if threshold is None:
        threshold = params.config.bg_threshold
    embed = class_text_embeddings(params, class_captions)
    return segment_batch(params, np.asarray(image)[None], embed, threshold)[0]


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


# ---------------------------------------------------------------------------
# mIoU


@dataclass
class MiouResult:
    per_class: dict  # class id -> IoU, only classes present in gt or prediction
    miou: float


def accumulate_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int):
    """Intersection and union pixel counts per class id ``0..num_classes``."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    k = num_classes + 1
    inter = np.bincount(gt[pred == gt], minlength=k)[:k]
    area_p = np.bincount(pred, minlength=k)[:k]
    area_g = np.bincount(gt, minlength=k)[:k]
    return inter, area_p + area_g - inter


def miou_from_counts(inter: np.ndarray, union: np.ndarray) -> MiouResult:
    present = np.flatnonzero(union > 0)
    per = {int(c): float(inter[c] / union[c]) for c in present}
    return MiouResult(per, float(np.mean(list(per.values()))) if per else float("nan"))


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> MiouResult:
    return miou_from_counts(*accumulate_iou(pred, gt, num_classes))


def eval_miou(
    checkpoint,
    scenes: Sequence[SyntheticScene],
    class_captions: Sequence[str],
    threshold: float | None = None,
) -> MiouResult:
    """IoU per class pooled over every pixel of the set, background included."""
    params = resolve_params(checkpoint)
    if threshold is None:
        threshold = params.config.bg_threshold
    embed = class_text_embeddings(params, class_captions)
    c = len(class_captions)
    inter = np.zeros(c + 1, dtype=np.int64)
    union = np.zeros(c + 1, dtype=np.int64)
    for sl in _chunks(len(scenes), EVAL_CHUNK):
        batch = scenes[sl]
        pred = segment_batch(params, np.stack([s.image for s in batch]), embed, threshold)
        gt = np.stack([s.pixel_mask for s in batch]).astype(np.int64)
        i, u = accumulate_iou(pred, np.where(gt <= c, gt, 0), c)
        inter += i
        union += u
    return miou_from_counts(inter, union)


def random_segment_miou(
    checkpoint,
    scenes: Sequence[SyntheticScene],
    num_classes: int = NUM_CLASSES,
    draws: int = 8,
    seed: int = 0,
) -> float:
    """Chance reference: the model's own segments, each labelled uniformly from ``0..num_classes``."""
    params = resolve_params(checkpoint)
    cfg = params.config
    results = []
    for d in range(draws):
        rng = rngmod.stream(seed, "random-segments", d)
        inter = np.zeros(num_classes + 1, dtype=np.int64)
        union = np.zeros(num_classes + 1, dtype=np.int64)
        for sl in _chunks(len(scenes), EVAL_CHUNK):
            batch = scenes[sl]
            with no_grad(), precision(_dtype(params)):
                out = encode_image_original(params, np.stack([s.image for s in batch]), rng=None)
            seg_label = rng.integers(0, num_classes + 1, size=(len(batch), cfg.s2))
            patch_label = np.take_along_axis(seg_label, out.attn.data.argmax(-1), axis=1)
            pred = _upsample(patch_label, cfg.grid, cfg.patch_size)
            i, u = accumulate_iou(pred, np.stack([s.pixel_mask for s in batch]).astype(np.int64), num_classes)
            inter += i
            union += u
        results.append(miou_from_counts(inter, union).miou)
    return float(np.mean(results))


# ---------------------------------------------------------------------------
# classification


def eval_classify(
    checkpoint,
    scenes: Sequence[SyntheticScene],
    class_captions: Sequence[str],
    class_ids: Sequence[int] | None = None,
) -> tuple[float, float]:
    """Top-1 and top-``min(5, C)`` accuracy on single-object scenes.

    ``class_ids[c]`` is the scene class named by ``class_captions[c]``
    (default ``c + 1``).  Scenes with several objects or a class outside
    ``class_ids`` are skipped.
    """
    params = resolve_params(checkpoint)
    if class_ids is None:
        class_ids = list(range(1, len(class_captions) + 1))
    if len(class_ids) != len(class_captions):
        raise ValueError("class_ids and class_captions differ in length")
    lookup = {int(cid): c for c, cid in enumerate(class_ids)}
    chosen = [(s, lookup[class_id(*s.nouns[0])]) for s in scenes if len(s.nouns) == 1 and class_id(*s.nouns[0]) in lookup]
    if not chosen:
        raise ValueError("no single-object scenes with a listed class")
    embed = class_text_embeddings(params, class_captions)
    k = min(5, len(class_captions))
    hit1 = hitk = 0
    for sl in _chunks(len(chosen), EVAL_CHUNK):
        batch = chosen[sl]
        with no_grad(), precision(_dtype(params)):
            z = encode_image_original(params, np.stack([s.image for s, _ in batch]), rng=None).z.data
        cos = z @ embed.T
        # stable order so ties resolve to the lower class index
        ranked = np.argsort(-cos, axis=1, kind="stable")
        labels = np.array([lab for _, lab in batch])
        hit1 += int((ranked[:, 0] == labels).sum())
        hitk += int((ranked[:, :k] == labels[:, None]).any(axis=1).sum())
    return hit1 / len(chosen), hitk / len(chosen)


# ---------------------------------------------------------------------------
# reorganization


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # M x M, row = true source slot, column = predicted slot

    @property
    def matrix(self) -> np.ndarray:
        return self.counts / np.maximum(self.counts.sum(axis=1, keepdims=True), 1)

    @property
    def mean_diagonal(self) -> float:
        return float(np.mean(np.diag(self.matrix)))


@dataclass
class ReorgResult:
    confusion: ConfusionMatrix
    rasters: list = field(default_factory=list)  # per group: M x H x W x 3 reorganized images
    groups: int = 0


def _reorganize(mixed_images: np.ndarray, source_pred: np.ndarray, patch: int) -> np.ndarray:
    """Route each patch of each mixed image to the slot it was predicted to come from."""
    m, h, w, ch = mixed_images.shape
    g = h // patch
    tiles = mixed_images.reshape(m, g, patch, g, patch, ch).transpose(0, 1, 3, 2, 4, 5).reshape(m, g * g, patch, patch, ch)
    out = np.zeros_like(tiles)
    for r in range(m):
        out[source_pred[r], np.arange(g * g)] = tiles[r]
    return out.reshape(m, g, g, patch, patch, ch).transpose(0, 1, 3, 2, 4, 5).reshape(m, h, w, ch)


def eval_reorg(checkpoint, scenes: Sequence[SyntheticScene], max_rasters: int = 4, seed: int | None = None) -> ReorgResult:
    """Mixed-branch patch-to-caption predictions accumulated into an ``M x M`` confusion matrix.

    Scenes are taken in chunks of ``batch_size`` (trailing scenes that do
    not fill a mix group are dropped); mix plans come from a dedicated
    evaluation stream so results do not depend on training history.
    """
    params = resolve_params(checkpoint)
    cfg = params.config
    m = cfg.M
    seed = cfg.seed if seed is None else seed
    usable = len(scenes) - len(scenes) % m
    if usable == 0:
        raise ValueError(f"need at least M={m} scenes")
    counts = np.zeros((m, m), dtype=np.int64)
    rasters = []
    groups = 0
    chunk = max(m, cfg.batch_size - cfg.batch_size % m)
    for ci, sl in enumerate(_chunks(usable, chunk)):
        batch = scenes[sl]
        b = len(batch)
        images = np.stack([s.image for s in batch])
        plans = make_batch_plans(rngmod.stream(seed, "eval-mixing", ci), b, m, cfg.N)
        with no_grad(), precision(_dtype(params)):
            br = encode_branches(params, images, plans, rng=None)
            z_text = encode_text(params, np.stack([s.tokens for s in batch]))
            pred = predict_masks(br.mixed.attn, similarity(br.mixed.seg_embed, z_text, params.tau)).data
        mixed_images = None
        if len(rasters) < max_rasters:
            tiles = _patch_tiles(images, cfg.patch_size)
            mixed_images = _untile(apply_mix(Tensor(tiles), plans).data, cfg.patch_size, images.shape[1])
        for p in plans:
            rows = slice(p.group_offset, p.group_offset + m)
            slot_pred = pred[rows, :, p.group_offset : p.group_offset + m].argmax(-1)  # M x N
            np.add.at(counts, (p.source.ravel(), slot_pred.ravel()), 1)
            groups += 1
            if mixed_images is not None and len(rasters) < max_rasters:
                rasters.append(_reorganize(mixed_images[rows], slot_pred, cfg.patch_size))
    return ReorgResult(ConfusionMatrix(counts), rasters, groups)


def _patch_tiles(images: np.ndarray, patch: int) -> np.ndarray:
    b, h, w, ch = images.shape
    g = h // patch
    return images.reshape(b, g, patch, g, patch, ch).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, patch * patch * ch)


def _untile(tiles: np.ndarray, patch: int, size: int) -> np.ndarray:
    b = tiles.shape[0]
    g = size // patch
    return tiles.reshape(b, g, g, patch, patch, -1).transpose(0, 1, 3, 2, 4, 5).reshape(b, size, size, -1)


# ---------------------------------------------------------------------------
# raster output


def write_pgm(path, labels: np.ndarray, legend: Sequence[str] | None = None) -> None:
    """Binary P5 greymap of class ids; optional sidecar ``<path>.legend.txt``."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min() < 0 or labels.max() > 255:
        raise ValueError("labels must be a 2-D array of ids in 0..255")
    h, w = labels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + labels.astype(np.uint8).tobytes())
    if legend is not None:
        lines = ["0\tbackground"] + [f"{i + 1}\t{cap}" for i, cap in enumerate(legend)]
        Path(str(path) + ".legend.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    data = blob[pos + 1 : pos + 1 + w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
