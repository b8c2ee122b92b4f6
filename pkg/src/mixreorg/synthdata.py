"""Procedural shape scenes with exact pixel masks and templated captions.

Each scene holds one to three non-overlapping coloured shapes on a grey
background.  Class ids are ``1 + color * len(SHAPES) + shape`` with 0 reserved
for background, so every pixel has an exact label and every caption names the
objects it covers.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .numerics import rng as rngmod

SHAPES = ("circle", "square", "triangle", "cross", "ring")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
RGB = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.80, 0.10],
        [0.10, 0.20, 0.90],
        [0.90, 0.90, 0.10],
        [0.85, 0.10, 0.85],
        [0.10, 0.85, 0.85],
    ],
    dtype=np.float32,
)
BACKGROUND = 0.5
NOISE_SIGMA = 0.02
MAX_OBJECTS = 3
PLACEMENT_ATTEMPTS = 100

PROMPT_TEMPLATES = ("a photo of a {}", "an image of a {}", "a {} in the scene")

VOCAB: tuple[str, ...] = tuple(
    resources.files("mixreorg").joinpath("data/vocab.txt").read_text().split()
)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD, BOS, EOS = TOKEN_ID["<pad>"], TOKEN_ID["<bos>"], TOKEN_ID["<eos>"]
VOCAB_HASH = int.from_bytes(hashlib.sha256("\n".join(VOCAB).encode()).digest()[:8], "little")

NUM_CLASSES = len(COLORS) * len(SHAPES)


class FormatError(ValueError):
    """A binary file failed validation (bad magic, version, digest, or truncation)."""


def class_id(color: int, shape: int) -> int:
    return 1 + color * len(SHAPES) + shape


def class_noun(cid: int) -> str:
    color, shape = divmod(cid - 1, len(SHAPES))
    return f"{COLORS[color]} {SHAPES[shape]}"


def class_captions(template: str = PROMPT_TEMPLATES[0]) -> list[str]:
    """Caption for every foreground class, ordered by class id (1..NUM_CLASSES)."""
    return [template.format(class_noun(c)) for c in range(1, NUM_CLASSES + 1)]


# ---------------------------------------------------------------------------
# tokenizer


def tokenize(caption: str, max_len: int = 16) -> np.ndarray:
    words = caption.split()
    unknown = [w for w in words if w not in TOKEN_ID]
    if unknown:
        raise ValueError(f"unknown words in caption: {unknown}")
    ids = [BOS] + [TOKEN_ID[w] for w in words] + [EOS]
    if len(ids) > max_len:
        warnings.warn(f"caption truncated from {len(ids)} to {max_len} tokens", stacklevel=2)
        ids = ids[: max_len - 1] + [EOS]
    return np.array(ids + [PAD] * (max_len - len(ids)), dtype=np.int64)


def detokenize(ids) -> str:
    words = []
    for i in np.asarray(ids).tolist():
        if i == BOS:
            continue
        if i in (EOS, PAD):
            break
        words.append(VOCAB[i])
    return " ".join(words)


def caption_for(nouns) -> str:
    if not nouns:
        return "a photo of the scene"
    parts = [f"{COLORS[c]} {SHAPES[s]}" for c, s in nouns]
    return "a photo of " + " and ".join(parts)


def prompt_labels(nouns, rng: np.random.Generator, K: int, templates=PROMPT_TEMPLATES, caption: str = "") -> list[str]:
    """K templated single-object prompts; template k is filled with a sampled noun."""
    if not nouns:
        return [caption or caption_for(nouns)] * K
    if K > len(templates) * len(nouns):
        raise ValueError(f"K={K} exceeds templates x nouns = {len(templates) * len(nouns)}")
    out = []
    for k in range(K):
        c, s = nouns[int(rng.integers(len(nouns)))]
        out.append(templates[k % len(templates)].format(f"{COLORS[c]} {SHAPES[s]}"))
    return out


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SyntheticScene:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    pixel_mask: np.ndarray  # H x W uint8 class ids
    tokens: np.ndarray  # max_len token ids
    nouns: list = field(default_factory=list)  # [(color, shape), ...]

    @property
    def caption(self) -> str:
        return detokenize(self.tokens)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticScene):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.pixel_mask, other.pixel_mask)
            and np.array_equal(self.tokens, other.tokens)
            and [tuple(n) for n in self.nouns] == [tuple(n) for n in other.nouns]
        )


@dataclass
class CorpusSpec:
    count: int = 64
    seed: int = 0
    image_size: int = 64
    max_len: int = 16
    min_objects: int = 1
    max_objects: int = MAX_OBJECTS
    held_out: tuple = ((0, 0), (2, 1))  # red circle, blue square
    split: str = "train"  # train | heldout | single | all
    first_index: int = 0

    def __post_init__(self):
        self.held_out = tuple(tuple(p) for p in self.held_out)
        if self.split not in ("train", "heldout", "single", "all"):
            raise ValueError(f"unknown split {self.split!r}")
        if not 0 <= self.min_objects <= self.max_objects <= MAX_OBJECTS:
            raise ValueError("need 0 <= min_objects <= max_objects <= 3")

    def allowed_pairs(self) -> list[tuple[int, int]]:
        pairs = [(c, s) for c in range(len(COLORS)) for s in range(len(SHAPES))]
        if self.split in ("train", "single"):
            pairs = [p for p in pairs if p not in self.held_out]
        return pairs

    @classmethod
    def from_text(cls, text: str) -> "CorpusSpec":
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "held_out":
                kw[key] = tuple(_parse_pair(p) for p in val.split(",") if p.strip())
            elif key == "split":
                kw[key] = val
            elif key in ("count", "seed", "image_size", "max_len", "min_objects", "max_objects", "first_index"):
                kw[key] = int(val)
            else:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        return cls(**kw)


def _parse_pair(text: str) -> tuple[int, int]:
    color, shape = text.strip().split(":")
    return COLORS.index(color.strip()), SHAPES.index(shape.strip())


def _shape_mask(shape: int, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    name = SHAPES[shape]
    if name == "circle":
        return dx * dx + dy * dy <= r * r
    if name == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if name == "triangle":
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if name == "cross":
        arm = 0.3 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if name == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(name)


def _sample_nouns(rng: np.random.Generator, spec: CorpusSpec, n: int) -> list[tuple[int, int]]:
    allowed = spec.allowed_pairs()
    nouns = []
    for k in range(n):
        if spec.split == "heldout" and k == 0:
            pool = list(spec.held_out)
        else:
            pool = allowed
        nouns.append(pool[int(rng.integers(len(pool)))])
    return nouns


def generate_scene(rng: np.random.Generator, spec: CorpusSpec) -> SyntheticScene:
    size = spec.image_size
    if spec.split == "single":
        n_obj = 1
    else:
        lo = max(spec.min_objects, 1 if spec.split == "heldout" else 0)
        n_obj = int(rng.integers(lo, max(lo, spec.max_objects) + 1))
    wanted = _sample_nouns(rng, spec, n_obj)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    mask = np.zeros((size, size), dtype=np.uint8)
    boxes: list[tuple[float, float, float, float]] = []
    nouns: list[tuple[int, int]] = []
    r_lo, r_hi = 0.125 * size, 0.22 * size
    for color, shape in wanted:
        for _ in range(PLACEMENT_ATTEMPTS):
            r = float(rng.uniform(r_lo, r_hi))
            cx = float(rng.uniform(r, size - r))
            cy = float(rng.uniform(r, size - r))
            box = (cx - r - 1, cy - r - 1, cx + r + 1, cy + r + 1)
            if all(box[2] < b[0] or b[2] < box[0] or box[3] < b[1] or b[3] < box[1] for b in boxes):
                break
        else:
            # out of room: keep the objects already placed
            break
        region = _shape_mask(shape, xs - cx, ys - cy, r)
        mask[region] = class_id(color, shape)
        boxes.append(box)
        nouns.append((color, shape))

    image = np.full((size, size, 3), BACKGROUND, dtype=np.float32)
    for cid in np.unique(mask):
        if cid:
            image[mask == cid] = RGB[(cid - 1) // len(SHAPES)]
    image += rng.normal(0.0, NOISE_SIGMA, image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)
    tokens = tokenize(caption_for(nouns), spec.max_len)
    return SyntheticScene(image=image, pixel_mask=mask, tokens=tokens, nouns=nouns)


def generate_corpus(spec: CorpusSpec) -> list[SyntheticScene]:
    salt = {"train": 0, "heldout": 1, "single": 2, "all": 3}[spec.split]
    return [
        generate_scene(rngmod.stream(spec.seed, rngmod.DATA, salt, spec.first_index + i), spec)
        for i in range(spec.count)
    ]


def patch_majority_labels(pixel_mask: np.ndarray, patch: int) -> np.ndarray:
    """Majority class per non-overlapping patch (ties go to the smaller id)."""
    h, w = pixel_mask.shape
    blocks = pixel_mask.reshape(h // patch, patch, w // patch, patch).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // patch, w // patch, -1)
    counts = np.apply_along_axis(np.bincount, -1, blocks, minlength=NUM_CLASSES + 1)
    return counts.argmax(-1)


# ---------------------------------------------------------------------------
# binary dataset format

DS_MAGIC = b"MXDS"
DS_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIIIIQ")
_NOUN_SLOTS = MAX_OBJECTS


def record_size(h: int, w: int, max_len: int) -> int:
    return h * w * 3 * 4 + h * w + max_len * 2 + 1 + 2 * _NOUN_SLOTS


def write_dataset(path, scenes: list[SyntheticScene]) -> None:
    if scenes:
        h, w = scenes[0].pixel_mask.shape
        max_len = len(scenes[0].tokens)
    else:
        h = w = max_len = 0
    with open(path, "wb") as fh:
        fh.write(_DS_HEADER.pack(DS_MAGIC, DS_VERSION, len(scenes), h, w, max_len, VOCAB_HASH))
        for sc in scenes:
            fh.write(np.ascontiguousarray(sc.image, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(sc.pixel_mask, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(sc.tokens, dtype="<u2").tobytes())
            slots = [255] * (2 * _NOUN_SLOTS)
            for k, (c, s) in enumerate(sc.nouns):
                slots[2 * k : 2 * k + 2] = [c, s]
            fh.write(bytes([len(sc.nouns)] + slots))


def read_dataset(path) -> list[SyntheticScene]:
    blob = Path(path).read_bytes()
    if len(blob) < _DS_HEADER.size:
        raise FormatError(f"dataset truncated in header at offset {len(blob)}")
    magic, version, count, h, w, max_len, vhash = _DS_HEADER.unpack_from(blob, 0)
    if magic != DS_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DS_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if vhash != VOCAB_HASH:
        raise FormatError(f"vocabulary hash mismatch: file {vhash:#x}, shipped {VOCAB_HASH:#x}")
    rec = record_size(h, w, max_len)
    expected = _DS_HEADER.size + count * rec
    if len(blob) < expected:
        scene = (len(blob) - _DS_HEADER.size) // rec if rec else 0
        raise FormatError(f"dataset truncated at offset {len(blob)} (scene {scene}, expected {expected} bytes)")
    if len(blob) > expected:
        raise FormatError(f"trailing bytes after offset {expected}")
    scenes = []
    off = _DS_HEADER.size
    for _ in range(count):
        image = np.frombuffer(blob, "<f4", h * w * 3, off).reshape(h, w, 3).astype(np.float32)
        off += h * w * 12
        mask = np.frombuffer(blob, np.uint8, h * w, off).reshape(h, w).copy()
        off += h * w
        tokens = np.frombuffer(blob, "<u2", max_len, off).astype(np.int64)
        off += max_len * 2
        n = blob[off]
        slots = blob[off + 1 : off + 1 + 2 * _NOUN_SLOTS]
        off += 1 + 2 * _NOUN_SLOTS
        if n > _NOUN_SLOTS:
            raise FormatError(f"bad noun count {n} at offset {off}")
        nouns = [(slots[2 * k], slots[2 * k + 1]) for k in range(n)]
        scenes.append(SyntheticScene(image=image, pixel_mask=mask, tokens=tokens, nouns=nouns))
    return scenes


def write_vocab(path) -> None:
    Path(path).write_text("\n".join(VOCAB) + "\n")
