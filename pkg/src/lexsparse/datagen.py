"""Synthetic image-caption corpora with known concept placements."""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import PatchGrid
from .vocab import Vocabulary, tokenize

CONCEPT_WORDS = (
    "cat", "dog", "car", "tree", "boat", "bird", "apple", "horse", "giraffe", "umbrella",
    "house", "clock", "elephant", "penguin", "chair", "lamp",
)
FILLER_WORDS = (
    "small", "big", "nice", "old", "new", "bright", "dark", "quiet", "busy", "sunny",
    "cloudy", "pretty", "plain", "close", "far", "view", "scene", "day", "night",
    "outside", "inside",
)
OPENERS = ("the", "an", "this", "some", "there is", "a picture with", "an image of")
JOINERS = ("and", "with", "near", "next to", "by", "on")

CORPUS_MAGIC = b"LXCORPUS 1\n"


@dataclass
class ConceptSpec:
    concept_id: int
    word: str
    patch_signature: np.ndarray
    distractor_words: list[str] = field(default_factory=list)


@dataclass
class PairedSample:
    image: PatchGrid
    caption: str
    concepts_present: tuple[int, ...]
    placements: dict[int, list[int]]


@dataclass
class Corpus:
    train: list[PairedSample]
    val: list[PairedSample]
    test: list[PairedSample]
    bank: list[ConceptSpec]

    def split(self, name: str) -> list[PairedSample]:
        return getattr(self, name)


@dataclass
class LabeledImage:
    image: PatchGrid
    label: int
    placement: list[int]


def make_concept_bank(
    vocab: Vocabulary,
    n_concepts: int = 10,
    patch_dim: int = 16,
    seed: int = 0,
    words=None,
    scale: float | None = None,
) -> list[ConceptSpec]:
    """Concepts with orthogonalized random patch signatures.

    Signatures have norm ``scale`` (default ``sqrt(patch_dim)``, so entries are
    order one).
    """
    words = list(words or CONCEPT_WORDS[:n_concepts])
    if len(words) < n_concepts:
        raise ValueError(f"only {len(words)} concept words for {n_concepts} concepts")
    words = words[:n_concepts]
    for w in words:
        ids = tokenize(vocab, w)[1:-1]
        if not ids or vocab.unk_id in ids:
            raise ValueError(f"concept word {w!r} does not tokenize cleanly")
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(patch_dim, n_concepts))
    if n_concepts <= patch_dim:
        q, _ = np.linalg.qr(raw)
        sigs = q[:, :n_concepts].T
    else:
        sigs = (raw / np.linalg.norm(raw, axis=0)).T
    scale = np.sqrt(patch_dim) if scale is None else scale
    sigs = sigs * scale
    unit = sigs / np.linalg.norm(sigs, axis=1, keepdims=True)
    cos = np.abs(unit @ unit.T) - np.eye(n_concepts)
    if n_concepts > 1 and cos.max() > np.cos(np.deg2rad(15)):
        raise ValueError("concept signatures too close; use patch_dim >= n_concepts")
    fillers = [w for w in FILLER_WORDS if w in vocab]
    return [ConceptSpec(i, w, sigs[i], list(fillers)) for i, w in enumerate(words)]


def block_slots(height: int, width: int, block: tuple[int, int]) -> list[list[int]]:
    """Non-overlapping rectangular cell blocks tiling the grid, row-major."""
    bh, bw = block
    slots = []
    for r0 in range(0, height - bh + 1, bh):
        for c0 in range(0, width - bw + 1, bw):
            slots.append([(r0 + r) * width + c0 + c for r in range(bh) for c in range(bw)])
    return slots


def render_image(
    rng: np.random.Generator,
    bank: list[ConceptSpec],
    placements: dict[int, list[int]],
    height: int,
    width: int,
    noise_sigma: float,
) -> PatchGrid:
    p = bank[0].patch_signature.shape[0]
    grid = noise_sigma * rng.normal(size=(height * width, p)) if noise_sigma > 0 else np.zeros((height * width, p))
    for cid, cells in placements.items():
        grid[cells] += bank[cid].patch_signature
    return PatchGrid(grid, height, width)


def render_caption(rng: np.random.Generator, bank: list[ConceptSpec], concepts) -> str:
    words = [bank[c].word for c in concepts]
    rng.shuffle(words)
    fillers = bank[concepts[0]].distractor_words
    parts = [OPENERS[rng.integers(len(OPENERS))]]
    for i, w in enumerate(words):
        if i:
            parts.append(JOINERS[rng.integers(len(JOINERS))])
        if fillers and rng.random() < 0.5:
            parts.append(fillers[rng.integers(len(fillers))])
        parts.append(w)
    if fillers and rng.random() < 0.5:
        parts.append(fillers[rng.integers(len(fillers))])
    return " ".join(parts)


def draw_sample(
    rng: np.random.Generator,
    bank: list[ConceptSpec],
    concepts,
    height: int,
    width: int,
    block: tuple[int, int],
    noise_sigma: float,
) -> PairedSample:
    slots = block_slots(height, width, block)
    if len(concepts) > len(slots):
        raise ValueError(f"grid {height}x{width} has {len(slots)} slots for {len(concepts)} concepts")
    chosen = rng.choice(len(slots), size=len(concepts), replace=False)
    placements = {int(c): list(slots[s]) for c, s in zip(concepts, chosen)}
    image = render_image(rng, bank, placements, height, width, noise_sigma)
    caption = render_caption(rng, bank, list(concepts))
    return PairedSample(image, caption, tuple(sorted(int(c) for c in concepts)), placements)


def draw_concepts(rng: np.random.Generator, n_concepts: int, max_per_sample: int) -> tuple[int, ...]:
    k = int(rng.integers(1, max_per_sample + 1))
    return tuple(sorted(int(c) for c in rng.choice(n_concepts, size=k, replace=False)))


def generate(
    seed: int,
    n_samples: int,
    bank: list[ConceptSpec],
    height: int = 4,
    width: int = 4,
    noise_sigma: float = 0.3,
    block: tuple[int, int] = (2, 2),
    max_per_sample: int = 3,
    n_test_combos: int = 60,
    n_val: int = 100,
) -> Corpus:
    """Train/val/test splits; test combos never occur in train or val.

    Each test combination contributes exactly one sample, so a caption's true
    image is the only one carrying its concept set.
    """
    if len(block_slots(height, width, block)) < max_per_sample:
        raise ValueError("grid too small for the requested placements")
    ss = np.random.SeedSequence(seed)
    combo_rng, train_rng, val_rng, test_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    n = len(bank)
    multi = [c for k in range(2, max_per_sample + 1) for c in itertools.combinations(range(n), k)]
    n_test_combos = min(n_test_combos, len(multi))
    picked = combo_rng.choice(len(multi), size=n_test_combos, replace=False)
    held = sorted(multi[i] for i in picked)
    held_set = set(held)

    def draw_allowed(rng, count):
        out = []
        while len(out) < count:
            concepts = draw_concepts(rng, n, max_per_sample)
            if concepts in held_set:
                continue
            out.append(draw_sample(rng, bank, concepts, height, width, block, noise_sigma))
        return out

    train = draw_allowed(train_rng, n_samples)
    val = draw_allowed(val_rng, n_val)
    test = [draw_sample(test_rng, bank, c, height, width, block, noise_sigma) for c in held]
    return Corpus(train, val, test, bank)


def sample_pairs(
    seed: int,
    n_samples: int,
    bank: list[ConceptSpec],
    height: int = 4,
    width: int = 4,
    noise_sigma: float = 0.3,
    block: tuple[int, int] = (2, 2),
    max_per_sample: int = 3,
) -> list[PairedSample]:
    """Unsplit draws from the generating distribution."""
    rng = np.random.default_rng(seed)
    return [
        draw_sample(rng, bank, draw_concepts(rng, len(bank), max_per_sample), height, width, block, noise_sigma)
        for _ in range(n_samples)
    ]


def labeled_images(
    seed: int,
    bank: list[ConceptSpec],
    n_per_class: int,
    height: int = 4,
    width: int = 4,
    noise_sigma: float = 0.3,
    block: tuple[int, int] = (2, 2),
) -> list[LabeledImage]:
    """Single-concept images for classification, probing, and localization."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_per_class):
        for c in range(len(bank)):
            s = draw_sample(rng, bank, (c,), height, width, block, noise_sigma)
            out.append(LabeledImage(s.image, c, s.placements[c]))
    return out


def prompt_classes(bank: list[ConceptSpec]) -> list[tuple[str, str]]:
    return [(c.word, "a photo of " + c.word) for c in bank]


# -- corpus file -----------------------------------------------------------


def save_corpus(samples: list[PairedSample], path: str | Path, split: str = "train") -> None:
    """Magic line, then per record: a JSON header line followed by
    ``height*width*patch_dim`` little-endian float64 values (row-major)."""
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<I", len(samples)))
        for s in samples:
            head = {
                "caption": s.caption,
                "height": s.image.height,
                "width": s.image.width,
                "patch_dim": int(s.image.grid.shape[1]),
                "concepts": list(s.concepts_present),
                "placements": {str(k): v for k, v in sorted(s.placements.items())},
                "split": split,
            }
            f.write(json.dumps(head, sort_keys=True).encode() + b"\n")
            f.write(s.image.grid.astype("<f8").tobytes())


def load_corpus(path: str | Path) -> list[PairedSample]:
    with open(path, "rb") as f:
        if f.read(len(CORPUS_MAGIC)) != CORPUS_MAGIC:
            raise ValueError(f"{path}: not a corpus file")
        (count,) = struct.unpack("<I", f.read(4))
        out = []
        for _ in range(count):
            head = json.loads(f.readline())
            n = head["height"] * head["width"] * head["patch_dim"]
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated record")
            grid = np.frombuffer(buf, dtype="<f8").reshape(head["height"] * head["width"], head["patch_dim"])
            out.append(
                PairedSample(
                    PatchGrid(grid.astype(np.float64), head["height"], head["width"]),
                    head["caption"],
                    tuple(head["concepts"]),
                    {int(k): v for k, v in head["placements"].items()},
                )
            )
    return out
