"""Retrieval, classification, probing, interpretability and sparsity metrics."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import index as ixmod
from .datagen import LabeledImage, PairedSample
from .encoder import Model
from .projection import (
    Heatmap,
    SparseEmbedding,
    dense_image_batch,
    dense_text_batch,
    embed_images,
    embed_texts,
)
from .vocab import Vocabulary, build_mask, tokenize

PROMPT = "a photo of "
RETRIEVAL_KS = (1, 5, 10)
INTERP_KS = (1, 10, 50, 100)


@dataclass
class RetrievalReport:
    text_to_image: dict[int, float]
    image_to_text: dict[int, float]
    n: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "text_to_image": {str(k): v for k, v in sorted(self.text_to_image.items())},
            "image_to_text": {str(k): v for k, v in sorted(self.image_to_text.items())},
        }


@dataclass
class InterpReport:
    top_k_acc: dict[int, float]
    candidate_space_size: int
    n: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "candidate_space_size": self.candidate_space_size,
            "top_k_acc": {str(k): v for k, v in sorted(self.top_k_acc.items())},
        }


@dataclass
class SparsityStats:
    mean: float
    median: float
    max: int
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


# -- embedding helpers -----------------------------------------------------


def caption_seqs(vocab: Vocabulary, captions: Sequence[str], max_len: int, prompt: str = "") -> list[list[int]]:
    return [tokenize(vocab, prompt + c, max_len) for c in captions]


def embed_captions(model: Model, vocab: Vocabulary, captions, prompt: str = PROMPT) -> list[SparseEmbedding]:
    seqs = caption_seqs(vocab, captions, model.config.max_len, prompt)
    return embed_texts(model, seqs, vocab.pad_id)


def embed_grids(model: Model, images) -> list[SparseEmbedding]:
    return embed_images(model, np.stack([im.grid for im in images]))


def _dense(embs: Sequence[SparseEmbedding], vocab_size: int) -> np.ndarray:
    out = np.zeros((len(embs), vocab_size))
    for i, e in enumerate(embs):
        out[i, e.ids] = e.weights
    return out


def cosine_matrix(queries: np.ndarray, docs: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    dn = np.linalg.norm(docs, axis=1, keepdims=True)
    return (queries / np.where(qn > 0, qn, 1.0)) @ (docs / np.where(dn > 0, dn, 1.0)).T


# -- retrieval ---------------------------------------------------------------


def mate_ranks_from_scores(scores: np.ndarray) -> np.ndarray:
    """1-based rank of item ``i`` for query row ``i``; ties go to lower ids."""
    n = scores.shape[0]
    diag = scores[np.arange(n), np.arange(n)]
    above = (scores > diag[:, None]).sum(axis=1)
    lower_ids = np.tril(np.ones((n, n), dtype=bool), k=-1)
    tied = ((scores == diag[:, None]) & lower_ids).sum(axis=1)
    return above + tied + 1


def mate_ranks_via_index(queries: Sequence[SparseEmbedding], docs: Sequence[SparseEmbedding], normalize: bool = True) -> np.ndarray:
    """Same ranks as :func:`mate_ranks_from_scores`, computed through the index.

    Documents the index never returns (score 0) rank after every scored one,
    by ascending id.
    """
    ix = ixmod.build(enumerate(docs))
    ranks = np.empty(len(queries), dtype=np.int64)
    for i, q in enumerate(queries):
        res = ixmod.search(ix, q, k=max(1, len(docs)), normalize=normalize)
        found = res.doc_ids
        if i in found:
            ranks[i] = found.index(i) + 1
        else:
            scored = set(found)
            ranks[i] = len(found) + sum(1 for j in range(i) if j not in scored) + 1
    return ranks


def recall_from_ranks(ranks: np.ndarray, ks: Sequence[int]) -> dict[int, float]:
    return {k: float(np.mean(ranks <= k)) for k in ks}


def eval_retrieval(
    model: Model,
    vocab: Vocabulary,
    samples: Sequence[PairedSample],
    ks: Sequence[int] = RETRIEVAL_KS,
    backend: str = "brute",
    prompt: str = PROMPT,
) -> RetrievalReport:
    if not samples:
        raise ValueError("eval_retrieval needs at least one pair")
    texts = embed_captions(model, vocab, [s.caption for s in samples], prompt)
    images = embed_grids(model, [s.image for s in samples])
    return retrieval_report(texts, images, ks, backend, model.config.vocab_size)


def retrieval_report(
    texts: Sequence[SparseEmbedding],
    images: Sequence[SparseEmbedding],
    ks: Sequence[int] = RETRIEVAL_KS,
    backend: str = "brute",
    vocab_size: int | None = None,
) -> RetrievalReport:
    if backend == "brute":
        v = vocab_size or 1 + max(int(e.ids.max()) for e in [*texts, *images] if len(e))
        sims = cosine_matrix(_dense(texts, v), _dense(images, v))
        t2i = mate_ranks_from_scores(sims)
        i2t = mate_ranks_from_scores(sims.T)
    elif backend == "index":
        t2i = mate_ranks_via_index(texts, images)
        i2t = mate_ranks_via_index(images, texts)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return RetrievalReport(recall_from_ranks(t2i, ks), recall_from_ranks(i2t, ks), len(texts))


def mask_retrieval_recall(
    model: Model,
    vocab: Vocabulary,
    samples: Sequence[PairedSample],
    ks: Sequence[int] = RETRIEVAL_KS,
    prompt: str = PROMPT,
) -> dict[int, float]:
    """Text-to-image recall using binary token masks instead of the text tower."""
    images = embed_grids(model, [s.image for s in samples])
    ix = ixmod.build(enumerate(images))
    ranks = np.empty(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        res = ixmod.mask_search(ix, vocab, prompt + s.caption, k=len(samples))
        found = res.doc_ids
        if i in found:
            ranks[i] = found.index(i) + 1
        else:
            scored = set(found)
            ranks[i] = len(found) + sum(1 for j in range(i) if j not in scored) + 1
    return recall_from_ranks(ranks, ks)


def null_recall_band(n: int, k: int = 1) -> tuple[float, float]:
    """Mean and std of recall@k under a uniformly random ranking of ``n`` items."""
    p = min(k, n) / n
    return p, math.sqrt(p * (1 - p) / n)


def random_permutation_recall(n: int, ks: Sequence[int] = RETRIEVAL_KS, seed: int = 0) -> dict[int, float]:
    rng = np.random.default_rng(seed)
    ranks = np.array([int(np.flatnonzero(rng.permutation(n) == i)[0]) + 1 for i in range(n)])
    return recall_from_ranks(ranks, ks)


# -- classification --------------------------------------------------------


def class_prompt_embeddings(model: Model, vocab: Vocabulary, prompts: Sequence[str]) -> list[SparseEmbedding]:
    seqs = caption_seqs(vocab, prompts, model.config.max_len)
    for p, s in zip(prompts, seqs):
        if all(t == vocab.unk_id for t in s[1:-1]):
            raise ValueError(f"class prompt {p!r} tokenizes to nothing but UNK")
    return embed_texts(model, seqs, vocab.pad_id)


def zeroshot_predict(image_embs: Sequence[SparseEmbedding], class_embs: Sequence[SparseEmbedding], vocab_size: int) -> np.ndarray:
    sims = cosine_matrix(_dense(image_embs, vocab_size), _dense(class_embs, vocab_size))
    return sims.argmax(axis=1)


def eval_zeroshot(
    model: Model,
    vocab: Vocabulary,
    images: Sequence[LabeledImage],
    class_prompts: Sequence[str],
    mode: str = "encoder",
) -> float:
    """Top-1 accuracy of cosine argmax over class prompts.

    ``mode="mask"`` replaces the text tower with binary token masks.
    """
    if len(class_prompts) < 1:
        raise ValueError("need at least one class")
    if mode == "encoder":
        classes = class_prompt_embeddings(model, vocab, class_prompts)
    elif mode == "mask":
        classes = [ixmod.mask_query(vocab, p) for p in class_prompts]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    embs = embed_grids(model, [im.image for im in images])
    pred = zeroshot_predict(embs, classes, model.config.vocab_size)
    labels = np.array([im.label for im in images])
    return float(np.mean(pred == labels))


def train_softmax_probe(
    x: np.ndarray, y: np.ndarray, n_classes: int, epochs: int = 200, lr: float = 0.1, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on multinomial logistic regression."""
    if len(np.unique(y)) < 2:
        raise ValueError("probe training split has a single class")
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1e-3, size=(x.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(x)
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def eval_linear_probe(
    model: Model,
    train: Sequence[LabeledImage],
    test: Sequence[LabeledImage],
    n_classes: int,
    epochs: int = 200,
    lr: float = 0.1,
    seed: int = 0,
) -> float:
    """Probe on frozen sparse image embeddings; no tower gradient is computed."""
    v = model.config.vocab_size
    xtr = _dense(embed_grids(model, [im.image for im in train]), v)
    xte = _dense(embed_grids(model, [im.image for im in test]), v)
    ytr = np.array([im.label for im in train])
    yte = np.array([im.label for im in test])
    w, b = train_softmax_probe(xtr, ytr, n_classes, epochs, lr, seed)
    return float(np.mean((xte @ w + b).argmax(axis=1) == yte))


# -- interpretability ------------------------------------------------------


def token_ranks(scores: np.ndarray, candidates: np.ndarray | None = None) -> np.ndarray:
    """1-based rank of every candidate token by descending score, ties by id.

    Returns an array over the full vocabulary; non-candidates get a rank past
    the end.
    """
    v = scores.shape[0]
    cand = np.arange(v) if candidates is None else np.asarray(sorted(set(int(c) for c in candidates)))
    order = cand[np.lexsort((cand, -scores[cand]))]
    ranks = np.full(v, v + 1, dtype=np.int64)
    ranks[order] = np.arange(1, order.size + 1)
    return ranks


def class_subwords(vocab: Vocabulary, word: str) -> list[int]:
    ids = sorted(build_mask(vocab, tokenize(vocab, word, 10_000)))
    if not ids:
        raise ValueError(f"class word {word!r} has no content tokens")
    return ids


def interp_hits(
    scores: np.ndarray,
    labels: Sequence[int],
    class_tokens: Sequence[Sequence[int]],
    ks: Sequence[int] = INTERP_KS,
    candidates=None,
) -> dict[int, float]:
    """Top-K accuracy where a class counts via its best-ranked sub-word."""
    best = []
    for row, y in zip(scores, labels):
        r = token_ranks(row, candidates)
        best.append(min(r[t] for t in class_tokens[y]))
    best = np.array(best)
    return {k: float(np.mean(best <= k)) for k in ks}


def eval_interpretability(
    model: Model,
    vocab: Vocabulary,
    images: Sequence[LabeledImage],
    class_words: Sequence[str],
    ks: Sequence[int] = INTERP_KS,
    candidates=None,
    head: str = "sparse",
) -> InterpReport:
    """Rank every vocabulary token by its similarity to each image embedding.

    For sparse embeddings the similarity to a one-hot token is its own weight.
    ``head="dense"`` uses cosine against dense embeddings of one-token texts.
    """
    class_tokens = [class_subwords(vocab, w) for w in class_words]
    labels = [im.label for im in images]
    v = model.config.vocab_size
    if head == "sparse":
        scores = _dense(embed_grids(model, [im.image for im in images]), v)
    elif head == "dense":
        img = dense_image_batch(model, np.stack([im.image.grid for im in images])).data
        seqs = [[vocab.cls_id, t, vocab.sep_id] for t in range(v)]
        tok = dense_text_batch(model, seqs, vocab.pad_id).data
        scores = cosine_matrix(img, tok)
    else:
        raise ValueError(f"unknown head {head!r}")
    size = v if candidates is None else len(set(candidates))
    return InterpReport(interp_hits(scores, labels, class_tokens, ks, candidates), size, len(images))


# -- sparsity ----------------------------------------------------------------


def sparsity_stats(embs: Sequence[SparseEmbedding]) -> SparsityStats:
    if not embs:
        raise ValueError("sparsity_stats needs at least one embedding")
    counts = np.array([len(e) for e in embs])
    return SparsityStats(float(counts.mean()), float(np.median(counts)), int(counts.max()), len(embs))


def eval_sparsity(model: Model, vocab: Vocabulary, samples: Sequence[PairedSample], prompt: str = "") -> dict[str, SparsityStats]:
    texts = embed_captions(model, vocab, [s.caption for s in samples], prompt)
    images = embed_grids(model, [s.image for s in samples])
    return {"image": sparsity_stats(images), "text": sparsity_stats(texts)}


# -- export ----------------------------------------------------------------


def _jsonable(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def write_pgm(values: np.ndarray, path: str | Path) -> None:
    """Plain (P2) graymap, min-max scaled to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    px = np.rint(scaled * 255).astype(int)
    h, w = px.shape
    rows = "\n".join(" ".join(str(x) for x in row) for row in px)
    Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n")


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError("not a plain graymap")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4 : 4 + w * h]]).reshape(h, w)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def export_report(reports: dict, out_dir: str | Path, heatmaps: dict[str, Heatmap] | None = None) -> dict:
    """Write ``report.json`` plus one ``.pgm`` per heatmap; returns the manifest.

    The manifest (``manifest.json``) maps each written file to its sha256.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    if reports:
        path = out / "report.json"
        path.write_text(json.dumps(_jsonable(reports), indent=2, sort_keys=True) + "\n")
        files[path.name] = file_sha256(path)
    for name, hm in sorted((heatmaps or {}).items()):
        path = out / f"heatmap_{name}.pgm"
        write_pgm(hm.values, path)
        files[path.name] = file_sha256(path)
    manifest = {"files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
