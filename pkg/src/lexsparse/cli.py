"""Command-line entry point: ``lexsparse <subcommand> ...``.

Every subcommand writes its outputs under ``--out`` together with a
``manifest.json`` recording the resolved config, its hash, the seed and a
sha256 per artifact. A manifest can be fed back through ``--config`` to
reproduce the run. Outputs are staged in a sibling temp directory and only
moved into place on success.

Exit codes: 0 ok, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import __version__
from . import evalsuite as ev
from . import index as ixm
from .datagen import (
    ConceptSpec,
    LabeledImage,
    PairedSample,
    generate,
    labeled_images,
    load_corpus,
    make_concept_bank,
    prompt_classes,
    save_corpus,
)
from .encoder import ModelConfig, init_model, load_checkpoint
from .projection import embed_images, embed_texts, format_sparse, heatmap, parse_sparse
from .trainer import LAMBDA_SWEEP, StagePlan, TrainingError, paper_desk, run_stages, single_stage, with_lambda
from .vocab import Vocabulary, load_vocab, tokenize

log = logging.getLogger("lexsparse")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
PRESETS = ("paper-desk", "single-stage", "lambda-sweep")

DEFAULT_CONFIG = {
    "seed": 0,
    "vocab": None,
    "datagen": {
        "n_samples": 4000,
        "n_concepts": 10,
        "patch_dim": 16,
        "height": 4,
        "width": 4,
        "noise_sigma": 0.3,
        "n_test_combos": 60,
        "n_val": 100,
        "bank_seed": 0,
        "labeled_per_class": 20,
        "probe_train_per_class": 20,
    },
    "model": {"d": 32, "depth": 2, "heads": 2, "max_len": 24, "init_std": 0.1},
    "train": {"preset": "paper-desk", "lambda": 1e-3, "base_steps": 600, "lr": 5e-4, "batch_size": 32},
    "eval": {"ks": [1, 5, 10], "interp_ks": [1, 10, 50, 100], "probe_epochs": 200, "probe_lr": 0.1},
}


class ConfigError(ValueError):
    pass


# -- config ------------------------------------------------------------------


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if "config" in raw and "artifacts" in raw:
        raw = raw["config"]  # a manifest from an earlier run
    return _merge(DEFAULT_CONFIG, raw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _vocab(cfg: dict) -> Vocabulary:
    path = cfg["vocab"]
    if path is None:
        return load_vocab(files("lexsparse") / "data" / "vocab.txt")
    if not Path(path).is_file():
        raise ConfigError(f"vocabulary file not found: {path}")
    return load_vocab(path)


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {path}")
    return p


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- data ----------------------------------------------------------------------


def _bank(cfg: dict, vocab: Vocabulary) -> list[ConceptSpec]:
    g = cfg["datagen"]
    return make_concept_bank(vocab, g["n_concepts"], g["patch_dim"], seed=g["bank_seed"])


def _labeled_as_samples(images: list[LabeledImage], bank: list[ConceptSpec]) -> list[PairedSample]:
    return [PairedSample(im.image, bank[im.label].word, (im.label,), {im.label: im.placement}) for im in images]


def _samples_as_labeled(samples: list[PairedSample]) -> list[LabeledImage]:
    out = []
    for s in samples:
        if len(s.concepts_present) != 1:
            raise ValueError("labeled split holds a multi-concept record")
        c = s.concepts_present[0]
        out.append(LabeledImage(s.image, c, s.placements[c]))
    return out


def build_data(cfg: dict, vocab: Vocabulary) -> dict:
    """All splits derived from the config seed; identical to ``datagen`` output."""
    g = cfg["datagen"]
    bank = _bank(cfg, vocab)
    grid = dict(height=g["height"], width=g["width"], noise_sigma=g["noise_sigma"])
    corpus = generate(cfg["seed"], g["n_samples"], bank, n_test_combos=g["n_test_combos"], n_val=g["n_val"], **grid)
    return {
        "bank": bank,
        "train": corpus.train,
        "val": corpus.val,
        "test": corpus.test,
        "labeled": labeled_images(cfg["seed"] + 1, bank, g["labeled_per_class"], **grid),
        "probe_train": labeled_images(cfg["seed"] + 2, bank, g["probe_train_per_class"], **grid),
    }


SPLIT_FILES = {"train": "train.corpus", "val": "val.corpus", "test": "test.corpus",
               "labeled": "labeled.corpus", "probe_train": "probe_train.corpus"}


def load_data(data_dir: str | None, cfg: dict, vocab: Vocabulary) -> dict:
    if data_dir is None:
        return build_data(cfg, vocab)
    d = _require_file(data_dir, "--data directory")
    bank_path = d / "bank.json"
    if not bank_path.is_file():
        raise ConfigError(f"{d} has no bank.json; run `datagen` first")
    bank = [
        ConceptSpec(c["concept_id"], c["word"], np.array(c["patch_signature"]), c["distractor_words"])
        for c in json.loads(bank_path.read_text())
    ]
    out: dict = {"bank": bank}
    for split, name in SPLIT_FILES.items():
        p = d / name
        if p.is_file():
            samples = load_corpus(p)
            out[split] = _samples_as_labeled(samples) if split in ("labeled", "probe_train") else samples
    return out


def _model_config(cfg: dict, vocab: Vocabulary) -> ModelConfig:
    m, g = cfg["model"], cfg["datagen"]
    try:
        return ModelConfig(vocab_size=vocab.size, grid_h=g["height"], grid_w=g["width"], patch_dim=g["patch_dim"], **m)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def _plans(cfg: dict) -> dict[str, StagePlan]:
    t = cfg["train"]
    name = t["preset"]
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if name == "single-stage":
        plans = {"": single_stage(t["lambda"], steps=2 * t["base_steps"], lr=t["lr"])}
    else:
        base = paper_desk(t["lambda"], base_steps=t["base_steps"], lr=t["lr"])
        if name == "paper-desk":
            plans = {"": base}
        else:
            plans = {f"lambda_{lam:g}": with_lambda(base, lam) for lam in LAMBDA_SWEEP}
    for p in plans.values():
        p.batch_size = t["batch_size"]
        try:
            p.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return plans


# -- subcommands -------------------------------------------------------------


def cmd_datagen(args, cfg: dict, out: Path) -> None:
    vocab = _vocab(cfg)
    data = build_data(cfg, vocab)
    bank = [
        {"concept_id": c.concept_id, "word": c.word, "patch_signature": c.patch_signature.tolist(),
         "distractor_words": c.distractor_words}
        for c in data["bank"]
    ]
    (out / "bank.json").write_text(json.dumps(bank, indent=1) + "\n")
    for split, name in SPLIT_FILES.items():
        samples = data[split]
        if split in ("labeled", "probe_train"):
            samples = _labeled_as_samples(samples, data["bank"])
        save_corpus(samples, out / name, split)


def cmd_train(args, cfg: dict, out: Path) -> None:
    vocab = _vocab(cfg)
    plans = _plans(cfg)
    data = load_data(args.data, cfg, vocab)
    if "train" not in data:
        raise ConfigError("training data has no train split")
    mcfg = _model_config(cfg, vocab)
    for sub, plan in plans.items():
        target = out / sub if sub else out
        model = init_model(mcfg, cfg["seed"])
        model, record = run_stages(model, plan, data["train"], vocab, out_dir=target, seed=cfg["seed"])
        (target / "plan.json").write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True) + "\n")
        shutil.copyfile(record.checkpoints[-1], target / "final.ckpt")


def _load_model(path: str | None):
    p = _require_file(path, "--checkpoint")
    return load_checkpoint(p)


def _items(data: dict, split: str):
    if split not in data:
        raise ConfigError(f"split {split!r} not available")
    return data[split]


def cmd_embed(args, cfg: dict, out: Path) -> None:
    vocab = _vocab(cfg)
    model = _load_model(args.checkpoint)
    items = _items(load_data(args.data, cfg, vocab), args.split)
    if args.modality == "image":
        embs = embed_images(model, np.stack([it.image.grid for it in items]))
    else:
        if args.split in ("labeled", "probe_train"):
            raise ConfigError("labeled splits carry no captions")
        seqs = [tokenize(vocab, s.caption, model.config.max_len) for s in items]
        embs = embed_texts(model, seqs, vocab.pad_id)
    with open(out / "embeddings.tsv", "w") as f:
        for i, e in enumerate(embs):
            f.write(format_sparse(f"{args.split}:{i}", e) + "\n")


def _read_embeddings(path: Path) -> list[tuple[str, object]]:
    with open(path) as f:
        return [parse_sparse(line) for line in f if line.strip()]


def cmd_index(args, cfg: dict, out: Path) -> None:
    src = _require_file(args.embeddings, "--embeddings")
    records = _read_embeddings(src)
    ix = ixm.build((i, e) for i, (_, e) in enumerate(records))
    ixm.save(ix, out / "index.lxix")
    (out / "doc_ids.tsv").write_text("".join(f"{i}\t{name}\n" for i, (name, _) in enumerate(records)))


def cmd_search(args, cfg: dict, out: Path) -> None:
    vocab = _vocab(cfg)
    d = _require_file(args.index, "--index directory")
    ix = ixm.load(d / "index.lxix")
    names = [line.split("\t", 1)[1] for line in (d / "doc_ids.tsv").read_text().splitlines()]
    if args.mask:
        res = ixm.mask_search(ix, vocab, args.query, args.k)
        mode = "mask"
    else:
        model = _load_model(args.checkpoint)
        q = embed_texts(model, [tokenize(vocab, ev.PROMPT + args.query, model.config.max_len)], vocab.pad_id)[0]
        res = ixm.search(ix, q, args.k, normalize=args.normalize)
        mode = "encoder"
    payload = {
        "query": args.query,
        "mode": mode,
        "k": args.k,
        "normalize": bool(args.normalize) and not args.mask,
        "results": [
            {"rank": r + 1, "doc_id": d_id, "item": names[d_id], "score": score}
            for r, (d_id, score) in enumerate(res.ranked)
        ],
    }
    (out / "results.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    for hit in payload["results"]:
        print(f"{hit['rank']}\t{hit['item']}\t{hit['score']:.6f}")


def cmd_eval(args, cfg: dict, out: Path) -> None:
    vocab = _vocab(cfg)
    model = _load_model(args.checkpoint)
    data = load_data(args.data, cfg, vocab)
    e = cfg["eval"]
    bank = data["bank"]
    kind = args.kind
    if kind == "retrieval":
        test = _items(data, "test")
        rep = ev.eval_retrieval(model, vocab, test, e["ks"], backend=args.backend)
        n = len(test)
        report = {
            "dual_encoder": rep,
            "mask_search": ev.mask_retrieval_recall(model, vocab, test, e["ks"]),
            "random_permutation": ev.random_permutation_recall(n, e["ks"], cfg["seed"]),
            "null_band": {str(k): dict(zip(("mean", "std"), ev.null_recall_band(n, k))) for k in e["ks"]},
        }
    elif kind == "zeroshot":
        images = _items(data, "labeled")
        prompts = [p for _, p in prompt_classes(bank)]
        report = {"encoder": ev.eval_zeroshot(model, vocab, images, prompts),
                  "mask": ev.eval_zeroshot(model, vocab, images, prompts, mode="mask"), "n": len(images)}
    elif kind == "probe":
        acc = ev.eval_linear_probe(model, _items(data, "probe_train"), _items(data, "labeled"), len(bank),
                                   e["probe_epochs"], e["probe_lr"], cfg["seed"])
        report = {"accuracy": acc}
    elif kind == "interp":
        rep = ev.eval_interpretability(model, vocab, _items(data, "labeled"), [c.word for c in bank], e["interp_ks"])
        report = {"sparse": rep}
    else:
        report = ev.eval_sparsity(model, vocab, _items(data, "test"))
    ev.export_report({kind: report}, out)
    print(json.dumps(ev._jsonable({kind: report}), sort_keys=True))


def cmd_heatmap(args, cfg: dict, out: Path) -> None:
    vocab = _vocab(cfg)
    model = _load_model(args.checkpoint)
    items = _items(load_data(args.data, cfg, vocab), args.split)
    if not 0 <= args.item < len(items):
        raise ConfigError(f"--item {args.item} outside [0, {len(items)})")
    try:
        hm = heatmap(model, vocab, items[args.item].image, args.query)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    (out / "heatmap.json").write_text(json.dumps(
        {"query": args.query, "query_tokens": hm.query_tokens, "values": hm.values.tolist(),
         "argmax_cell": int(np.argmax(hm.values))}, indent=1, sort_keys=True) + "\n")
    ev.write_pgm(hm.values, out / "heatmap.pgm")


# -- plumbing ------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config (or a manifest from an earlier run)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--vocab", help="vocabulary file (default: bundled)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lexsparse", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic paired corpus")
    _add_common(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train with a preset stage plan")
    _add_common(p)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--lambda", dest="lam", type=float, help="FLOPs weight for both towers")
    p.add_argument("--steps", type=int, help="base stage length (paper-desk stages run 1x, 1x, 2x)")
    p.add_argument("--data", help="directory written by `datagen` (default: regenerate from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write sparse embeddings of a split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=tuple(SPLIT_FILES))
    p.add_argument("--modality", default="image", choices=("image", "text"))
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("index", help="build an inverted index from an embeddings file")
    _add_common(p)
    p.add_argument("--embeddings", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="query an index with text")
    _add_common(p)
    p.add_argument("--index", required=True, help="directory written by `index`")
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--checkpoint", help="needed unless --mask")
    p.add_argument("--mask", action="store_true", help="binary token query, no text encoder")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("mask-search", help="query an index with a binary token mask, no model needed")
    _add_common(p)
    p.add_argument("--index", required=True, help="directory written by `index`")
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_search, mask=True, checkpoint=None, normalize=False)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("kind", choices=("retrieval", "zeroshot", "probe", "interp", "sparsity"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--backend", default="index", choices=("index", "brute"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="per-cell activation map of a text query over one image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="labeled", choices=tuple(SPLIT_FILES))
    p.add_argument("--item", type=int, default=0)
    p.add_argument("--query", required=True)
    p.set_defaults(func=cmd_heatmap)
    return ap


def resolve_config(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.vocab is not None:
        cfg["vocab"] = args.vocab
    if args.command == "train":
        if args.preset is not None:
            cfg["train"]["preset"] = args.preset
        if args.lam is not None:
            cfg["train"]["lambda"] = args.lam
        if args.steps is not None:
            cfg["train"]["base_steps"] = args.steps
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if getattr(args, "k", 1) < 1:
        raise ConfigError("--k must be >= 1")
    return cfg


def _inputs(args) -> dict[str, str]:
    """Checksums of input files named on the command line."""
    found = {}
    for attr in ("checkpoint", "embeddings"):
        v = getattr(args, attr, None)
        if v and Path(v).is_file():
            found[attr] = _sha(Path(v))
    for attr, name in (("index", "index.lxix"), ("data", "bank.json")):
        v = getattr(args, attr, None)
        if v and (Path(v) / name).is_file():
            found[attr] = _sha(Path(v) / name)
    return found


def _write_manifest(args, cfg: dict, stage: Path) -> dict:
    artifacts = {
        str(p.relative_to(stage)): _sha(p) for p in sorted(stage.rglob("*")) if p.is_file()
    }
    manifest = {
        "tool": "lexsparse",
        "version": __version__,
        "command": args.command if args.command != "eval" else f"eval {args.kind}",
        "seed": cfg["seed"],
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "inputs": _inputs(args),
        "artifacts": artifacts,
    }
    (stage / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _publish(stage: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for p in sorted(stage.iterdir()):
        dest = out / p.name
        if dest.is_dir() and not dest.is_symlink():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        shutil.move(str(p), dest)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    stage = None
    try:
        cfg = resolve_config(args)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"--out {out} exists and is not a directory")
        out.parent.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
        args.func(args, cfg, stage)
        _write_manifest(args, cfg, stage)
        _publish(stage, out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"lexsparse: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, ValueError, OSError, KeyError) as exc:
        print(f"lexsparse: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if stage is not None and stage.exists():
            shutil.rmtree(stage, ignore_errors=True)


if __name__ == "__main__":
    sys.exit(main())
