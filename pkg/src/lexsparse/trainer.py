"""Multi-stage training: schedules, AdamW, masked/frozen steps, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import PairedSample
from .encoder import Model, load_checkpoint, save_checkpoint
from .numerics import Tape
from .objective import total_loss_tensor
from .projection import image_enc_batch, text_enc_batch
from .vocab import Vocabulary, build_mask, tokenize

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "stage", "step", "stage_step", "lr", "lambda_image", "lambda_text",
    "loss", "contrastive", "flops_image", "flops_text", "temperature",
    "active_image", "active_text", "mask_violations",
)


class TrainingError(RuntimeError):
    pass


@dataclass
class Stage:
    name: str
    steps: int
    peak_lr: float
    warmup_steps: int
    mask_text: bool = False
    freeze_image: bool = False
    lambda_target_image: float = 1e-3
    lambda_target_text: float = 1e-3
    lambda_warmup_steps: int = 1


@dataclass
class StagePlan:
    stages: list[Stage]
    batch_size: int = 32
    weight_decay: float = 1e-2
    preset: str | None = None

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("plan has no stages")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        for s in self.stages:
            if s.steps <= 0:
                raise ValueError(f"stage {s.name!r}: steps must be > 0")
            if not 0 <= s.warmup_steps <= s.steps:
                raise ValueError(f"stage {s.name!r}: warmup_steps must lie in [0, steps]")
            if s.lambda_warmup_steps < 1:
                raise ValueError(f"stage {s.name!r}: lambda_warmup_steps must be >= 1")
            if s.peak_lr <= 0:
                raise ValueError(f"stage {s.name!r}: peak_lr must be positive")
        if self.preset == "paper-desk":
            flags = [(s.mask_text, s.freeze_image) for s in self.stages]
            if flags != [(True, False), (False, True), (False, False)]:
                raise ValueError("paper-desk plan needs mask / freeze / joint stages in that order")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        d = dict(d)
        d["stages"] = [Stage(**s) for s in d["stages"]]
        return cls(**d)


BASE_LR = 5e-4
DESK_STEPS = 600


def paper_desk(lam: float = 1e-3, base_steps: int = DESK_STEPS, lr: float = BASE_LR) -> StagePlan:
    """Three stages in 1:1:2 step ratio; the last runs at a tenth of the lr."""
    warm = max(1, base_steps // 20)
    lam_warm = max(1, base_steps // 3)
    common = dict(lambda_target_image=lam, lambda_target_text=lam)
    return StagePlan(
        [
            Stage("mask_text", base_steps, lr, warm, True, False, lambda_warmup_steps=lam_warm, **common),
            Stage("freeze_image", base_steps, lr, warm, False, True, lambda_warmup_steps=lam_warm, **common),
            Stage("joint", 2 * base_steps, 0.1 * lr, warm, False, False, lambda_warmup_steps=2 * lam_warm, **common),
        ],
        preset="paper-desk",
    )


def single_stage(lam: float = 1e-3, steps: int = 2 * DESK_STEPS, lr: float = BASE_LR) -> StagePlan:
    return StagePlan(
        [Stage("single", steps, lr, max(1, steps // 40), lambda_warmup_steps=max(1, steps // 6),
               lambda_target_image=lam, lambda_target_text=lam)],
        preset="single-stage",
    )


LAMBDA_SWEEP = (0.0, 1e-4, 1e-3, 1e-1)


def preset(name: str, **kw) -> StagePlan:
    if name == "paper-desk":
        return paper_desk(**kw)
    if name == "single-stage":
        return single_stage(**kw)
    raise ValueError(f"unknown preset {name!r}")


def lambda_schedule(target: float, warmup: int, step: int) -> float:
    """Quadratic ramp ``target * min(1, (step / warmup) ** 2)``."""
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    r = min(1.0, step / warmup)
    return target * r * r


def lr_schedule(peak: float, warmup: int, total: int, step: int) -> float:
    """Linear warmup to ``peak`` then linear decay to zero at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    return peak * (total - step) / (total - warmup)


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, model: Model, weight_decay: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.model = model
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, names, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in names:
            p = self.model.params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if p.data.ndim >= 2 and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Batch:
    grids: np.ndarray
    seqs: list[list[int]]
    masks: np.ndarray


def make_batch(samples: list[PairedSample], vocab: Vocabulary, max_len: int) -> Batch:
    seqs = [tokenize(vocab, s.caption, max_len) for s in samples]
    masks = np.zeros((len(samples), vocab.size))
    for i, seq in enumerate(seqs):
        masks[i, sorted(build_mask(vocab, seq))] = 1.0
    return Batch(np.stack([s.image.grid for s in samples]), seqs, masks)


def train_step(
    model: Model,
    batch: Batch,
    stage: Stage,
    optimizer: AdamW,
    lr: float,
    lambda_image: float,
    lambda_text: float,
    pad_id: int,
) -> dict:
    """One optimizer update; returns the logged row (without step indices)."""
    trainable = [n for n in model.params if not (stage.freeze_image and n.startswith("image."))]
    for n, p in model.params.items():
        p.grad = None
        p.requires_grad = n in trainable
    try:
        if stage.freeze_image:
            # image side is a constant: no tape is active, nothing is recorded
            image_enc = image_enc_batch(model, batch.grids)
        with Tape() as tape:
            if not stage.freeze_image:
                image_enc = image_enc_batch(model, batch.grids)
            text_enc = text_enc_batch(model, batch.seqs, pad_id)
            if stage.mask_text:
                text_enc = text_enc * batch.masks
            parts = total_loss_tensor(image_enc, text_enc, model.log_temperature, lambda_image, lambda_text)
        tape.backward(parts.total)
    except FloatingPointError as exc:
        raise TrainingError(f"stage {stage.name}: non-finite value ({exc}); lr={lr}, "
                            f"temperature={math.exp(model.log_temperature.item())}") from exc
    optimizer.step(trainable, lr)
    lt = model.log_temperature
    floor = math.log(model.config.temperature_floor)
    if lt.data < floor:
        lt.data[...] = floor
    for p in model.params.values():
        p.grad = None
        p.requires_grad = False
    outside = (text_enc.data > 0) & (batch.masks == 0) if stage.mask_text else np.zeros(1, dtype=bool)
    return {
        "lr": lr,
        "lambda_image": lambda_image,
        "lambda_text": lambda_text,
        "loss": parts.total.item(),
        "contrastive": parts.contrastive.item(),
        "flops_image": parts.flops_image.item(),
        "flops_text": parts.flops_text.item(),
        "temperature": math.exp(float(lt.data)),
        "active_image": float((image_enc.data > 0).sum(axis=1).mean()),
        "active_text": float((text_enc.data > 0).sum(axis=1).mean()),
        "mask_violations": int(outside.sum()),
    }


@dataclass
class TrainRunRecord:
    rows: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    image_fingerprints: list[tuple[str, str]] = field(default_factory=list)

    def stage_rows(self, name: str) -> list[dict]:
        return [r for r in self.rows if r["stage"] == name]

    def write_tsv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in LOG_COLUMNS])

    @classmethod
    def read_tsv(cls, path: str | Path) -> "TrainRunRecord":
        rec = cls()
        with open(path, newline="") as f:
            reader = csv.DictReader(f, delimiter="\t")
            for row in reader:
                parsed = {}
                for c in LOG_COLUMNS:
                    v = row[c]
                    if c == "stage":
                        parsed[c] = v
                    elif c in ("step", "stage_step", "mask_violations"):
                        parsed[c] = int(v)
                    else:
                        parsed[c] = float(v)
                rec.rows.append(parsed)
        return rec


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i : i + batch_size]


def run_stages(
    model: Model,
    plan: StagePlan,
    train: list[PairedSample],
    vocab: Vocabulary,
    out_dir: str | Path | None = None,
    seed: int = 0,
) -> tuple[Model, TrainRunRecord]:
    """Run every stage in order, each resuming from the previous checkpoint.

    With ``out_dir`` set, per-stage checkpoints and ``train_log.tsv`` are
    written there and each stage reloads its predecessor from disk.
    """
    plan.validate()
    if len(train) < plan.batch_size:
        raise ValueError(f"need at least {plan.batch_size} training samples, got {len(train)}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    max_len = model.config.max_len
    prepared = make_batch(train, vocab, max_len)
    record = TrainRunRecord()
    stage_seeds = np.random.SeedSequence(seed).spawn(len(plan.stages))
    global_step = 0
    for si, stage in enumerate(plan.stages):
        rng = np.random.default_rng(stage_seeds[si])
        batches = _batches(len(train), plan.batch_size, rng)
        optimizer = AdamW(model, plan.weight_decay)
        before = model.fingerprint("image.")
        for k in range(stage.steps):
            idx = next(batches)
            batch = Batch(prepared.grids[idx], [prepared.seqs[i] for i in idx], prepared.masks[idx])
            lr = lr_schedule(stage.peak_lr, stage.warmup_steps, stage.steps, k + 1)
            li = lambda_schedule(stage.lambda_target_image, stage.lambda_warmup_steps, k + 1)
            lt = lambda_schedule(stage.lambda_target_text, stage.lambda_warmup_steps, k + 1)
            try:
                row = train_step(model, batch, stage, optimizer, lr, li, lt, vocab.pad_id)
            except TrainingError as exc:
                if out is not None:
                    (out / "diagnostics.json").write_text(json.dumps(
                        {"stage": stage.name, "stage_step": k, "error": str(exc),
                         "last_rows": record.rows[-5:]}, indent=2, sort_keys=True))
                raise
            global_step += 1
            record.rows.append({"stage": stage.name, "step": global_step, "stage_step": k + 1, **row})
        record.image_fingerprints.append((before, model.fingerprint("image.")))
        last = record.rows[-1]
        log.info("stage %s done: loss=%.4f active_img=%.1f active_txt=%.1f",
                 stage.name, last["loss"], last["active_image"], last["active_text"])
        if out is not None:
            path = out / f"stage{si + 1}_{stage.name}.ckpt"
            try:
                save_checkpoint(model, path)
                model = load_checkpoint(path)
            except OSError as exc:
                raise TrainingError(f"stage {stage.name}: checkpoint I/O failed: {exc}") from exc
            record.checkpoints.append(str(path))
    if out is not None:
        record.write_tsv(out / "train_log.tsv")
    return model, record


def with_lambda(plan: StagePlan, lam: float) -> StagePlan:
    return replace(plan, stages=[replace(s, lambda_target_image=lam, lambda_target_text=lam) for s in plan.stages])
