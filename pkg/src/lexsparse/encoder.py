"""Reference transformer towers for text and patch-grid images, plus checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

CHECKPOINT_MAGIC = b"LXCK"
CHECKPOINT_VERSION = 1
ATTN_MASK_FILL = -1e30

BLOCK_PARAMS = (
    "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo",
    "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d: int = 32
    depth: int = 2
    heads: int = 2
    max_len: int = 16
    grid_h: int = 4
    grid_w: int = 4
    patch_dim: int = 16
    mlp_ratio: int = 4
    ln_eps: float = 1e-5
    init_std: float = 0.1
    init_log_temperature: float = math.log(0.07)
    temperature_floor: float = 0.01

    @property
    def grid_size(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class PatchGrid:
    """Synthetic image: one feature vector per grid cell, row-major."""

    grid: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.shape[0] != self.height * self.width:
            raise ValueError(f"grid has {self.grid.shape[0]} cells, expected {self.height}x{self.width}")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("patch grid contains non-finite values")


class Model:
    """All learnable tensors of both towers, the shared head, and temperature.

    Parameters live in one ordered dict. The head's vocabulary matrix is the
    text token embedding itself (``text.token_embedding``), not a copy.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def tied_embedding(self) -> Tensor:
        return self.params["text.token_embedding"]

    @property
    def log_temperature(self) -> Tensor:
        return self.params["log_temperature"]

    def names(self, prefix: str) -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def image_tower(self) -> list[str]:
        return self.names("image.")

    def fingerprint(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name in self.names(prefix):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        return Model(self.config, {n: Tensor(t.data.copy(), name=n) for n, t in self.params.items()})


def _block_shapes(d: int, ratio: int) -> dict[str, tuple[int, ...]]:
    return {
        "ln1_gain": (d,), "ln1_bias": (d,),
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "ln2_gain": (d,), "ln2_bias": (d,),
        "w1": (d, ratio * d), "b1": (ratio * d,),
        "w2": (ratio * d, d), "b2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d
    shapes: dict[str, tuple[int, ...]] = {
        "text.token_embedding": (cfg.vocab_size, d),
        "text.positional": (cfg.max_len, d),
    }
    for i in range(cfg.depth):
        for k, s in _block_shapes(d, cfg.mlp_ratio).items():
            shapes[f"text.blocks.{i}.{k}"] = s
    shapes["image.patch_proj"] = (cfg.patch_dim, d)
    shapes["image.positional"] = (cfg.grid_size, d)
    for i in range(cfg.depth):
        for k, s in _block_shapes(d, cfg.mlp_ratio).items():
            shapes[f"image.blocks.{i}.{k}"] = s
    shapes.update({
        "head.transform_fc": (d, d),
        "head.transform_bias": (d,),
        "head.ln_gain": (d,),
        "head.ln_bias": (d,),
        "head.logit_bias": (cfg.vocab_size,),
        "log_temperature": (),
    })
    return shapes


def init_model(cfg: ModelConfig, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "log_temperature":
            data = np.array(cfg.init_log_temperature)
        elif leaf.endswith("gain"):
            data = np.ones(shape)
        elif leaf.endswith("bias") or leaf in ("b1", "b2"):
            data = np.zeros(shape)
        elif leaf in ("wo", "w2"):
            # residual branch outputs start small
            data = rng.normal(0.0, cfg.init_std / math.sqrt(2 * max(cfg.depth, 1)), shape)
        else:
            data = rng.normal(0.0, cfg.init_std, shape)
        params[name] = Tensor(data, name=name)
    return Model(cfg, params)


# -- forward ---------------------------------------------------------------


def _block(model: Model, prefix: str, x: Tensor, key_bias: np.ndarray | None) -> Tensor:
    p = model.params
    cfg = model.config
    b, n, d = x.shape
    hd = d // cfg.heads
    h = nx.layer_norm(x, p[prefix + "ln1_gain"], p[prefix + "ln1_bias"], cfg.ln_eps)

    def heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (b, n, cfg.heads, hd)), (0, 2, 1, 3))

    q = heads(h @ p[prefix + "wq"])
    k = heads(h @ p[prefix + "wk"])
    v = heads(h @ p[prefix + "wv"])
    scores = (q @ nx.swap_last(k)) * (1.0 / math.sqrt(hd))
    att = nx.softmax(scores, additive_mask=key_bias)
    o = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (b, n, d))
    x = x + o @ p[prefix + "wo"]
    h = nx.layer_norm(x, p[prefix + "ln2_gain"], p[prefix + "ln2_bias"], cfg.ln_eps)
    m = nx.gelu(h @ p[prefix + "w1"] + p[prefix + "b1"]) @ p[prefix + "w2"] + p[prefix + "b2"]
    return x + m


def _key_bias(valid: np.ndarray) -> np.ndarray | None:
    if valid.all():
        return None
    return np.where(valid, 0.0, ATTN_MASK_FILL)[:, None, None, :]


def encode_text_batch(model: Model, ids: np.ndarray, valid: np.ndarray) -> Tensor:
    """Per-position features ``[B, n, d]`` for padded id rows.

    Invalid positions are excluded as attention keys; their own output rows
    are finite but meaningless.
    """
    ids = np.asarray(ids, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    n = ids.shape[1]
    if n > model.config.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {model.config.max_len}")
    if np.any(ids < 0) or np.any(ids >= model.config.vocab_size):
        raise ValueError("token id out of range")
    x = nx.gather_rows(model.params["text.token_embedding"], ids)
    x = x + nx.gather_rows(model.params["text.positional"], np.arange(n))
    bias = _key_bias(valid)
    for i in range(model.config.depth):
        x = _block(model, f"text.blocks.{i}.", x, bias)
    return x


def encode_text(model: Model, seq) -> Tensor:
    ids = np.asarray(seq, dtype=np.int64)[None, :]
    out = encode_text_batch(model, ids, np.ones(ids.shape, dtype=bool))
    return nx.reshape(out, out.shape[1:])


def encode_image_batch(model: Model, grids: np.ndarray) -> Tensor:
    """Per-cell features ``[B, G, d]`` for stacked patch grids ``[B, G, p]``."""
    grids = np.asarray(grids, dtype=np.float64)
    cfg = model.config
    if grids.shape[1:] != (cfg.grid_size, cfg.patch_dim):
        raise ValueError(f"grid batch shape {grids.shape[1:]} != {(cfg.grid_size, cfg.patch_dim)}")
    x = Tensor(grids) @ model.params["image.patch_proj"] + model.params["image.positional"]
    for i in range(cfg.depth):
        x = _block(model, f"image.blocks.{i}.", x, None)
    return x


def encode_image(model: Model, img: PatchGrid) -> Tensor:
    out = encode_image_batch(model, img.grid[None])
    return nx.reshape(out, out.shape[1:])


def pad_batch(seqs, pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid


# -- checkpoint io ---------------------------------------------------------


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Little-endian layout: magic, u32 version, u32 header length, JSON
    header (config and ``[name, shape]`` list), then float64 data in header
    order."""
    header = {
        "config": asdict(model.config),
        "params": [[n, list(t.shape)] for n, t in model.params.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        f.write(hb)
        for t in model.params.values():
            f.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen])
    cfg = ModelConfig(**header["config"])
    off = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated at parameter {name}")
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        params[name] = Tensor(data.astype(np.float64), name=name)
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return Model(cfg, params)
