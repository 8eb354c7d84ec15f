from importlib.resources import files
from pathlib import Path

import numpy as np
import pytest

from lexsparse.encoder import ModelConfig, init_model
from lexsparse.vocab import Vocabulary, load_vocab

GOLDEN = Path(__file__).parent / "golden"

TOY_TOKENS = (
    "[PAD]", "[UNK]", "[CLS]", "[SEP]",
    "p", "l", "a", "y", "i", "n", "g", "c", "t", "d", "o",
    "##i", "##n", "##g", "##a", "##y", "##t",
    "play", "##ing", "cat", "dog", "the", "a photo",
)


@pytest.fixture(scope="session")
def vocab() -> Vocabulary:
    return load_vocab(files("lexsparse") / "data" / "vocab.txt")


@pytest.fixture
def toy_vocab() -> Vocabulary:
    return Vocabulary(TOY_TOKENS[:-1])


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(vocab_size=64, d=8, depth=1, heads=2, max_len=8, grid_h=2, grid_w=2,
                      patch_dim=6, init_std=0.5)
    return init_model(cfg, 0)


def golden(name: str, value: np.ndarray) -> np.ndarray:
    """Load a frozen array; write it first if absent (first verified run)."""
    path = GOLDEN / f"{name}.npy"
    if not path.exists():
        GOLDEN.mkdir(exist_ok=True)
        np.save(path, value)
    return np.load(path)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
