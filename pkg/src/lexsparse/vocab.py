"""Vocabulary loading, greedy longest-match subword tokenization, binary masks."""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
CONTINUATION = "##"
MAX_CHARS_PER_WORD = 100


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    continuation_prefix: str = CONTINUATION
    index: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.index:
            seen: dict[str, int] = {}
            for i, tok in enumerate(self.tokens):
                if tok in seen:
                    raise VocabError(
                        f"duplicate token {tok!r} on lines {seen[tok] + 1} and {i + 1}"
                    )
                seen[tok] = i
            self.index.update(seen)
        missing = [t for t in SPECIAL_TOKENS if t not in self.index]
        if missing:
            raise VocabError(f"missing special tokens: {', '.join(missing)}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index[token]

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.index[t] for t in SPECIAL_TOKENS)

    def missing_chars(self) -> set[str]:
        """Characters used by non-special tokens that are not tokens themselves."""
        specials = set(SPECIAL_TOKENS)
        chars: set[str] = set()
        for tok in self.tokens:
            if tok in specials:
                continue
            if tok.startswith(self.continuation_prefix) and len(tok) > len(self.continuation_prefix):
                tok = tok[len(self.continuation_prefix):]
            chars.update(tok)
        return {c for c in chars if c not in self.index}


def load_vocab(path: str | Path) -> Vocabulary:
    """Read a vocab file: one token per line, line number is the token id."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocabulary(tuple(line.rstrip("\r") for line in lines))


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def _split_words(text: str) -> list[str]:
    words = []
    for chunk in text.lower().split(" "):
        cur = ""
        for ch in chunk:
            if ch in string.punctuation:
                if cur:
                    words.append(cur)
                    cur = ""
                words.append(ch)
            elif ch in "\t\n\r":
                if cur:
                    words.append(cur)
                    cur = ""
            else:
                cur += ch
        if cur:
            words.append(cur)
    return words


def wordpiece(vocab: Vocabulary, word: str) -> list[int]:
    """Greedy longest-match-first segmentation of one word.

    The whole word becomes a single UNK when any remainder cannot be matched.
    """
    if len(word) > MAX_CHARS_PER_WORD:
        return [vocab.unk_id]
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = vocab.continuation_prefix + piece
            if piece in vocab.index:
                found = vocab.index[piece]
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        ids.append(found)
        start = end
    return ids


def tokenize(vocab: Vocabulary, text: str, max_len: int = 16) -> list[int]:
    """Token ids wrapped as ``CLS ... SEP`` and truncated to ``max_len``."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    content: list[int] = []
    for word in _split_words(text):
        content.extend(wordpiece(vocab, word))
    content = content[: max_len - 2]
    return [vocab.cls_id, *content, vocab.sep_id]


def build_mask(vocab: Vocabulary, seq) -> frozenset[int]:
    """Set of content token ids present in ``seq``; special tokens excluded."""
    specials = vocab.special_ids
    return frozenset(int(t) for t in seq if int(t) not in specials)


def detokenize(vocab: Vocabulary, seq) -> str:
    specials = vocab.special_ids
    out = ""
    for t in seq:
        if t in specials:
            continue
        tok = vocab.tokens[t]
        if tok.startswith(vocab.continuation_prefix) and len(tok) > len(vocab.continuation_prefix):
            out += tok[len(vocab.continuation_prefix):]
        else:
            out += (" " if out else "") + tok
    return out
