"""Joint subword vocabulary shared by the clean and noisy corpora.

Training is byte-pair merging over per-word symbol sequences; encoding is
greedy longest-match segmentation.  Word-internal continuation subwords carry
a ``##`` prefix so that decoding can restore word boundaries unambiguously.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("⟨pad⟩", "⟨bos⟩", "⟨eos⟩", "⟨unk⟩")
UNK_MARKER = SPECIAL_TOKENS[UNK_ID]

_CONT = "##"
_HEADER = "CODIST-VOCAB v1"
_MERGE_SENTINEL = "#MERGES"


def normalize(text: str) -> str:
    """Lowercase, collapse whitespace runs, strip ends."""
    return " ".join(text.lower().split())


def _strip_cont(sym: str) -> str:
    return sym[len(_CONT):] if sym.startswith(_CONT) else sym


def _word_symbols(word: str) -> tuple[str, ...]:
    return (word[0],) + tuple(_CONT + c for c in word[1:])


@dataclass(frozen=True)
class Vocab:
    """Immutable subword vocabulary; ids are contiguous, specials fixed at 0..3."""

    tokens: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "token_to_id", {t: i for i, t in enumerate(self.tokens)})
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate token in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def specials(self) -> dict[str, int]:
        return {"pad": PAD_ID, "bos": BOS_ID, "eos": EOS_ID, "unk": UNK_ID}


def train_vocab(corpora: Sequence[Iterable[str]], target_size: int) -> Vocab:
    """Learn a joint vocabulary over the union of `corpora`.

    Merges are applied greedily by descending pair frequency; frequency ties
    pick the lexicographically smallest pair (compared on marker-stripped
    symbols first).  Deterministic for identical input.
    """
    word_counts: Counter[str] = Counter()
    for corpus in corpora:
        for text in corpus:
            word_counts.update(normalize(text).split())
    if not word_counts:
        raise ValueError("empty corpus")

    words: dict[tuple[str, ...], int] = {}
    base: set[str] = set()
    for word, count in word_counts.items():
        syms = _word_symbols(word)
        words[syms] = words.get(syms, 0) + count
        base.update(syms)

    n_base = len(base)
    if target_size < n_base + len(SPECIAL_TOKENS):
        raise ValueError(
            f"vocab too small: target_size {target_size} < "
            f"{n_base} base symbols + {len(SPECIAL_TOKENS)} specials"
        )

    tokens: list[str] = list(SPECIAL_TOKENS) + sorted(base)
    token_set = set(tokens)
    merges: list[tuple[str, str]] = []

    while len(tokens) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for syms, count in words.items():
            for pair in zip(syms, syms[1:]):
                pairs[pair] += count
        if not pairs:
            break
        best_count = max(pairs.values())
        best = min(
            (p for p, c in pairs.items() if c == best_count),
            key=lambda p: (_strip_cont(p[0]), _strip_cont(p[1]), p[0], p[1]),
        )
        merged = best[0] + _strip_cont(best[1])
        merges.append(best)
        if merged not in token_set:
            token_set.add(merged)
            tokens.append(merged)
        rewritten: dict[tuple[str, ...], int] = {}
        for syms, count in words.items():
            out = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            key = tuple(out)
            rewritten[key] = rewritten.get(key, 0) + count
        words = rewritten

    return Vocab(tokens=tuple(tokens), merges=tuple(merges))


def encode(vocab: Vocab, text: str) -> list[int]:
    """Greedy longest-match segmentation of normalized `text`; unknowns map to UNK."""
    table = vocab.token_to_id
    ids: list[int] = []
    for word in normalize(text).split():
        pos = 0
        while pos < len(word):
            match_id = None
            for end in range(len(word), pos, -1):
                piece = word[pos:end]
                tok = piece if pos == 0 else _CONT + piece
                tid = table.get(tok)
                if tid is not None:
                    match_id = tid
                    pos = end
                    break
            if match_id is None:
                match_id = UNK_ID
                pos += 1
            ids.append(match_id)
    return ids


def decode(vocab: Vocab, ids: Sequence[int]) -> str:
    """Concatenate subwords; a non-``##`` token starts a new word."""
    n = len(vocab)
    words: list[str] = []
    for tid in ids:
        if not 0 <= tid < n:
            raise ValueError(f"unknown token id {tid}")
        if tid in (PAD_ID, BOS_ID, EOS_ID):
            continue
        tok = UNK_MARKER if tid == UNK_ID else vocab.tokens[tid]
        if tok.startswith(_CONT) and words:
            words[-1] += tok[len(_CONT):]
        else:
            words.append(_strip_cont(tok))
    return " ".join(words)


def serialize_vocab(vocab: Vocab) -> str:
    lines = [_HEADER]
    lines.extend(vocab.tokens)
    lines.append(_MERGE_SENTINEL)
    lines.extend(f"{left} {right}" for left, right in vocab.merges)
    return "\n".join(lines) + "\n"


def save_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_vocab(vocab))


def load_vocab(path) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != _HEADER:
        raise ValueError(f"not a vocab file (missing '{_HEADER}' header): {path}")
    try:
        sentinel = lines.index(_MERGE_SENTINEL)
    except ValueError:
        raise ValueError(f"vocab file missing '{_MERGE_SENTINEL}' sentinel: {path}") from None
    tokens = tuple(lines[1:sentinel])
    if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
        raise ValueError(f"vocab file does not start with the special tokens: {path}")
    merges = []
    for lineno, line in enumerate(lines[sentinel + 1 :], start=sentinel + 2):
        parts = line.split(" ")
        if len(parts) != 2:
            raise ValueError(f"malformed merge at line {lineno}: {line!r}")
        merges.append((parts[0], parts[1]))
    return Vocab(tokens=tokens, merges=tuple(merges))
