"""Edit distance, BK-tree lexicons and dictionary-based correction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import RejectedInput


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance over code points with unit costs."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


class _Node:
    __slots__ = ("word", "order", "children")

    def __init__(self, word: str, order: int):
        self.word = word
        self.order = order
        self.children: dict[int, _Node] = {}


class Lexicon:
    """Word list indexed by a BK-tree over edit distance.

    Words are folded to lowercase when ``fold`` is set; duplicates (after
    folding) keep their first spelling and position.
    """

    def __init__(self, words: Iterable[str] = (), fold: bool = True):
        self.fold = fold
        self.words: list[str] = []  # original spelling, first occurrence
        self.keys: list[str] = []  # folded form used for distances
        self._root: _Node | None = None
        self._spelling: dict[str, str] = {}
        for w in words:
            key = w.lower() if fold else w
            if key in self._spelling:
                continue
            self._spelling[key] = w
            self._insert(key, len(self.words))
            self.words.append(w)
            self.keys.append(key)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word: str):
        key = word.lower() if self.fold else word
        return key in self._spelling

    def __iter__(self):
        return iter(self.words)

    def _insert(self, key: str, order: int):
        if self._root is None:
            self._root = _Node(key, order)
            return
        node = self._root
        while True:
            d = edit_distance(key, node.word)
            child = node.children.get(d)
            if child is None:
                node.children[d] = _Node(key, order)
                return
            node = child

    def query(self, word: str, max_d: int) -> list[tuple[str, int]]:
        """All words within ``max_d`` of ``word``, by (distance, lexicon order).

        Returned words are in folded form; use :meth:`original` for spelling.
        """
        if max_d < 0:
            raise RejectedInput("max_d must be >= 0")
        key = word.lower() if self.fold else word
        hits = []
        stack = [self._root] if self._root is not None else []
        while stack:
            node = stack.pop()
            d = edit_distance(key, node.word)
            if d <= max_d:
                hits.append((d, node.order, node.word))
            lo, hi = d - max_d, d + max_d
            for cd, child in node.children.items():
                if lo <= cd <= hi:
                    stack.append(child)
        hits.sort()
        return [(w, d) for d, _, w in hits]

    def original(self, key: str) -> str:
        return self._spelling[key]

    def nearest(self, word: str, max_d: int) -> tuple[str, int] | None:
        """Closest word within ``max_d`` (original spelling), earliest on ties."""
        hits = self.query(word, max_d)
        if not hits:
            return None
        key, d = hits[0]
        return self.original(key), d


def bk_build(words: Iterable[str], fold: bool = True) -> Lexicon:
    return Lexicon(words, fold=fold)


def bk_query(lex: Lexicon, word: str, max_d: int) -> list[tuple[str, int]]:
    return lex.query(word, max_d)


@dataclass(frozen=True)
class CorrectionPolicy:
    max_norm_dist: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.max_norm_dist <= 1.0:
            raise RejectedInput("max_norm_dist must lie in [0, 1]")


def normalized_distance(a: str, b: str) -> float:
    n = max(len(a), len(b))
    return 0.0 if n == 0 else edit_distance(a, b) / n


def correct(raw: str, lex: Lexicon, policy: CorrectionPolicy = CorrectionPolicy()) -> str:
    """Replace ``raw`` by its nearest lexicon word if close enough.

    The nearest word ``w`` (earliest on ties) is accepted when
    ``d / max(len(raw), len(w)) <= max_norm_dist``; otherwise ``raw`` is kept.
    """
    if len(lex) == 0:
        return raw
    key = raw.lower() if lex.fold else raw
    m = policy.max_norm_dist
    # An acceptable word has d <= m * (len(raw) + d), i.e. d <= m * len / (1 - m).
    if m >= 1.0:
        bound = max(len(key), max(len(k) for k in lex.keys))
    else:
        bound = math.floor(m * len(key) / (1.0 - m) + 1e-9)
    hits = lex.query(key, bound)
    if not hits:
        return raw
    best, d = hits[0]
    if d > m * max(len(key), len(best)) + 1e-12:
        return raw
    return lex.original(best)


def read_word_list(path) -> list[str]:
    """One word per line, UTF-8 with optional BOM; blank lines skipped."""
    text = Path(path).read_text(encoding="utf-8-sig")
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def load_lexicon(path, fold: bool = True) -> Lexicon:
    return Lexicon(read_word_list(path), fold=fold)
