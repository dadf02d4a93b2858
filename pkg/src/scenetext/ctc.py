"""Connectionist temporal classification: loss, gradients and decoders.

Frame probabilities are ``(T, K)`` arrays whose column 0 is the blank. All
dynamic programming runs in log space; ``-inf`` stands for probability zero and
propagates through ``np.logaddexp`` without special cases.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InfeasibleTarget, NoMatch, ParseError, RejectedInput

BLANK = 0
NEG_INF = -np.inf
ROW_TOL = 1e-9

DEFAULT_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789"


@dataclass(frozen=True)
class Alphabet:
    """Ordered character set; class ``i + 1`` is ``chars[i]`` and class 0 is blank."""

    chars: str = DEFAULT_CHARS
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise RejectedInput("alphabet characters must be unique")
        object.__setattr__(self, "_index", {ch: i + 1 for i, ch in enumerate(self.chars)})

    @property
    def size(self) -> int:
        """Number of classes including blank."""
        return len(self.chars) + 1

    def can_encode(self, text: str) -> bool:
        return all(ch in self._index for ch in text)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[ch] for ch in text]
        except KeyError as exc:
            raise RejectedInput(f"character {exc.args[0]!r} not in alphabet") from None

    def decode(self, labels: Iterable[int]) -> str:
        return "".join(self.chars[i - 1] for i in labels)


@dataclass(frozen=True)
class DecodeResult:
    labels: tuple[int, ...]
    score: float
    text: str | None = None


def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge repeated classes, then drop blanks."""
    out = []
    prev = None
    for k in path:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target`` (repeats need a separating blank)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(target: Sequence[int], n_frames: int) -> bool:
    return min_frames(target) <= n_frames


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 2:
        raise RejectedInput(f"frame probabilities must be T x K with K >= 2, got {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise RejectedInput("frame probabilities must be finite and non-negative")
    if np.abs(p.sum(axis=1) - 1.0).max() > ROW_TOL:
        raise RejectedInput(f"frame probability rows must sum to 1 within {ROW_TOL}")
    return p


def _check_target(target, k: int) -> list[int]:
    target = [int(v) for v in target]
    if any(v <= 0 or v >= k for v in target):
        raise RejectedInput("target labels must be non-blank class indices < K")
    return target


def check_frame_probs(probs, tol: float = 1e-9) -> np.ndarray:
    """Validate a proper FrameProbs matrix (rows are distributions)."""
    p = _check_probs(probs)
    if np.any(p > 1) or np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise RejectedInput("each frame must be a probability distribution")
    return p


def _extended(target: list[int]) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    """``allow[s]`` is true when state ``s`` may be entered from ``s - 2``."""
    allow = np.zeros(len(ext), dtype=bool)
    allow[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return allow


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def _alpha_beta(logp: np.ndarray, target: list[int]):
    """Forward variables include the current frame; backward variables exclude it."""
    t_len = logp.shape[0]
    ext = _extended(target)
    s_len = len(ext)
    allow = _skip_allowed(ext)
    emit = logp[:, ext]  # (T, S)

    la = np.full((t_len, s_len), NEG_INF)
    la[0, 0] = emit[0, 0]
    if s_len > 1:
        la[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = la[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(allow[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        la[t] = acc + emit[t]

    lb = np.full((t_len, s_len), NEG_INF)
    lb[-1, -1] = 0.0
    if s_len > 1:
        lb[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = lb[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(allow[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        lb[t] = acc

    log_total = la[-1, -1] if s_len == 1 else np.logaddexp(la[-1, -1], la[-1, -2])
    return la, lb, float(log_total), ext


def ctc_loss(probs, target: Sequence[int]):
    """Negative log probability of ``target`` under ``probs``.

    Returns ``(loss, log_alpha, log_beta)``. An infeasible target yields
    ``(inf, None, None)`` rather than raising.
    """
    p = _check_probs(probs)
    target = _check_target(target, p.shape[1])
    if not is_feasible(target, p.shape[0]):
        return np.inf, None, None
    la, lb, log_total, _ = _alpha_beta(_log(p), target)
    return -log_total, la, lb


def ctc_loss_log(log_probs, target: Sequence[int]) -> float:
    """Same as :func:`ctc_loss` but takes log probabilities and returns only the loss."""
    lp = np.asarray(log_probs, dtype=np.float64)
    target = _check_target(target, lp.shape[1])
    if not is_feasible(target, lp.shape[0]):
        return np.inf
    return -_alpha_beta(lp, target)[2]


def _occupancy(logp: np.ndarray, target: list[int]):
    """Posterior probability that frame ``t`` emits class ``k`` on a target path."""
    if not is_feasible(target, logp.shape[0]):
        raise InfeasibleTarget(f"target of length {len(target)} needs {min_frames(target)} frames, have {logp.shape[0]}")
    la, lb, log_total, ext = _alpha_beta(logp, target)
    if not np.isfinite(log_total):
        raise InfeasibleTarget("target has zero probability under these frames")
    post = np.exp(la + lb - log_total)
    occ = np.zeros(logp.shape)
    for s, k in enumerate(ext):
        occ[:, k] += post[:, s]
    return -log_total, occ


def ctc_gradient(probs, target: Sequence[int]) -> np.ndarray:
    """d loss / d probs[t, k], treating every entry as an independent variable."""
    p = _check_probs(probs)
    target = _check_target(target, p.shape[1])
    _, occ = _occupancy(_log(p), target)
    grad = np.zeros_like(p)
    nz = occ > 0
    grad[nz] = -occ[nz] / p[nz]
    return grad


def ctc_logit_loss_grad(logits, target: Sequence[int]):
    """Loss and gradient w.r.t. pre-softmax logits: ``softmax(logits) - occupancy``."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = _check_target(target, z.shape[1])
    loss, occ = _occupancy(logp, target)
    return loss, np.exp(logp) - occ


def sequence_log_prob(probs, target: Sequence[int]) -> float:
    loss, _, _ = ctc_loss(probs, target)
    return -loss


# --------------------------------------------------------------------------
# decoding


def greedy_decode(probs) -> DecodeResult:
    """Best path: per-frame argmax, collapsed. Score is the log of the path probability."""
    p = _check_probs(probs)
    best = p.argmax(axis=1)
    score = float(_log(p[np.arange(len(p)), best]).sum())
    return DecodeResult(tuple(collapse(best)), score)


def beam_decode(probs, beam_width: int = 16) -> list[DecodeResult]:
    """Prefix beam search.

    Each hypothesis is a collapsed prefix carrying two log probabilities: paths
    ending in blank and paths ending in the prefix's last label. Prefixes reached
    by different paths are merged. Results are sorted by total probability,
    highest first.
    """
    if beam_width < 1:
        raise RejectedInput("beam width must be >= 1")
    logp = _log(_check_probs(probs))
    t_len, k = logp.shape
    beams: dict[tuple, tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(t_len):
        row = logp[t]
        nxt: dict[tuple, list[float]] = {}

        def add(prefix, blank_lp, label_lp):
            entry = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            entry[0] = np.logaddexp(entry[0], blank_lp)
            entry[1] = np.logaddexp(entry[1], label_lp)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            add(prefix, total + row[BLANK], NEG_INF)
            last = prefix[-1] if prefix else None
            for c in range(1, k):
                lp = row[c]
                if lp == NEG_INF:
                    continue
                if c == last:
                    add(prefix, NEG_INF, pnb + lp)
                    add(prefix + (c,), NEG_INF, pb + lp)
                else:
                    add(prefix + (c,), NEG_INF, total + lp)
        live = [kv for kv in nxt.items() if np.logaddexp(*kv[1]) > NEG_INF]
        ranked = sorted(live, key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {pre: (v[0], v[1]) for pre, v in ranked[:beam_width]}
    results = [DecodeResult(pre, float(np.logaddexp(pb, pnb))) for pre, (pb, pnb) in beams.items()]
    results.sort(key=lambda r: (-r.score, r.labels))
    return results


def lexicon_decode(probs, lexicon: Sequence[str], alphabet: Alphabet | None = None) -> DecodeResult:
    """Pick the lexicon word with the highest exact CTC probability.

    Words are lowercased before encoding; words with characters outside the
    alphabet or needing more frames than available are skipped. Ties keep the
    earlier word. The returned ``text`` is the word as given in the lexicon.
    """
    alphabet = alphabet or Alphabet()
    p = _check_probs(probs)
    if not lexicon:
        raise RejectedInput("lexicon is empty")
    logp = _log(p)
    best = None
    for word in lexicon:
        folded = word.lower()
        if not alphabet.can_encode(folded):
            continue
        labels = alphabet.encode(folded)
        if not is_feasible(labels, len(p)):
            continue
        score = _alpha_beta(logp, labels)[2]
        if score == NEG_INF:
            continue
        if best is None or score > best.score:
            best = DecodeResult(tuple(labels), score, word)
    if best is None:
        raise NoMatch("no lexicon word is feasible for these frames")
    return best


# --------------------------------------------------------------------------
# text matrix format: first line "T K", then T rows of K numbers


def dump_frame_probs(probs) -> str:
    p = np.asarray(probs, dtype=np.float64)
    lines = [f"{p.shape[0]} {p.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in p]
    return "\n".join(lines) + "\n"


def load_frame_probs(text: str) -> np.ndarray:
    lines = [ln for ln in text.lstrip("﻿").splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty frame-probability file")
    try:
        t_len, k = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError("header must be 'T K'", line=1) from None
    if len(lines) - 1 != t_len:
        raise ParseError(f"expected {t_len} rows, found {len(lines) - 1}")
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        try:
            row = [float(v) for v in ln.split()]
        except ValueError:
            raise ParseError("non-numeric entry", line=i) from None
        if len(row) != k:
            raise ParseError(f"expected {k} values, found {len(row)}", line=i)
        rows.append(row)
    return np.array(rows, dtype=np.float64)
