"""Embedded 5x7 bitmap font covering a-z and 0-9 (drawn as capitals)."""

import numpy as np

GLYPH_W, GLYPH_H = 5, 7

_ROWS = {
    "a": [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "b": ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    "c": [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
    "d": ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."],
    "e": ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    "f": ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
    "g": [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"],
    "h": ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "i": [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "j": ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
    "k": ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
    "l": ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    "m": ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
    "n": ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"],
    "o": [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    "p": ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
    "q": [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
    "r": ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
    "s": [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
    "t": ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    "u": ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    "v": ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
    "w": ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."],
    "x": ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
    "y": ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."],
    "z": ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
    "0": [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    "1": ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "2": [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    "3": ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    "4": ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    "5": ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    "6": ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    "7": ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    "8": [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    "9": [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
}

GLYPHS: dict[str, np.ndarray] = {
    ch: np.array([[c == "#" for c in row] for row in rows], dtype=np.uint8) for ch, rows in _ROWS.items()
}

CHARSET = "".join(sorted(GLYPHS))


def render_text(text: str, scale: int = 1, spacing: int = 1) -> np.ndarray:
    """Binary bitmap (uint8 0/1) of ``text``; height ``7*scale``.

    Characters are separated by ``spacing*scale`` empty columns and there is
    no outer margin: the bitmap is exactly the union of the glyph cells.
    """
    text = text.lower()
    if not text:
        raise ValueError("nothing to render")
    missing = [c for c in text if c not in GLYPHS]
    if missing:
        raise ValueError(f"no glyph for {missing[0]!r}")
    gap = np.zeros((GLYPH_H, spacing), dtype=np.uint8)
    parts = []
    for i, ch in enumerate(text):
        if i:
            parts.append(gap)
        parts.append(GLYPHS[ch])
    bitmap = np.concatenate(parts, axis=1)
    return np.kron(bitmap, np.ones((scale, scale), dtype=np.uint8))


def text_size(text: str, scale: int = 1, spacing: int = 1) -> tuple[int, int]:
    """``(width, height)`` in pixels of :func:`render_text` output."""
    n = len(text)
    return scale * (n * GLYPH_W + (n - 1) * spacing), scale * GLYPH_H
