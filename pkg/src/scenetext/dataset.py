"""ICDAR-format annotation files, training masks, vocabularies and synthetic data.

Annotation lines follow the Challenge-4 convention::

    x1,y1,x2,y2,x3,y3,x4,y4,transcription

where the transcription is everything after the eighth comma (it may itself
contain commas) and ``###`` marks a don't-care region.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, RejectedInput
from .font import render_text, text_size
from .geometry import QuadBox, points_in_polygon
from .lexicon import Lexicon, read_word_list
from .seeding import substream

log = logging.getLogger(__name__)

DONT_CARE = "###"


@dataclass
class ImageAnnotation:
    image_id: str
    boxes: list[QuadBox] = field(default_factory=list)


# --------------------------------------------------------------------------
# annotation files


def _parse_number(tok: str) -> float:
    v = float(tok)
    if not np.isfinite(v):
        raise ValueError(tok)
    return v


def parse_gt_file(text: str, image_id: str = "", with_text: bool = True, path: str | None = None) -> ImageAnnotation:
    """Parse one ground-truth (or Task 4.4 result) file.

    With ``with_text=False`` eight-field lines (Task 4.1 results) are accepted
    and any trailing field is ignored.
    """
    if text.startswith("﻿"):
        text = text[1:]
    boxes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split(",", 8)
        need = 9 if with_text else 8
        if len(fields) < need:
            raise ParseError(f"expected at least {need} comma-separated fields, got {len(fields)}", lineno, path)
        try:
            coords = [_parse_number(t) for t in fields[:8]]
        except ValueError:
            raise ParseError("non-numeric coordinate", lineno, path) from None
        transcription = fields[8] if with_text and len(fields) > 8 else None
        boxes.append(QuadBox.from_coords(coords, transcription))
    return ImageAnnotation(image_id, boxes)


def _fmt_coord(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def format_results(ann: ImageAnnotation, with_text: bool) -> str:
    lines = []
    for box in ann.boxes:
        fields = [_fmt_coord(v) for v in box.coords()]
        if with_text:
            fields.append(box.transcription if box.transcription is not None else "")
        lines.append(",".join(fields))
    return "".join(ln + "\n" for ln in lines)


def write_results(annotations: Sequence[ImageAnnotation], out_dir, with_text: bool) -> list[Path]:
    """Write ``res_<image id>.txt`` per image (UTF-8, no BOM); returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ann in sorted(annotations, key=lambda a: a.image_id):
        p = out_dir / f"res_{ann.image_id}.txt"
        p.write_text(format_results(ann, with_text), encoding="utf-8", newline="\n")
        paths.append(p)
    return paths


def write_gt(annotations: Sequence[ImageAnnotation], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ann in sorted(annotations, key=lambda a: a.image_id):
        p = out_dir / f"gt_{ann.image_id}.txt"
        p.write_text(format_results(ann, True), encoding="utf-8", newline="\n")
        paths.append(p)
    return paths


_ID_RE = re.compile(r"^(?:gt|res)_(.+)\.txt$")


def read_annotation_dir(directory, with_text: bool = True) -> dict[str, ImageAnnotation]:
    """Read every ``gt_<id>.txt`` / ``res_<id>.txt`` in a directory, keyed by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise RejectedInput(f"not a directory: {directory}")
    out = {}
    for p in sorted(directory.iterdir()):
        m = _ID_RE.match(p.name)
        if not m:
            continue
        text = p.read_text(encoding="utf-8-sig")
        out[m.group(1)] = parse_gt_file(text, m.group(1), with_text=with_text, path=str(p))
    return out


# --------------------------------------------------------------------------
# masks


def rasterize_mask(ann: ImageAnnotation, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Training target and ignore mask on an ``h x w`` grid.

    A pixel is text when its centre lies inside (or on) a regular box; centres
    inside don't-care boxes go to the ignore mask instead.
    """
    if h < 1 or w < 1:
        raise RejectedInput("mask size must be positive")
    mask = np.zeros((h, w), dtype=np.uint8)
    ignore = np.zeros((h, w), dtype=np.uint8)
    for box in ann.boxes:
        x0, y0, x1, y1 = box.envelope()
        c0, c1 = max(0, int(np.ceil(x0))), min(w - 1, int(np.floor(x1)))
        r0, r1 = max(0, int(np.ceil(y0))), min(h - 1, int(np.floor(y1)))
        if c0 > c1 or r0 > r1:
            continue
        ys, xs = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
        inside = points_in_polygon(xs.astype(np.float64), ys.astype(np.float64), box)
        target = ignore if box.dont_care else mask
        target[r0 : r1 + 1, c0 : c1 + 1] |= inside.astype(np.uint8)
    return mask, ignore


# --------------------------------------------------------------------------
# vocabularies


def load_vocab(setting: str, root, image_id: str | None = None) -> Lexicon | dict[str, Lexicon]:
    """Lexicon for an end-to-end setting from a ``vocab/`` directory.

    Layout: ``strong/<id>.txt`` (or ``strong/voc_<id>.txt``) per image,
    ``weak.txt`` and ``generic.txt``. For ``strong`` a dict keyed by image id
    is returned, or a single lexicon when ``image_id`` is given.
    """
    root = Path(root)
    if setting == "strong":
        if image_id is not None:
            return Lexicon(read_word_list(_strong_path(root, image_id)))
        d = root / "strong"
        if not d.is_dir():
            raise RejectedInput(f"missing strong vocabulary directory: {d}")
        out = {}
        for p in sorted(d.glob("*.txt")):
            key = p.stem[4:] if p.stem.startswith("voc_") else p.stem
            out[key] = Lexicon(read_word_list(p))
        return out
    if setting in ("weak", "generic"):
        p = root / f"{setting}.txt"
        if not p.is_file():
            raise RejectedInput(f"missing {setting} vocabulary file: {p}")
        return Lexicon(read_word_list(p))
    raise RejectedInput(f"unknown setting {setting!r}")


def _strong_path(root: Path, image_id: str) -> Path:
    for name in (f"{image_id}.txt", f"voc_{image_id}.txt"):
        p = root / "strong" / name
        if p.is_file():
            return p
    raise RejectedInput(f"missing strong vocabulary file: {root / 'strong' / (image_id + '.txt')}")


# --------------------------------------------------------------------------
# images


def to_gray(img) -> np.ndarray:
    """Float64 grayscale in [0, 1]; RGB uses luma weights 0.299/0.587/0.114."""
    a = np.asarray(img)
    scale = 255.0 if a.dtype == np.uint8 else 1.0
    a = a.astype(np.float64) / scale
    if a.ndim == 3 and a.shape[-1] in (3, 4):
        a = a[..., 0] * 0.299 + a[..., 1] * 0.587 + a[..., 2] * 0.114
    elif a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise RejectedInput(f"cannot interpret array of shape {np.shape(img)} as an image")
    return np.clip(a, 0.0, 1.0)


def read_image(path) -> np.ndarray:
    """Grayscale float image from an 8-bit PGM/PPM (or ``.npy`` dump)."""
    path = Path(path)
    if path.suffix == ".npy":
        return to_gray(np.load(path, allow_pickle=False))
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA", "P"):
            raise RejectedInput(f"unsupported image mode {im.mode} in {path}")
        if im.mode == "P":
            im = im.convert("RGB")
        return to_gray(np.asarray(im))


def write_image(path, img) -> None:
    """Save a grayscale image (uint8, or float in [0, 1]) as binary PGM."""
    from PIL import Image

    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(a, mode="L").save(Path(path), format="PPM")


# --------------------------------------------------------------------------
# synthetic data

# Short words drawn from signage and shop fronts; all inside the font's charset.
WORDS = (
    "stop exit open sale cafe bus taxi bank shop park hotel bar menu food push pull "
    "east west north south gate door free city road street mall store book news tea "
    "milk bread fish meat wine beer oil gas fuel car bike train metro line zone area "
    "info help call toll lane left right walk wait slow fast hot cold new old big top "
    "sport music video photo print mail post office home work bed bath pool spa gym "
    "art film show star moon sun rain snow wind fire water ice salt sugar rice corn "
    "apple lemon mango grape kiwi pear plum nut jam egg cake pie soup grill wok bbq "
    "sushi pizza pasta taco dim sum deli cash atm card pay sign pharma clinic dental "
    "eye care kids toys game play club pub inn bay hill lake river port pier dock "
    "air jet sea sky 24h 7up 99 100 365 2015 a1 b2 m3 k9 x5"
).split()


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 10
    image_size: tuple[int, int] = (64, 64)  # (height, width)
    words_per_image: tuple[int, int] = (1, 3)
    scale_range: tuple[int, int] = (1, 2)
    noise: float = 0.1
    seed: int = 0
    vocabulary: tuple[str, ...] = tuple(WORDS)
    background: int = 40
    ink: int = 220
    gap: int = 3
    max_tries: int = 50

    def __post_init__(self):
        lo, hi = self.words_per_image
        if not 0 <= lo <= hi:
            raise RejectedInput("words_per_image must be an ordered, non-negative range")
        if not 1 <= self.scale_range[0] <= self.scale_range[1]:
            raise RejectedInput("scale_range must be an ordered range of positive integers")
        if self.noise < 0 or min(self.image_size) < 1 or not self.vocabulary:
            raise RejectedInput("invalid synthetic data configuration")


def synth_generate(cfg: SynthConfig) -> list[tuple[np.ndarray, ImageAnnotation]]:
    """Render ``cfg.n_images`` uint8 images of bitmap-font words with exact GT.

    Each GT quad spans the rendered glyph cells with inclusive pixel
    coordinates. Words that cannot be placed without overlap are skipped and
    counted in a logged warning. Output depends only on ``cfg``.
    """
    rng = substream(cfg.seed, "synth")
    h, w = cfg.image_size
    amp = int(round(cfg.noise * 255))
    out = []
    skipped = 0
    for n in range(cfg.n_images):
        img = np.full((h, w), cfg.background, dtype=np.int32)
        boxes: list[QuadBox] = []
        taken: list[tuple[int, int, int, int]] = []
        n_words = int(rng.integers(cfg.words_per_image[0], cfg.words_per_image[1] + 1))
        for _ in range(n_words):
            placed = False
            for _ in range(cfg.max_tries):
                word = cfg.vocabulary[int(rng.integers(len(cfg.vocabulary)))]
                scale = int(rng.integers(cfg.scale_range[0], cfg.scale_range[1] + 1))
                tw, th = text_size(word, scale)
                if tw > w - 2 or th > h - 2:
                    continue
                x = int(rng.integers(1, w - tw))
                y = int(rng.integers(1, h - th))
                rect = (x, y, x + tw - 1, y + th - 1)
                if any(_overlaps(rect, r, cfg.gap) for r in taken):
                    continue
                bitmap = render_text(word, scale)
                region = img[y : y + th, x : x + tw]
                region[bitmap.astype(bool)] = cfg.ink
                taken.append(rect)
                boxes.append(QuadBox.from_rect(*rect, transcription=word))
                placed = True
                break
            if not placed:
                skipped += 1
        if amp:
            img = img + rng.integers(-amp, amp + 1, size=img.shape)
        out.append((np.clip(img, 0, 255).astype(np.uint8), ImageAnnotation(f"img_{n + 1}", boxes)))
    if skipped:
        log.warning("synth_generate: %d word(s) could not be placed and were skipped", skipped)
    return out


def _overlaps(a, b, gap: int) -> bool:
    return not (a[2] + gap < b[0] or b[2] + gap < a[0] or a[3] + gap < b[1] or b[3] + gap < a[1])


def crop_envelope(image: np.ndarray, box: QuadBox, jitter: Sequence[int] = (0, 0, 0, 0)) -> np.ndarray:
    """Axis-aligned envelope of ``box`` (inclusive pixels), edges moved by ``jitter``.

    ``jitter`` is ``(left, top, right, bottom)``; positive values grow the crop.
    The crop is clamped to the image and always at least one pixel.
    """
    h, w = image.shape[:2]
    x0, y0, x1, y1 = box.envelope()
    x0 = int(np.floor(x0)) - jitter[0]
    y0 = int(np.floor(y0)) - jitter[1]
    x1 = int(np.ceil(x1)) + jitter[2]
    y1 = int(np.ceil(y1)) + jitter[3]
    x0, y0 = min(max(0, x0), w - 1), min(max(0, y0), h - 1)
    x1, y1 = min(max(x0, x1), w - 1), min(max(y0, y1), h - 1)
    return image[y0 : y1 + 1, x0 : x1 + 1]


def synth_word_crops(
    n: int,
    seed: int,
    vocabulary: Sequence[str] = WORDS,
    scale_range: tuple[int, int] = (1, 2),
    noise: float = 0.1,
    jitter: int = 1,
    words: Sequence[str] | None = None,
) -> list[tuple[np.ndarray, str]]:
    """Single-word crops as a detector envelope would produce them.

    Each word is rendered on a padded canvas, noise is added, and the crop is
    the glyph-cell box with every edge shifted by up to ``jitter`` pixels.
    """
    rng = substream(seed, "synth-words")
    amp = int(round(noise * 255))
    out = []
    for i in range(n):
        word = words[i] if words is not None else vocabulary[int(rng.integers(len(vocabulary)))]
        scale = int(rng.integers(scale_range[0], scale_range[1] + 1))
        bitmap = render_text(word, scale)
        pad = jitter + 2
        canvas = np.full((bitmap.shape[0] + 2 * pad, bitmap.shape[1] + 2 * pad), 40, dtype=np.int32)
        canvas[pad:-pad, pad:-pad][bitmap.astype(bool)] = 220
        if amp:
            canvas = canvas + rng.integers(-amp, amp + 1, size=canvas.shape)
        canvas = np.clip(canvas, 0, 255).astype(np.uint8)
        box = QuadBox.from_rect(pad, pad, pad + bitmap.shape[1] - 1, pad + bitmap.shape[0] - 1)
        jit = tuple(int(v) for v in rng.integers(-jitter, jitter + 1, size=4)) if jitter else (0, 0, 0, 0)
        out.append((crop_envelope(canvas, box, jit), word))
    return out


# --------------------------------------------------------------------------
# directories and word-recognition files

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp", ".npy")


def list_images(directory) -> dict[str, Path]:
    """Image files in ``directory`` keyed by file stem (the image id), sorted."""
    directory = Path(directory)
    if not directory.is_dir():
        raise RejectedInput(f"not a directory: {directory}")
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            if p.stem in out:
                raise RejectedInput(f"two images share the id {p.stem!r} in {directory}")
            out[p.stem] = p
    return out


def parse_word_file(text: str, path: str | None = None) -> dict[str, str]:
    """Word-recognition GT/results: one ``name, "transcription"`` per line.

    Quotes around the transcription are optional; ``\\"`` and ``\\\\`` are
    unescaped inside quotes.
    """
    if text.startswith("﻿"):
        text = text[1:]
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "," not in line:
            raise ParseError("expected 'name, transcription'", lineno, path)
        name, word = line.split(",", 1)
        word = word.strip()
        if len(word) >= 2 and word[0] == word[-1] == '"':
            word = word[1:-1].replace('\\"', '"').replace("\\\\", "\\")
        out[name.strip()] = word
    return out


def format_word_file(words: dict[str, str]) -> str:
    lines = []
    for name in sorted(words):
        w = words[name].replace("\\", "\\\\").replace('"', '\\"')
        lines.append(f'{name}, "{w}"')
    return "".join(ln + "\n" for ln in lines)
