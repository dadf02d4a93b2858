"""ICDAR Challenge-4 style scoring for localization, word recognition and end-to-end."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .errors import RejectedInput
from .geometry import QuadBox, hull_area, intersection_area, polygon_iou
from .lexicon import edit_distance

SETTINGS = ("strong", "weak", "generic")


@dataclass(frozen=True)
class Matching:
    pairs: list[tuple[int, int]]
    ignored_gt: frozenset[int] = frozenset()
    ignored_det: frozenset[int] = frozenset()
    n_gt: int = 0
    n_det: int = 0

    @property
    def matched(self) -> int:
        return len(self.pairs)

    @property
    def counted_gt(self) -> int:
        return self.n_gt - len(self.ignored_gt)

    @property
    def counted_det(self) -> int:
        return self.n_det - len(self.ignored_det)


@dataclass(frozen=True)
class LocalizationReport:
    precision: float
    recall: float
    f_measure: float
    matched: int
    counted_gt: int
    counted_det: int

    def as_dict(self, prefix: str = "") -> dict[str, float]:
        return {
            f"{prefix}precision": self.precision,
            f"{prefix}recall": self.recall,
            f"{prefix}hmean": self.f_measure,
            f"{prefix}matched": self.matched,
            f"{prefix}counted_gt": self.counted_gt,
            f"{prefix}counted_det": self.counted_det,
        }


@dataclass(frozen=True)
class WordRecognitionReport:
    ted: float
    crw: float
    ted_upper: float
    crw_upper: float
    n_words: int

    def as_dict(self) -> dict[str, float]:
        return {"ted": self.ted, "crw": self.crw, "ted_upper": self.ted_upper,
                "crw_upper": self.crw_upper, "words": self.n_words}


@dataclass
class EndToEndReport:
    rows: dict[str, LocalizationReport] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        out = {}
        for setting, row in self.rows.items():
            out.update(row.as_dict(prefix=f"{setting}."))
        return out


def f_measure(p: float, r: float) -> float:
    """Harmonic mean of precision and recall (0 when both are 0)."""
    if not (0.0 <= p <= 1.0 and 0.0 <= r <= 1.0):
        raise RejectedInput("precision and recall must lie in [0, 1]")
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def det_overlap_ratio(det: QuadBox, region: QuadBox) -> float:
    """Intersection area divided by the detection's own area (0 for empty detections)."""
    area = hull_area(det)
    return 0.0 if area <= 0 else intersection_area(det, region) / area


def match_detections(
    gts: Sequence[QuadBox],
    dets: Sequence[QuadBox],
    iou_thresh: float = 0.5,
    dont_care_overlap: float = 0.5,
    accept: Callable[[QuadBox, QuadBox], bool] | None = None,
) -> Matching:
    """One-to-one greedy matching by descending IoU.

    Don't-care GT are never counted; a detection covering more than
    ``dont_care_overlap`` of its own area with a don't-care GT is ignored.
    ``accept(gt, det)`` can veto pairs (used for transcription checks).
    Ties in IoU go to the lower (gt_index, det_index).
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise RejectedInput("iou threshold must lie in (0, 1]")
    ignored_gt = frozenset(i for i, g in enumerate(gts) if g.dont_care)
    for i, g in enumerate(gts):
        if i not in ignored_gt and g.area <= 0:
            raise RejectedInput(f"ground-truth box {i} has zero area")
    ignored_det = frozenset(
        j for j, d in enumerate(dets)
        if any(det_overlap_ratio(d, gts[i]) > dont_care_overlap for i in ignored_gt)
    )
    cands = []
    for i, g in enumerate(gts):
        if i in ignored_gt:
            continue
        for j, d in enumerate(dets):
            if j in ignored_det:
                continue
            iou = polygon_iou(g, d)
            if iou >= iou_thresh and (accept is None or accept(g, d)):
                cands.append((-iou, i, j))
    cands.sort()
    used_g, used_d, pairs = set(), set(), []
    for _, i, j in cands:
        if i in used_g or j in used_d:
            continue
        used_g.add(i)
        used_d.add(j)
        pairs.append((i, j))
    return Matching(pairs, ignored_gt, ignored_det, len(gts), len(dets))


def localization_metrics(matchings: Iterable[Matching]) -> LocalizationReport:
    """Micro-averaged P/R/F; no counted detections gives P=1, no counted GT gives R=1."""
    matched = counted_gt = counted_det = 0
    for m in matchings:
        matched += m.matched
        counted_gt += m.counted_gt
        counted_det += m.counted_det
    p = 1.0 if counted_det == 0 else matched / counted_det
    r = 1.0 if counted_gt == 0 else matched / counted_gt
    return LocalizationReport(p, r, f_measure(p, r), matched, counted_gt, counted_det)


def word_metrics(pairs: Sequence[tuple[str, str]], normalized: bool = False) -> WordRecognitionReport:
    """Total edit distance and fraction of exactly recognized words.

    ``normalized`` divides each distance by the longer string's length before summing.
    """
    if not pairs:
        raise RejectedInput("no word pairs to score")

    def dist(a, b):
        d = edit_distance(a, b)
        if normalized:
            n = max(len(a), len(b))
            return d / n if n else 0.0
        return d

    ted = ted_up = 0
    exact = exact_up = 0
    for gt, pred in pairs:
        d = dist(gt, pred)
        du = dist(gt.upper(), pred.upper())
        ted += d
        ted_up += du
        exact += d == 0
        exact_up += du == 0
    n = len(pairs)
    return WordRecognitionReport(ted, exact / n, ted_up, exact_up / n, n)


def _norm_text(s: str) -> str:
    return s.strip().upper()


def transcriptions_match(gt: QuadBox, det: QuadBox) -> bool:
    return _norm_text(gt.transcription or "") == _norm_text(det.transcription or "")


def e2e_matching(gts: Sequence[QuadBox], dets: Sequence[QuadBox], iou_thresh: float = 0.5) -> Matching:
    for j, d in enumerate(dets):
        if d.transcription is None:
            raise RejectedInput(f"detection {j} has no transcription")
    return match_detections(gts, dets, iou_thresh, accept=transcriptions_match)


def e2e_metrics(
    gts_per_image: Mapping[str, Sequence[QuadBox]],
    dets_per_image: Mapping[str, Sequence[QuadBox]],
    setting: str = "strong",
    iou_thresh: float = 0.5,
) -> LocalizationReport:
    """End-to-end P/R/F: a hit needs IoU >= threshold and a case-insensitive text match.

    The setting only labels the row; the lexicon regime affects the
    recognizer, not the scoring.
    """
    if setting not in SETTINGS:
        raise RejectedInput(f"unknown setting {setting!r}")
    matchings = [
        e2e_matching(gts_per_image.get(image_id, []), dets_per_image.get(image_id, []), iou_thresh)
        for image_id in _image_ids(gts_per_image, dets_per_image)
    ]
    return localization_metrics(matchings)


def localization_eval(gts_per_image: Mapping[str, Sequence[QuadBox]],
                      dets_per_image: Mapping[str, Sequence[QuadBox]],
                      iou_thresh: float = 0.5) -> LocalizationReport:
    matchings = [
        match_detections(gts_per_image.get(image_id, []), dets_per_image.get(image_id, []), iou_thresh)
        for image_id in _image_ids(gts_per_image, dets_per_image)
    ]
    return localization_metrics(matchings)


def _image_ids(gts_per_image, dets_per_image) -> list[str]:
    """Images with ground truth or detections; detections on an image without
    ground truth are all false positives."""
    return sorted(set(gts_per_image) | set(dets_per_image))


def format_key_values(values: Mapping[str, float]) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, float):
            lines.append(f"{k}={v:.6f}")
        else:
            lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def format_table(rows: Mapping[str, Mapping[str, float]], columns: Sequence[str]) -> str:
    """Plain-text table; ``rows`` maps a label to its column values."""
    header = ["" ] + list(columns)
    body = [[label] + [_cell(vals.get(c)) for c in columns] for label, vals in rows.items()]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    return "\n".join(fmt.format(*r) for r in [header] + body) + "\n"


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
