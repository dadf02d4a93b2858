"""Quadrilateral boxes and the planar geometry used by detection and evaluation.

Coordinates are pixel indices: pixel ``(x, y)`` is centred on the integer
point ``(x, y)`` with ``y`` growing downwards. "Clockwise" is meant as seen on
screen, which is a positive shoelace sum in these coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Point = tuple[float, float]


@dataclass(frozen=True)
class QuadBox:
    points: tuple[Point, Point, Point, Point]
    transcription: str | None = None
    dont_care: bool = False

    @classmethod
    def from_coords(cls, coords: Sequence[float], transcription: str | None = None,
                    dont_care: bool | None = None) -> "QuadBox":
        if len(coords) != 8:
            raise ValueError("a quad needs exactly 8 coordinates")
        pts = tuple((float(coords[i]), float(coords[i + 1])) for i in range(0, 8, 2))
        if dont_care is None:
            dont_care = transcription == "###"
        return cls(pts, transcription, dont_care)

    @classmethod
    def from_rect(cls, x0, y0, x1, y1, transcription=None) -> "QuadBox":
        return cls.from_coords([x0, y0, x1, y0, x1, y1, x0, y1], transcription)

    def coords(self) -> list[float]:
        return [v for p in self.points for v in p]

    @property
    def area(self) -> float:
        return abs(signed_area(self.points))

    def envelope(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.points]
        ys = [p[1] for p in self.points]
        return min(xs), min(ys), max(xs), max(ys)

    def with_text(self, text: str | None) -> "QuadBox":
        return QuadBox(self.points, text, self.dont_care if text is None else text == "###")


def signed_area(poly) -> float:
    p = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly) -> float:
    return abs(signed_area(poly))


def convex_hull(points) -> list[Point]:
    """Andrew's monotone chain; returns hull vertices with positive orientation."""
    pts = sorted(set((float(x), float(y)) for x, y in points))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def is_convex(poly) -> bool:
    p = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    n = len(p)
    signs = set()
    for i in range(n):
        a, b, c = p[i], p[(i + 1) % n], p[(i + 2) % n]
        cr = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cr != 0:
            signs.add(cr > 0)
    return len(signs) <= 1


def clip_convex(subject: Sequence[Point], clipper: Sequence[Point]) -> list[Point]:
    """Sutherland-Hodgman: part of ``subject`` inside convex ``clipper``.

    Both polygons must have positive orientation.
    """
    out = list(subject)
    m = len(clipper)
    for i in range(m):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % m]

        def side(p):
            return (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax)

        inp, out = out, []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _convex_ccw(points) -> list[Point]:
    hull = convex_hull(points)
    if len(hull) >= 3 and signed_area(hull) < 0:
        hull.reverse()
    return hull


def intersection_area(a, b) -> float:
    """Area of overlap of two polygons after replacing each by its convex hull."""
    pa, pb = _convex_ccw(_pts(a)), _convex_ccw(_pts(b))
    if len(pa) < 3 or len(pb) < 3:
        return 0.0
    return polygon_area(clip_convex(pa, pb))


def _pts(q) -> list[Point]:
    if isinstance(q, QuadBox):
        return list(q.points)
    return [tuple(p) for p in np.asarray(q, dtype=np.float64).reshape(-1, 2)]


def hull_area(q) -> float:
    h = convex_hull(_pts(q))
    return polygon_area(h) if len(h) >= 3 else 0.0


def polygon_iou(a, b) -> float:
    """Intersection over union; non-convex inputs are replaced by their hulls."""
    inter = intersection_area(a, b)
    union = hull_area(a) + hull_area(b) - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def points_in_polygon(xs: np.ndarray, ys: np.ndarray, poly, eps: float = 1e-9) -> np.ndarray:
    """Vectorised point-in-polygon test; points on the boundary count as inside."""
    p = np.asarray(_pts(poly), dtype=np.float64)
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    on_edge = np.zeros_like(inside)
    n = len(p)
    for i in range(n):
        x1, y1 = p[i]
        x2, y2 = p[(i + 1) % n]
        crosses = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_at)
        cr = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
        within = (
            (xs >= min(x1, x2) - eps) & (xs <= max(x1, x2) + eps)
            & (ys >= min(y1, y2) - eps) & (ys <= max(y1, y2) + eps)
        )
        on_edge |= within & (np.abs(cr) <= eps * max(1.0, abs(x2 - x1) + abs(y2 - y1)))
    return inside | on_edge


def order_clockwise(points) -> tuple[Point, Point, Point, Point]:
    """Four vertices in on-screen clockwise order starting from the top-left one."""
    p = [tuple(map(float, v)) for v in points]
    if signed_area(p) < 0:
        p = p[::-1]
    start = min(range(4), key=lambda i: (p[i][0] + p[i][1], p[i][1], p[i][0]))
    return tuple(p[start:] + p[:start])  # type: ignore[return-value]


def axis_aligned_box(xs, ys) -> tuple[Point, Point, Point, Point]:
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = float(np.min(ys)), float(np.max(ys))
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


def min_area_rect(points) -> tuple[Point, Point, Point, Point]:
    """Minimum-area enclosing rectangle of a point set.

    Calipers are aligned with each edge of the convex hull in turn; the optimal
    rectangle always has one side collinear with a hull edge.
    """
    hull = np.asarray(convex_hull(points), dtype=np.float64)
    if len(hull) == 0:
        raise ValueError("no points")
    if len(hull) < 3:
        return axis_aligned_box(hull[:, 0], hull[:, 1]) if len(hull) == 1 else _segment_rect(hull)
    best = None
    n = len(hull)
    for i in range(n):
        e = hull[(i + 1) % n] - hull[i]
        norm = np.hypot(*e)
        if norm == 0:
            continue
        u = e / norm
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        area = (pu.max() - pu.min()) * (pv.max() - pv.min())
        if best is None or area < best[0] - 1e-12:
            best = (area, u, v, pu.min(), pu.max(), pv.min(), pv.max())
    _, u, v, u0, u1, v0, v1 = best
    corners = [u0 * u + v0 * v, u1 * u + v0 * v, u1 * u + v1 * v, u0 * u + v1 * v]
    return order_clockwise([(float(c[0]), float(c[1])) for c in corners])


def _segment_rect(seg: np.ndarray):
    a, b = (tuple(map(float, seg[0])), tuple(map(float, seg[1])))
    return (a, b, b, a)
