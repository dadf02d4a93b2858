"""Text detection as per-pixel segmentation.

A small fully convolutional encoder/decoder predicts a text probability for
every pixel; detections are the connected components of the thresholded map,
each turned into a quadrilateral.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import nn
from .errors import RejectedInput
from .geometry import QuadBox, axis_aligned_box, min_area_rect
from .seeding import substream

log = logging.getLogger(__name__)

BOX_MODES = ("axis_aligned", "min_area_rect")
INPUT_SHIFT = 0.5  # inputs are centred; uncentred inputs often trained into a constant map


@dataclass
class DetectorModel:
    """Encoder ``(conv3x3 + ReLU + maxpool2) x depth``, decoder
    ``(upsample2 + conv3x3 + ReLU) x depth``, then a 1x1 conv to one logit."""

    net: nn.Sequential
    channels: tuple[int, ...]
    history: list[float] = field(default_factory=list)

    @property
    def factor(self) -> int:
        return 2 ** len(self.channels)

    @classmethod
    def init(cls, channels=(8, 16, 16), seed: int = 0) -> "DetectorModel":
        rng = substream(seed, "detector-init")
        layers, names = [], []
        c_in = 1
        for i, c in enumerate(channels):
            layers += [nn.Conv2d(c_in, c, 3, rng=rng), nn.ReLU(), nn.MaxPool2d(2)]
            names += [f"enc{i}", f"enc{i}_relu", f"enc{i}_pool"]
            c_in = c
        for i, c in enumerate(reversed(channels)):
            layers += [nn.Upsample2d(2), nn.Conv2d(c_in, c, 3, rng=rng), nn.ReLU()]
            names += [f"dec{i}_up", f"dec{i}", f"dec{i}_relu"]
            c_in = c
        layers.append(nn.Conv2d(c_in, 1, 1, rng=rng))
        names.append("head")
        return cls(nn.Sequential(layers, names), tuple(channels))

    @classmethod
    def zeros(cls, channels=(8, 16, 16)) -> "DetectorModel":
        m = cls.init(channels)
        return m.with_params({k: np.zeros_like(v) for k, v in m.params.items()})

    @property
    def params(self) -> nn.Params:
        return self.net.params

    def with_params(self, params: nn.Params) -> "DetectorModel":
        return DetectorModel(self.net.with_params(params), self.channels, list(self.history))

    def logits(self, batch: np.ndarray, check_finite: bool = False):
        """``(N, 1, H, W)`` -> ``(N, 1, H, W)`` logits plus the backward cache.

        Inputs in [0, 1] are shifted to [-0.5, 0.5] first.
        """
        return self.net.forward(batch - INPUT_SHIFT, check_finite=check_finite)

    def save(self, path) -> None:
        nn.save_arrays(path, "detector", {"channels": list(self.channels), "history": self.history}, self.params)

    @classmethod
    def load(cls, path) -> "DetectorModel":
        kind, meta, arrays = nn.load_arrays(path)
        if kind != "detector":
            raise RejectedInput(f"{path} holds a {kind} model, not a detector")
        m = cls.init(tuple(meta["channels"])).with_params(arrays)
        m.history = list(meta.get("history", []))
        return m


def _as_image(image) -> np.ndarray:
    a = _unit(image)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2 or a.size == 0:
        raise RejectedInput(f"expected a single-channel image, got shape {np.shape(image)}")
    return a


def _pad_to(a: np.ndarray, factor: int) -> np.ndarray:
    h, w = a.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if not ph and not pw:
        return a
    pad = [(0, 0)] * (a.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(a, pad, mode="edge")


def fcn_forward(image, model: DetectorModel) -> np.ndarray:
    """Per-pixel text probability map with the input's spatial shape.

    Inputs whose sides are not multiples of the downsampling factor are
    edge-padded for the forward pass and the map is cropped back.
    """
    img = _as_image(image)
    h, w = img.shape
    x = _pad_to(img, model.factor)[None, None]
    z, _ = model.logits(x, check_finite=True)
    return nn.sigmoid(z[0, 0, :h, :w])


def binarize(prob_map, threshold: float = 0.5) -> np.ndarray:
    """``1`` where the probability is at least ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise RejectedInput("threshold must lie in [0, 1]")
    return (np.asarray(prob_map) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class Region:
    ys: np.ndarray
    xs: np.ndarray

    @property
    def area(self) -> int:
        return int(self.ys.size)

    @property
    def box(self) -> QuadBox:
        return QuadBox(axis_aligned_box(self.xs, self.ys))


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def partition(mask, min_area: int = 8, connectivity: int = 4) -> list[Region]:
    """Connected components of the 1-pixels, smallest ones dropped.

    Regions come back in raster order of their first (top-most, then
    left-most) pixel.
    """
    if min_area < 1:
        raise RejectedInput("min_area must be >= 1")
    if connectivity not in _STRUCTURES:
        raise RejectedInput("connectivity must be 4 or 8")
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=_STRUCTURES[connectivity])
    if n == 0:
        return []
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    order = np.argsort(lab, kind="stable")
    bounds = np.searchsorted(lab[order], np.arange(1, n + 2))
    regions = []
    for k in range(n):
        idx = order[bounds[k] : bounds[k + 1]]
        if idx.size >= min_area:
            regions.append(Region(ys[idx], xs[idx]))
    regions.sort(key=lambda r: (int(r.ys[0]), int(r.xs[0])))
    return regions


def regions_to_boxes(regions, mode: str = "axis_aligned") -> list[QuadBox]:
    """Quadrilaterals around pixel centres: tight axis-aligned box or min-area rectangle."""
    if mode not in BOX_MODES:
        raise RejectedInput(f"mode must be one of {BOX_MODES}")
    boxes = []
    for r in regions:
        if mode == "axis_aligned":
            boxes.append(QuadBox(axis_aligned_box(r.xs, r.ys)))
        else:
            boxes.append(QuadBox(min_area_rect(np.stack([r.xs, r.ys], axis=1))))
    return boxes


@dataclass(frozen=True)
class DetectConfig:
    threshold: float = 0.5
    min_area: int = 8
    mode: str = "axis_aligned"
    connectivity: int = 4

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0 or self.min_area < 1 or self.mode not in BOX_MODES:
            raise RejectedInput(f"invalid detection config {self}")


def detect(image, model: DetectorModel, config: DetectConfig = DetectConfig()) -> list[QuadBox]:
    prob = fcn_forward(image, model)
    mask = binarize(prob, config.threshold)
    return regions_to_boxes(partition(mask, config.min_area, config.connectivity), config.mode)


# --------------------------------------------------------------------------
# training


def bce_with_logits(z: np.ndarray, target: np.ndarray, weight: np.ndarray):
    """Weighted mean binary cross-entropy on logits and its gradient w.r.t. ``z``."""
    total = weight.sum()
    if total == 0:
        return 0.0, np.zeros_like(z)
    per = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    loss = float((per * weight).sum() / total)
    grad = (nn.sigmoid(z) - target) * weight / total
    return loss, grad


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 800
    optimizer: str = "adam"  # adam | sgd
    lr: float = 0.003
    momentum: float = 0.9
    batch_size: int = 0  # 0 means full batch
    channels: tuple[int, ...] = (8, 16, 16)
    seed: int = 0
    clip: float | None = 5.0


def _stack(dataset, factor: int):
    xs, ys, ws = [], [], []
    for item in dataset:
        image, mask = item[0], item[1]
        ignore = item[2] if len(item) > 2 else np.zeros_like(mask)
        img = _as_image(image)
        if np.asarray(mask).shape != img.shape:
            raise RejectedInput("mask shape must equal image shape")
        valid = np.ones(img.shape)
        xs.append(_pad_to(img, factor))
        ys.append(_pad_to(np.asarray(mask, dtype=np.float64), factor))
        ws.append(_pad_to(valid * (1 - np.asarray(ignore, dtype=np.float64)), factor))
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise RejectedInput("all training images must share one size")
    return np.stack(xs)[:, None], np.stack(ys)[:, None], np.stack(ws)[:, None]


def detector_loss(model: DetectorModel, x, y, wts):
    z, cache = model.logits(x)
    loss, gz = bce_with_logits(z, y, wts)
    return loss, gz, cache


def train_detector(dataset, config: DetectorTrainConfig = DetectorTrainConfig(),
                   model: DetectorModel | None = None) -> DetectorModel:
    """Fit the FCN to ``(image, mask[, ignore])`` triples by minimizing mean per-pixel BCE.

    Images are float in [0, 1] (or uint8) and must share one size. The
    returned model's ``history`` holds the loss before each epoch plus the
    final loss.
    """
    if not dataset:
        raise RejectedInput("empty training set")
    model = model if model is not None else DetectorModel.init(config.channels, config.seed)
    if config.epochs <= 0:
        return model
    x, y, wts = _stack(dataset, model.factor)
    if config.optimizer == "adam":
        opt = nn.Adam(config.lr, clip=config.clip)
    elif config.optimizer == "sgd":
        opt = nn.SGD(config.lr, config.momentum, config.clip)
    else:
        raise RejectedInput(f"unknown optimizer {config.optimizer!r}")
    rng = substream(config.seed, "detector-batches")
    params = model.params
    history = []
    n = len(x)
    bs = config.batch_size or n
    for epoch in range(config.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        epoch_loss = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            loss, gz, cache = detector_loss(model, x[idx], y[idx], wts[idx])
            _, grads = model.net.backward(cache, gz)
            params = opt.step(params, grads)
            model = model.with_params(params)
            epoch_loss += loss * len(idx)
        history.append(epoch_loss / n)
    final, _, _ = detector_loss(model, x, y, wts)
    history.append(final)
    model.history = history
    log.info("detector training: loss %.4f -> %.4f", history[0], final)
    return model


def _unit(image) -> np.ndarray:
    a = np.asarray(image)
    return a.astype(np.float64) / 255.0 if a.dtype == np.uint8 else a.astype(np.float64)


def pixel_accuracy(model: DetectorModel, image, mask, threshold: float = 0.5) -> float:
    pred = binarize(fcn_forward(image, model), threshold)
    return float((pred == (np.asarray(mask) > 0)).mean())
