"""Word recognition: conv feature columns, a bidirectional LSTM and a CTC output layer.

Crops are normalized to a fixed height and fed through
``conv3x3(16)+pool2x2, conv3x3(16)+pool2x2, conv3x3(32)+pool2x1`` and a
full-height convolution, giving one feature frame per four input columns.

Batches of different widths are zero-padded on the right. After every
activation the padded columns are zeroed again, and the reverse LSTM starts
at each sample's own last frame, so a sample's outputs in a batch are
identical to its outputs when run alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ctc, nn
from .ctc import Alphabet
from .errors import RejectedInput
from .lexicon import CorrectionPolicy, Lexicon, correct
from .seeding import substream

log = logging.getLogger(__name__)

HEIGHT = 32
STRIDE = 4  # input columns per output frame


# --------------------------------------------------------------------------
# preprocessing


def _resize_bilinear(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment and edge clamping."""
    h, w = a.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def normalize_word_image(crop, height: int = HEIGHT) -> np.ndarray:
    """Grayscale ``(1, height, W')`` in [0, 1], aspect ratio preserved, ``W' >= 4``."""
    a = np.asarray(crop)
    if a.size == 0:
        raise RejectedInput("empty crop")
    if a.dtype == np.uint8:
        a = a.astype(np.float64) / 255.0
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3 and a.shape[-1] in (3, 4):
        a = a[..., 0] * 0.299 + a[..., 1] * 0.587 + a[..., 2] * 0.114
    elif a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2 or min(a.shape) == 0:
        raise RejectedInput(f"cannot use crop of shape {np.shape(crop)}")
    a = np.clip(a, 0.0, 1.0)
    h, w = a.shape
    new_w = max(1, int(round(w * height / h)))
    out = a if (h, w) == (height, new_w) else _resize_bilinear(a, height, new_w)
    if new_w < 4:
        out = np.pad(out, ((0, 0), (0, 4 - new_w)), mode="edge")
    return out[None]


def frame_count(width: int) -> int:
    return -(-int(width) // STRIDE)


# --------------------------------------------------------------------------
# model


@dataclass
class RecognizerModel:
    params: nn.Params
    conv: tuple[int, int, int] = (16, 16, 32)
    feat: int = 64
    hidden: int = 64
    height: int = HEIGHT
    alphabet: Alphabet = field(default_factory=Alphabet)
    history: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, conv=(16, 16, 32), feat: int = 64, hidden: int = 64, height: int = HEIGHT,
             alphabet: Alphabet | None = None, seed: int = 0) -> "RecognizerModel":
        alphabet = alphabet or Alphabet()
        if height % 8:
            raise RejectedInput("height must be a multiple of 8")
        rng = substream(seed, "recognizer-init")
        c1, c2, c3 = conv
        layers = cls._layers(conv, feat, hidden, height, alphabet.size, rng)
        params = {}
        for name, layer in layers.items():
            params.update({f"{name}.{k}": v for k, v in layer.params.items()})
        return cls(params, tuple(conv), feat, hidden, height, alphabet)

    @staticmethod
    def _layers(conv, feat, hidden, height, n_classes, rng=None) -> dict[str, nn.Layer]:
        c1, c2, c3 = conv
        return {
            "conv1": nn.Conv2d(1, c1, 3, rng=rng),
            "conv2": nn.Conv2d(c1, c2, 3, rng=rng),
            "conv3": nn.Conv2d(c2, c3, 3, rng=rng),
            "collapse": nn.Conv2d(c3, feat, (height // 8, 3), pad=(0, 1), rng=rng),
            "rnn": nn.BiLSTM(feat, hidden, rng=rng),
            "proj": nn.Linear(2 * hidden, n_classes, rng=rng),
        }

    def layers(self) -> dict[str, nn.Layer]:
        out = {}
        for name, layer in self._layers(self.conv, self.feat, self.hidden, self.height, self.alphabet.size).items():
            out[name] = layer.with_params({k: self.params[f"{name}.{k}"] for k in layer.params})
        return out

    def with_params(self, params: nn.Params) -> "RecognizerModel":
        return RecognizerModel(dict(params), self.conv, self.feat, self.hidden, self.height,
                               self.alphabet, list(self.history))

    def zeroed(self) -> "RecognizerModel":
        return self.with_params({k: np.zeros_like(v) for k, v in self.params.items()})

    def save(self, path) -> None:
        meta = {"conv": list(self.conv), "feat": self.feat, "hidden": self.hidden, "height": self.height,
                "alphabet": self.alphabet.chars, "history": self.history}
        nn.save_arrays(path, "recognizer", meta, self.params)

    @classmethod
    def load(cls, path) -> "RecognizerModel":
        kind, meta, arrays = nn.load_arrays(path)
        if kind != "recognizer":
            raise RejectedInput(f"{path} holds a {kind} model, not a recognizer")
        return cls(dict(arrays), tuple(meta["conv"]), meta["feat"], meta["hidden"], meta["height"],
                   Alphabet(meta["alphabet"]), list(meta.get("history", [])))


def _stack_images(images: Sequence[np.ndarray], height: int):
    widths = []
    for im in images:
        if im.ndim != 3 or im.shape[0] != 1 or im.shape[1] != height:
            raise RejectedInput(f"word images must be (1, {height}, W), got {im.shape}")
        if im.shape[2] < 4:
            raise RejectedInput("word image narrower than 4 columns")
        widths.append(im.shape[2])
    widths = np.array(widths)
    frames = -(-widths // STRIDE)
    batch = np.zeros((len(images), 1, height, STRIDE * int(frames.max())))
    for i, im in enumerate(images):
        batch[i, :, :, : im.shape[2]] = im
    return batch, widths


def _column_mask(lengths_cols: np.ndarray, width: int) -> np.ndarray:
    return (np.arange(width)[None, :] < lengths_cols[:, None]).astype(np.float64)[:, None, None, :]


def _features(layers, x, widths):
    """Masked conv stack: ``(N, 1, h, 4T)`` batch -> ``(T, N, D)`` frames.

    At each level only the columns derived from real image data survive
    (``W``, ``ceil(W/2)``, ``ceil(W/4)``); padding is zeroed, so padded
    columns never sit on a ReLU kink and never leak into a sample's frames.
    """
    caches, masks = {}, {}
    pools = {"conv1": (2, 2), "conv2": (2, 2), "conv3": (2, 1)}
    for level, name in enumerate(("conv1", "conv2", "conv3")):
        x, caches[name] = layers[name].forward(x)
        m = _column_mask(-(-widths // 2 ** level), x.shape[3])
        masks[name] = (x > 0) * m
        x = x * masks[name]
        x, caches[name + "_pool"] = nn.maxpool_forward(x, pools[name])
    x, caches["collapse"] = layers["collapse"].forward(x)
    masks["collapse"] = (x > 0) * _column_mask(-(-widths // STRIDE), x.shape[3])
    x = x * masks["collapse"]
    return x[:, :, 0, :].transpose(2, 0, 1), caches, masks


def forward(model: RecognizerModel, images: Sequence[np.ndarray]):
    """Logits ``(T, N, K)``, per-sample frame counts and the backward cache."""
    layers = model.layers()
    x, widths = _stack_images(images, model.height)
    frames = -(-widths // STRIDE)
    feats, caches, masks = _features(layers, x, widths)
    h, caches["rnn"] = layers["rnn"].forward(feats, frames)
    logits, caches["proj"] = layers["proj"].forward(h)
    return logits, frames, (layers, caches, masks)


def backward(cache, grad_logits):
    layers, caches, masks = cache
    grads = {}

    def collect(name, gs):
        grads.update({f"{name}.{k}": v for k, v in gs.items()})

    g, gs = layers["proj"].backward(caches["proj"], grad_logits)
    collect("proj", gs)
    g, gs = layers["rnn"].backward(caches["rnn"], g)
    collect("rnn", gs)
    g = g.transpose(1, 2, 0)[:, :, None, :] * masks["collapse"]
    g, gs = layers["collapse"].backward(caches["collapse"], g)
    collect("collapse", gs)
    for name in ("conv3", "conv2", "conv1"):
        g, _ = nn.maxpool_backward(caches[name + "_pool"], g)
        g = g * masks[name]
        g, gs = layers[name].backward(caches[name], g)
        collect(name, gs)
    return grads


def extract_frames(image, model: RecognizerModel) -> np.ndarray:
    """Conv feature columns ``(T, D)`` for one normalized word image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    x, widths = _stack_images([image], model.height)
    feats, _, _ = _features(model.layers(), x, widths)
    return feats[:, 0, :]


def frame_probs(model: RecognizerModel, image) -> np.ndarray:
    """Per-frame class distributions ``(T, K)`` for one normalized word image."""
    logits, _, _ = forward(model, [np.asarray(image, dtype=np.float64)])
    return nn.softmax(logits[:, 0, :])


# --------------------------------------------------------------------------
# recognition


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"  # greedy | beam | lexicon
    beam_width: int = 16
    lexicon: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("greedy", "beam", "lexicon"):
            raise RejectedInput(f"unknown decode mode {self.mode!r}")
        if (self.mode == "lexicon") != (self.lexicon is not None):
            raise RejectedInput("a lexicon is required exactly when mode is 'lexicon'")
        if self.beam_width < 1:
            raise RejectedInput("beam width must be >= 1")


@dataclass(frozen=True)
class CorrectionConfig:
    lexicon: Lexicon
    policy: CorrectionPolicy = CorrectionPolicy()


@dataclass(frozen=True)
class Recognition:
    raw_text: str
    corrected_text: str
    log_score: float


def decode(probs: np.ndarray, cfg: DecodeConfig, alphabet: Alphabet) -> tuple[str, float]:
    if cfg.mode == "greedy":
        r = ctc.greedy_decode(probs)
    elif cfg.mode == "beam":
        r = ctc.beam_decode(probs, cfg.beam_width)[0]
    else:
        r = ctc.lexicon_decode(probs, list(cfg.lexicon), alphabet)
        return r.text, min(0.0, r.score)
    return alphabet.decode(r.labels), min(0.0, r.score)


def recognize_word(crop, model: RecognizerModel, decode_cfg: DecodeConfig = DecodeConfig(),
                   correction: CorrectionConfig | None = None, normalized: bool = False) -> Recognition:
    """Read one word crop. Pass ``normalized=True`` if ``crop`` is already a WordImage."""
    image = np.asarray(crop, dtype=np.float64) if normalized else normalize_word_image(crop, model.height)
    probs = frame_probs(model, image)
    raw, score = decode(probs, decode_cfg, model.alphabet)
    fixed = correct(raw, correction.lexicon, correction.policy) if correction is not None else raw
    return Recognition(raw, fixed, score)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class RecognizerTrainConfig:
    epochs: int = 2000
    optimizer: str = "adam"  # adam | sgd
    lr: float = 0.003
    momentum: float = 0.9
    clip: float | None = 5.0
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    conv: tuple[int, int, int] = (16, 16, 32)
    feat: int = 64
    hidden: int = 64
    check_every: int = 10  # stop early once every training word is read correctly
    stop_on_perfect: bool = True


def encode_target(text: str, alphabet: Alphabet) -> list[int]:
    return alphabet.encode(text.lower())


def batch_loss(model: RecognizerModel, images, targets):
    """Mean CTC loss over a batch and its gradient w.r.t. all parameters."""
    logits, frames, cache = forward(model, images)
    g = np.zeros_like(logits)
    total = 0.0
    n = len(images)
    for i, (t_n, target) in enumerate(zip(frames, targets)):
        loss, gl = ctc.ctc_logit_loss_grad(logits[:t_n, i, :], target)
        total += loss
        g[:t_n, i, :] = gl / n
    return total / n, backward(cache, g)


def mean_loss(model: RecognizerModel, images, targets) -> float:
    logits, frames, _ = forward(model, images)
    lp = nn.log_softmax(logits)
    return float(np.mean([ctc.ctc_loss_log(lp[:t, i], tg) for i, (t, tg) in enumerate(zip(frames, targets))]))


def greedy_texts(model: RecognizerModel, images) -> list[str]:
    logits, frames, _ = forward(model, images)
    out = []
    for i, t in enumerate(frames):
        path = logits[:t, i, :].argmax(axis=1)
        out.append(model.alphabet.decode(ctc.collapse(path)))
    return out


def make_optimizer(config):
    if config.optimizer == "adam":
        return nn.Adam(config.lr, clip=config.clip)
    if config.optimizer == "sgd":
        return nn.SGD(config.lr, config.momentum, config.clip)
    raise RejectedInput(f"unknown optimizer {config.optimizer!r}")


def train_recognizer(dataset, config: RecognizerTrainConfig = RecognizerTrainConfig(),
                     model: RecognizerModel | None = None) -> RecognizerModel:
    """Fit the recognizer to ``(word image or crop, text)`` pairs by minimizing mean CTC loss.

    Texts are lowercased. Raw crops are normalized first. Training stops
    early when ``stop_on_perfect`` is set and greedy decoding reads every
    training sample correctly.
    """
    model = model if model is not None else RecognizerModel.init(config.conv, config.feat, config.hidden,
                                                                 seed=config.seed)
    if config.epochs <= 0:
        return model
    if not dataset:
        raise RejectedInput("empty training set")
    images, targets, texts = [], [], []
    for i, (img, text) in enumerate(dataset):
        img = np.asarray(img)
        if not (img.ndim == 3 and img.shape[0] == 1 and img.shape[1] == model.height and img.dtype != np.uint8):
            img = normalize_word_image(img, model.height)
        target = encode_target(text, model.alphabet)
        if not ctc.is_feasible(target, frame_count(img.shape[2])):
            raise RejectedInput(f"sample {i} ({text!r}) needs {ctc.min_frames(target)} frames, "
                                f"image gives {frame_count(img.shape[2])}")
        images.append(img)
        targets.append(target)
        texts.append(text.lower())
    opt = make_optimizer(config)
    rng = substream(config.seed, "recognizer-batches")
    params = model.params
    n = len(images)
    bs = config.batch_size or n
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        epoch_loss = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            loss, grads = batch_loss(model, [images[i] for i in idx], [targets[i] for i in idx])
            params = opt.step(params, grads)
            model = model.with_params(params)
            epoch_loss += loss * len(idx)
        history.append(epoch_loss / n)
        if config.stop_on_perfect and (epoch + 1) % config.check_every == 0:
            if greedy_texts(model, images) == texts:
                log.info("recognizer: all %d samples read correctly after %d epochs", n, epoch + 1)
                break
    history.append(mean_loss(model, images, targets))
    model.history = history
    return model


def word_accuracy(model: RecognizerModel, dataset) -> float:
    """Fraction of ``(image, text)`` pairs read exactly by greedy decoding."""
    images = [normalize_word_image(img, model.height) if np.asarray(img).ndim == 2 else np.asarray(img)
              for img, _ in dataset]
    preds = greedy_texts(model, images)
    return float(np.mean([p == t.lower() for p, (_, t) in zip(preds, dataset)]))
