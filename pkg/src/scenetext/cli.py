"""Command-line front end: training, detection, recognition, end-to-end runs and evaluation.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines whose keys
mirror the long flag names) and ``--seed``. Flags override config values,
which override built-in defaults. Exit codes: 0 success, 1 runtime failure,
2 usage error. Set ``SCENETEXT_LOG`` (e.g. ``INFO``) for progress output.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ctc, dataset, evaluation
from .detector import DetectConfig, DetectorModel, DetectorTrainConfig, detect, train_detector
from .errors import RejectedInput
from .lexicon import CorrectionPolicy, Lexicon, read_word_list
from .recognizer import (
    CorrectionConfig,
    DecodeConfig,
    RecognizerModel,
    RecognizerTrainConfig,
    recognize_word,
    train_recognizer,
    word_accuracy,
)

log = logging.getLogger("scenetext")

TASKS = ("4.1", "4.3", "4.4")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value file; keys mirror the long flag names")
    p.add_argument("--seed", type=int, default=0)


def _detect_opts(p):
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-area", type=int, default=8)
    p.add_argument("--box-mode", choices=("axis_aligned", "min_area_rect"), default="axis_aligned")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=4)


def _decode_opts(p):
    p.add_argument("--mode", choices=("greedy", "beam", "lexicon"), default="greedy")
    p.add_argument("--beam-width", type=int, default=16)
    p.add_argument("--max-norm-dist", type=float, default=0.4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenetext", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset (images, gt, vocab)")
    _common(p)
    p.add_argument("--output", help="dataset root to create")
    p.add_argument("--n-images", type=int, default=10)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.1)

    p = sub.add_parser("train-detector", help="fit the segmentation network")
    _common(p)
    p.add_argument("--data", help="dataset root with images/ and gt/")
    p.add_argument("--model", help="output model file (.npz)")
    p.add_argument("--epochs", type=int, default=800)
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")

    p = sub.add_parser("train-recognizer", help="fit the word recognizer on GT word crops")
    _common(p)
    p.add_argument("--data", help="dataset root with images/ and gt/")
    p.add_argument("--model", help="output model file (.npz)")
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--jitter", type=int, default=1, help="crop edge jitter in pixels (augmentation copies)")
    p.add_argument("--copies", type=int, default=1, help="jittered crops per GT word")

    p = sub.add_parser("detect", help="write Task 4.1 result files")
    _common(p)
    p.add_argument("--data", help="image directory or dataset root")
    p.add_argument("--model", help="detector model file")
    p.add_argument("--output", help="result directory")
    _detect_opts(p)

    p = sub.add_parser("recognize", help="read word crops")
    _common(p)
    p.add_argument("--data", help="crop image file or directory")
    p.add_argument("--model", help="recognizer model file")
    p.add_argument("--lexicon", help="word list for lexicon decoding and correction")
    p.add_argument("--output", help="also write results to this file")
    _decode_opts(p)

    p = sub.add_parser("e2e", help="detect, crop, recognize, correct; write Task 4.4 result files")
    _common(p)
    p.add_argument("--data", help="image directory or dataset root")
    p.add_argument("--det-model", help="detector model file")
    p.add_argument("--rec-model", help="recognizer model file")
    p.add_argument("--output", help="result directory")
    p.add_argument("--setting", choices=evaluation.SETTINGS, default="strong")
    p.add_argument("--vocab", help="vocabulary root (default: <data>/vocab)")
    p.add_argument("--no-correction", action="store_true", default=False)
    _detect_opts(p)
    _decode_opts(p)

    p = sub.add_parser("evaluate", help="score results against ground truth")
    _common(p)
    p.add_argument("--task", choices=TASKS, default="4.1")
    p.add_argument("--gt", help="GT directory (4.1/4.4) or word file (4.3)")
    p.add_argument("--res", help="result directory (4.1/4.4) or word file (4.3)")
    p.add_argument("--setting", choices=evaluation.SETTINGS, default="strong")
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--normalized-ted", action="store_true", default=False)
    p.add_argument("--output", help="key=value report file (default: <res>/report.txt or <res>.report.txt)")

    p = sub.add_parser("decode", help="decode a frame-probability text matrix")
    _common(p)
    p.add_argument("--input", help="file with 'T K' header then T rows")
    p.add_argument("--mode", choices=("greedy", "beam"), default="beam")
    p.add_argument("--beam-width", type=int, default=16)
    p.add_argument("--alphabet", default=ctc.DEFAULT_CHARS)
    p.add_argument("--top", type=int, default=1)
    return parser


REQUIRED = {
    "synth": ("output",),
    "train-detector": ("data", "model"),
    "train-recognizer": ("data", "model"),
    "detect": ("data", "model", "output"),
    "recognize": ("data", "model"),
    "e2e": ("data", "det_model", "rec_model", "output"),
    "evaluate": ("gt", "res"),
    "decode": ("input",),
}


def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` file; ``#`` starts a comment line; keys use - or _."""
    try:
        text = Path(path).read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _subparser(parser, command) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # noqa: SLF001
        if command in action.choices:
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv=None) -> argparse.Namespace:
    """Parse ``argv``; flags beat config-file values, which beat defaults."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    sub = _subparser(parser, ns.command)
    if ns.config:
        try:
            values = read_config(ns.config)
        except UsageError as exc:
            sub.error(str(exc))
        actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
        defaults = {}
        for k, v in values.items():
            action = actions.get(k)
            if action is None or k in ("help", "config"):
                sub.error(f"unknown config key {k!r} in {ns.config}")
            if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
                defaults[k] = v.lower() in ("1", "true", "yes", "on")
                continue
            conv = action.type or str
            try:
                val = conv(v)
            except (TypeError, ValueError):
                sub.error(f"config key {k!r}: invalid value {v!r}")
            if action.choices is not None and val not in action.choices:
                sub.error(f"config key {k!r}: {val!r} not one of {list(action.choices)}")
            defaults[k] = val
        sub.set_defaults(**defaults)
        ns = parser.parse_args(argv)
    for dest in REQUIRED[ns.command]:
        if getattr(ns, dest) in (None, ""):
            sub.error(f"the following argument is required: --{dest.replace('_', '-')}")
    return ns


# --------------------------------------------------------------------------
# helpers


def _image_dir(data) -> Path:
    root = Path(data)
    return root / "images" if (root / "images").is_dir() else root


def _load_dataset(root):
    root = Path(root)
    images = dataset.list_images(_image_dir(root))
    gts = dataset.read_annotation_dir(root / "gt") if (root / "gt").is_dir() else {}
    missing = sorted(set(images) - set(gts))
    if missing:
        raise RejectedInput(f"no ground truth for image(s): {', '.join(missing)}")
    return [(image_id, dataset.read_image(path), gts[image_id]) for image_id, path in images.items()]


def _detect_config(ns) -> DetectConfig:
    return DetectConfig(ns.threshold, ns.min_area, ns.box_mode, ns.connectivity)


@dataclass
class RunReport:
    annotations: list
    failures: dict


def run_detect(images: dict, model: DetectorModel, cfg: DetectConfig) -> RunReport:
    anns, failures = [], {}
    for image_id, path in sorted(images.items()):
        try:
            img = dataset.read_image(path)
        except (OSError, ValueError) as exc:
            failures[image_id] = str(exc)
            continue
        anns.append(dataset.ImageAnnotation(image_id, detect(img, model, cfg)))
    return RunReport(anns, failures)


def lexicon_for(setting: str, vocab, image_id: str) -> Lexicon:
    if isinstance(vocab, dict):
        if image_id not in vocab:
            raise RejectedInput(f"no {setting} vocabulary for image {image_id}")
        return vocab[image_id]
    return vocab


def recognize_boxes(img, boxes, model: RecognizerModel, decode_cfg: DecodeConfig, lexicon: Lexicon | None,
                    policy: CorrectionPolicy) -> list:
    """Read every detected box: envelope crop, normalize, decode, correct."""
    out = []
    for box in boxes:
        crop = dataset.crop_envelope(img, box)
        cfg = decode_cfg
        if cfg.mode == "lexicon":
            if lexicon is None or len(lexicon) == 0:
                raise RejectedInput("lexicon decoding needs a non-empty lexicon")
            cfg = DecodeConfig("lexicon", cfg.beam_width, tuple(lexicon.words))
        correction = CorrectionConfig(lexicon, policy) if lexicon is not None else None
        rec = recognize_word(crop, model, cfg, correction)
        out.append(box.with_text(rec.corrected_text))
    return out


def run_e2e(images: dict, det_model: DetectorModel, rec_model: RecognizerModel, det_cfg: DetectConfig,
            decode_cfg: DecodeConfig, setting: str, vocab, policy: CorrectionPolicy) -> RunReport:
    """Detect, crop the axis-aligned envelope of each box, recognize and correct.

    ``vocab`` is a lexicon, a dict of per-image lexicons, or ``None`` for no
    correction. Per-image failures are collected, not raised.
    """
    anns, failures = [], {}
    for image_id, path in sorted(images.items()):
        try:
            img = dataset.read_image(path)
            lex = lexicon_for(setting, vocab, image_id) if vocab is not None else None
            boxes = detect(img, det_model, det_cfg)
            anns.append(dataset.ImageAnnotation(image_id, recognize_boxes(img, boxes, rec_model, decode_cfg,
                                                                          lex, policy)))
        except (OSError, ValueError, LookupError) as exc:
            failures[image_id] = str(exc)
    return RunReport(anns, failures)


def _report_failures(failures: dict) -> int:
    for image_id, msg in sorted(failures.items()):
        print(f"error: {image_id}: {msg}", file=sys.stderr)
    return 1 if failures else 0


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(ns) -> int:
    cfg = dataset.SynthConfig(n_images=ns.n_images, image_size=(ns.height, ns.width), noise=ns.noise, seed=ns.seed)
    data = dataset.synth_generate(cfg)
    root = Path(ns.output)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for img, ann in data:
        dataset.write_image(root / "images" / f"{ann.image_id}.pgm", img)
    dataset.write_gt([ann for _, ann in data], root / "gt")
    strong = root / "vocab" / "strong"
    strong.mkdir(parents=True, exist_ok=True)
    used = sorted({b.transcription for _, ann in data for b in ann.boxes})
    for _, ann in data:
        words = [b.transcription for b in ann.boxes]
        (strong / f"{ann.image_id}.txt").write_text("".join(w + "\n" for w in words), encoding="utf-8")
    (root / "vocab" / "weak.txt").write_text("".join(w + "\n" for w in used), encoding="utf-8")
    generic = sorted(set(dataset.WORDS) | set(used))
    (root / "vocab" / "generic.txt").write_text("".join(w + "\n" for w in generic), encoding="utf-8")
    print(f"wrote {len(data)} images to {root}")
    return 0


def cmd_train_detector(ns) -> int:
    items = _load_dataset(ns.data)
    train = []
    for _, img, ann in items:
        mask, ignore = dataset.rasterize_mask(ann, *img.shape)
        train.append((img, mask, ignore))
    model = train_detector(train, DetectorTrainConfig(epochs=ns.epochs, optimizer=ns.optimizer, lr=ns.lr, seed=ns.seed))
    model.save(ns.model)
    if model.history:
        print(f"loss {model.history[0]:.4f} -> {model.history[-1]:.4f}")
    return 0


def word_crops(items, alphabet: ctc.Alphabet, copies: int = 1, jitter: int = 0, seed: int = 0):
    """GT word crops usable for training (readable, encodable transcriptions)."""
    from .seeding import substream

    rng = substream(seed, "crop-jitter")
    out = []
    for _, img, ann in items:
        for box in ann.boxes:
            text = (box.transcription or "").lower()
            if box.dont_care or not text or not alphabet.can_encode(text):
                continue
            for c in range(copies):
                jit = (0, 0, 0, 0) if c == 0 or not jitter else tuple(int(v) for v in rng.integers(-jitter, jitter + 1, 4))
                out.append((dataset.crop_envelope(img, box, jit), text))
    return out


def cmd_train_recognizer(ns) -> int:
    items = _load_dataset(ns.data)
    crops = word_crops(items, ctc.Alphabet(), ns.copies, ns.jitter, ns.seed)
    if not crops:
        raise RejectedInput("no usable word crops in the ground truth")
    model = train_recognizer(crops, RecognizerTrainConfig(epochs=ns.epochs, lr=ns.lr, seed=ns.seed))
    model.save(ns.model)
    print(f"{len(crops)} crops, training word accuracy {word_accuracy(model, crops):.4f}")
    return 0


def cmd_detect(ns) -> int:
    model = DetectorModel.load(ns.model)
    report = run_detect(dataset.list_images(_image_dir(ns.data)), model, _detect_config(ns))
    dataset.write_results(report.annotations, ns.output, with_text=False)
    return _report_failures(report.failures)


def cmd_recognize(ns) -> int:
    model = RecognizerModel.load(ns.model)
    lex = Lexicon(read_word_list(ns.lexicon)) if ns.lexicon else None
    if ns.mode == "lexicon" and lex is None:
        raise UsageError("--mode lexicon needs --lexicon")
    decode_cfg = DecodeConfig("greedy" if ns.mode == "lexicon" else ns.mode, ns.beam_width)
    if ns.mode == "lexicon":
        decode_cfg = DecodeConfig("lexicon", ns.beam_width, tuple(lex.words))
    correction = CorrectionConfig(lex, CorrectionPolicy(ns.max_norm_dist)) if lex is not None else None
    path = Path(ns.data)
    files = dataset.list_images(path) if path.is_dir() else {path.stem: path}
    lines, failures = [], {}
    for name, f in sorted(files.items()):
        try:
            rec = recognize_word(dataset.read_image(f), model, decode_cfg, correction)
        except (OSError, ValueError, LookupError) as exc:
            failures[name] = str(exc)
            continue
        line = f"{rec.corrected_text}, {rec.log_score:.6f}"
        lines.append(f"{name}\t{line}" if path.is_dir() else line)
    text = "".join(ln + "\n" for ln in lines)
    sys.stdout.write(text)
    if ns.output:
        Path(ns.output).write_text(text, encoding="utf-8")
    return _report_failures(failures)


def cmd_e2e(ns) -> int:
    det = DetectorModel.load(ns.det_model)
    rec = RecognizerModel.load(ns.rec_model)
    vocab = None
    if not ns.no_correction or ns.mode == "lexicon":
        root = Path(ns.vocab) if ns.vocab else Path(ns.data) / "vocab"
        vocab = dataset.load_vocab(ns.setting, root)
    decode_cfg = DecodeConfig("lexicon", ns.beam_width, ()) if ns.mode == "lexicon" else DecodeConfig(ns.mode, ns.beam_width)
    report = run_e2e(dataset.list_images(_image_dir(ns.data)), det, rec, _detect_config(ns), decode_cfg,
                     ns.setting, vocab, CorrectionPolicy(ns.max_norm_dist))
    if ns.no_correction and vocab is not None:
        log.info("--no-correction ignored for lexicon decoding")
    dataset.write_results(report.annotations, ns.output, with_text=True)
    return _report_failures(report.failures)


def evaluate_dirs(task: str, gt_dir, res_dir, setting: str = "strong", iou_thresh: float = 0.5) -> tuple[dict, list]:
    """Score a result directory; images without a result file count as having no detections."""
    with_text = task == "4.4"
    gts = dataset.read_annotation_dir(gt_dir, with_text=True)
    res = dataset.read_annotation_dir(res_dir, with_text=with_text)
    missing = sorted(set(gts) - set(res))
    gt_boxes = {k: v.boxes for k, v in gts.items()}
    res_boxes = {k: v.boxes for k, v in res.items()}
    if task == "4.1":
        values = evaluation.localization_eval(gt_boxes, res_boxes, iou_thresh).as_dict()
    else:
        values = evaluation.e2e_metrics(gt_boxes, res_boxes, setting, iou_thresh).as_dict(prefix=f"{setting}.")
    return values, missing


def evaluate_words(gt_file, res_file, normalized: bool = False) -> tuple[dict, list]:
    gt = dataset.parse_word_file(Path(gt_file).read_text(encoding="utf-8-sig"), str(gt_file))
    res = dataset.parse_word_file(Path(res_file).read_text(encoding="utf-8-sig"), str(res_file))
    missing = sorted(set(gt) - set(res))
    pairs = [(gt[k], res.get(k, "")) for k in sorted(gt)]
    return evaluation.word_metrics(pairs, normalized).as_dict(), missing


def cmd_evaluate(ns) -> int:
    if ns.task == "4.3":
        values, missing = evaluate_words(ns.gt, ns.res, ns.normalized_ted)
        columns = ["ted", "crw", "ted_upper", "crw_upper", "words"]
        rows = {"words": values}
        default_out = Path(str(ns.res) + ".report.txt")
    else:
        if not 0.0 < ns.iou_thresh <= 1.0:
            raise UsageError("--iou-thresh must lie in (0, 1]")
        values, missing = evaluate_dirs(ns.task, ns.gt, ns.res, ns.setting, ns.iou_thresh)
        columns = ["precision", "recall", "hmean"]
        if ns.task == "4.1":
            rows = {"localization": values}
        else:
            rows = {ns.setting: {c: values[f"{ns.setting}.{c}"] for c in columns}}
        default_out = Path(ns.res) / "report.txt"
    for image_id in missing:
        print(f"warning: no result for {image_id}; scored as no detections", file=sys.stderr)
    out = Path(ns.output) if ns.output else default_out
    out.write_text(evaluation.format_key_values(values), encoding="utf-8")
    sys.stdout.write(evaluation.format_table(rows, columns))
    return 0


def cmd_decode(ns) -> int:
    try:
        text = Path(ns.input).read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise RejectedInput(f"cannot read {ns.input}: {exc.strerror}") from None
    probs = ctc.check_frame_probs(ctc.load_frame_probs(text))
    alphabet = ctc.Alphabet(ns.alphabet)
    if probs.shape[1] != alphabet.size:
        raise RejectedInput(f"matrix has {probs.shape[1]} classes, alphabet needs {alphabet.size}")
    if ns.mode == "greedy":
        results = [ctc.greedy_decode(probs)]
    else:
        results = ctc.beam_decode(probs, ns.beam_width)[: max(1, ns.top)]
    for r in results:
        print(f"{alphabet.decode(r.labels)}, {r.score:.6f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train-detector": cmd_train_detector,
    "train-recognizer": cmd_train_recognizer,
    "detect": cmd_detect,
    "recognize": cmd_recognize,
    "e2e": cmd_e2e,
    "evaluate": cmd_evaluate,
    "decode": cmd_decode,
}


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("SCENETEXT_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING, format="%(name)s: %(message)s")
    try:
        ns = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        print(f"scenetext {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, LookupError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
