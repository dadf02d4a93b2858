import time

import numpy as np
import pytest

from scenetext.dataset import SynthConfig, rasterize_mask, synth_generate
from scenetext.detector import DetectorTrainConfig, train_detector

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])


@pytest.fixture(scope="session")
def synth_scenes():
    """Ten 64x64 synthetic scenes with masks: the detector / end-to-end training set."""
    data = synth_generate(SynthConfig(n_images=10, image_size=(64, 64), seed=0))
    out = []
    for img, ann in data:
        mask, ignore = rasterize_mask(ann, *img.shape)
        out.append((img, ann, mask, ignore))
    return out


@pytest.fixture(scope="session")
def trained_detector(synth_scenes):
    """Detector overfit on the synthetic scenes; returns (model, training seconds)."""
    t0 = time.perf_counter()
    model = train_detector([(img, mask, ignore) for img, _, mask, ignore in synth_scenes],
                           DetectorTrainConfig(seed=0))
    return model, time.perf_counter() - t0


@pytest.fixture(scope="session")
def e2e_recognizer(synth_scenes, trained_detector):
    """Recognizer overfit on the words of the synthetic scenes.

    Training crops are the GT envelopes plus the envelopes of the trained
    detector's own boxes matched to GT, i.e. exactly what the pipeline feeds it.
    """
    from scenetext.dataset import crop_envelope
    from scenetext.detector import detect
    from scenetext.evaluation import match_detections
    from scenetext.recognizer import RecognizerTrainConfig, train_recognizer

    det, _ = trained_detector
    crops = []
    for img, ann, _, _ in synth_scenes:
        boxes = detect(img, det)
        m = match_detections(ann.boxes, boxes)
        for box in ann.boxes:
            crops.append((crop_envelope(img, box), box.transcription))
        for i, j in m.pairs:
            crops.append((crop_envelope(img, boxes[j]), ann.boxes[i].transcription))
    t0 = time.perf_counter()
    model = train_recognizer(crops, RecognizerTrainConfig(seed=0))
    return model, crops, time.perf_counter() - t0
