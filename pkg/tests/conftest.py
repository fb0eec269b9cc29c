from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from lulc_gan.classifier import BACKBONES, register_backbone
from lulc_gan.datasets import EUROSAT_CLASSES

# distinct mean colours so a small head can separate synthetic classes
PALETTE = {
    name: np.array(colour)
    for name, colour in zip(
        EUROSAT_CLASSES,
        [(200, 180, 60), (30, 90, 40), (120, 160, 80), (130, 130, 130), (180, 90, 90),
         (90, 200, 90), (160, 120, 40), (210, 210, 200), (60, 90, 160), (20, 40, 120)],
    )
}


def synthetic_image(label: str, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    base = PALETTE[label].astype(float)
    yy, xx = np.mgrid[0:size, 0:size]
    stripes = 25 * np.sin((xx + yy * (EUROSAT_CLASSES.index(label) % 3)) / 4.0)
    img = base[None, None, :] + stripes[..., None] + rng.normal(0, 12, (size, size, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def make_corpus(root: Path, classes, per_class: int, seed: int = 0, size: int = 64) -> Path:
    rng = np.random.default_rng(seed)
    for label in classes:
        d = root / label
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            Image.fromarray(synthetic_image(label, rng, size)).save(d / f"{label}_{i + 1}.jpg", quality=95)
    return root


@pytest.fixture
def corpus_factory(tmp_path):
    def factory(classes=EUROSAT_CLASSES[:3], per_class=8, seed=0, name="corpus", size=64):
        return make_corpus(tmp_path / name, classes, per_class, seed, size)

    return factory


def _tiny_backbone(pretrained: bool):
    gen = torch.Generator().manual_seed(1234)
    conv = torch.nn.Conv2d(3, 8, kernel_size=4, stride=4)
    with torch.no_grad():
        conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
        conv.bias.zero_()
    return torch.nn.Sequential(conv, torch.nn.ReLU(), torch.nn.AdaptiveAvgPool2d(2), torch.nn.Flatten()), 32


@pytest.fixture
def tiny_backbone():
    register_backbone("tiny", _tiny_backbone)
    yield "tiny"
    BACKBONES.pop("tiny", None)


# --------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if _acceptance.get(name) != "FAIL":
            _acceptance[name] = status


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        terminalreporter.write_line(f"[{_acceptance[name]}] {name}")
