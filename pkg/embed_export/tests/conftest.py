"""Shared fixtures: tiny deterministic image datasets with manifests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

SIZE = 48  # native image side; deliberately not the encoder input size


def class_image(class_idx: int, variant: int) -> np.ndarray:
    """A recognisable per-class texture with per-variant noise, uint8 RGB."""
    rng = np.random.default_rng(1000 * class_idx + variant)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    period = 4 + 3 * class_idx
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + (class_idx % 2) * yy) / period)
    base = np.stack([wave * (0.3 + 0.2 * class_idx),
                     1.0 - wave * 0.5,
                     np.full_like(wave, 0.2 + 0.15 * class_idx)], axis=-1)
    noisy = np.clip(base + rng.normal(0.0, 0.03, base.shape), 0.0, 1.0)
    return (noisy * 255).astype(np.uint8)


def add_defect(img: np.ndarray, variant: int) -> tuple[np.ndarray, np.ndarray]:
    """Stamp a bright square defect; returns (image, binary mask)."""
    out = img.copy()
    mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
    side = 10
    top = 6 + (variant * 7) % (SIZE - side - 12)
    left = 8 + (variant * 11) % (SIZE - side - 16)
    out[top:top + side, left:left + side] = (250, 250, 250)
    mask[top:top + side, left:left + side] = 1
    return out, mask


@pytest.fixture
def dataset(tmp_path: Path):
    """Writes images/masks under tmp_path and returns a manifest-dict builder."""

    def build(entries: list[dict], vocabulary=None, prompts=None) -> Path:
        doc: dict = {"root": ".", "images": []}
        for e in entries:
            img = class_image(e["class_idx"], e["variant"])
            mask = None
            if e.get("anomaly"):
                img, mask = add_defect(img, e["variant"])
            rel = f"{e['class']}_{e['split']}_{e['variant']}.png"
            Image.fromarray(img).save(tmp_path / rel)
            item = {"path": rel, "class": e["class"], "split": e["split"],
                    "anomaly": int(bool(e.get("anomaly")))}
            if mask is not None:
                mask_rel = rel.replace(".png", "_mask.png")
                Image.fromarray(mask * 255).save(tmp_path / mask_rel)
                item["mask"] = mask_rel
            doc["images"].append(item)
        if vocabulary is not None:
            doc["vocabulary"] = vocabulary
        if prompts is not None:
            doc["prompts"] = prompts
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
        return path

    return build


PROBE_PROMPTS = {"bolt": ["bolt with a bent shank", "bolt with stripped threads",
                          "scratched bolt head", "corroded bolt", "cracked bolt"]}


@pytest.fixture
def probe_manifest(dataset) -> Path:
    """The 2-image probe: one normal train image, one anomalous test image."""
    return dataset(
        [{"class": "bolt", "class_idx": 0, "variant": 0, "split": "train"},
         {"class": "bolt", "class_idx": 0, "variant": 1, "split": "test",
          "anomaly": 1}],
        vocabulary=["bolt", "washer"],
        prompts=PROBE_PROMPTS)
