"""Export manifests: which images to encode, and the text side of the job.

A manifest is a JSON file::

    {
      "root": "relative/or/absolute/dataset/root",
      "images": [
        {"path": "bolt/train/000.png", "class": "bolt",
         "split": "train", "anomaly": 0, "mask": null},
        {"path": "bolt/test/bad_003.png", "class": "bolt",
         "split": "test", "anomaly": 1, "mask": "bolt/gt/bad_003.png"}
      ],
      "vocabulary": ["bolt", "washer", "thread", ...],
      "prompts": {"bolt": ["bolt with a bent shank", ...five texts...]}
    }

``root`` is resolved against the manifest's own directory.  Image and
mask paths are relative to ``root``.  ``vocabulary`` lists the words the
text tower should embed; ``prompts`` optionally attaches, per concept
candidate word, the five abnormal phrases a domain expert wrote for it
(the matching normal phrase is generated from the "a normal {word}"
template at export time).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

ABNORMAL_TEXTS = 5
SPLITS = ("train", "test")

__all__ = ["ABNORMAL_TEXTS", "ExportManifest", "ImageEntry", "ManifestError",
           "load_manifest"]


class ManifestError(ValueError):
    """Malformed or inconsistent export manifest."""


@dataclass(frozen=True)
class ImageEntry:
    """One image to encode: location, labels, and optional ground-truth mask."""

    path: str
    class_name: str
    split: str  # "train" | "test"
    anomaly: int  # 0 | 1
    mask: str | None = None


@dataclass
class ExportManifest:
    """Validated recipe for one export run."""

    root: Path
    images: list[ImageEntry]
    vocabulary: list[str] = field(default_factory=list)
    prompts: dict[str, list[str]] = field(default_factory=dict)

    def image_path(self, entry: ImageEntry) -> Path:
        return self.root / entry.path

    def mask_path(self, entry: ImageEntry) -> Path | None:
        return None if entry.mask is None else self.root / entry.mask


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ManifestError(message)


def _check_entry(manifest: ExportManifest, entry: ImageEntry) -> None:
    where = f"image {entry.path!r}"
    _require(entry.split in SPLITS,
             f"{where}: split {entry.split!r} not in {SPLITS}")
    _require(entry.anomaly in (0, 1),
             f"{where}: anomaly flag {entry.anomaly!r} not in (0, 1)")
    _require(not (entry.split == "train" and entry.anomaly),
             f"{where}: training images must be normal (one-class setting)")
    _require(not (entry.split == "test" and entry.anomaly and entry.mask is None),
             f"{where}: anomalous test image needs a ground-truth mask")
    _require(manifest.image_path(entry).is_file(),
             f"{where}: file not found under {manifest.root}")
    mask = manifest.mask_path(entry)
    if mask is not None:
        _require(mask.is_file(), f"{where}: mask {entry.mask!r} not found")


def validate_manifest(manifest: ExportManifest) -> None:
    """Raise :class:`ManifestError` on the first broken invariant."""
    _require(manifest.root.is_dir(), f"dataset root {manifest.root} is not a directory")
    _require(bool(manifest.images), "manifest lists no images")
    seen: set[str] = set()
    for entry in manifest.images:
        _require(entry.path not in seen, f"image {entry.path!r} listed twice")
        seen.add(entry.path)
        _check_entry(manifest, entry)
    words = set(manifest.vocabulary)
    for word, texts in manifest.prompts.items():
        _require(word in words,
                 f"prompts for {word!r}, but the word is not in the vocabulary")
        _require(len(texts) == ABNORMAL_TEXTS,
                 f"prompts for {word!r}: expected {ABNORMAL_TEXTS} abnormal "
                 f"texts, found {len(texts)}")
        _require(all(isinstance(t, str) and t.strip() for t in texts),
                 f"prompts for {word!r}: every text must be a nonempty string")


def load_manifest(path: str | Path) -> ExportManifest:
    """Parse and validate a manifest JSON file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from None
    for key in ("root", "images"):
        _require(key in raw, f"manifest missing field {key!r}")
    root = Path(raw["root"])
    if not root.is_absolute():
        root = path.parent / root
    images = []
    for i, item in enumerate(raw["images"]):
        for key in ("path", "class", "split", "anomaly"):
            _require(key in item, f"images[{i}] missing field {key!r}")
        images.append(ImageEntry(path=str(item["path"]),
                                 class_name=str(item["class"]),
                                 split=str(item["split"]),
                                 anomaly=int(item["anomaly"]),
                                 mask=item.get("mask")))
    manifest = ExportManifest(root=root, images=images,
                              vocabulary=[str(w) for w in raw.get("vocabulary", [])],
                              prompts={str(k): [str(t) for t in v]
                                       for k, v in raw.get("prompts", {}).items()})
    validate_manifest(manifest)
    return manifest
