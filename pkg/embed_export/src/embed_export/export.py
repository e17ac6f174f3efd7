"""The two export operations: image features, then texts.

``export_features`` runs the encoder over every manifest image and
writes a fresh LTOF archive (provenance ``"exported"``) holding the
tapped block maps, the final embedding, and the run-length-encoded
ground-truth masks at their native resolution.  ``export_text`` then
appends the text side to such an archive: one vocabulary vector per
word, plus — for each concept candidate that has expert-written
abnormal phrases — a generated "a normal {word}" phrase followed by the
five abnormal phrases, each stored as its own vocabulary entry and
linked to the word through the prompt section.

Both operations are pure functions of their inputs, so re-running an
export over unchanged data reproduces the archive byte for byte.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from embed_export.encoder import Encoder
from embed_export.ltof import Archive, Record, VocabEntry, read_ltof, write_ltof
from embed_export.manifest import ABNORMAL_TEXTS, ExportManifest, ImageEntry

NORMAL_TEMPLATE = "a normal {}"

__all__ = ["ExportError", "NORMAL_TEMPLATE", "export_features", "export_text"]


class ExportError(RuntimeError):
    """Inputs that cannot be exported into a consistent archive."""


def _load_image(path: Path, size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
    except OSError as e:
        raise ExportError(f"cannot read image {path}: {e}") from None
    return np.asarray(rgb, dtype=np.float32) / 255.0


def _load_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            gray = np.asarray(img.convert("L"))
    except OSError as e:
        raise ExportError(f"cannot read mask {path}: {e}") from None
    return (gray > 127).astype(np.uint8)


def _encode_record(manifest: ExportManifest, entry: ImageEntry,
                   encoder: Encoder) -> Record:
    blocks, final_vec = encoder.encode_image(
        _load_image(manifest.image_path(entry), encoder.input_size))
    declared = list(encoder.block_shapes)
    produced = [b.shape for b in blocks]
    if produced != declared or final_vec.shape != (encoder.d_final,):
        raise ExportError(
            f"image {entry.path!r}: encoder produced blocks {produced} and "
            f"final {final_vec.shape}, but declares {declared} and "
            f"({encoder.d_final},) — model/header dimension drift")
    mask_path = manifest.mask_path(entry)
    mask = None if mask_path is None else _load_mask(mask_path)
    if mask is not None and bool(mask.any()) != bool(entry.anomaly):
        raise ExportError(f"image {entry.path!r}: anomaly flag {entry.anomaly} "
                          f"but mask has {'some' if mask.any() else 'no'} positives")
    return Record(record_id=entry.path, class_label=entry.class_name,
                  split=entry.split, anomaly_flag=entry.anomaly,
                  mask=mask, final_vec=final_vec, layer_maps=blocks)


def export_features(manifest: ExportManifest, encoder: Encoder,
                    out_path: str | Path) -> Archive:
    """Encode every manifest image and write the archive to ``out_path``."""
    archive = Archive(d_final=encoder.d_final,
                      layer_shapes=list(encoder.block_shapes),
                      provenance="exported")
    for entry in manifest.images:
        archive.records.append(_encode_record(manifest, entry, encoder))
    write_ltof(archive, out_path)
    return archive


def _add_vocab(archive: Archive, name: str, encoder: Encoder,
               known: dict[str, int]) -> int:
    """Embed ``name`` into the vocabulary once; return its index."""
    if name in known:
        warnings.warn(f"duplicate vocabulary text {name!r} collapsed")
        return known[name]
    vec = encoder.encode_text(name)
    if vec.shape != (archive.d_final,):
        raise ExportError(f"text {name!r}: encoder produced {vec.shape}, archive "
                          f"header says ({archive.d_final},) — dimension drift")
    known[name] = len(archive.vocab)
    archive.vocab.append(VocabEntry(name, vec))
    return known[name]


def export_text(archive_path: str | Path, words: list[str],
                prompts: dict[str, list[str]], encoder: Encoder,
                out_path: str | Path | None = None) -> Archive:
    """Append vocabulary vectors and prompt phrases to an exported archive."""
    if not words:
        raise ExportError("empty word list: the vocabulary cannot be empty")
    archive = read_ltof(archive_path)
    known = {entry.name: i for i, entry in enumerate(archive.vocab)}
    for word in words:
        _add_vocab(archive, word, encoder, known)
    for word, texts in prompts.items():
        if word not in known:
            raise ExportError(f"prompts for {word!r}, but it is not a vocabulary word")
        if len(texts) != ABNORMAL_TEXTS:
            raise ExportError(f"concept {word!r}: expected {ABNORMAL_TEXTS} abnormal "
                              f"texts, found {len(texts)}")
        word_idx = known[word]
        if any(idx == word_idx for idx, _ in archive.prompt_texts):
            raise ExportError(f"concept {word!r} already has prompt phrases")
        for phrase in [NORMAL_TEMPLATE.format(word), *texts]:
            _add_vocab(archive, phrase, encoder, known)
            archive.prompt_texts.append((word_idx, phrase))
    write_ltof(archive, out_path if out_path is not None else archive_path)
    return archive
