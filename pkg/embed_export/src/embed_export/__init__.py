"""Turns image datasets into LTOF feature archives for the ltoad engine.

The engine consumes frozen features, never raw images.  This package is
the offline client that bridges the two: it runs a vision-language
encoder over a manifest of images, taps intermediate blocks of the image
tower plus the final joint-space embedding, embeds vocabulary words and
prompt phrases with the text tower, and writes everything as an LTOF v1
archive that the engine loads exactly like its own synthetic ones.
"""

from embed_export.encoder import Encoder, ReferenceEncoder
from embed_export.export import ExportError, export_features, export_text
from embed_export.ltof import Archive, LtofError, Record, VocabEntry, read_ltof, write_ltof
from embed_export.manifest import ExportManifest, ImageEntry, ManifestError, load_manifest

__all__ = [
    "Archive",
    "Encoder",
    "ExportError",
    "ExportManifest",
    "ImageEntry",
    "LtofError",
    "ManifestError",
    "Record",
    "ReferenceEncoder",
    "VocabEntry",
    "export_features",
    "export_text",
    "load_manifest",
    "read_ltof",
    "write_ltof",
]
