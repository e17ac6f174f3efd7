"""Command-line entry point: ``embed-export features|text ...``."""

from __future__ import annotations

import argparse
import sys

from embed_export.encoder import ReferenceEncoder
from embed_export.export import ExportError, export_features, export_text
from embed_export.ltof import LtofError
from embed_export.manifest import ManifestError, load_manifest


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Export image datasets as LTOF feature archives")
    sub = parser.add_subparsers(dest="command", required=True)

    features = sub.add_parser(
        "features", help="encode manifest images into a fresh archive")
    features.add_argument("manifest", help="manifest JSON path")
    features.add_argument("out", help="output .ltof path")

    text = sub.add_parser(
        "text", help="append the manifest's vocabulary and prompts to an archive")
    text.add_argument("manifest", help="manifest JSON path")
    text.add_argument("archive", help="existing .ltof archive to extend")
    text.add_argument("--out", default=None,
                      help="write here instead of updating the archive in place")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    encoder = ReferenceEncoder()
    try:
        manifest = load_manifest(args.manifest)
        if args.command == "features":
            archive = export_features(manifest, encoder, args.out)
            print(f"wrote {len(archive.records)} records to {args.out}")
        else:
            archive = export_text(args.archive, manifest.vocabulary,
                                  manifest.prompts, encoder, args.out)
            print(f"archive now has {len(archive.vocab)} vocabulary entries "
                  f"and {len(archive.prompt_texts)} prompt phrases")
    except (ManifestError, LtofError, ExportError) as e:
        print(f"embed-export: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
