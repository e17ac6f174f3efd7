"""Export pipeline: the promised round-trip behaviours, end to end.

The three headline checks — probe export validates cleanly in the
engine, header dims equal the production tap profile, re-export is
byte-stable — live here, next to the failure-path tests.
"""

from pathlib import Path

import numpy as np
import pytest

import ltoad.archive as engine_io
from ltoad.concepts import build_prompt_bank, init_concepts

from embed_export.cli import main as cli_main
from embed_export.encoder import ReferenceEncoder
from embed_export.export import ExportError, export_features, export_text
from embed_export.ltof import read_ltof
from embed_export.manifest import load_manifest

from conftest import PROBE_PROMPTS


@pytest.fixture(scope="module")
def encoder():
    return ReferenceEncoder()


def run_pipeline(manifest_path: Path, encoder, out: Path):
    manifest = load_manifest(manifest_path)
    export_features(manifest, encoder, out)
    return export_text(out, manifest.vocabulary, manifest.prompts, encoder)


def test_two_image_probe_export_passes_engine_validation(probe_manifest,
                                                         encoder, tmp_path):
    out = tmp_path / "probe.ltof"
    run_pipeline(probe_manifest, encoder, out)
    archive = engine_io.read_archive(str(out))
    violations = engine_io.validate(archive)
    assert violations == []
    assert archive.provenance == "exported"
    assert [r.split for r in archive.records] == ["train", "test"]
    assert archive.records[1].mask is not None and archive.records[1].mask.any()
    # one vector per word plus the six phrases attached to "bolt"
    assert len(archive.vocab) == 2 + 6
    bolt = archive.vocab_index("bolt")
    assert archive.prompts_for(bolt) == ["a normal bolt", *PROBE_PROMPTS["bolt"]]
    print("\nPASS secondary-probe-validate: 2-image export, zero violations")


def test_header_dims_match_the_backbone_block_profile(probe_manifest, encoder,
                                                      tmp_path):
    out = tmp_path / "probe.ltof"
    run_pipeline(probe_manifest, encoder, out)
    archive = engine_io.read_archive(str(out))
    assert archive.layer_shapes == [(32, 32, 32), (16, 16, 48),
                                    (8, 8, 80), (4, 4, 224)]
    assert archive.d_final == 640
    print("\nPASS secondary-header-dims: 32/48/80/224 blocks at strides "
          "2/4/8/16, final dim 640")


def test_reexport_is_byte_stable(probe_manifest, encoder, tmp_path):
    first = tmp_path / "first.ltof"
    second = tmp_path / "second.ltof"
    run_pipeline(probe_manifest, encoder, first)
    run_pipeline(probe_manifest, ReferenceEncoder(), second)
    assert first.read_bytes() == second.read_bytes()
    print("\nPASS secondary-byte-stable: identical inputs reproduce the "
          "archive byte for byte")


def test_same_class_finals_are_more_similar_than_cross_class(dataset, encoder,
                                                             tmp_path):
    manifest_path = dataset(
        [{"class": "bolt", "class_idx": 0, "variant": v, "split": "train"}
         for v in range(3)] +
        [{"class": "washer", "class_idx": 3, "variant": v, "split": "train"}
         for v in range(3)])
    out = tmp_path / "probe6.ltof"
    archive = export_features(load_manifest(manifest_path), encoder, out)
    finals = np.stack([r.final_vec for r in archive.records])
    labels = [r.class_label for r in archive.records]
    sims = finals @ finals.T
    same, cross = [], []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            (same if labels[i] == labels[j] else cross).append(sims[i, j])
    assert min(same) > max(cross)


def test_exported_archive_feeds_the_engine_concept_stage(probe_manifest,
                                                         encoder, tmp_path):
    out = tmp_path / "probe.ltof"
    run_pipeline(probe_manifest, encoder, out)
    archive = engine_io.read_archive(str(out))
    concepts = init_concepts(archive, k=2)
    bank = build_prompt_bank(archive, concepts)
    assert bank.normal.data.shape == (2, archive.d_final)
    assert bank.abnormal.data.shape == (2, 5, archive.d_final)


def test_normal_image_with_all_zero_mask_is_accepted(dataset, encoder,
                                                     tmp_path):
    manifest_path = dataset(
        [{"class": "bolt", "class_idx": 0, "variant": 0, "split": "train"},
         {"class": "bolt", "class_idx": 0, "variant": 1, "split": "test",
          "anomaly": 1},
         {"class": "bolt", "class_idx": 0, "variant": 2, "split": "test"}])
    out = tmp_path / "a.ltof"
    export_features(load_manifest(manifest_path), encoder, out)
    archive = engine_io.read_archive(str(out))
    assert engine_io.validate(archive) == []
    assert archive.records[2].mask is None


def test_mask_contradicting_the_flag_fails_the_export(dataset, encoder,
                                                      tmp_path):
    manifest_path = dataset(
        [{"class": "bolt", "class_idx": 0, "variant": 1, "split": "test",
          "anomaly": 1}])
    manifest = load_manifest(manifest_path)
    blank = manifest.mask_path(manifest.images[0])
    from PIL import Image
    Image.fromarray(np.zeros((48, 48), dtype=np.uint8)).save(blank)
    with pytest.raises(ExportError, match="mask has no positives"):
        export_features(manifest, encoder, tmp_path / "a.ltof")


def test_dimension_drift_between_model_and_header_fails_hard(probe_manifest,
                                                             tmp_path):
    class DriftingEncoder(ReferenceEncoder):
        def encode_image(self, image):
            blocks, vec = super().encode_image(image)
            return [b[:, :, :-1] for b in blocks], vec

    with pytest.raises(ExportError, match="dimension drift"):
        export_features(load_manifest(probe_manifest), DriftingEncoder(),
                        tmp_path / "a.ltof")


def test_empty_word_list_is_rejected(probe_manifest, encoder, tmp_path):
    out = tmp_path / "a.ltof"
    export_features(load_manifest(probe_manifest), encoder, out)
    with pytest.raises(ExportError, match="empty word list"):
        export_text(out, [], {}, encoder)


def test_duplicate_words_are_collapsed_with_a_warning(probe_manifest, encoder,
                                                      tmp_path):
    out = tmp_path / "a.ltof"
    export_features(load_manifest(probe_manifest), encoder, out)
    with pytest.warns(UserWarning, match="collapsed"):
        archive = export_text(out, ["bolt", "washer", "bolt"], {}, encoder)
    assert [v.name for v in archive.vocab] == ["bolt", "washer"]


def test_appending_prompts_twice_for_a_concept_is_rejected(probe_manifest,
                                                           encoder, tmp_path):
    out = tmp_path / "a.ltof"
    manifest = load_manifest(probe_manifest)
    export_features(manifest, encoder, out)
    export_text(out, manifest.vocabulary, manifest.prompts, encoder)
    with pytest.warns(UserWarning, match="collapsed"), \
            pytest.raises(ExportError, match="already has prompt"):
        export_text(out, manifest.vocabulary, manifest.prompts, encoder)


def test_cli_runs_both_stages_and_validates(probe_manifest, tmp_path, capsys):
    out = tmp_path / "cli.ltof"
    assert cli_main(["features", str(probe_manifest), str(out)]) == 0
    assert cli_main(["text", str(probe_manifest), str(out)]) == 0
    assert "vocabulary entries" in capsys.readouterr().out
    assert engine_io.validate(engine_io.read_archive(str(out))) == []


def test_cli_reports_manifest_problems_with_nonzero_exit(tmp_path, capsys):
    bad = tmp_path / "manifest.json"
    bad.write_text("{}")
    assert cli_main(["features", str(bad), str(tmp_path / "x.ltof")]) == 2
    assert "embed-export:" in capsys.readouterr().err
