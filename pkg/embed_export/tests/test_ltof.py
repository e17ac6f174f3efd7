"""The exporter's own LTOF v1 serializer: round trips and interoperability.

The byte format is the contract between this package and the engine, so
besides round-tripping through our own reader we cross-check both
directions against the engine's independent implementation.
"""

import numpy as np
import pytest

import ltoad.archive as engine_io
from embed_export.ltof import (Archive, LtofError, Record, VocabEntry,
                               read_ltof, write_ltof)


def sample_archive() -> Archive:
    rng = np.random.default_rng(0)
    mask = np.zeros((6, 5), dtype=np.uint8)
    mask[2:4, 1:3] = 1
    archive = Archive(d_final=4, layer_shapes=[(2, 3, 4), (1, 2, 5)],
                      provenance="exported")
    archive.records = [
        Record("train/a.png", "bolt", "train", 0, None,
               rng.standard_normal(4).astype(np.float32),
               [rng.standard_normal(s).astype(np.float32)
                for s in [(2, 3, 4), (1, 2, 5)]]),
        Record("test/b.png", "bolt", "test", 1, mask,
               rng.standard_normal(4).astype(np.float32),
               [rng.standard_normal(s).astype(np.float32)
                for s in [(2, 3, 4), (1, 2, 5)]]),
    ]
    archive.vocab = [VocabEntry("bolt", rng.standard_normal(4).astype(np.float32)),
                     VocabEntry("rusty bolt", rng.standard_normal(4).astype(np.float32))]
    archive.prompt_texts = [(0, "rusty bolt")]
    return archive


def assert_archives_equal(a, b):
    assert a.d_final == b.d_final
    assert list(a.layer_shapes) == list(b.layer_shapes)
    assert a.provenance == b.provenance
    assert len(a.records) == len(b.records)
    for ra, rb in zip(a.records, b.records):
        assert (ra.record_id, ra.class_label, ra.split, ra.anomaly_flag) == \
               (rb.record_id, rb.class_label, rb.split, rb.anomaly_flag)
        if ra.mask is None:
            assert rb.mask is None
        else:
            np.testing.assert_array_equal(ra.mask, rb.mask)
        np.testing.assert_array_equal(ra.final_vec, rb.final_vec)
        for la, lb in zip(ra.layer_maps, rb.layer_maps):
            np.testing.assert_array_equal(la, lb)
    assert [(v.name,) for v in a.vocab] == [(v.name,) for v in b.vocab]
    for va, vb in zip(a.vocab, b.vocab):
        np.testing.assert_array_equal(va.vec, vb.vec)
    assert list(a.prompt_texts) == list(b.prompt_texts)


def test_round_trip_preserves_every_field(tmp_path):
    archive = sample_archive()
    path = tmp_path / "a.ltof"
    n = write_ltof(archive, path)
    assert n == path.stat().st_size
    assert_archives_equal(archive, read_ltof(path))


def test_writer_output_parses_with_the_engine_reader(tmp_path):
    path = tmp_path / "ours.ltof"
    write_ltof(sample_archive(), path)
    theirs = engine_io.read_archive(str(path))
    assert_archives_equal(sample_archive(), theirs)
    assert engine_io.validate(theirs) == []


def test_engine_writer_output_parses_with_our_reader(tmp_path):
    cfg = engine_io.SynthConfig(class_names=["a", "b"], train_counts=[2, 2],
                                test_normals=1, test_anomalies=1, d_final=5,
                                layer_shapes=((4, 4, 5), (2, 2, 6)),
                                mask_size=(8, 8), patch_range=(2, 3),
                                n_distractors=2)
    synthetic = engine_io.synth_generate(cfg, seed=1)
    path = tmp_path / "engine.ltof"
    engine_io.write_archive(synthetic, str(path))
    ours = read_ltof(path)
    assert_archives_equal(synthetic, ours)


def test_archive_without_prompts_omits_the_section(tmp_path):
    archive = sample_archive()
    archive.prompt_texts = []
    path = tmp_path / "a.ltof"
    write_ltof(archive, path)
    assert read_ltof(path).prompt_texts == []


def test_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "a.ltof"
    write_ltof(sample_archive(), path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(LtofError, match="magic"):
        read_ltof(path)


def test_truncated_file_names_the_missing_piece(tmp_path):
    path = tmp_path / "a.ltof"
    write_ltof(sample_archive(), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(LtofError, match="truncated|trailing|prompt"):
        read_ltof(path)


def test_trailing_garbage_is_rejected(tmp_path):
    path = tmp_path / "a.ltof"
    write_ltof(sample_archive(), path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(LtofError, match="trailing|truncated"):
        read_ltof(path)


def test_shape_mismatch_is_rejected_at_write_time(tmp_path):
    archive = sample_archive()
    archive.records[0].final_vec = np.zeros(3, dtype=np.float32)
    with pytest.raises(LtofError, match="shape"):
        write_ltof(archive, tmp_path / "a.ltof")
