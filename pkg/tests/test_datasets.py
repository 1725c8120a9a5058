import logging

import numpy as np
import pytest

from classsr.datasets import (
    Manifest,
    SynthSpec,
    TileSample,
    bicubic_reference,
    build_manifest,
    class_counts,
    class_sizes,
    extract_tiles,
    partition_classes,
    prepare_pairs,
    sample_batch,
    score_difficulty,
    synth_corpus,
    synth_kinds,
    write_difficulty_curve,
)
from classsr.exceptions import ConfigError, DatasetError, ShapeError


@pytest.fixture
def make_sample():
    def _make_sample(psnr=None, label=None, tile=4, scale=2, channels=3):
        return TileSample(
            lr=np.zeros((tile, tile, channels), dtype=np.float32),
            hr=np.zeros((tile * scale, tile * scale, channels), dtype=np.float32),
            difficulty_psnr=psnr,
            class_label=label,
        )

    return _make_sample


@pytest.fixture
def make_manifest():
    def _make_manifest(classes=2, n_flat=2, n_texture=2):
        spec = SynthSpec(n_flat=n_flat, n_texture=n_texture, size=64)
        return build_manifest(
            synth_corpus(spec),
            [f"img{i}" for i in range(n_flat + n_texture)],
            classes,
            lambda samples: bicubic_reference(4),
            tile=8,
            stride=8,
            kinds=synth_kinds(spec),
            provenance={"seed": 0},
        )

    return _make_manifest


class TestTileSample(object):
    def test_scale(self, make_sample):
        assert make_sample(scale=4).scale == 4

    def test_misaligned(self):
        with pytest.raises(ShapeError):
            TileSample(lr=np.zeros((4, 4, 3)), hr=np.zeros((8, 12, 3)))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            TileSample(lr=np.zeros((4, 4, 1)), hr=np.zeros((8, 8, 3)))


class TestPreparePairs(object):
    def test_trim_and_downsample(self):
        image = np.random.default_rng(0).random((70, 50, 3))
        pairs = prepare_pairs([image], [1.0, 0.5], 4)

        assert [(hr.shape, lr.shape) for hr, lr in pairs] == [
            ((68, 48, 3), (17, 12, 3)),
            ((32, 24, 3), (8, 6, 3)),
        ]

    @pytest.mark.parametrize(
        "scales, sr_scale", [([0.0], 4), ([1.5], 4), ([], 4), ([1.0], 0)]
    )
    def test_invalid(self, scales, sr_scale):
        with pytest.raises(ConfigError):
            prepare_pairs([np.zeros((16, 16, 3))], scales, sr_scale)

    def test_too_small(self):
        with pytest.raises(DatasetError):
            prepare_pairs([np.zeros((3, 3, 3))], [1.0], 4)


class TestExtractTiles(object):
    def test_aligned(self):
        hr = np.random.default_rng(0).random((40, 40, 1)).astype(np.float32)
        lr = hr[::4, ::4]
        samples = extract_tiles([(hr, lr)], tile=4, stride=3, sources=["a"])

        assert len(samples) == 9
        for sample in samples:
            r, c = sample.origin
            expected = hr[4 * r : 4 * r + 16, 4 * c : 4 * c + 16]
            np.testing.assert_array_equal(sample.hr, expected)
            np.testing.assert_array_equal(sample.lr, lr[r : r + 4, c : c + 4])
            assert sample.source == "a"


class TestPartition(object):
    @pytest.mark.parametrize(
        "total, classes, expected",
        [(9, 3, [3, 3, 3]), (10, 3, [4, 3, 3]), (11, 3, [4, 4, 3])],
    )
    def test_class_sizes(self, total, classes, expected):
        assert class_sizes(total, classes) == expected

    def test_ties_by_position(self, make_sample):
        samples = [make_sample(psnr) for psnr in (30.0, 40.0, 30.0, 20.0)]
        partition_classes(samples, 2)

        assert [s.class_label for s in samples] == [0, 0, 1, 1]
        assert class_counts(samples, 2) == [2, 2]

    def test_unscored(self, make_sample):
        with pytest.raises(DatasetError) as excinfo:
            partition_classes([make_sample(30.0), make_sample()], 2)

        assert str(excinfo.value) == "Every sample must be scored before partitioning."

    def test_one_class(self, make_sample):
        with pytest.raises(ConfigError):
            partition_classes([make_sample(30.0)], 1)


class TestScoreDifficulty(object):
    def test_bicubic(self):
        hr = np.full((8, 8, 3), 0.5, dtype=np.float32)
        sample = TileSample(lr=hr[::2, ::2].copy(), hr=hr)
        score_difficulty([sample], bicubic_reference(2))

        assert sample.difficulty_psnr == 100.0

    def test_wrong_output(self, make_sample):
        with pytest.raises(ShapeError):
            score_difficulty([make_sample()], lambda batch: batch)


class TestSynthCorpus(object):
    def test_deterministic(self):
        spec = SynthSpec(n_flat=1, n_texture=1, n_edge=2, size=32)
        a, b = synth_corpus(spec), synth_corpus(spec)

        assert len(a) == 4
        for x, y in zip(a, b):
            assert x.shape == (32, 32, 3)
            assert x.min() >= 0 and x.max() <= 1
            np.testing.assert_array_equal(x, y)

    def test_kinds(self):
        spec = SynthSpec(n_flat=3, n_texture=1, n_edge=1)

        assert synth_kinds(spec) == ["flat", "texture", "flat", "edge", "flat"]

    def test_kinds_spread_into_tail(self):
        kinds = synth_kinds(SynthSpec(n_flat=5, n_texture=10))

        assert kinds.count("flat") == 5
        assert kinds[-3:] == ["texture", "flat", "texture"]

    def test_invalid(self):
        with pytest.raises(ConfigError):
            synth_corpus(SynthSpec(n_flat=-1))


class TestManifest(object):
    def test_flat_tiles_are_simple(self, make_manifest):
        manifest = make_manifest()
        flat = [s for s in manifest.samples if s.kind == "flat"]
        texture = [s for s in manifest.samples if s.kind == "texture"]

        assert manifest.counts == [8, 8]
        assert all(s.class_label == 0 for s in flat)
        assert all(s.class_label == 1 for s in texture)
        assert manifest.provenance["tile"] == 8
        assert manifest.provenance["seed"] == 0

    def test_save_and_load(self, tmp_path, make_manifest):
        manifest = make_manifest()
        manifest.save(tmp_path / "train")
        loaded = Manifest.load(tmp_path / "train")

        assert loaded.counts == manifest.counts
        assert loaded.to_dict() == manifest.to_dict()
        np.testing.assert_array_equal(loaded.samples[5].hr, manifest.samples[5].hr)

    def test_load_missing(self, tmp_path):
        with pytest.raises(DatasetError):
            Manifest.load(tmp_path)

    def test_unknown_storage(self, tmp_path, make_manifest):
        with pytest.raises(ConfigError):
            make_manifest().save(tmp_path, storage="zip")

    def test_of_class(self, make_manifest):
        manifest = make_manifest()

        assert len(manifest.of_class(1)) == manifest.counts[1]

    def test_skips_undersized(self, caplog):
        images = [np.zeros((16, 16, 3)), np.zeros((32, 32, 3))]
        with caplog.at_level(logging.WARNING):
            manifest = build_manifest(
                images, ["small", "big"], 2, lambda s: bicubic_reference(4), tile=8
            )

        assert {s.source for s in manifest.samples} == {"big"}
        assert "Skipping undersized small" in caplog.text

    def test_no_tiles(self):
        with pytest.raises(DatasetError) as excinfo:
            build_manifest(
                [np.zeros((16, 16, 3))], ["small"], 2, lambda s: bicubic_reference(4)
            )

        assert str(excinfo.value) == "The corpus yields no tiles."


def test_sample_batch(make_sample):
    samples = [make_sample(scale=4) for _ in range(3)]
    lr, hr = sample_batch(samples, 5, np.random.default_rng(0))

    assert lr.shape == (5, 3, 4, 4)
    assert hr.shape == (5, 3, 16, 16)


def test_sample_batch_empty():
    with pytest.raises(DatasetError):
        sample_batch([], 4, np.random.default_rng(0))


def test_write_difficulty_curve(tmp_path, make_sample):
    samples = [make_sample(20.0, 1), make_sample(35.5, 0)]
    path = write_difficulty_curve(tmp_path / "curve.csv", samples)
    lines = path.read_text(encoding="utf-8").splitlines()

    assert lines == ["rank,psnr,label,source,kind", "0,35.5000,0,,", "1,20.0000,1,,"]
