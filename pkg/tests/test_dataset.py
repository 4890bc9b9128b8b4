import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from resample_bnn.dataset import (
    DatasetConfig,
    PatchPlacementError,
    build_dataset,
    draw_patch_positions,
    load_manifest,
    load_patch,
    held_out_sources,
    load_split,
    scale_factor_grid,
    save_patch,
    synth_textures,
    write_textures,
)
from resample_bnn.rng import substream


class TestScaleGrid:
    def test_grid_excludes_identity(self):
        grid = scale_factor_grid()
        assert 1.0 not in grid
        assert len(grid) == 11
        assert grid[0] == 0.9 and grid[-1] == 1.45
        # the excluded k=2 leaves a double-width gap between 0.95 and 1.05
        assert_allclose(np.diff(grid), [0.05, 0.1] + [0.05] * 8, atol=1e-12)


class TestPatchPositions:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_two_half_side_patches_never_overlap(self, seed):
        rng = np.random.default_rng(seed)
        positions = draw_patch_positions(32, 32, 2, 16, rng)
        (y1, x1), (y2, x2) = positions
        assert abs(y1 - y2) >= 16 or abs(x1 - x2) >= 16

    def test_impossible_placement_raises(self):
        with pytest.raises(PatchPlacementError):
            draw_patch_positions(16, 16, 5, 16, np.random.default_rng(0),
                                 max_attempts=100)

    def test_patch_larger_than_image_raises(self):
        with pytest.raises(PatchPlacementError, match="smaller"):
            draw_patch_positions(8, 8, 1, 16, np.random.default_rng(0))


class TestSynthTextures:
    def test_deterministic_under_seed(self):
        a = synth_textures(3, 64, seed=9)
        b = synth_textures(3, 64, seed=9)
        for ia, ib in zip(a, b):
            assert np.array_equal(ia, ib)

    def test_pixel_range(self):
        for img in synth_textures(4, 96, seed=1):
            assert img.min() >= 0.0 and img.max() <= 255.0

    def test_spectrum_is_non_flat(self):
        for img in synth_textures(3, 128, seed=2):
            spec = np.abs(np.fft.rfft2(img - img.mean())) + 1e-9
            assert np.log(spec).std() > 0.5


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    sources = root / "sources"
    write_textures(sources, synth_textures(8, 192, seed=3))
    config = DatasetConfig(train_images=4, val_images=2, test_images=2,
                           patches_per_copy=3, patch_size=32, seed=5)
    manifest = build_dataset(sources, config, root / "data")
    return sources, config, manifest, root / "data"


class TestBuildDataset:
    def test_counts_per_split(self, small_dataset):
        _, config, manifest, _ = small_dataset
        n = config.patches_per_copy
        assert len(manifest.split_records("train")) == 4 * 2 * n
        assert len(manifest.split_records("val")) == 2 * 2 * n
        assert len(manifest.split_records("test")) == 2 * 2 * n

    def test_split_sources_disjoint(self, small_dataset):
        _, _, manifest, _ = small_dataset
        ids = {s: {r.source_id for r in manifest.split_records(s)}
               for s in ("train", "val", "test")}
        assert not (ids["train"] & ids["val"])
        assert not (ids["train"] & ids["test"])
        assert not (ids["val"] & ids["test"])

    def test_original_records_have_unit_scale(self, small_dataset):
        _, _, manifest, _ = small_dataset
        for r in manifest.records:
            if r.label == "original":
                assert r.scale == 1.0 and r.kernel == "none"
            else:
                assert r.scale in scale_factor_grid()
                assert r.kernel == "bilinear"
            assert r.jpeg_q == "none"

    def test_patches_within_a_copy_never_overlap(self, small_dataset):
        _, config, manifest, _ = small_dataset
        # regenerate positions from the recorded per-image streams and check
        by_copy: dict[tuple, int] = {}
        for r in manifest.records:
            by_copy[(r.source_id, r.label)] = by_copy.get((r.source_id, r.label), 0) + 1
        assert set(by_copy.values()) == {config.patches_per_copy}

    def test_manifest_roundtrip(self, small_dataset):
        _, _, manifest, data_dir = small_dataset
        loaded = load_manifest(data_dir / "manifest.txt")
        assert loaded.records == manifest.records
        assert loaded.config["patch_size"] == "32"
        assert loaded.training_scales() == manifest.training_scales()
        for s in loaded.training_scales():
            assert 0.9 <= s <= 1.45 and s != 1.0

    def test_load_split_shapes_and_labels(self, small_dataset):
        _, config, manifest, _ = small_dataset
        x, y = load_split(manifest, "train")
        assert x.shape == (4 * 2 * config.patches_per_copy, 1, 32, 32)
        assert set(np.unique(y)) == {0, 1}
        assert (y == 0).sum() == (y == 1).sum()

    def test_rebuild_is_byte_identical(self, small_dataset, tmp_path):
        sources, config, manifest, data_dir = small_dataset
        rebuilt = build_dataset(sources, config, tmp_path / "data2")
        a = (data_dir / "manifest.txt").read_text()
        b = (tmp_path / "data2" / "manifest.txt").read_text()
        assert a == b
        for r in manifest.records[:8]:
            pa = (data_dir / r.patch_path).read_bytes()
            pb = (tmp_path / "data2" / r.patch_path).read_bytes()
            assert pa == pb

    def test_held_out_source_resolution(self, small_dataset):
        sources, _, manifest, _ = small_dataset
        paths = held_out_sources(manifest, sources)
        assert len(paths) == 2
        for p in paths:
            assert p.exists()

    def test_insufficient_sources_rejected(self, tmp_path):
        write_textures(tmp_path / "src", synth_textures(2, 64, seed=0))
        with pytest.raises(ValueError, match="need"):
            build_dataset(tmp_path / "src",
                          DatasetConfig(train_images=4, val_images=1,
                                        test_images=1, patch_size=16),
                          tmp_path / "out")

    def test_too_small_images_skipped_with_warning(self, tmp_path):
        write_textures(tmp_path / "src", synth_textures(4, 48, seed=1))
        config = DatasetConfig(train_images=2, val_images=1, test_images=1,
                               patches_per_copy=9, patch_size=16, seed=2)
        # 9 non-overlapping 16x16 patches exhaust a 48x48 (or smaller) copy;
        # rescaled copies below 48px cannot fit them
        with pytest.warns(UserWarning, match="skipping"):
            manifest = build_dataset(tmp_path / "src", config, tmp_path / "out")
        assert manifest.config["skipped"] != "none"


class TestPatchBlobIO:
    def test_roundtrip_exact(self, tmp_path):
        patch = np.random.default_rng(0).random((32, 32)) * 255
        path = tmp_path / "p.f64"
        save_patch(path, patch)
        assert np.array_equal(load_patch(path, 32), patch)
        assert path.stat().st_size == 32 * 32 * 8

    def test_wrong_size_rejected(self, tmp_path):
        path = tmp_path / "p.f64"
        save_patch(path, np.zeros((4, 4)))
        with pytest.raises(ValueError, match="expected"):
            load_patch(path, 8)
