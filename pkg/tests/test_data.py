import numpy as np
import pytest
import torch

from dualseg.data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    SyntheticSpec,
    TilePair,
    decode_palette_labels,
    denormalize_rgb,
    load_dataset,
    normalize_dsm,
    normalize_pair,
    normalize_rgb,
    random_crop_flip,
    read_classes,
    read_netpbm,
    read_raster_bin,
    sliding_window_inference,
    synth_dataset,
    write_dataset,
    write_netpbm,
    write_raster_bin,
)


# -- normalization --------------------------------------------------------------


def test_dsm_minmax_formula():
    dsm = np.array([[[10.0, 20.0], [30.0, 25.0]]], dtype=np.float32)
    out = normalize_dsm(dsm)
    assert out[0, 0, 1] == pytest.approx(0.5)
    assert out.min() == 0.0 and out.max() == 1.0


def test_constant_dsm_tile_maps_to_zeros():
    out = normalize_dsm(np.full((1, 4, 4), 7.5, dtype=np.float32))
    assert np.all(out == 0.0)


def test_rgb_sam_family_stops_at_unit_scale():
    rgb = np.full((3, 2, 2), 255, dtype=np.uint8)
    out = normalize_rgb(rgb, "sam-like")
    assert np.allclose(out, 1.0)


def test_rgb_dinov2_family_mean_subtraction_zero_point():
    rgb = np.zeros((3, 1, 1), dtype=np.float32)
    rgb[0] = 0.485 * 255
    rgb[1] = 0.456 * 255
    rgb[2] = 0.406 * 255
    out = normalize_rgb(rgb, "dinov2-like")
    assert np.allclose(out, 0.0, atol=1e-6)


def test_rgb_normalization_round_trip():
    rng = np.random.default_rng(0)
    rgb = rng.uniform(0, 1, size=(3, 4, 4)).astype(np.float32)
    again = denormalize_rgb(normalize_rgb(rgb, "dinov2-like"), "dinov2-like")
    np.testing.assert_allclose(again, rgb, atol=1e-6)


def test_rgb_float_unit_range_left_untouched_for_sam():
    rgb = np.random.default_rng(1).uniform(0, 1, size=(3, 4, 4)).astype(np.float32)
    out = normalize_rgb(rgb, "sam-like")
    np.testing.assert_allclose(out, rgb)


def test_non_three_channel_rgb_skips_standardization():
    rgb = np.full((4, 2, 2), 255, dtype=np.uint8)
    out = normalize_rgb(rgb, "dinov2-like")
    assert np.allclose(out, 1.0)


# -- cropping and flips -----------------------------------------------------------


def _tile_with_marker(size: int = 16) -> TilePair:
    rgb = np.zeros((3, size, size), dtype=np.float32)
    dsm = np.zeros((1, size, size), dtype=np.float32)
    labels = np.zeros((size, size), dtype=np.int64)
    rgb[:, 3, 5] = 1.0
    dsm[0, 3, 5] = 1.0
    labels[3, 5] = 2
    return TilePair(rgb, dsm, labels, "marker")


def test_crop_equal_to_tile_is_deterministic_full_window():
    pair = _tile_with_marker()
    patch = random_crop_flip(pair, 16, np.random.default_rng(0))
    assert patch.top == 0 and patch.left == 0
    assert patch.rgb.shape == (3, 16, 16)


def test_flips_keep_rasters_pixel_aligned():
    pair = _tile_with_marker()
    for seed in range(10):
        patch = random_crop_flip(pair, 8, np.random.default_rng(seed))
        marker = np.argwhere(patch.labels == 2)
        if marker.size == 0:
            assert patch.rgb.max() == 0.0 and patch.aux.max() == 0.0
            continue
        y, x = marker[0]
        assert patch.rgb[0, y, x] == 1.0
        assert patch.aux[0, y, x] == 1.0
        assert patch.rgb.sum() == 3.0  # exactly the marker

def test_seeded_crop_reproducible():
    pair = _tile_with_marker()
    a = random_crop_flip(pair, 8, np.random.default_rng(5))
    b = random_crop_flip(pair, 8, np.random.default_rng(5))
    assert (a.top, a.left, a.flip_h, a.flip_v) == (b.top, b.left, b.flip_h, b.flip_v)
    np.testing.assert_array_equal(a.rgb, b.rgb)


def test_oversized_crop_rejected():
    with pytest.raises(ValueError, match="crop"):
        random_crop_flip(_tile_with_marker(), 32, np.random.default_rng(0))


# -- synthetic tiles ----------------------------------------------------------------


def _mutual_information_bits(values: np.ndarray, labels: np.ndarray, bins: int = 16) -> float:
    quantized = np.clip((values * bins).astype(int), 0, bins - 1)
    k = labels.max() + 1
    joint = np.zeros((bins, k))
    for v, l in zip(quantized.ravel(), labels.ravel()):
        joint[v, l] += 1
    joint /= joint.sum()
    pv = joint.sum(axis=1, keepdims=True)
    pl = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log2(joint[nz] / (pv @ pl)[nz])).sum())


def test_aux_only_mode_rgb_carries_no_label_information():
    spec = SyntheticSpec(tiles=4, tile_size=64, classes=6, mode="aux_only")
    tiles = synth_dataset(spec, seed=3)
    values = np.concatenate([t.rgb.mean(axis=0).ravel() for t in tiles])
    labels = np.concatenate([t.labels.ravel() for t in tiles])
    assert _mutual_information_bits(values, labels) < 0.02
    # while the elevation band is label-determined by construction
    heights = np.concatenate([normalize_dsm(t.dsm)[0].ravel() for t in tiles])
    assert _mutual_information_bits(heights, labels) > 0.5


def test_joint_mode_labels_recoverable_from_generating_rule():
    spec = SyntheticSpec(tiles=4, tile_size=64, classes=6, mode="joint")
    tiles = synth_dataset(spec, seed=11)
    for pair in tiles:
        band = np.clip(np.floor(pair.dsm[0] * spec.classes), 0, spec.classes - 1)
        np.testing.assert_array_equal(band.astype(np.int64), pair.labels)


def test_joint_mode_rgb_is_informative_too():
    spec = SyntheticSpec(tiles=4, tile_size=64, classes=6, mode="joint")
    tiles = synth_dataset(spec, seed=4)
    values = np.concatenate([t.rgb.mean(axis=0).ravel() for t in tiles])
    labels = np.concatenate([t.labels.ravel() for t in tiles])
    assert _mutual_information_bits(values, labels) > 0.2


def test_rgb_only_mode_dsm_independent_of_labels():
    spec = SyntheticSpec(tiles=4, tile_size=64, classes=6, mode="rgb_only")
    tiles = synth_dataset(spec, seed=5)
    heights = np.concatenate([normalize_dsm(t.dsm)[0].ravel() for t in tiles])
    labels = np.concatenate([t.labels.ravel() for t in tiles])
    assert _mutual_information_bits(heights, labels) < 0.05


def test_fixed_seed_gives_byte_identical_tiles():
    spec = SyntheticSpec(tiles=3, tile_size=32, classes=6, mode="joint")
    a = synth_dataset(spec, seed=9)
    b = synth_dataset(spec, seed=9)
    for ta, tb in zip(a, b):
        assert ta.rgb.tobytes() == tb.rgb.tobytes()
        assert ta.dsm.tobytes() == tb.dsm.tobytes()
        assert ta.labels.tobytes() == tb.labels.tobytes()


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(tiles=1, mode="nonsense")
    with pytest.raises(ValueError):
        SyntheticSpec(tiles=1, tile_size=30, region_cells=4)


# -- raster files ----------------------------------------------------------------------


def test_netpbm_round_trips(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, size=(3, 5, 7)).astype(np.uint8)
    write_netpbm(tmp_path / "t.ppm", rgb)
    np.testing.assert_array_equal(read_netpbm(tmp_path / "t.ppm"), rgb)
    labels = np.random.default_rng(1).integers(0, 6, size=(5, 7)).astype(np.uint8)
    write_netpbm(tmp_path / "t.pgm", labels)
    np.testing.assert_array_equal(read_netpbm(tmp_path / "t.pgm"), labels)
    wide = np.random.default_rng(2).integers(0, 60000, size=(4, 4)).astype(np.uint16)
    write_netpbm(tmp_path / "w.pgm", wide)
    np.testing.assert_array_equal(read_netpbm(tmp_path / "w.pgm"), wide)


def test_raster_bin_round_trip(tmp_path):
    arr = np.random.default_rng(3).normal(size=(1, 6, 4)).astype(np.float32)
    write_raster_bin(tmp_path / "t.bin", arr)
    np.testing.assert_array_equal(read_raster_bin(tmp_path / "t.bin"), arr)
    with pytest.raises(ValueError, match="not a raster"):
        (tmp_path / "bad.bin").write_bytes(b"JUNKJUNKJUNK")
        read_raster_bin(tmp_path / "bad.bin")


def test_dataset_directory_round_trip(tmp_path):
    spec = SyntheticSpec(tiles=2, tile_size=16, classes=4, region_cells=2)
    tiles = synth_dataset(spec, seed=1)
    classes = [(i, f"class{i}", (i * 40, i * 40, i * 40)) for i in range(4)]
    write_dataset(tmp_path, "train", tiles, classes)
    assert (tmp_path / "classes.txt").exists()
    loaded = load_dataset(tmp_path, "train")
    assert [t.tile_id for t in loaded] == [t.tile_id for t in tiles]
    for got, want in zip(loaded, tiles):
        np.testing.assert_allclose(got.rgb, want.rgb, atol=1e-7)
        np.testing.assert_allclose(got.dsm, want.dsm, atol=1e-7)
        np.testing.assert_array_equal(got.labels, want.labels)
    rows = read_classes(tmp_path / "classes.txt")
    assert rows[2] == (2, "class2", (80, 80, 80))


def test_missing_split_directory_raises(tmp_path):
    with pytest.raises(FileNotFoundError, match="split directory"):
        load_dataset(tmp_path, "train")


def test_palette_decoding_exact_match_only():
    palette = {(255, 255, 255): 0, (0, 0, 255): 1}
    color = np.zeros((3, 2, 2), dtype=np.int64)
    color[:, 0, :] = 255
    color[2, 1, :] = 255
    decoded = decode_palette_labels(color, palette)
    np.testing.assert_array_equal(decoded, [[0, 0], [1, 1]])
    color[0, 1, 1] = 7  # a color outside the palette
    with pytest.raises(ValueError, match="not in the palette"):
        decode_palette_labels(color, palette)


# -- sliding-window inference --------------------------------------------------------


class EchoProbe:
    """Per-pixel model: logits are [rgb mean, aux band]; translation invariant."""

    def __call__(self, rgb: torch.Tensor, aux: torch.Tensor) -> torch.Tensor:
        return torch.cat([rgb.mean(dim=1, keepdim=True), aux], dim=1)

    def eval(self):
        return self


def test_window_equal_to_tile_matches_direct_pass():
    rgb = torch.rand(3, 16, 16)
    aux = torch.rand(1, 16, 16)
    probe = EchoProbe()
    out = sliding_window_inference(probe, rgb, aux, crop=16, stride=16)
    direct = probe(rgb.unsqueeze(0), aux.unsqueeze(0))[0]
    assert torch.allclose(out, direct)


def test_non_overlapping_stride_tiles_exactly_once():
    rgb = torch.rand(3, 32, 32)
    aux = torch.rand(1, 32, 32)
    out = sliding_window_inference(EchoProbe(), rgb, aux, crop=16, stride=16)
    assert torch.allclose(out[0], rgb.mean(dim=0))
    assert torch.allclose(out[1], aux[0])


def test_overlapping_windows_average_to_the_same_field():
    # the probe is per-pixel, so overlapping windows contribute equal values
    rgb = torch.rand(3, 24, 24)
    aux = torch.rand(1, 24, 24)
    out = sliding_window_inference(EchoProbe(), rgb, aux, crop=16, stride=4)
    direct = EchoProbe()(rgb.unsqueeze(0), aux.unsqueeze(0))[0]
    assert torch.allclose(out, direct, atol=1e-6)


def test_tile_smaller_than_crop_padding_sliced_away():
    rgb = torch.rand(3, 10, 12)
    aux = torch.rand(1, 10, 12)
    out = sliding_window_inference(EchoProbe(), rgb, aux, crop=16, stride=16)
    assert out.shape == (2, 10, 12)
    assert torch.allclose(out[1], aux[0])


def test_inward_shifted_final_window_covers_everything():
    rgb = torch.rand(3, 20, 20)
    aux = torch.rand(1, 20, 20)
    out = sliding_window_inference(EchoProbe(), rgb, aux, crop=16, stride=8)
    assert torch.allclose(out[1], aux[0], atol=1e-6)


def test_stride_larger_than_crop_rejected():
    with pytest.raises(ValueError, match="stride"):
        sliding_window_inference(EchoProbe(), torch.rand(3, 8, 8), torch.rand(1, 8, 8), 4, 8)


def test_normalize_pair_keeps_labels_and_id():
    pair = _tile_with_marker()
    out = normalize_pair(pair, "sam-like")
    assert out.tile_id == pair.tile_id
    np.testing.assert_array_equal(out.labels, pair.labels)
    assert out.dsm.max() <= 1.0


def test_tile_pair_shape_validation():
    with pytest.raises(ValueError, match="shapes disagree"):
        TilePair(
            rgb=np.zeros((3, 4, 4), dtype=np.float32),
            dsm=np.zeros((1, 4, 5), dtype=np.float32),
            labels=np.zeros((4, 4), dtype=np.int64),
            tile_id="bad",
        )
