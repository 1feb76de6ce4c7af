import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from razn.errors import ConfigError, MaxMagnificationError, PatchRangeError, ValidationError
from razn.pyramid import (
    PatchRef,
    PyramidDataset,
    PyramidWriter,
    area_downsample,
    crop_grid,
    label_downsample,
    label_upsample,
    stitch,
    zoom_region,
)


@pytest.fixture(scope="module")
def ramp_ds(tmp_path_factory):
    """Two levels, 40x48 -> 80x96, tile 32 (tiles do not divide the level)."""
    root = tmp_path_factory.mktemp("ramp")
    rng = np.random.default_rng(0)
    fine = rng.integers(0, 256, size=(80, 96, 3), dtype=np.uint8)
    fine_lab = rng.integers(0, 4, size=(80, 96), dtype=np.uint8)
    coarse = area_downsample(fine.transpose(2, 0, 1).astype(np.float64), 2).round().astype(np.uint8).transpose(1, 2, 0)
    levels = [(coarse, label_downsample(fine_lab, 2, 4)), (fine, fine_lab)]
    w = PyramidWriter(root, [(40, 48), (80, 96)], rate=2, tile_size=32)
    for lvl, (img, lab) in enumerate(levels):
        for ty, tx, ref in w.tiles(lvl):
            sl = (slice(ref.row, ref.row + ref.height), slice(ref.col, ref.col + ref.width))
            w.write_tile(lvl, ty, tx, img[sl], lab[sl])
    ds = w.finish()
    ds.truth = levels
    return ds


def test_full_ref_reads_entire_level(ramp_ds):
    for lvl, (img, lab) in enumerate(ramp_ds.truth):
        ref = ramp_ds.full_ref(lvl)
        assert np.array_equal(ramp_ds.read_image(ref), img.transpose(2, 0, 1))
        assert np.array_equal(ramp_ds.read_labels(ref), lab)


def test_single_pixel_read(ramp_ds):
    img = ramp_ds.read_image(PatchRef(1, 0, 0, 1, 1))
    assert np.array_equal(img[:, 0, 0], ramp_ds.truth[1][0][0, 0])


def test_overlapping_reads_agree(ramp_ds):
    a = ramp_ds.read_image(PatchRef(1, 10, 20, 40, 50))
    b = ramp_ds.read_image(PatchRef(1, 30, 25, 30, 60))
    assert np.array_equal(a[:, 20:40, 5:50], b[:, 0:20, 0:45])


def test_out_of_bounds_is_rejected(ramp_ds):
    for ref in [PatchRef(1, 70, 0, 11, 4), PatchRef(0, -1, 0, 2, 2), PatchRef(2, 0, 0, 1, 1), PatchRef(0, 0, 0, 0, 3)]:
        with pytest.raises(PatchRangeError):
            ramp_ds.read_image(ref)


def test_manifest_validation(tmp_path, ramp_ds):
    bad = dict(ramp_ds.manifest, dims=[[40, 48], [81, 96]])
    (tmp_path / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(ConfigError):
        PyramidDataset.open(tmp_path)
    with pytest.raises(ConfigError):
        PyramidDataset.open(tmp_path / "missing")


def test_grid_refs_are_aligned(ramp_ds):
    refs = ramp_ds.grid_refs(0, 16)
    assert len(refs) == 2 * 3
    assert refs[1] == PatchRef(0, 0, 16, 16, 16)


# ---------------------------------------------------------------- geometry


class _Dims:
    levels, rate = 3, 2
    dims = [(1000, 1000), (2000, 2000), (4000, 4000)]
    check_ref = PyramidDataset.check_ref


def test_zoom_region_hand_window():
    assert zoom_region(_Dims(), PatchRef(0, 10, 20, 256, 256)) == PatchRef(1, 20, 40, 512, 512)


def test_zoom_full_level(ramp_ds):
    assert zoom_region(ramp_ds, ramp_ds.full_ref(0)) == ramp_ds.full_ref(1)


def test_zoom_past_finest_level(ramp_ds):
    with pytest.raises(MaxMagnificationError):
        zoom_region(ramp_ds, PatchRef(1, 0, 0, 4, 4))


def test_zoom_then_average_matches_parent(ramp_ds):
    ref = PatchRef(0, 8, 12, 16, 20)
    parent = ramp_ds.read_image(ref).astype(np.float64)
    child = ramp_ds.read_image(zoom_region(ramp_ds, ref)).astype(np.float64)
    assert np.abs(area_downsample(child, 2) - parent).mean() / 255 < 1e-2


def test_disjoint_parents_zoom_to_disjoint_windows():
    a = zoom_region(_Dims(), PatchRef(0, 0, 0, 10, 10))
    b = zoom_region(_Dims(), PatchRef(0, 0, 10, 10, 10))
    assert a.col + a.width <= b.col


def test_crop_grid_hand_case():
    g = crop_grid(PatchRef(1, 0, 0, 512, 512), 2)
    assert [c.extent for c in g.children] == [(256, 256)] * 4
    assert [c.origin for c in g.children] == [(0, 0), (0, 256), (256, 0), (256, 256)]
    one = crop_grid(PatchRef(1, 3, 4, 5, 6), 1)
    assert one.children == (PatchRef(1, 3, 4, 5, 6),)
    with pytest.raises(ConfigError):
        crop_grid(PatchRef(0, 0, 0, 5, 4), 2)


@settings(max_examples=60, deadline=None)
@given(r=st.sampled_from([1, 2, 3, 4]), h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 2**16))
def test_crop_stitch_round_trip_is_bitwise(r, h, w, seed):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, 4, size=(r * h, r * w)).astype(np.uint8)
    grid = crop_grid(PatchRef(0, 0, 0, r * h, r * w), r)
    parts = [mask[c.row : c.row + c.height, c.col : c.col + c.width] for c in grid.children]
    out = stitch(grid, parts)
    assert out.dtype == mask.dtype and out.tobytes() == mask.tobytes()


def test_stitch_constant_and_errors():
    grid = crop_grid(PatchRef(0, 0, 0, 4, 4), 2)
    assert np.all(stitch(grid, [np.full((2, 2), 3)] * 4) == 3)
    with pytest.raises(ValidationError):
        stitch(grid, [np.zeros((2, 2))] * 3)
    with pytest.raises(ValidationError):
        stitch(grid, [np.zeros((2, 2))] * 3 + [np.zeros((2, 3))])


def test_label_downsample_vote_and_ties():
    assert label_downsample(np.array([[0, 0], [0, 1]]), 2).tolist() == [[0]]
    assert label_downsample(np.array([[2, 2], [3, 3]]), 2).tolist() == [[3]]
    assert label_downsample(np.array([[1, 0], [2, 3]]), 2, 4).tolist() == [[3]]
    assert np.all(label_downsample(np.full((6, 6), 2), 3) == 2)


@settings(max_examples=40, deadline=None)
@given(r=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_downsample_inverts_replication(r, seed):
    m = np.random.default_rng(seed).integers(0, 4, size=(5, 7))
    assert np.array_equal(label_downsample(label_upsample(m, r), r, 4), m)
