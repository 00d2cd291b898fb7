"""Phantoms, Siddon raytracing, image operations and the projection-matrix cache."""

import numpy as np
import pytest
from scipy import ndimage

from drr_volume_seg.config import DomainShiftSpec, Occluder, PhantomSpec, ProjectionGeometry
from drr_volume_seg.core.rng import RngState
from drr_volume_seg.errors import GeometryError, PhantomError, ShapeError
from drr_volume_seg.imaging import (
    DRRImage,
    MaskVolume,
    RayWeightCache,
    VoxelVolume,
    aligned_geometry,
    apply_domain_shift,
    center_crop,
    denormalize_image,
    depth_mean_projection,
    downsample_image,
    extract_ray_weights,
    from_network_layout,
    generate_phantom,
    generate_ribcage,
    generate_thorax,
    grid_geometry,
    normalize_image,
    project_mask,
    render_network_input,
    siddon_raytrace,
    threshold_mask,
    to_network_layout,
    weight_cache,
)

from conftest import box_mask


def _slab_interval(shape, spacing, start, end):
    """Entry and exit parameters of the segment start->end through the centred (z, y, x) grid."""
    dims_xyz = np.array([shape[2], shape[1], shape[0]])
    spacing_xyz = np.array([spacing[2], spacing[1], spacing[0]])
    half = dims_xyz * spacing_xyz / 2.0
    direction = end - start
    with np.errstate(divide="ignore"):
        t0 = (-half - start) / direction
        t1 = (half - start) / direction
    return float(np.max(np.minimum(t0, t1))), float(np.min(np.maximum(t0, t1)))


def _ray_march(density, spacing, start, end, step=0.002):
    """Midpoint-rule line integral through a (z, y, x) density grid; points are (x, y, z) mm."""
    dims_xyz = np.array([density.shape[2], density.shape[1], density.shape[0]])
    spacing_xyz = np.array([spacing[2], spacing[1], spacing[0]])
    half = dims_xyz * spacing_xyz / 2.0
    direction = end - start
    length = np.linalg.norm(direction)
    lo, hi = _slab_interval(density.shape, spacing, start, end)
    if hi <= lo:
        return 0.0
    n = int(np.ceil((hi - lo) * length / step))
    t = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    points = start[None, :] + t[:, None] * direction[None, :]
    index = np.clip(np.floor((points + half) / spacing_xyz).astype(int), 0, dims_xyz - 1)
    values = density[index[:, 2], index[:, 1], index[:, 0]]
    return float(values.sum() * (hi - lo) * length / n)


def _detector_rays(geom):
    """Yield (row, col, start, end) for an anterior-posterior geometry."""
    rows, cols = geom.detector_shape
    for row in range(rows):
        for col in range(cols):
            r = (row - (rows - 1) / 2.0) * geom.pixel_spacing_mm
            c = (col - (cols - 1) / 2.0) * geom.pixel_spacing_mm
            end = np.array([c, geom.detector_distance_mm, r])
            if geom.mode == "parallel":
                start = np.array([c, -geom.source_distance_mm, r])
            else:
                start = np.array([0.0, -geom.source_distance_mm, 0.0])
            yield row, col, start, end


@pytest.mark.unit
class TestThoraxPhantom:
    def test_deterministic_per_seed(self, thorax_spec):
        a_vol, a_mask = generate_thorax(thorax_spec, 11)
        b_vol, b_mask = generate_thorax(thorax_spec, 11)
        np.testing.assert_array_equal(a_vol.values, b_vol.values)
        np.testing.assert_array_equal(a_mask.values, b_mask.values)

    def test_seeds_differ(self, thorax_spec):
        a, _ = generate_thorax(thorax_spec, 1)
        b, _ = generate_thorax(thorax_spec, 2)
        assert not np.array_equal(a.values, b.values)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_lungs_inside_body_with_lung_hu(self, thorax_spec, seed):
        volume, mask = generate_thorax(thorax_spec, seed)
        assert volume.in_hu_bounds()
        lung = mask.values.astype(bool)
        body = volume.values > thorax_spec.air_hu
        assert lung.any()
        assert not (lung & ~body).any()
        lo, hi = thorax_spec.lung_hu
        assert volume.values[lung].min() >= lo and volume.values[lung].max() <= hi
        fraction = lung.sum() / body.sum()
        assert thorax_spec.lung_fraction_range[0] <= fraction <= thorax_spec.lung_fraction_range[1]

    @pytest.mark.parametrize("seed", [0, 7, 19, 42])
    def test_two_separate_lungs(self, thorax_spec, seed):
        _, mask = generate_thorax(thorax_spec, seed)
        labels, count = ndimage.label(mask.values.astype(bool), structure=np.ones((3, 3, 3)))
        assert count == 2
        centre_x = (thorax_spec.dims[2] - 1) / 2.0
        sides = sorted(np.sign(np.argwhere(labels == k)[:, 2].mean() - centre_x) for k in (1, 2))
        assert sides == [-1.0, 1.0]

    def test_natural_fraction_stays_in_range(self):
        # widened bounds so no seed is rejected
        spec = PhantomSpec(kind="thorax", dims=(32, 32, 32), lung_fraction_range=(0.01, 0.9))
        for seed in range(50):
            volume, mask = generate_thorax(spec, seed)
            fraction = mask.values.sum() / (volume.values > spec.air_hu).sum()
            assert 0.08 < fraction < 0.20, f"seed {seed}: {fraction:.3f}"

    def test_impossible_fraction_rejected(self):
        spec = PhantomSpec(kind="thorax", dims=(32, 32, 32), lung_fraction_range=(0.6, 0.7))
        with pytest.raises(PhantomError):
            generate_thorax(spec, 0)

    def test_dispatch(self, thorax_spec):
        volume, _ = generate_phantom(thorax_spec, 4)
        np.testing.assert_array_equal(volume.values, generate_thorax(thorax_spec, 4)[0].values)


@pytest.mark.unit
class TestRibcagePhantom:
    @pytest.mark.parametrize("seed", [0, 5, 9])
    def test_mask_reproducible_from_volume(self, ribcage_spec, seed):
        volume, mask = generate_ribcage(ribcage_spec, seed)
        np.testing.assert_array_equal(mask.values, threshold_mask(volume, 1800.0, 1900.0).values)

    @pytest.mark.parametrize("seed", [0, 5, 9])
    def test_fine_structure_fraction(self, ribcage_spec, seed):
        volume, mask = generate_ribcage(ribcage_spec, seed)
        fraction = mask.values.mean()
        assert 0.0 < fraction < 0.05
        assert volume.in_hu_bounds()

    def test_deterministic(self, ribcage_spec):
        a, _ = generate_ribcage(ribcage_spec, 3)
        b, _ = generate_ribcage(ribcage_spec, 3)
        np.testing.assert_array_equal(a.values, b.values)

    def test_threshold_bounds_checked(self, ribcage_spec):
        volume, _ = generate_ribcage(ribcage_spec, 0)
        with pytest.raises(PhantomError):
            threshold_mask(volume, 1900.0, 1800.0)


@pytest.mark.unit
class TestDomainShift:
    def _flat(self, hu=0.0, dims=(8, 8, 8)):
        return VoxelVolume(np.full(dims, hu, dtype=np.float32))

    def test_identity(self, thorax_spec):
        volume, _ = generate_thorax(thorax_spec, 0)
        shifted = apply_domain_shift(volume, DomainShiftSpec(), seed=0)
        np.testing.assert_array_equal(shifted.values, volume.values)

    def test_gain_and_offset(self):
        shifted = apply_domain_shift(self._flat(100.0), DomainShiftSpec(gain=0.5, offset=20.0), seed=0)
        np.testing.assert_allclose(shifted.values, 70.0)

    def test_occluder_slab_is_clamped(self):
        occluder = Occluder(start=(6, 0, 0), size=(10, 2, 8), added_hu=800.0)
        shifted = apply_domain_shift(self._flat(), DomainShiftSpec(occluder=occluder), seed=0)
        assert np.all(shifted.values[6:, :2, :] == 800.0)
        assert shifted.values.sum() == pytest.approx(800.0 * 2 * 2 * 8)

    def test_noise_is_seeded_and_clipped(self):
        spec = DomainShiftSpec(noise_sigma=5000.0)
        a = apply_domain_shift(self._flat(), spec, seed=3)
        b = apply_domain_shift(self._flat(), spec, seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.in_hu_bounds()
        assert a.values.min() == -1024.0 and a.values.max() == 3000.0


@pytest.mark.unit
class TestVolumes:
    def test_center_crop_offsets(self):
        values = np.arange(5 * 4 * 6, dtype=np.float32).reshape(5, 4, 6)
        cropped = center_crop(VoxelVolume(values), (2, 4, 3))
        np.testing.assert_array_equal(cropped.values, values[1:3, 0:4, 1:4])

    def test_center_crop_too_large(self):
        with pytest.raises(ShapeError):
            center_crop(MaskVolume(np.zeros((4, 4, 4))), (5, 4, 4))

    def test_rank_checked(self):
        with pytest.raises(ShapeError):
            VoxelVolume(np.zeros((4, 4)))

    def test_density_mapping(self):
        volume = VoxelVolume(np.array([[[-1024.0, -1000.0, 0.0, 1000.0]]]))
        np.testing.assert_allclose(volume.density(), [[[0.0, 0.0, 1.0, 2.0]]])

    def test_mask_is_binary(self):
        assert set(np.unique(MaskVolume(np.array([[[0, 3, -1]]])).values)) <= {0, 1}

    @pytest.mark.parametrize("view", ["ap", "lateral"])
    def test_network_layout_roundtrip(self, view):
        values = np.arange(2 * 3 * 4).reshape(2, 3, 4)
        net = to_network_layout(values, view)
        np.testing.assert_array_equal(from_network_layout(net, view), values)

    def test_ap_layout_puts_y_first(self):
        assert to_network_layout(np.zeros((2, 3, 4)), "ap").shape == (3, 2, 4)


@pytest.mark.unit
class TestSiddon:
    def test_uniform_water_cube(self):
        volume = VoxelVolume(np.zeros((8, 8, 8)))
        image = siddon_raytrace(volume, grid_geometry(volume.dims))
        np.testing.assert_allclose(image.values, 8.0, rtol=1e-6)

    def test_parallel_projection_conserves_mass(self, rng):
        density_hu = rng.uniform((6, 7, 5)) * 1000.0 - 500.0
        volume = VoxelVolume(density_hu, spacing=(2.0, 1.5, 2.0))
        image = siddon_raytrace(volume, grid_geometry(volume.dims, volume.spacing))
        # one ray per (z, x) column; pixel area equals the voxel face
        assert image.values.sum() == pytest.approx(volume.density().sum() * 1.5, rel=1e-5)

    def test_linearity(self, rng):
        geom = ProjectionGeometry(detector_shape=(12, 12), pixel_spacing_mm=1.2, source_distance_mm=60.0)
        weights = extract_ray_weights(geom, (8, 8, 8))
        a = rng.uniform((8, 8, 8))
        b = rng.uniform((8, 8, 8))
        np.testing.assert_allclose(weights.apply(a + 2.0 * b), weights.apply(a) + 2.0 * weights.apply(b), rtol=1e-10)

    @pytest.mark.parametrize("row,col", [(5, 6), (0, 11), (3, 2)])
    def test_cone_ray_matches_ray_march(self, rng, row, col):
        geom = ProjectionGeometry(
            detector_shape=(12, 12), pixel_spacing_mm=1.3, source_distance_mm=40.0, detector_distance_mm=20.0
        )
        spacing = (1.0, 1.0, 1.0)
        density = 0.5 + rng.uniform((8, 8, 8))
        weights = extract_ray_weights(geom, density.shape, spacing)
        r = (row - (geom.detector_shape[0] - 1) / 2.0) * geom.pixel_spacing_mm
        c = (col - (geom.detector_shape[1] - 1) / 2.0) * geom.pixel_spacing_mm
        start = np.array([0.0, -geom.source_distance_mm, 0.0])
        end = np.array([c, geom.detector_distance_mm, r])
        expected = _ray_march(density, spacing, start, end)
        assert weights.apply(density)[row, col] == pytest.approx(expected, rel=5e-3)

    @pytest.mark.parametrize("mode", ["cone", "parallel"])
    def test_ray_lengths_sum_to_chord(self, mode):
        # the outer rays of a 36 mm detector miss the 16 mm cube
        geom = ProjectionGeometry(
            mode=mode, detector_shape=(12, 12), pixel_spacing_mm=3.0, source_distance_mm=40.0, detector_distance_mm=20.0
        )
        shape, spacing = (16, 16, 16), (1.0, 1.0, 1.0)
        weights = extract_ray_weights(geom, shape, spacing)
        misses = 0
        for row, col, start, end in _detector_rays(geom):
            lo, hi = _slab_interval(shape, spacing, start, end)
            chord = max(0.0, hi - lo) * np.linalg.norm(end - start)
            _, lengths = weights.ray(row, col)
            assert abs(lengths.sum() - chord) <= 1e-9
            misses += chord == 0.0
        assert misses > 0

    @pytest.mark.parametrize(
        "geom",
        [
            ProjectionGeometry(
                detector_shape=(16, 16), pixel_spacing_mm=1.2, source_distance_mm=60.0, detector_distance_mm=30.0
            ),
            ProjectionGeometry(
                mode="parallel",
                detector_shape=(16, 16),
                pixel_spacing_mm=0.93,
                source_distance_mm=20.0,
                detector_distance_mm=20.0,
            ),
        ],
        ids=["cone", "parallel"],
    )
    def test_whole_image_matches_ray_march(self, rng, geom):
        spacing = (1.0, 1.0, 1.0)
        density = 0.5 + rng.uniform((16, 16, 16))
        image = extract_ray_weights(geom, density.shape, spacing).apply(density)
        expected = np.zeros(geom.detector_shape)
        for row, col, start, end in _detector_rays(geom):
            expected[row, col] = _ray_march(density, spacing, start, end, step=2e-4)
        # every ray enters the front face and leaves through the back face
        assert expected.min() >= 16 * 0.5
        np.testing.assert_allclose(image, expected, rtol=2e-3)

    def test_missing_rays_have_empty_rows(self):
        geom = ProjectionGeometry(mode="parallel", detector_shape=(4, 4), pixel_spacing_mm=3.0)
        weights = extract_ray_weights(geom, (8, 8, 8))
        chords = weights.chord_lengths()
        assert chords[0, 0] == 0.0
        assert chords[1, 1] == pytest.approx(8.0)
        indices, lengths = weights.ray(0, 0)
        assert indices.size == 0 and lengths.size == 0

    def test_source_inside_volume_rejected(self):
        geom = ProjectionGeometry(source_distance_mm=2.0, detector_shape=(4, 4))
        with pytest.raises(GeometryError):
            extract_ray_weights(geom, (16, 16, 16))

    def test_weights_must_match_volume(self):
        weights = extract_ray_weights(grid_geometry((8, 8, 8)), (8, 8, 8))
        with pytest.raises(GeometryError):
            siddon_raytrace(VoxelVolume(np.zeros((8, 8, 6))), grid_geometry((8, 8, 6)), weights)

    def test_grid_geometry_needs_square_pixels(self):
        with pytest.raises(GeometryError):
            grid_geometry((8, 8, 8), spacing=(1.0, 1.0, 2.0))

    def test_aligned_geometry_covers_target(self):
        geom = aligned_geometry((32, 32, 32), detector_pixels=128)
        assert geom.detector_shape == (128, 128)
        assert geom.pixel_spacing_mm * 128 == pytest.approx(32 * geom.magnification)

    def test_lateral_view_projects_along_x(self):
        values = np.full((4, 6, 8), -1000.0)
        values[:, 2, :] = 0.0
        volume = VoxelVolume(values)
        image = siddon_raytrace(volume, grid_geometry(volume.dims, view="lateral"))
        assert image.dims == (4, 6)
        np.testing.assert_allclose(image.values[:, 2], 8.0)
        np.testing.assert_allclose(image.values[:, 0], 0.0)


@pytest.mark.unit
class TestImageOps:
    def test_integer_downsample_is_box_mean(self, rng):
        values = rng.uniform((8, 6))
        out = downsample_image(DRRImage(values, pixel_spacing=0.5), (4, 3))
        np.testing.assert_allclose(out.values, values.reshape(4, 2, 3, 2).mean(axis=(1, 3)), rtol=1e-6)
        assert out.pixel_spacing == pytest.approx(1.0)

    def test_fractional_downsample_preserves_mean(self, rng):
        values = rng.uniform((5, 7))
        out = downsample_image(DRRImage(values), (2, 3))
        assert out.dims == (2, 3)
        assert out.values.mean() == pytest.approx(values.mean(), rel=1e-5)

    def test_downsample_cannot_upsample(self):
        with pytest.raises(ShapeError):
            downsample_image(DRRImage(np.zeros((4, 4))), (8, 8))

    def test_normalize_and_back(self, rng):
        values = 3.0 + 10.0 * rng.uniform((4, 5))
        normalized = normalize_image(DRRImage(values))
        assert normalized.values.min() == 0.0 and normalized.values.max() == pytest.approx(1.0)
        assert normalized.is_normalized
        np.testing.assert_allclose(denormalize_image(normalized).values, values, rtol=1e-5)

    def test_constant_image_normalizes_to_zero(self):
        normalized = normalize_image(DRRImage(np.full((3, 3), 7.0)))
        np.testing.assert_array_equal(normalized.values, 0.0)
        assert normalized.norm_min == normalized.norm_max == 7.0

    def test_project_mask_box_footprint(self):
        mask = MaskVolume(box_mask((8, 8, 8), 2, 6))
        projection = project_mask(mask)
        expected = np.zeros((8, 8), dtype=np.uint8)
        expected[2:6, 2:6] = 1
        np.testing.assert_array_equal(projection, expected)

    def test_depth_mean_projection(self):
        prob = np.zeros((4, 3, 2))
        prob[0] = 1.0
        np.testing.assert_allclose(depth_mean_projection(prob), 0.25)
        with pytest.raises(ShapeError):
            depth_mean_projection(np.zeros((3, 3)))

    def test_render_network_input(self, thorax_spec):
        volume, _ = generate_thorax(thorax_spec, 0)
        geom = aligned_geometry((32, 32, 32), detector_pixels=64)
        image = render_network_input(volume, geom, (32, 32))
        assert image.dims == (32, 32)
        assert image.values.min() == 0.0 and image.values.max() == pytest.approx(1.0)
        assert image.norm_max > image.norm_min


@pytest.mark.unit
class TestRayWeightCache:
    def test_traces_once(self, tmp_path, mocker):
        spy = mocker.spy(weight_cache, "extract_ray_weights")
        cache = RayWeightCache(str(tmp_path))
        geom = grid_geometry((8, 8, 8))
        first = cache.get_or_compute(geom, (8, 8, 8))
        second = cache.get_or_compute(geom, (8, 8, 8))
        assert spy.call_count == 1
        assert (first.matrix != second.matrix).nnz == 0
        assert second.detector_shape == first.detector_shape

    def test_key_depends_on_geometry(self):
        a = RayWeightCache.key(grid_geometry((8, 8, 8)), (8, 8, 8), (1.0, 1.0, 1.0))
        b = RayWeightCache.key(grid_geometry((8, 8, 8), view="lateral"), (8, 8, 8), (1.0, 1.0, 1.0))
        assert a != b

    def test_unreadable_entry_is_ignored(self, tmp_path):
        cache = RayWeightCache(str(tmp_path))
        key = "deadbeef"
        cache.get_cache_path(key).write_bytes(b"not an npz")
        cache.get_cache_path(key).with_suffix(".json").write_text("{}")
        assert cache.load(key) is None

    def test_clear(self, tmp_path):
        cache = RayWeightCache(str(tmp_path))
        geom = grid_geometry((8, 8, 8))
        cache.get_or_compute(geom, (8, 8, 8))
        key = RayWeightCache.key(geom, (8, 8, 8), (1.0, 1.0, 1.0))
        assert cache.is_cached(key)
        assert cache.clear(key)
        assert not cache.clear(key)
        cache.get_or_compute(geom, (8, 8, 8))
        assert cache.clear_all() == 1
