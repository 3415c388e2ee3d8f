import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pano import projection as PR
from pano.errors import ConfigError, DimensionError, GeometryError
from pano.tensor import Tensor

RAD = math.radians


def point_on_plane(x, y, center):
    """Independent oracle: tangent-plane point to (lat, lon) via 3-D vectors."""
    lat0, lon0 = center
    c = np.array([math.cos(lat0) * math.cos(lon0), math.cos(lat0) * math.sin(lon0), math.sin(lat0)])
    east = np.array([-math.sin(lon0), math.cos(lon0), 0.0])
    north = np.cross(c, east)
    p = c + x * east + y * north
    p /= np.linalg.norm(p)
    return math.asin(p[2]), math.atan2(p[1], p[0])


def random_directions(n, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.arcsin(v[:, 2]), np.arctan2(v[:, 1], v[:, 0])


# -- layout ------------------------------------------------------------------------
def test_default_layout_has_eighteen_centres():
    assert len(PR.default_layout().centers) == 18


def test_equatorial_row_longitudes():
    lons = sorted(round(math.degrees(lon)) for lat, lon in PR.default_layout().centers if lat == 0.0)
    assert lons == [-180, -120, -60, 0, 60, 120]


def test_off_equator_rows_are_staggered():
    centers = PR.default_layout().centers
    for row_lat in (RAD(-45), RAD(45)):
        lons = sorted(round(math.degrees(lon)) for lat, lon in centers if lat == pytest.approx(row_lat))
        assert lons == [-150, -90, -30, 30, 90, 150]


def test_default_layout_covers_random_directions():
    lat, lon = random_directions(10_000, 0)
    assert PR.layout_coverage(PR.default_layout(), lat, lon).min() >= 1


def test_default_layout_covers_the_poles():
    for lat in (math.pi / 2, -math.pi / 2):
        assert PR.layout_coverage(PR.default_layout(), np.array([lat]), np.array([0.3]))[0] >= 1


def test_layout_rejects_hemisphere_fov():
    with pytest.raises(GeometryError):
        PR.TangentLayout(((0.0, 0.0),), math.pi)


def test_unknown_layout_name():
    with pytest.raises(ConfigError):
        PR.get_layout("icosahedron")


# -- gnomonic maps ----------------------------------------------------------------------
def test_plane_origin_maps_to_centre():
    for center in [(0.0, 0.0), (RAD(45), RAD(10)), (RAD(-30), RAD(-170))]:
        lat, lon = PR.gnomonic_inverse(0.0, 0.0, center)
        assert float(lat) == center[0] and float(lon) == pytest.approx(center[1], abs=1e-15)


def test_centre_pixel_of_odd_patch_maps_to_centre():
    center = (RAD(20), RAD(-40))
    x, y = PR.plane_coords(RAD(80), (65, 65))
    lat, lon = PR.gnomonic_inverse(x[32, 32], y[32, 32], center)
    assert abs(float(lat) - center[0]) < 1e-12 and abs(float(lon) - center[1]) < 1e-12


def test_equatorial_plane_point():
    lat, lon = PR.gnomonic_inverse(math.tan(RAD(30)), 0.0, (0.0, 0.0))
    assert abs(float(lat)) < 1e-15
    assert float(lon) == pytest.approx(RAD(30), abs=1e-15)


def test_off_equator_plane_point_matches_vector_oracle():
    center = (RAD(45), RAD(10))
    lat, lon = PR.gnomonic_inverse(0.2, -0.3, center)
    ref_lat, ref_lon = point_on_plane(0.2, -0.3, center)
    assert abs(float(lat) - ref_lat) < 1e-9
    assert abs(float(lon) - ref_lon) < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1.5, 1.5),
    st.floats(-math.pi, math.pi),
    st.floats(-2.0, 2.0),
    st.floats(-2.0, 2.0),
)
def test_inverse_agrees_with_vector_oracle(lat0, lon0, x, y):
    lat, lon = PR.gnomonic_inverse(x, y, (lat0, lon0))
    ref_lat, ref_lon = point_on_plane(x, y, (lat0, lon0))
    assert abs(float(lat) - ref_lat) < 1e-9
    dlon = (float(lon) - ref_lon + math.pi) % (2 * math.pi) - math.pi
    assert abs(dlon) * math.cos(ref_lat) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-math.pi, math.pi), st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_forward_inverse_round_trip(lat0, lon0, x, y):
    lat, lon = PR.gnomonic_inverse(x, y, (lat0, lon0))
    x2, y2, cos_c = PR.gnomonic_forward(lat, lon, (lat0, lon0))
    assert cos_c > 0
    assert abs(float(x2) - x) < 1e-6 and abs(float(y2) - y) < 1e-6


def test_grid_round_trip_for_every_layout_patch():
    layout = PR.default_layout()
    x, y = PR.plane_coords(layout.patch_fov, layout.patch_size)
    for center in layout.centers:
        lat, lon = PR.gnomonic_inverse(x, y, center)
        x2, y2, _ = PR.gnomonic_forward(lat, lon, center)
        assert np.abs(x2 - x).max() < 1e-6 and np.abs(y2 - y).max() < 1e-6


def test_grid_rejects_wide_fov_and_polar_centre():
    with pytest.raises(GeometryError):
        PR.gnomonic_grid((0.0, 0.0), math.pi, (8, 8), (16, 32))
    with pytest.raises(GeometryError):
        PR.gnomonic_grid((math.pi / 2, 0.0), RAD(60), (8, 8), (16, 32))


def test_grid_coordinates_in_range_and_cached():
    g = PR.gnomonic_grid((RAD(80), RAD(100)), RAD(90), (16, 16), (32, 64))
    assert np.all((g.u >= 0) & (g.u < 64))
    assert np.all((g.v >= 0) & (g.v <= 31))
    again = PR.gnomonic_grid((RAD(80), RAD(100)), RAD(90), (16, 16), (32, 64))
    assert again is g
    assert not g.u.flags.writeable


def test_erp_pixel_convention():
    lon, lat = PR.erp_lonlat(4, 8)
    assert lon[0, 0] == pytest.approx(2 * math.pi * 0.5 / 8 - math.pi)
    assert lat[0, 0] == pytest.approx(math.pi / 2 - math.pi * 0.5 / 4)
    u, v = PR.lonlat_to_uv(lon, lat, (4, 8))
    np.testing.assert_allclose(u, np.tile(np.arange(8.0), (4, 1)), atol=1e-12)
    np.testing.assert_allclose(v, np.tile(np.arange(4.0)[:, None], (1, 8)), atol=1e-12)


# -- sampling ------------------------------------------------------------------------------
def test_constant_image_projects_to_constant():
    img = np.full((3, 32, 64), 0.25, np.float32)
    for grid in PR.layout_grids(PR.default_layout(patch_size=(16, 16)), (32, 64)):
        np.testing.assert_allclose(PR.project(img, grid).data, 0.25, atol=1e-7)


def test_all_ones_partition_of_unity_for_random_grids():
    img = np.ones((1, 16, 48))
    rng = np.random.default_rng(1)
    for _ in range(50):
        center = (rng.uniform(-1.4, 1.4), rng.uniform(-math.pi, math.pi))
        grid = PR.gnomonic_grid(center, rng.uniform(0.2, 2.5), (9, 11), (16, 48))
        assert np.abs(PR.project(img, grid).data - 1.0).max() <= 1e-6


def test_integer_grid_copies_pixels():
    img = np.random.default_rng(2).random((3, 8, 16)).astype(np.float32)
    u = np.array([[0.0, 5.0, 15.0]])
    v = np.array([[0.0, 3.0, 7.0]])
    grid = PR.SampleGrid(u, v, np.ones(u.shape, bool), (8, 16))
    out = PR.project(img, grid).data
    np.testing.assert_array_equal(out[:, 0], img[:, [0, 3, 7], [0, 5, 15]])


def test_longitude_wraps_between_last_and_first_column():
    img = np.zeros((1, 2, 8))
    img[0, :, 7] = 1.0
    grid = PR.SampleGrid(np.array([[7.5]]), np.array([[0.0]]), np.ones((1, 1), bool), (2, 8))
    assert PR.project(img, grid).data[0, 0, 0] == pytest.approx(0.5)


def test_smooth_image_matches_analytic_values():
    h, w = 64, 256
    lon, lat = PR.erp_lonlat(h, w)
    img = (0.5 + 0.5 * np.sin(lat) * np.cos(lon))[None]
    center = (RAD(20), RAD(30))
    grid = PR.gnomonic_grid(center, RAD(60), (16, 16), (h, w))
    x, y = PR.plane_coords(RAD(60), (16, 16))
    plat, plon = PR.gnomonic_inverse(x, y, center)
    ref = 0.5 + 0.5 * np.sin(plat) * np.cos(plon)
    assert np.abs(PR.project(img, grid).data[0] - ref).max() < 1e-3


def test_label_projection_is_nearest_neighbour():
    labels = np.arange(32, dtype=np.uint8).reshape(4, 8)
    grid = PR.SampleGrid(np.array([[1.4, 1.6, 7.6]]), np.array([[0.4, 2.6, 1.0]]), np.ones((1, 3), bool), (4, 8))
    assert PR.project_labels(labels, grid).tolist() == [[1, 26, 8]]


def test_project_tp_shape():
    out = PR.project_tp(np.zeros((3, 32, 64)), PR.default_layout(patch_size=(8, 8)))
    assert out.shape == (18, 3, 8, 8)


def test_project_rejects_mismatched_dims():
    grid = PR.gnomonic_grid((0.0, 0.0), 1.0, (4, 4), (8, 16))
    with pytest.raises(DimensionError):
        PR.project(np.zeros((3, 8, 32)), grid)


# -- fixed-FoV slabs ------------------------------------------------------------------------
def test_erp_to_ffp_shapes():
    slabs = PR.erp_to_ffp(PR.ErpImage(np.zeros((3, 128, 512), np.float32)))
    assert [s.shape for s in slabs] == [(3, 128, 128)] * 4


def test_slab_zero_holds_first_columns():
    x = np.tile(np.arange(512, dtype=np.float32), (3, 4, 1))
    np.testing.assert_array_equal(PR.erp_to_ffp(x)[0][0, 0], np.arange(128))


def test_slab_longitude_ranges():
    lon, _ = PR.erp_lonlat(2, 16)
    for k, slab in enumerate(PR.erp_to_ffp(lon[None])):
        assert slab.min() >= RAD(-180 + 90 * k) and slab.max() < RAD(-90 + 90 * k)


def test_stitch_of_constant_slabs_is_stepwise():
    out = PR.stitch_ffp([np.full((1, 2, 3), v) for v in (1, 2, 3, 4)])
    assert out[0, 0].tolist() == [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 8), st.sampled_from(PR.SUPPORTED_FFP_FOVS))
def test_stitch_split_identity_bit_exact(c, h, q, fov):
    n = math.ceil(360 / fov)
    x = np.random.default_rng(c * 100 + h).normal(size=(c, h, q * n)).astype(np.float32)
    assert PR.stitch_ffp(PR.ffp_split(x, fov)).tobytes() == x.tobytes()
    t = PR.stitch_ffp(PR.ffp_split(Tensor(x), fov))
    assert t.data.tobytes() == x.tobytes()


def test_stitch_rejects_mismatched_heights():
    with pytest.raises(DimensionError):
        PR.stitch_ffp([np.zeros((3, 4, 2)), np.zeros((3, 5, 2))])


def test_erp_width_must_divide_by_four():
    with pytest.raises(DimensionError):
        PR.ErpImage(np.zeros((3, 8, 10), np.float32))
    with pytest.raises(DimensionError):
        PR.erp_to_ffp(np.zeros((3, 8, 10)))


@pytest.mark.parametrize("fov,count", [(60, 6), (72, 5), (90, 4), (120, 3), (180, 2), (360, 1)])
def test_ffp_grid_slab_counts(fov, count):
    grids = PR.ffp_grid_for_fov(fov, (8, 480))
    assert len(grids) == count
    assert all(g.shape == (8, 480 // count) for g in grids)


def test_ffp_grid_for_ninety_equals_slicing():
    img = np.random.default_rng(3).random((3, 8, 32)).astype(np.float32)
    for grid, slab in zip(PR.ffp_grid_for_fov(90, (8, 32)), PR.erp_to_ffp(img)):
        np.testing.assert_array_equal(PR.project(img, grid).data, slab)


def test_ffp_full_circle_is_whole_erp():
    img = np.random.default_rng(4).random((3, 8, 32)).astype(np.float32)
    (grid,) = PR.ffp_grid_for_fov(360, (8, 32))
    np.testing.assert_array_equal(PR.project(img, grid).data, img)


def test_unsupported_fov_is_config_error():
    with pytest.raises(ConfigError):
        PR.ffp_grid_for_fov(100, (8, 32))
    with pytest.raises(ConfigError):
        PR.ffp_split(np.zeros((3, 8, 32)), 45)
