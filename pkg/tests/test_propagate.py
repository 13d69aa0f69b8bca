import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.optimize import brentq

from pgrefine.errors import DomainError
from pgrefine.geodata import ElevationMap, GridTile, rotate_tile, terrain_profile, tile_coordinates
from pgrefine.propagate import (
    SPEED_OF_LIGHT,
    Heatmap,
    LinkGeometry,
    fresnel_nu,
    fspl_db,
    heatmap_to_png,
    knife_edge_loss_db,
    oracle_truth,
    read_heatmap,
    rough_estimate,
    upsample_bilinear,
    write_heatmap,
)

F = 910e6
LAM = SPEED_OF_LIGHT / F
NO_REFLECT = LinkGeometry(reflection_coeff=0.0)


def flat_map(n=41, cell=1.929, h=0.0):
    return ElevationMap(np.full((n, n), h), cell)


# -- scalar physics ---------------------------------------------------------


def test_fspl_at_one_wavelength():
    assert fspl_db(LAM, F) == pytest.approx(20 * math.log10(4 * math.pi), abs=1e-12)
    assert fspl_db(LAM, F) == pytest.approx(21.98, abs=0.005)


def test_fspl_100m_910mhz():
    # frozen from 20*log10(4*pi*100*910e6/299792458)
    assert fspl_db(100.0, 910e6) == pytest.approx(71.628611, abs=1e-6)


@given(d=st.floats(1e-3, 1e6))
def test_fspl_doubling(d):
    assert fspl_db(2 * d, F) - fspl_db(d, F) == pytest.approx(20 * math.log10(2), abs=1e-9)


def test_fspl_domain():
    with pytest.raises(DomainError):
        fspl_db(0.0, F)
    with pytest.raises(DomainError):
        fspl_db(10.0, -1.0)


def test_fresnel_examples():
    assert fresnel_nu(0.0, 5.0, 7.0, LAM) == 0.0
    assert fresnel_nu(10.0, 1000.0, 1000.0, 0.3294) == pytest.approx(1.1019, abs=1e-4)
    assert fresnel_nu(-3.0, 20.0, 50.0, LAM) == -fresnel_nu(3.0, 20.0, 50.0, LAM)
    with pytest.raises(DomainError):
        fresnel_nu(1.0, 0.0, 1.0, LAM)


def test_knife_edge_examples():
    assert knife_edge_loss_db(0.0) == pytest.approx(6.03, abs=0.01)
    assert knife_edge_loss_db(-0.78 + 1e-12) == pytest.approx(0.0, abs=0.05)
    assert knife_edge_loss_db(-0.78) == 0.0
    assert knife_edge_loss_db(-5.0) == 0.0


@given(a=st.floats(-0.78, 50), b=st.floats(-0.78, 50))
def test_knife_edge_monotone(a, b):
    lo, hi = sorted((a, b))
    assert knife_edge_loss_db(lo) <= knife_edge_loss_db(hi) + 1e-12


def test_wavelength_invariant():
    g = LinkGeometry(frequency_hz=2.4e9)
    assert g.wavelength_m * g.frequency_hz == pytest.approx(SPEED_OF_LIGHT, rel=1e-6)
    with pytest.raises(DomainError):
        LinkGeometry(frequency_hz=0.0)
    with pytest.raises(DomainError):
        LinkGeometry(tx_height_agl_m=-1.0)


# -- generators -------------------------------------------------------------


def pixel_slant(emap, tx, geom, n):
    x, y = tile_coordinates(tx, n, emap.cell_size_m)
    d = np.maximum(np.hypot(x - tx[0], y - tx[1]), emap.cell_size_m / 2)
    return np.hypot(d, geom.rx_height_agl_m - geom.tx_height_agl_m)


def test_flat_rough_is_fspl():
    m = flat_map()
    tx = m.cell_center(20, 20)
    hm = rough_estimate(m, tx, NO_REFLECT, tile_px=40, coarse_factor=1)
    expect = -fspl_db(pixel_slant(m, tx, NO_REFLECT, 40), F)
    np.testing.assert_allclose(hm.values[hm.mask], expect[hm.mask], atol=1e-9)
    assert hm.generator == "rough"


def test_flat_rough_coarse_radially_symmetric():
    m = flat_map(n=61)
    tx = m.cell_center(30, 30)
    hm = rough_estimate(m, tx, NO_REFLECT, tile_px=40, coarse_factor=4)
    v = hm.values
    k = 20
    # mirror pairs about the TX pixel with both sides valid
    np.testing.assert_allclose(v[k + 4, k + 8], v[k - 4, k - 8], atol=1e-9)
    np.testing.assert_allclose(v[k + 8, k], v[k, k + 8], atol=1e-9)


def test_flat_oracle_without_reflection_matches_rough_dense():
    m = flat_map()
    tx = m.cell_center(20, 20)
    a = oracle_truth(m, tx, NO_REFLECT, tile_px=40)
    b = rough_estimate(m, tx, NO_REFLECT, tile_px=40, coarse_factor=1)
    np.testing.assert_array_equal(a.mask, b.mask)
    np.testing.assert_allclose(a.values, b.values, atol=1e-9)
    assert a.generator == "oracle"


def two_ray_closed_form(d, ht=2.0, hr=1.5, gamma=-0.9):
    dd = math.hypot(d, ht + hr) - math.hypot(d, ht - hr)
    return 20 * math.log10(abs(1 + gamma * np.exp(-2j * math.pi * dd / LAM)))


def test_two_ray_lobes_on_flat_map():
    cell = 1.0
    m = flat_map(n=161, cell=cell)
    tx = m.cell_center(80, 80)
    geom = LinkGeometry()
    hm = oracle_truth(m, tx, geom, tile_px=160)
    fs = -fspl_db(pixel_slant(m, tx, geom, 160), F)
    gain = hm.values - fs
    k = 80
    # path difference of lambda/2 -> constructive (Gamma < 0), lambda -> deep fade
    def dist_for(delta):
        return brentq(lambda d: math.hypot(d, 3.5) - math.hypot(d, 0.5) - delta, 0.1, 1e4)

    d_peak = dist_for(LAM / 2)
    d_null = dist_for(LAM)
    assert 36.0 < d_peak < 37.0 and 17.0 < d_null < 18.5
    for d in (d_peak, d_null, 55.5):
        j = k + int(round(d / cell))
        horiz = (j - k) * cell
        assert gain[k, j] == pytest.approx(two_ray_closed_form(horiz), abs=1e-9)
    j_peak = k + int(round(d_peak))
    assert gain[k, j_peak] == pytest.approx(20 * math.log10(1.9), abs=0.05)
    j_null = k + int(round(d_null))
    assert gain[k, j_null] < -10.0
    assert np.max(gain[hm.mask]) <= 20 * math.log10(1.9) + 1e-9


def wall_map(n=61, cell=2.0, wall_col=38, height=30.0):
    h = np.zeros((n, n))
    h[:, wall_col] = height
    return ElevationMap(h, cell)


def single_link_loss(emap, tx, rx, geom):
    """Independent scalar single-edge calculator over a sampled profile."""
    cell = emap.cell_size_m
    D = math.hypot(rx[0] - tx[0], rx[1] - tx[1])
    n = max(16, math.ceil(D / cell) + 1)
    prof = terrain_profile(emap, tx, rx, n)
    ht = prof.heights_m[0] + geom.tx_height_agl_m
    hr = prof.heights_m[-1] + geom.rx_height_agl_m
    best = -math.inf
    for i in range(1, n - 1):
        d1 = prof.distances_m[i]
        d2 = D - d1
        line = ht + (hr - ht) * d1 / D
        best = max(best, fresnel_nu(prof.heights_m[i] - line, d1, d2, geom.wavelength_m))
    slant = math.hypot(D, hr - ht)
    return -(fspl_db(slant, geom.frequency_hz) + knife_edge_loss_db(best))


def test_rough_shadowed_pixels_match_scalar_calculator():
    m = wall_map()
    tx = m.cell_center(30, 30)
    hm = rough_estimate(m, tx, NO_REFLECT, tile_px=50, coarse_factor=1)
    x, y = tile_coordinates(tx, 50, m.cell_size_m)
    picks = [(25, 40), (25, 45), (20, 44), (33, 48), (10, 42)]
    for i, j in picks:
        expect = single_link_loss(m, tx, (x[i, j], y[i, j]), NO_REFLECT)
        assert hm.values[i, j] == pytest.approx(expect, abs=1e-9)
    # those pixels sit behind the wall and are well below free space
    assert hm.values[25, 45] < -fspl_db(pixel_slant(m, tx, NO_REFLECT, 50)[25, 45], F) - 15


def test_stacked_edges_not_better_than_single():
    one = wall_map()
    h = one.heights.copy()
    h[:, 34] = 20.0
    two = ElevationMap(h, 2.0)
    tx = one.cell_center(30, 30)
    a = oracle_truth(one, tx, NO_REFLECT, tile_px=50)
    b = oracle_truth(two, tx, NO_REFLECT, tile_px=50)
    behind = a.mask.copy()
    behind[:, :35] = False
    assert np.all(b.values[behind] <= a.values[behind] + 1e-9)


def test_oracle_not_above_rough_plus_slack():
    rng = np.random.default_rng(5)
    h = rng.uniform(0, 3, size=(70, 70))
    h[20:30, 40:52] = 25.0
    h[45:50, 10:30] = 15.0
    m = ElevationMap(h, 1.929)
    tx = m.cell_center(35, 35)
    o = oracle_truth(m, tx, NO_REFLECT, tile_px=60)
    r = rough_estimate(m, tx, NO_REFLECT, tile_px=60, coarse_factor=1)
    assert np.all(o.values[o.mask] <= r.values[o.mask] + 6.0)


def test_fspl_monotone_along_clear_radial():
    m = flat_map(n=81)
    tx = m.cell_center(40, 40)
    hm = oracle_truth(m, tx, NO_REFLECT, tile_px=80)
    row = hm.values[40, 40:]
    assert np.all(np.diff(row) <= 1e-12)
    diag = hm.values[np.arange(40, 80), np.arange(40, 80)]
    assert np.all(np.diff(diag) <= 1e-12)


def test_tx_outside_map():
    m = flat_map()
    with pytest.raises(DomainError):
        oracle_truth(m, (-5.0, 3.0), NO_REFLECT, tile_px=10)
    with pytest.raises(DomainError):
        rough_estimate(m, (1e4, 3.0), NO_REFLECT, tile_px=10)
    with pytest.raises(DomainError):
        rough_estimate(m, m.cell_center(5, 5), NO_REFLECT, tile_px=10, coarse_factor=3)


def test_generators_deterministic():
    m = wall_map()
    tx = m.cell_center(30, 30)
    g = LinkGeometry()
    a = oracle_truth(m, tx, g, tile_px=30)
    b = oracle_truth(m, tx, g, tile_px=30)
    assert a.values.tobytes() == b.values.tobytes()


def city(seed, n=64):
    rng = np.random.default_rng(seed)
    h = rng.uniform(0, 2, size=(n, n))
    for _ in range(5):
        r, c = rng.integers(0, n - 8, size=2)
        h[r : r + rng.integers(3, 8), c : c + rng.integers(3, 8)] = rng.uniform(6, 30)
    return ElevationMap(h, 1.929)


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("gen", ["oracle", "rough"])
def test_quarter_turn_equivariance(gen, k):
    m = city(k)
    n = m.width_px
    r0, c0 = 30, 27
    tx = m.cell_center(r0, c0)
    geom = LinkGeometry()
    # np.rot90 moves cell (r, c) to (n-1-c, r)
    rm = ElevationMap(np.rot90(m.heights, k), m.cell_size_m)
    r, c = r0, c0
    for _ in range(k):
        r, c = n - 1 - c, r
    rtx = rm.cell_center(r, c)
    if gen == "oracle":
        a = oracle_truth(m, tx, geom, tile_px=40)
        b = oracle_truth(rm, rtx, geom, tile_px=40)
    else:
        # 60/4 = 15 coarse nodes, a lattice symmetric about the TX pixel
        a = rough_estimate(m, tx, geom, tile_px=60, coarse_factor=4)
        b = rough_estimate(rm, rtx, geom, tile_px=60, coarse_factor=4)
    t = a.tile
    for _ in range(k):
        t = rotate_tile(t, 90.0)
    both = t.mask & b.mask
    assert both.sum() > 0.9 * t.mask.sum()
    np.testing.assert_array_equal(t.mask[1:, 1:], b.mask[1:, 1:])
    np.testing.assert_allclose(t.values[both], b.values[both], rtol=0, atol=1e-9)


# -- upsampling -------------------------------------------------------------


def test_upsample_identity():
    t = GridTile(np.arange(9.0).reshape(3, 3), np.ones((3, 3), bool), 4.0)
    u = upsample_bilinear(t, 1)
    np.testing.assert_array_equal(u.values, t.values)
    assert u.cell_size_m == 4.0


@given(c=st.floats(-300, 0), factor=st.integers(1, 6), n=st.integers(1, 6))
def test_upsample_constant(c, factor, n):
    t = GridTile(np.full((n, n), c), np.ones((n, n), bool), 1.0)
    u = upsample_bilinear(t, factor)
    assert u.size_px == n * factor
    np.testing.assert_allclose(u.values, c, rtol=1e-12, atol=1e-12)
    assert u.mask.all()


def test_upsample_linear_field():
    t = GridTile(np.array([[0.0, 2.0], [2.0, 4.0]]), np.ones((2, 2), bool), 1.0)
    u = upsample_bilinear(t, 2)
    # rows/cols 0..3 read coarse coordinates 0, .5, 1, 1 (clamped)
    assert u.values[0, 1] == pytest.approx(1.0)
    assert u.values[1, 1] == pytest.approx(2.0)
    assert u.values[1, 2] == pytest.approx(3.0)
    assert u.values[3, 3] == 4.0


def test_upsample_mask_requires_all_contributors():
    mask = np.ones((3, 3), bool)
    mask[1, 1] = False
    t = GridTile(np.zeros((3, 3)), mask, 1.0)
    u = upsample_bilinear(t, 2)
    assert not u.mask[2, 2]  # sits exactly on the invalid node
    assert not u.mask[1, 1]  # halfway between (0,0) and (1,1)
    assert u.mask[0, 0]
    assert u.mask[0, 4] and u.mask[4, 0]
    with pytest.raises(DomainError):
        upsample_bilinear(t, 0)


# -- serialisation ----------------------------------------------------------


def test_heatmap_roundtrip_clamps(tmp_path):
    vals = np.array([[-20.0, -100.0], [-400.0, -75.5]])
    mask = np.array([[True, True], [True, False]])
    hm = Heatmap(GridTile(np.where(mask, vals, 0.0), mask, 1.5), "oracle")
    write_heatmap(hm, tmp_path / "h.pgt")
    back = read_heatmap(tmp_path / "h.pgt", 1.5, "oracle")
    np.testing.assert_array_equal(back.mask, mask)
    assert back.values[mask].tolist() == [-50.0, -100.0, -250.0]


def test_heatmap_png(tmp_path):
    vals = np.array([[-250.0, -50.0], [-150.0, -60.0]])
    mask = np.array([[True, True], [True, False]])
    heatmap_to_png(Heatmap(GridTile(np.where(mask, vals, 0.0), mask, 1.0), "rough"), tmp_path / "h.png")
    img = np.asarray(Image.open(tmp_path / "h.png"))
    # bottom-up tile rows are flipped into top-down image rows
    assert img.tolist() == [[128, 0], [0, 255]]


def test_heatmap_generator_tag():
    with pytest.raises(DomainError):
        Heatmap(GridTile(np.zeros((1, 1)), np.ones((1, 1), bool), 1.0), "raytracer")


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000))
def test_valid_values_finite_nonpositive(seed):
    m = city(seed, n=40)
    hm = oracle_truth(m, m.cell_center(20, 20), LinkGeometry(), tile_px=30)
    v = hm.values[hm.mask]
    assert np.all(np.isfinite(v)) and np.all(v <= 0)
