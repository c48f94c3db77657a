import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cocgrade import features as F
from cocgrade.errors import EmptyRegion, InvalidData, ValidationError
from cocgrade.grades import Grade
from cocgrade.raster import Circle, Contour, RasterImage, circle_points, rasterize_circle
from cocgrade.segmentation import Segmentation, segment
from cocgrade.synthdata import PhantomSpec, generate


def make_seg(outer, nucleus, w, h):
    om = rasterize_circle(outer, w, h)
    return Segmentation(outer, nucleus, om, rasterize_circle(nucleus, w, h) & om,
                        Contour(circle_points(outer, 16)), True, 1)


SEG = make_seg(Circle(128, 128, 40), Circle(128, 128, 20), 256, 256)


def test_layout_shape():
    assert F.N_FEATURES == len(F.LAYOUT) == 31
    assert all(s.group == "contour" for s in F.LAYOUT[:15])
    assert all(s.group == "texture" for s in F.LAYOUT[15:])
    assert F.COLUMN_NAMES[0] == "f01" and F.COLUMN_NAMES[-1] == "f31"
    assert len({s.name for s in F.LAYOUT}) == 31


def test_concentric_geometry():
    f = F.contour_features(RasterImage(np.full((256, 256), 0.3)), SEG)
    assert f[2] == 0.5
    assert f[3] == pytest.approx(math.pi * 1600 / 256 ** 2, abs=2e-4)
    assert f[0] == 40 / 256 and f[1] == 20 / 256
    assert f[5] == pytest.approx(88 / 128)


def test_uniform_annulus():
    f = F.contour_features(RasterImage(np.full((256, 256), 0.6)), SEG)
    assert f[6] == pytest.approx(0.6, abs=1e-15) and f[7] == pytest.approx(0, abs=1e-15)
    assert f[11] == f[12] == f[13] == f[14] == 0


def test_constant_image_texture():
    t = F.texture_features(RasterImage(np.full((256, 256), 0.4)), SEG)
    assert np.all(t[:6] == 0)
    # every comparison is a tie, so all patterns land in one uniform bin
    assert t[6] == 1 and t[7] == 0 and t[8] == 1 and t[9] == 0
    assert np.allclose(t[10:], 0, atol=1e-15)


def test_constant_image_single_lbp_bin():
    codes = F.lbp_codes(np.full((5, 5), 0.2))
    assert np.all(codes == 255)
    hist = F.lbp_histogram(codes, np.ones((5, 5), bool))
    assert hist.max() == 1.0


def brute_lbp(arr, r, c):
    h, w = arr.shape
    code = 0
    for k, (dx, dy) in enumerate(F.LBP_OFFSETS):
        rr, cc = min(max(r + dy, 0), h - 1), min(max(c + dx, 0), w - 1)
        code += (arr[rr, cc] >= arr[r, c]) << k
    return code


def test_lbp_hand_patch():
    nb = (0.6, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.6)
    patch = np.full((3, 3), 0.5)
    for v, (dx, dy) in zip(nb, F.LBP_OFFSETS):
        patch[1 + dy, 1 + dx] = v
    code = int(F.lbp_codes(patch)[1, 1])
    assert bin(code).count("1") == 2
    assert F.UNIFORM_LUT[code] != 58


@given(arrays(float, (6, 7), elements=st.floats(0, 1)))
def test_lbp_matches_brute_force(arr):
    codes = F.lbp_codes(arr)
    for r in range(6):
        for c in range(7):
            assert codes[r, c] == brute_lbp(arr, r, c)


def test_uniform_lut():
    def trans(c):
        return sum(((c >> k) & 1) != ((c >> ((k + 1) % 8)) & 1) for k in range(8))
    uniform = [c for c in range(256) if trans(c) <= 2]
    assert len(uniform) == 58
    assert list(F.UNIFORM_LUT[uniform]) == list(range(58))
    assert all(F.UNIFORM_LUT[c] == 58 for c in range(256) if c not in uniform)


def test_integral_image_box_sums(rng):
    arr = rng.random((13, 11))
    ii = F.IntegralImage(arr)
    for _ in range(50):
        x0, x1 = sorted(rng.integers(0, 12, 2))
        y0, y1 = sorted(rng.integers(0, 14, 2))
        assert ii.box_sum(x0, y0, x1, y1) == pytest.approx(arr[y0:y1, x0:x1].sum(), abs=1e-12)


def test_haar_half_plane():
    arr = np.zeros((64, 64))
    arr[:, 32:] = 0.8
    r = F.haar_responses(F.IntegralImage(arr), 32, 32, 32, 64, 64)
    assert r[0] == pytest.approx(0.4)
    assert r[2] == pytest.approx(0.4)
    assert r[1] == pytest.approx(0) and r[3] == pytest.approx(0) and r[5] == pytest.approx(0)


def test_haar_three_rect_and_checker():
    arr = np.zeros((60, 60))
    arr[:, 20:40] = 0.9
    r = F.haar_responses(F.IntegralImage(arr), 30, 30, 60, 60, 60)
    assert r[4] == pytest.approx(0.6)
    chk = np.zeros((40, 40))
    chk[:20, :20] = chk[20:, 20:] = 1
    assert F.haar_responses(F.IntegralImage(chk), 20, 20, 40, 40, 40)[5] == pytest.approx(0.5)


def brute_otsu(values, bins=256):
    lo, hi = values.min(), values.max()
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    best, best_t = -1, None
    for k in range(bins):
        w0, w1 = hist[:k + 1].sum(), hist[k + 1:].sum()
        if w0 == 0 or w1 == 0:
            v = 0.0
        else:
            m0 = (hist[:k + 1] * centers[:k + 1]).sum() / w0
            m1 = (hist[k + 1:] * centers[k + 1:]).sum() / w1
            v = w0 * w1 * (m0 - m1) ** 2
        if v > best + 1e-12 * max(1.0, abs(v)):
            best, best_t = v, edges[k + 1]
    return best_t


def test_otsu_against_brute_force(rng):
    for _ in range(10):
        v = np.concatenate([rng.normal(0.2, 0.05, 300), rng.normal(0.7, 0.08, 200)])
        assert F.otsu_threshold(v) == pytest.approx(brute_otsu(v))
    assert F.otsu_threshold(np.full(10, 0.3)) == 0.3


def test_energy_entropy():
    p = np.full(4, 0.25)
    assert F.histogram_energy_entropy(p) == (0.25, 2.0)


@pytest.fixture(scope="module")
def phantom_pair():
    a = generate(PhantomSpec(Grade.A, seed=3))
    c = generate(PhantomSpec(Grade.C, seed=3))
    return (a, segment(a.image)), (c, segment(c.image))


def test_extract_total_and_deterministic(phantom_pair):
    (a, seg), _ = phantom_pair
    v1, v2 = F.extract(a.image, seg), F.extract(a.image, seg)
    assert v1 == v2 and v1.values.shape == (31,) and np.all(np.isfinite(v1.values))
    assert v1.layout_version == F.LAYOUT_VERSION


def test_grade_a_outer_radius_exceeds_c(phantom_pair):
    (a, sa), (c, sc) = phantom_pair
    assert F.extract(a.image, sa).values[0] > F.extract(c.image, sc).values[0]


def test_ranges(phantom_pair):
    for ph, seg in phantom_pair:
        v = F.extract(ph.image, seg).values
        assert 0 < v[2] < 1
        assert 0 <= v[3] <= 1 and 0 <= v[4] <= 1 and 0 <= v[14] <= 1
        assert v[22] >= 0 and v[24] >= 0 and 0 < v[21] <= 1 and 0 < v[23] <= 1


@given(st.integers(0, 2 ** 32 - 1))
def test_geometry_ignores_intensity(seed):
    rng = np.random.default_rng(seed)
    a = F.contour_features(RasterImage(rng.random((256, 256))), SEG)
    b = F.contour_features(RasterImage(rng.random((256, 256))), SEG)
    assert np.array_equal(a[:6], b[:6])


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["sqrt", "square", "affine", "tanh"]))
def test_lbp_invariant_to_monotone_remap(seed, kind):
    rng = np.random.default_rng(seed)
    arr = np.round(rng.random((256, 256)) * 255) / 255
    remap = {"sqrt": np.sqrt, "square": np.square, "affine": lambda x: 0.2 + 0.5 * x,
             "tanh": lambda x: np.tanh(3 * x) / np.tanh(3)}[kind]
    a = F.texture_features(RasterImage(arr), SEG)[6:10]
    b = F.texture_features(RasterImage(np.clip(remap(arr), 0, 1)), SEG)[6:10]
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_empty_annulus_rejected():
    w = h = 32
    outer, inner = Circle(16, 16, 3), Circle(16, 16, 2.9)
    om = rasterize_circle(outer, w, h)
    seg = Segmentation(outer, inner, om, om, Contour(circle_points(outer, 16)), True, 1)
    with pytest.raises(EmptyRegion):
        F.extract(RasterImage(np.zeros((h, w))), seg)


def test_local_rows_shape(phantom_pair):
    (a, seg), _ = phantom_pair
    rows = F.local_feature_rows(a.image, seg, stride=16)
    assert rows.shape[1] == 31 and rows.shape[0] > 10
    assert np.all(rows[:, :15] == rows[0, :15])


# -- CSV ---------------------------------------------------------------------

def test_csv_round_trip(rng):
    X = rng.random((5, 31)) * 1e3
    rows = [(f"id{i}", X[i], [Grade.A, None, "c", 3, Grade.B][i]) for i in range(5)]
    table = F.parse_features_csv(F.format_features_csv(rows))
    assert table.ids == [f"id{i}" for i in range(5)]
    assert np.array_equal(table.X, X)
    assert table.grades == [Grade.A, None, Grade.C, Grade.D, Grade.B]


def test_csv_missing_grade_column_named():
    text = "id," + ",".join(F.COLUMN_NAMES) + "\nx," + ",".join(["0"] * 31) + "\n"
    with pytest.raises(ValidationError, match="'grade'"):
        F.parse_features_csv(text)


def test_csv_bad_cells_report_position():
    head = ",".join(F.FEATURE_HEADER)
    body = "x," + ",".join(["0"] * 30) + ",oops,A"
    with pytest.raises(ValidationError, match=r":2:32:"):
        F.parse_features_csv(head + "\n" + body + "\n")
    with pytest.raises(ValidationError, match="grade"):
        F.parse_features_csv(head + "\nx," + ",".join(["0"] * 31) + ",E\n")
    with pytest.raises(InvalidData):
        F.parse_features_csv(head + "\nx," + ",".join(["0"] * 30) + ",inf,A\n")
    dup = "x," + ",".join(["0"] * 31) + ",A"
    with pytest.raises(ValidationError, match="duplicate"):
        F.parse_features_csv("\n".join([head, dup, dup]) + "\n")
