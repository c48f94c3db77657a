import numpy as np
import pytest
from hypothesis import given, strategies as st

from cocgrade.errors import InvalidParams
from cocgrade.grades import Grade
from cocgrade.raster import annulus_mask
from cocgrade.synthdata import MAX_REACH, PROFILES, PhantomSpec, corpus_specs, generate


def test_same_spec_same_bytes():
    s = PhantomSpec(Grade.B, seed=99)
    assert generate(s).image.data.tobytes() == generate(s).image.data.tobytes()


def test_grade_a_cumulus_thicker_than_c():
    for seed in range(5):
        a = generate(PhantomSpec(Grade.A, seed=seed))
        c = generate(PhantomSpec(Grade.C, seed=seed))
        assert a.cumulus_thickness > c.cumulus_thickness


def test_grade_d_ooplasm_more_heterogeneous():
    def ooplasm_var(ph):
        m = annulus_mask(ph.ooplasm, ph.nucleus, ph.image.width, ph.image.height).bits
        return ph.image.data[m].var()
    for seed in range(5):
        d = generate(PhantomSpec(Grade.D, seed=seed, noise=0.0))
        a = generate(PhantomSpec(Grade.A, seed=seed, noise=0.0))
        assert ooplasm_var(d) > ooplasm_var(a)


def test_thickness_profile_order():
    t = [PROFILES[g].thickness for g in Grade]
    assert t == sorted(t, reverse=True) and t[-1] <= 0.03


@given(st.sampled_from(list(Grade)), st.integers(0, 2 ** 64 - 1))
def test_truth_masks_nested_and_inside_field(grade, seed):
    ph = generate(PhantomSpec(grade, side=128, seed=seed))
    assert ph.nucleus.r < ph.ooplasm.r <= ph.cell.r
    assert (ph.nucleus_mask - ph.cell_mask).area == 0 and ph.nucleus_mask.area > 0
    reach = np.hypot(ph.cell.cx - 64, ph.cell.cy - 64) + ph.cell.r
    assert reach <= MAX_REACH * 128 + 1e-9
    assert abs(ph.cell.cx - 64) <= 0.05 * 128 and abs(ph.cell.cy - 64) <= 0.05 * 128
    assert ph.image.data.min() >= 0 and ph.image.data.max() <= 1


def test_corpus_is_balanced_and_unique():
    specs = corpus_specs(6, seed=2)
    ids = [i for i, _ in specs]
    assert len(set(ids)) == 24
    assert [sum(s.grade == g for _, s in specs) for g in Grade] == [6] * 4
    assert len({s.seed for _, s in specs}) == 24
    assert corpus_specs(6, seed=2) == specs


def test_spec_validation():
    for bad in ({"side": 64}, {"noise": 0.2}, {"noise": -0.01}, {"contrast": 0}, {"seed": -1}):
        with pytest.raises(InvalidParams):
            PhantomSpec(Grade.A, **bad)
