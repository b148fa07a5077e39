import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pasyn.geometry import ForearmModelParams, LabelMap, TissueClass, generate_forearm_labelmap
from pasyn.synth_pipeline import extrude_mask
from pasyn.tissue_optics import (ChromophoreSpectra, ClassOptics, OpticsError, TissueInstance, TissueOpticalSpec,
                                 assign_optics, data_dir, mixed_mua, read_spectrum, sample_tissue_instance)
from pasyn.geometry import Uniform

SPECTRA = ChromophoreSpectra.load()
SPEC = TissueOpticalSpec.default()

# Reference molar extinction of hemoglobin (cm^-1 / M), Prahl's compilation,
# converted to mua at 150 g/L: mua = 2.303 * eps * 150 / 64500 (1/cm) / 10.
PRAHL = {700: (290.0, 1794.28), 750: (518.0, 1405.24), 800: (816.0, 761.72), 850: (1058.0, 691.32)}


def _prahl_mua(eps):
    return 2.303 * eps * 150.0 / 64500.0 / 10.0


def test_spectra_files_format():
    for name in ("hbo2", "hb", "water", "fat"):
        path = data_dir() / f"{name}.txt"
        assert "# wavelength_nm mua_per_mm" in path.read_text()
        wl, mua = read_spectrum(path)
        assert wl[0] <= 700 and wl[-1] >= 850
        assert np.all(np.diff(wl) > 0)
        assert np.all(mua > 0)


def test_hemoglobin_tables_match_reference():
    for wl, (eps_o, eps_d) in PRAHL.items():
        assert SPECTRA("hbo2", wl) == pytest.approx(_prahl_mua(eps_o), rel=1e-3)
        assert SPECTRA("hb", wl) == pytest.approx(_prahl_mua(eps_d), rel=1e-3)


def test_isosbestic_agreement():
    iso = SPECTRA.isosbestic_nm()
    assert abs(iso - 800.0) <= 5.0
    inst = TissueInstance({TissueClass.ARTERY: 0.0}, {TissueClass.ARTERY: 1.0})
    low = mixed_mua(inst, TissueClass.ARTERY, iso, SPECTRA)
    inst.so2[TissueClass.ARTERY] = 1.0
    high = mixed_mua(inst, TissueClass.ARTERY, iso, SPECTRA)
    assert abs(low - high) / high < 0.05


def test_out_of_grid_wavelength():
    with pytest.raises(OpticsError):
        SPECTRA("water", 650.0)


def test_instance_support_and_determinism():
    a = sample_tissue_instance(SPEC, 3)
    b = sample_tissue_instance(SPEC, 3)
    assert a.so2 == b.so2 and a.vb == b.vb
    assert 0.9 <= a.so2[TissueClass.ARTERY] <= 1.0


def test_point_mass_vein():
    spec = SPEC.with_class(TissueClass.VEIN, so2=0.7)
    assert sample_tissue_instance(spec, 11).so2[TissueClass.VEIN] == 0.7


def test_mixed_mua_degenerate_cases():
    inst = TissueInstance({TissueClass.ARTERY: 1.0}, {TissueClass.ARTERY: 1.0})
    assert mixed_mua(inst, TissueClass.ARTERY, 760, SPECTRA) == SPECTRA("hbo2", 760)
    inst = TissueInstance({TissueClass.ARTERY: 0.5}, {TissueClass.ARTERY: 0.0})
    assert mixed_mua(inst, TissueClass.ARTERY, 760, SPECTRA, water=1.0) == SPECTRA("water", 760)


@given(st.floats(0.0, 0.5), st.floats(0.0, 1.0), st.floats(700, 850))
def test_mixed_mua_linear_in_vb(vb, so2, wl):
    cls = TissueClass.MUSCLE

    def mua(v):
        return mixed_mua(TissueInstance({cls: so2}, {cls: v}), cls, wl, SPECTRA, SPEC)

    base = mua(0.0)
    assert mua(2 * vb) - base == pytest.approx(2 * (mua(vb) - base), rel=1e-9, abs=1e-12)


def test_scattering_identity():
    opt = ClassOptics(Uniform(0, 0), Uniform(0, 0), scatter_a=1.0, scatter_b=0.0, g=0.9)
    assert opt.scattering(500) == pytest.approx(10.0)
    assert opt.reduced_scattering(1000) == pytest.approx(1.0)


def test_spec_validation():
    with pytest.raises(OpticsError):
        TissueOpticalSpec.from_dict({"artery": {"water": 0.5, "vb": 0.8, "scatter_a": 1.0}})
    with pytest.raises(OpticsError):
        TissueOpticalSpec.from_dict({"bone": {}})
    with pytest.raises(OpticsError):
        TissueOpticalSpec.from_dict({"artery": {"colour": 1}})
    with pytest.raises(OpticsError):
        TissueOpticalSpec.from_dict({"artery": {"g": 1.0}})


def test_spec_roundtrip():
    assert TissueOpticalSpec.from_dict(SPEC.to_dict()).to_dict() == SPEC.to_dict()


def test_homogeneous_volume_constant():
    m = LabelMap(np.full((4, 3, 5), TissueClass.MUSCLE))
    vol = assign_optics(m, sample_tissue_instance(SPEC, 0), SPEC, SPECTRA, 800)
    for arr in (vol.mua, vol.mus, vol.g, vol.n):
        assert np.ptp(arr) == 0


def test_seeds_change_values_not_partition():
    m = extrude_mask(generate_forearm_labelmap(ForearmModelParams(), 1), 2)
    a = assign_optics(m, sample_tissue_instance(SPEC, 1), SPEC, SPECTRA, 750)
    b = assign_optics(m, sample_tissue_instance(SPEC, 2), SPEC, SPECTRA, 750)
    vessel = np.isin(m.data, [TissueClass.ARTERY, TissueClass.VEIN])
    assert not np.allclose(a.mua[vessel], b.mua[vessel])
    for v in (a, b):
        for c in np.unique(m.data):
            assert np.unique(v.mua[m.data == c]).size == 1


def test_missing_class_and_2d_map():
    spec = TissueOpticalSpec({k: v for k, v in SPEC.classes.items() if k != TissueClass.VEIN})
    inst = sample_tissue_instance(spec, 0)
    with pytest.raises(OpticsError):
        assign_optics(LabelMap(np.full((2, 2, 2), TissueClass.VEIN)), inst, spec, SPECTRA, 800)
    with pytest.raises(OpticsError):
        assign_optics(LabelMap(np.full((2, 2), TissueClass.MUSCLE)), inst, spec, SPECTRA, 800)


def test_clear_media_defaults():
    for c in (TissueClass.GEL, TissueClass.HEAVY_WATER):
        opt = SPEC.classes[c]
        assert opt.water == 1.0 and opt.g == 0.9 and opt.n == 1.33
        assert opt.reduced_scattering(800) < 0.1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(list(range(700, 851, 10))))
def test_volume_invariants_property(seed, wl):
    m = extrude_mask(generate_forearm_labelmap(ForearmModelParams(), seed), 1)
    vol = assign_optics(m, sample_tissue_instance(SPEC, seed), SPEC, SPECTRA, wl)
    vol.check()
    assert len(np.unique(vol.mua)) <= 7
