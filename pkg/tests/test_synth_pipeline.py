import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pasyn.geometry import (ForearmModelParams, GeometryError, LabelMap, TissueClass, Uniform,
                            generate_forearm_labelmap, load_labelmap)
from pasyn.synth_pipeline import (CONFIGS, DatasetManifest, InsufficientPoolError, LogNoiseTransformer,
                                  MultispectralImage, SimParams, WavelengthGrid, build_dataset, derive_seed,
                                  extrude_mask, log_scale, materialize_dataset, place_in_volume, preprocess,
                                  simulate_multispectral, split_counts)
from pasyn.tissue_optics import TissueOpticalSpec
from pasyn.volume_io import load_volume

POOLS = {"anno": 96, "gan": 500, "lit": 500}
SPEC = TissueOpticalSpec.default()


def small_mask(seed=0):
    p = ForearmModelParams(image_shape=(24, 32), gel_thickness=Uniform(1.0, 1.5), vessel_radius=Uniform(0.3, 0.8),
                           vessel_depth=Uniform(1.0, 2.0), vessel_count=(1, 2))
    return generate_forearm_labelmap(p, seed)


def test_default_grid():
    g = WavelengthGrid()
    assert len(g) == 16
    assert g.wavelengths_nm[0] == 700 and g.wavelengths_nm[-1] == 850
    with pytest.raises(ValueError):
        WavelengthGrid((710, 700))


def test_extrude_mask():
    m = LabelMap(np.random.default_rng(0).integers(1, 8, (9, 5)).astype(np.uint8))
    e = extrude_mask(m, 6)
    assert e.data.shape == (9, 6, 5)
    assert np.array_equal(e.data[:, 3, :], m.data)
    for c in range(1, 8):
        assert np.sum(e.data == c) == 6 * np.sum(m.data == c)
    with pytest.raises(ValueError):
        extrude_mask(m, 0)


def test_place_in_volume_default_offset():
    data = np.full((4, 2, 10), TissueClass.MUSCLE, dtype=np.uint8)
    data[:, :, 2:4] = TissueClass.GEL
    m = LabelMap(data, spacing_mm=0.16)
    out = place_in_volume(m)
    pad = out.meta["pad_rows"]
    assert pad == 270 - 2
    assert np.nonzero(np.any(out.data == TissueClass.GEL, axis=(0, 1)))[0][0] == 270
    assert np.all(out.data[:, :, :pad] == TissueClass.HEAVY_WATER)
    assert np.array_equal(out.data[:, :, pad:], data)
    again = place_in_volume(out)
    assert again.meta["pad_rows"] == 0 and np.array_equal(again.data, out.data)


def test_place_in_volume_no_gel():
    with pytest.raises(GeometryError, match="no-gel"):
        place_in_volume(LabelMap(np.full((2, 2, 2), TissueClass.MUSCLE)))


def test_preprocess_rules():
    img = MultispectralImage(np.array([[[0.0, 1.0]], [[np.e, 2.0]]]), 0.32, (700.0, 710.0))
    clean = preprocess(img, 0.0)
    assert clean.data[0, 0, 0] == pytest.approx(np.log(1e-10))
    assert clean.data[1, 0, 0] == pytest.approx(1.0)
    assert np.all(np.isfinite(clean.data))


def test_preprocess_noise_statistics():
    img = MultispectralImage(np.ones((400, 250, 4)), 0.32, (700.0, 710.0, 720.0, 730.0))
    noisy = preprocess(img, 0.5, seed=1).data
    assert abs(noisy.mean()) < 0.01
    assert abs(noisy.std() - 0.5) < 0.01


def test_log_noise_transformer_matches_preprocess():
    x = np.random.default_rng(0).random((5, 6, 3))
    t = LogNoiseTransformer(sigma=0.0).fit(x)
    assert np.allclose(t.transform(x), log_scale(x))
    with pytest.raises(ValueError):
        LogNoiseTransformer(sigma=-1).fit(x)


def test_derive_seed_stable():
    assert derive_seed(1, 700.0) == derive_seed(1, 700)
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert 0 <= derive_seed(123, "x") < 2**63


@pytest.mark.parametrize("n", [10, 96, 500, 1096, 7])
def test_split_counts_fractions(n):
    tr, va, te = split_counts(n)
    assert tr + va + te == n
    assert abs(tr - 0.7 * n) <= 1 and abs(va - 0.1 * n) <= 1 and abs(te - 0.2 * n) <= 1


@pytest.mark.parametrize("config, counts", [
    ("anno", (66, 12, 18)), ("gan", (350, 50, 100)), ("gan-anno", (350, 50, 100)),
    ("lit", (350, 50, 100)), ("lit-gan-anno", (766, 112, 218)),
])
def test_default_split_counts(config, counts):
    man = build_dataset(config, POOLS, seed=0)
    assert (man.counts["train"], man.counts["val"], man.counts["test"]) == counts
    tr, va, te = set(man.train), set(man.val), set(man.test)
    assert len(tr) == len(man.train) and not (tr & va) and not (tr & te) and not (va & te)


def test_gan_anno_ratio_and_shared_target():
    man = build_dataset("gan-anno", POOLS, seed=3)
    mix = man.source_mix
    assert mix["train"] == {"anno": 66, "gan": 284}
    ratio = sum(m["anno"] for m in mix.values()) / sum(man.counts.values())
    assert abs(ratio - 0.19) < 0.01
    targets = {build_dataset(c, POOLS, seed=3).target_test[0] for c in CONFIGS}
    assert len(targets) == 1
    assert man.target_test == build_dataset("anno", POOLS, seed=3).test


def test_build_dataset_errors():
    with pytest.raises(InsufficientPoolError):
        build_dataset("gan", {"gan": 100}, seed=0)
    with pytest.raises(InsufficientPoolError):
        build_dataset("gan-anno", {"gan": 500}, seed=0)
    with pytest.raises(ValueError):
        build_dataset("nope", POOLS, seed=0)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(CONFIGS), st.integers(0, 2**32 - 1))
def test_manifest_disjoint_property(config, seed):
    man = build_dataset(config, POOLS, seed=seed)
    ids = man.train + man.val + man.test
    assert len(ids) == len(set(ids))
    assert build_dataset(config, POOLS, seed=seed).to_json() == man.to_json()


def test_manifest_roundtrip(tmp_path):
    man = build_dataset("lit", POOLS, seed=2)
    man.save(tmp_path / "m.json")
    assert DatasetManifest.load(tmp_path / "m.json") == man


def test_simulate_multispectral_shapes_and_channels():
    mask = small_mask(1)
    params = SimParams(y_extent=4, photons=3000)
    grid = WavelengthGrid((750, 800))
    p0, mua = simulate_multispectral(mask, SPEC, grid, params, 5, 6)
    assert p0.shape == mua.shape == (24, 32, 2)
    assert np.all(np.isfinite(p0.data)) and np.all(p0.data >= 0)
    one_p0, one_mua = simulate_multispectral(mask, SPEC, WavelengthGrid((800,)), params, 5, 6)
    assert np.array_equal(one_p0.data[:, :, 0], p0.data[:, :, 1])
    assert np.array_equal(one_mua.data[:, :, 0], mua.data[:, :, 1])
    # ground truth is piecewise constant on the tissue classes
    for c in np.unique(mask.data):
        assert np.unique(mua.data[:, :, 0][mask.data == c]).size == 1


def test_materialize_layout_and_determinism(tmp_path):
    masks = {f"anno:{i:05d}": small_mask(i) for i in range(10)}
    man = build_dataset("anno", {"anno": list(masks)}, seed=0, split_sizes={"anno": (2, 1, 1)})
    params = SimParams(y_extent=2, photons=1000)
    grid = WavelengthGrid((760, 800))
    roots = [materialize_dataset(man, masks, tmp_path / d, SPEC, grid, params) for d in ("a", "b")]
    s = roots[0] / "train" / "sample_00000"
    assert sorted(p.name for p in s.iterdir()) == ["gt_mua.vol16", "gt_mua.vol16.json", "input.vol16",
                                                    "input.vol16.json", "mask.json", "mask.png", "meta.json"]
    x, header = load_volume(s / "input.vol16")
    y, _ = load_volume(s / "gt_mua.vol16")
    assert x.shape == y.shape == (24, 32, 2) and header["wavelengths_nm"] == [760.0, 800.0]
    meta = json.loads((s / "meta.json").read_text())
    assert meta["id"] == man.train[0]
    assert load_labelmap(s / "mask.png") == masks[meta["id"]]
    assert json.loads((roots[0] / "manifest.json").read_text())["counts"] == {"train": 2, "val": 1, "test": 1}
    for f in sorted(p.relative_to(roots[0]) for p in roots[0].rglob("*") if p.is_file()):
        assert (roots[0] / f).read_bytes() == (roots[1] / f).read_bytes()
