import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pasyn.eval_rank import (EvalError, MetricRecord, RankingReport, bootstrap_ranking, class_means, evaluate_case,
                             metric_table, pixel_errors, rank_then_aggregate, ranking_report, read_metrics_csv,
                             render_blob_svg, ssim, write_metrics_csv)


# -- independent oracles -----------------------------------------------------

def brute_class_means(err, labels):
    sums, counts = {}, {}
    for i in range(labels.shape[0]):
        for j in range(labels.shape[1]):
            c = int(labels[i, j])
            sums[c] = sums.get(c, 0.0) + float(err[i, j])
            counts[c] = counts.get(c, 0) + 1
    means = {c: sums[c] / counts[c] for c in sums}
    return means, sum(means.values()) / len(means)


def brute_rank(values, higher_is_better=False):
    n_alg, n_task, n_case = len(values), len(values[0]), len(values[0][0])
    mean_rank = []
    for a in range(n_alg):
        total = 0.0
        for t in range(n_task):
            mine = sum(values[a][t]) / n_case
            better = ties = 0
            for b in range(n_alg):
                if b == a:
                    continue
                other = sum(values[b][t]) / n_case
                if other == mine:
                    ties += 1
                elif (other > mine) == higher_is_better:
                    better += 1
            total += 1 + better + 0.5 * ties
        mean_rank.append(total / n_task)
    consensus = [1 + sum(1 for m in mean_rank if m < mine) for mine in mean_rank]
    return mean_rank, consensus


# -- pixel errors and class means --------------------------------------------

def test_pixel_error_arithmetic():
    ae, re_ = pixel_errors(np.log([[0.2]]), np.log([[0.1]]))
    assert ae[0, 0] == pytest.approx(0.1) and re_[0, 0] == pytest.approx(1.0)
    x = np.log(np.random.default_rng(0).uniform(0.01, 1, (4, 4)))
    ae, re_ = pixel_errors(x, x)
    assert np.all(ae == 0) and np.all(re_ == 0)
    with pytest.raises(EvalError):
        pixel_errors(np.zeros((2, 2)), np.zeros((2, 3)))


def test_two_class_hand_fixture():
    err = np.array([[1.0, 2.0], [3.0, 6.0]])
    labels = np.array([[1, 1], [3, 3]])
    out = class_means(err, labels)
    # class 1: (1+2)/2 = 1.5, class 3: (3+6)/2 = 4.5, overall (1.5+4.5)/2 = 3
    assert out == {1: 1.5, 3: 4.5, 0: 3.0}


def test_class_means_match_brute_force_100_fixtures():
    rng = np.random.default_rng(42)
    for _ in range(100):
        shape = tuple(rng.integers(2, 12, 2))
        labels = rng.integers(1, 8, shape)
        est, gt = rng.normal(-3, 1, shape), rng.normal(-3, 1, shape)
        for err in pixel_errors(est, gt):
            means, overall = brute_class_means(err, labels)
            out = class_means(err, labels)
            for c, v in means.items():
                assert out[c] == pytest.approx(v, rel=1e-12)
            assert out[0] == pytest.approx(overall, rel=1e-12)


# -- SSIM ----------------------------------------------------------------------

def test_ssim_identity():
    a = np.random.default_rng(0).random((20, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("mx, my, L", [(0.3, 0.7, 1.0), (2.0, 2.0, 5.0), (0.0, 1.0, 0.5)])
def test_ssim_constant_formula(mx, my, L):
    a, b = np.full((16, 13), mx), np.full((16, 13), my)
    c1 = (0.01 * L) ** 2
    expected = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
    assert abs(ssim(a, b, data_range=L) - expected) < 1e-10


def test_ssim_noise_and_errors():
    rng = np.random.default_rng(7)
    a = rng.random((32, 32))
    assert ssim(a + rng.normal(0, 1.0, a.shape), a) < 0.5
    with pytest.raises(EvalError):
        ssim(np.zeros((10, 20)), np.ones((10, 20)))
    with pytest.raises(EvalError):
        ssim(np.zeros((12, 12)), np.zeros((12, 12)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((14, 15)), rng.random((14, 15))
    s = ssim(a, b, data_range=1.0)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim(b, a, data_range=1.0), abs=1e-12)


# -- records and CSV -----------------------------------------------------------

def _records(rng, algs=("u1", "u2"), cases=3, wls=(700.0, 710.0)):
    labels = np.ones((12, 12), dtype=int)
    labels[4:8, 4:8] = 7
    gt = rng.normal(-3, 0.5, (12, 12, len(wls)))
    recs = []
    for k, a in enumerate(algs):
        for c in range(cases):
            recs += evaluate_case(a, f"case{c}", gt + (k + 1) * 0.1 * rng.random(gt.shape), gt, labels, wls)
    return recs


def test_evaluate_case_classes_and_csv_roundtrip(tmp_path):
    recs = _records(np.random.default_rng(0))
    keys = {(r.metric, r.cls) for r in recs}
    assert keys == {(m, c) for m in ("AE", "RE", "SSIM") for c in (0, 1, 7)}
    assert all(r.value >= 0 for r in recs if r.metric != "SSIM")
    write_metrics_csv(recs, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "algorithm,case,wavelength_nm,class,metric,value"
    assert read_metrics_csv(tmp_path / "m.csv") == recs
    values, algs, tasks, cases = metric_table(recs, "AE", 0)
    assert values.shape == (2, 2, 3) and algs == ["u1", "u2"] and tasks == [700.0, 710.0]


def test_metric_table_missing_cell():
    recs = _records(np.random.default_rng(1))
    recs = [r for r in recs if not (r.algorithm == "u1" and r.case == "case1" and r.wavelength_nm == 710.0)]
    with pytest.raises(EvalError, match="missing cell"):
        metric_table(recs, "AE", 0)
    with pytest.raises(EvalError):
        metric_table(recs, "AE", 5)


def test_read_metrics_csv_bad_header(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(EvalError):
        read_metrics_csv(tmp_path / "bad.csv")


# -- ranking -------------------------------------------------------------------

def test_rank_oracle_200_tables():
    rng = np.random.default_rng(123)
    for i in range(200):
        shape = (rng.integers(1, 6), rng.integers(1, 17), rng.integers(1, 19))
        # every third table uses small integers so ties occur
        v = rng.integers(0, 3, shape).astype(float) if i % 3 == 0 else rng.random(shape)
        hib = bool(i % 2)
        got = rank_then_aggregate(v, hib)
        mean_rank, consensus = brute_rank(v.tolist(), hib)
        assert got["mean_rank"].tolist() == mean_rank
        assert got["consensus"].tolist() == consensus


def test_rank_single_and_dominant():
    assert rank_then_aggregate(np.ones((1, 3, 4)))["consensus"].tolist() == [1]
    v = np.random.default_rng(0).random((3, 4, 5)) + np.array([1.0, 0.0, 2.0])[:, None, None]
    assert rank_then_aggregate(v)["consensus"].tolist() == [2, 1, 3]
    with pytest.raises(EvalError):
        rank_then_aggregate(np.full((2, 2, 2), np.nan))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["exp", "cube", "affine"]))
def test_rank_monotone_invariance(seed, kind):
    rng = np.random.default_rng(seed)
    # one case per task so the case mean commutes with the transform
    v = rng.random((4, 6, 1))
    f = {"exp": np.exp, "cube": lambda x: x**3, "affine": lambda x: 3 * x + 1}[kind]
    assert np.array_equal(rank_then_aggregate(v)["consensus"], rank_then_aggregate(f(v))["consensus"])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_rank_polarity(seed):
    v = np.random.default_rng(seed).random((4, 5, 6))
    assert np.array_equal(rank_then_aggregate(v, False)["consensus"], rank_then_aggregate(-v, True)["consensus"])


def test_bootstrap_rows_sum_and_determinism():
    v = np.random.default_rng(3).random((4, 5, 8))
    a = bootstrap_ranking(v, 200, seed=9)
    assert np.all(np.abs(a["freq"].sum(axis=1) - 1) < 1e-12)
    assert np.all((a["ci_low"] <= a["median"]) & (a["median"] <= a["ci_high"]))
    b = bootstrap_ranking(v, 200, seed=9)
    assert np.array_equal(a["freq"], b["freq"])
    with pytest.raises(EvalError):
        bootstrap_ranking(v, 0)


def test_bootstrap_well_separated():
    rng = np.random.default_rng(4)
    base = rng.uniform(1, 2, (1, 16, 18))
    v = np.concatenate([base * 100, base, base * 10])
    out = bootstrap_ranking(v, 300, seed=1)
    assert np.array_equal(out["freq"], np.eye(3)[[2, 0, 1]])
    assert np.array_equal(out["ci_low"], out["ci_high"])
    assert out["median"].tolist() == [3, 1, 2]


# -- report and SVG ------------------------------------------------------------

def _report(n_alg=3, seed=0):
    v = np.random.default_rng(seed).random((n_alg, 4, 6))
    return ranking_report(v, [f"alg{i}" for i in range(n_alg)], [700, 710, 720, 730], "AE", 0, 200, seed)


def test_report_json_roundtrip(tmp_path):
    rep = _report()
    rep.save(tmp_path / "ranking.json")
    assert RankingReport.load(tmp_path / "ranking.json") == rep
    with pytest.raises(EvalError):
        ranking_report(np.ones((1, 1, 1)), ["a"], [700], metric="XY")


def test_svg_parse_back(tmp_path):
    rep = _report(4, seed=2)
    path = render_blob_svg(rep, tmp_path / "ranking.svg")
    root = ET.parse(path).getroot()
    ns = {"s": "http://www.w3.org/2000/svg"}
    circles = root.findall("s:circle", ns)
    freq = np.asarray(rep.freq)
    assert len(circles) == int(np.count_nonzero(freq))
    r2 = {(int(c.get("data-alg")), int(c.get("data-rank"))): float(c.get("r")) ** 2 for c in circles}
    (ref_key, ref_r2), = [max(r2.items(), key=lambda kv: kv[1])]
    for (i, j), v in r2.items():
        assert v / ref_r2 == pytest.approx(freq[i, j - 1] / freq[ref_key[0], ref_key[1] - 1], rel=0.01)
    assert len(root.findall("s:line", ns)) == 4 and len(root.findall("s:path", ns)) == 4
    texts = [t.text for t in root.findall("s:text", ns)]
    assert "Algorithm" in texts and "Rank" in texts and "alg3" in texts


def test_svg_permutation_full_radius(tmp_path):
    rep = _report(3)
    rep.freq = np.eye(3).tolist()
    svg = render_blob_svg(rep, tmp_path / "p.svg", cell=60).read_text()
    radii = [float(r) for r in re.findall(r'<circle[^>]* r="([0-9.]+)"', svg)]
    assert radii == [27.0] * 3


def test_svg_empty_report(tmp_path):
    rep = _report()
    rep.algorithms, rep.freq = [], []
    with pytest.raises(EvalError):
        render_blob_svg(rep, tmp_path / "e.svg")
    assert not (tmp_path / "e.svg").exists()


def test_metric_record_fields():
    r = MetricRecord("a", "0", 700.0, 0, "AE", 0.5)
    assert (r.algorithm, r.cls, r.metric) == ("a", 0, "AE")
