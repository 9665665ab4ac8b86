import csv
import math

import numpy as np
import pytest

from zonecsi.autoenc import LayerSpec, ModelParams, count_parameters, init_model, param_layout
from zonecsi.errors import ConfigError, DegenerateInputError
from zonecsi.evaluation import (
    MethodResult,
    build_cdf,
    comparison_report,
    evaluate,
    nmse,
    nmse_per_sample,
    write_cdf_csv,
    write_report_csv,
)
from zonecsi.mobility import compute_overhead, switch_stats_from_zones
from zonecsi.transform import Normalizer
from zonecsi.zoning import ZonePartition


def gain_model(D, gain):
    """Exact linear map x -> gain * x (identity batch-norm, bn_eps 0)."""
    spec = LayerSpec(n_t=1, n_c=D // 2, codeword_len=D, width_factor=1, activation="linear")
    t = {n: np.zeros(s) for n, s, _ in param_layout(spec)}
    for part in ("enc", "dec"):
        t[f"{part}.fc1.weight"] = np.eye(D)
        t[f"{part}.bn.scale"] = np.ones(D)
        t[f"{part}.bn.running_var"] = np.ones(D)
        t[f"{part}.fc2.weight"] = np.eye(D)
    t["dec.fc2.weight"] = gain * np.eye(D)
    return ModelParams(spec, t, bn_eps=0.0)


def test_nmse_by_hand():
    lin, db = nmse([3.0, 4.0], [3.0, 3.0])
    assert lin == pytest.approx(1 / 25)
    assert db == pytest.approx(10 * math.log10(1 / 25))
    assert nmse([1.0, 0.0], [1.0, 0.0]) == (0.0, -math.inf)


def test_nmse_scale_invariant():
    rng = np.random.default_rng(0)
    t, e = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    np.testing.assert_allclose(nmse_per_sample(7 * t, 7 * e), nmse_per_sample(t, e))


def test_nmse_errors():
    with pytest.raises(DegenerateInputError):
        nmse([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ConfigError):
        nmse_per_sample(np.ones((2, 3)), np.ones((2, 4)))


def test_cdf_steps():
    x, p = build_cdf([3.0, 1.0, 2.0, 2.0])
    np.testing.assert_array_equal(x, [1, 2, 2, 3])
    np.testing.assert_array_equal(p, [0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ConfigError):
        build_cdf([])


def two_zone_setup():
    part = ZonePartition(np.array([[0.0, 0.0], [10.0, 0.0]]))
    models = [gain_model(4, 0.5), gain_model(4, 0.9)]
    v = np.array([[1.0, 2.0, 0.0, -1.0], [0.5, 0.0, 3.0, 1.0], [2.0, 2.0, 2.0, 2.0]])
    pos = np.array([[1.0, 0.0], [9.0, 0.0], [2.0, 1.0]])
    return part, models, v, pos


def test_position_routing_by_hand():
    part, models, v, pos = two_zone_setup()
    rep = evaluate(models, part, v, pos)
    np.testing.assert_array_equal(rep.zones, [1, 2, 1])
    np.testing.assert_allclose(rep.nmse_linear, [0.25, 0.01, 0.25])
    assert rep.mean_nmse_linear == pytest.approx(0.17)
    assert rep.mean_nmse_db == pytest.approx(10 * math.log10(0.17))
    assert rep.mean_of_db == pytest.approx(np.mean(10 * np.log10([0.25, 0.01, 0.25])))
    assert rep.zone_breakdown() == {1: (2, pytest.approx(10 * math.log10(0.25))), 2: (1, pytest.approx(-20.0))}


def test_oracle_routing_dominates():
    part, models, v, pos = two_zone_setup()
    orc = evaluate(models, part, v, pos, routing="oracle")
    np.testing.assert_array_equal(orc.zones, [2, 2, 2])
    np.testing.assert_allclose(orc.nmse_linear, 0.01)
    pos_rep = evaluate(models, part, v, pos)
    assert np.all(orc.nmse_linear <= pos_rep.nmse_linear)


def test_normalizer_is_transparent_for_linear_models():
    part, models, v, pos = two_zone_setup()
    a = evaluate(models, part, v, pos)
    b = evaluate(models, part, v, pos, normalizer=Normalizer(3.0))
    np.testing.assert_allclose(a.nmse_linear, b.nmse_linear, atol=1e-15)


def test_missing_zone_falls_back_to_nearest_available():
    part = ZonePartition(np.array([[0.0, 0.0], [10.0, 0.0], [30.0, 0.0]]))
    models = [gain_model(2, 0.5), None, gain_model(2, 0.9)]
    v = np.ones((3, 2))
    pos = np.array([[0.0, 0.0], [12.0, 0.0], [19.0, 0.0]])  # 2nd and 3rd land in the empty zone 2
    rep = evaluate(models, part, v, pos)
    assert rep.fallbacks == 2
    np.testing.assert_array_equal(rep.zones, [1, 1, 3])


def test_evaluate_errors():
    part, models, v, pos = two_zone_setup()
    with pytest.raises(ConfigError):
        evaluate(models[:1], part, v, pos)
    with pytest.raises(ConfigError):
        evaluate([None, None], part, v, pos)
    with pytest.raises(ConfigError):
        evaluate(models, part, v[:, :2], pos)
    with pytest.raises(ConfigError):
        evaluate(models, part, v, pos, routing="random")
    with pytest.raises(ConfigError):
        evaluate(models, part, v, pos[:2])
    with pytest.raises(DegenerateInputError):
        evaluate(models, part, np.zeros((1, 4)), pos[:1])


def method(B, beta=16, rep=None):
    spec = LayerSpec(n_t=64, n_c=32, codeword_len=64, width_factor=beta)
    stats = switch_stats_from_zones([1, 1], [0, 3600])
    return MethodResult(f"{B}-zone", spec, B, rep, compute_overhead(count_parameters(spec).encoder, B, stats))


def test_comparison_reference_rows():
    t = comparison_report([method(1), method(1, 128), method(8)])
    rows = t.rows
    assert [r["params_encoder"] for r in rows] == [4_262_976, 34_103_360, 34_103_808]
    assert [r["params_total"] for r in rows] == [8_529_984, 68_210_752, 68_239_872]
    assert [r["multiplications"] for r in rows] == [4_261_888, 34_095_104, 4_261_888]
    assert [round(r["mptr_params_per_s"], 2) for r in rows] == [1184.16, 9473.16, 9473.28]
    text = t.render()
    assert "4,262,976" in text and "n/a" in text


def test_comparison_errors_and_empty():
    assert comparison_report([]).rows == []
    assert comparison_report([]).render() == "(no methods)"
    small = MethodResult("x", LayerSpec(n_t=2, n_c=2, codeword_len=2, width_factor=2), 1, None, method(1).overhead)
    with pytest.raises(ConfigError):
        comparison_report([method(1), small])


def test_report_files(tmp_path):
    part, models, v, pos = two_zone_setup()
    rep = evaluate(models, part, v, pos)
    write_report_csv(tmp_path / "r.csv", comparison_report([method(1, rep=rep)]))
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][0] == "method" and rows[1][1] == f"{10 * math.log10(0.17):.6f}"
    write_cdf_csv(tmp_path / "c.csv", {"a": rep, "b": rep})
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["method", "nmse_db", "cdf"]
    assert len(rows) == 7 and rows[3] == ["a", f"{10 * math.log10(0.25):.6f}", "1.000000"]


def test_exact_reconstruction_written_as_floor(tmp_path):
    part = ZonePartition(np.array([[0.0, 0.0]]))
    rep = evaluate([gain_model(2, 1.0)], part, np.ones((1, 2)), np.zeros((1, 2)))
    assert rep.nmse_linear[0] == 0
    write_cdf_csv(tmp_path / "c.csv", {"m": rep})
    assert open(tmp_path / "c.csv").read().splitlines()[1] == "m,-400.000000,1.000000"


def test_init_model_evaluates():
    spec = LayerSpec(n_t=2, n_c=2, codeword_len=2, width_factor=2)
    part = ZonePartition(np.array([[0.0, 0.0]]))
    rep = evaluate([init_model(spec, 0)], part, np.random.default_rng(1).normal(size=(5, 8)), np.zeros((5, 2)))
    assert np.all(np.isfinite(rep.nmse_linear))


def test_nmse_reference_estimates():
    t = np.array([1.0, -2.0, 0.5])
    assert nmse(t, np.zeros(3)) == (1.0, 0.0)
    assert nmse(t, 2 * t) == (1.0, 0.0)


def test_single_zone_equals_plain_evaluation():
    part = ZonePartition(np.array([[0.0, 0.0]]))
    m = init_model(LayerSpec(n_t=2, n_c=2, codeword_len=2, width_factor=2), 0)
    from zonecsi.autoenc import reconstruct

    v = np.random.default_rng(2).normal(size=(6, 8))
    pos = np.random.default_rng(3).normal(size=(6, 2))
    rep = evaluate([m], part, v, pos)
    np.testing.assert_allclose(rep.nmse_linear, nmse_per_sample(v, reconstruct(m, v)))
    assert np.all(rep.zones == 1)
    assert np.array_equal(evaluate([m], part, v, pos, routing="oracle").nmse_linear, rep.nmse_linear)


def test_perfect_models_step_at_floor(tmp_path):
    part = ZonePartition(np.array([[0.0, 0.0], [1.0, 0.0]]))
    v = np.random.default_rng(4).normal(size=(5, 2))
    rep = evaluate([gain_model(2, 1.0), gain_model(2, 1.0)], part, v, np.zeros((5, 2)))
    assert rep.mean_nmse_linear == 0
    write_cdf_csv(tmp_path / "c.csv", {"m": rep})
    rows = list(csv.reader(open(tmp_path / "c.csv")))[1:]
    assert {r[1] for r in rows} == {"-400.000000"} and rows[-1][2] == "1.000000"


def test_cdf_small_cases():
    x, p = build_cdf([1.0, 2.0, 3.0])
    assert list(zip(x, p)) == [(1, 1 / 3), (2, 2 / 3), (3, 1)]
    x, p = build_cdf([5.0, 5.0])
    assert p[-1] == 1 and set(x) == {5.0}


def test_cdf_fraction_below_threshold():
    vals = np.random.default_rng(5).normal(size=500)
    x, p = build_cdf(vals)
    for thr in (-1.0, 0.0, 0.7):
        k = np.searchsorted(x, thr, side="right")
        assert (p[k - 1] if k else 0.0) == sum(v <= thr for v in vals) / 500
