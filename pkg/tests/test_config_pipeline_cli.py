import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from zonecsi.cli import main
from zonecsi.config import ExperimentConfig, config_from_dict, load_config
from zonecsi.errors import ConfigError, DataError
from zonecsi.evaluation import evaluate
from zonecsi.formats import load_model, read_dataset
from zonecsi.pipeline import StageError, mobility_region, run_experiment, split_indices
from zonecsi.transform import channels_to_vectors

TINY = str(Path(__file__).parent / "data" / "tiny.toml")
REPORT_FILES = ("report.csv", "report.txt", "cdf.csv", "cdf_oracle.csv", "manifest.json")


# config


def test_defaults_and_digest():
    a, b = ExperimentConfig(), config_from_dict({})
    assert a == b and a.digest() == b.digest()
    assert a.model.beta == 16 and a.transform.n_c == 32
    assert a.with_seed(3).digest() != a.digest()
    assert config_from_dict(load_config(TINY).to_dict()) == load_config(TINY)
    s = a.with_seed(3)
    assert (s.scene.seed, s.zones.seed, s.train.seed, s.mobility.seed) == (3, 3, 3, 3)


def test_toml_values_are_typed():
    cfg = load_config(TINY)
    assert cfg.scene.grid_shape == (16, 10)
    assert cfg.scene.bandwidth == 4e6
    assert cfg.zones.b == (1, 4)
    assert config_from_dict({"zones": {"b": 8}}).zones.b == (8,)
    assert config_from_dict({"train": {"lr": 1}}).train.lr == 1.0


@pytest.mark.parametrize(
    "raw,match",
    [
        ({"modle": {}}, r"\[modle\]"),
        ({"model": {"betta": 4}}, "model.betta"),
        ({"model": {"beta": "4"}}, "model.beta"),
        ({"model": {"beta": 4.5}}, "model.beta"),
        ({"train": {"recalibrate_bn": 1}}, "train.recalibrate_bn"),
        ({"scene": {"cell_size": [1.0]}}, "scene.cell_size"),
        ({"scene": {"grid_shape": [1.5, 2]}}, "scene.grid_shape"),
        ({"zones": {"b": [0]}}, "zones.b"),
        ({"train": {"dtype": "float16"}}, "dtype"),
        ({"transform": {"n_c": 65}}, "n_c"),
        ({"model": 3}, "table"),
    ],
)
def test_config_errors(raw, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(raw)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\nbeta = 4")
    with pytest.raises(ConfigError):
        load_config(bad)
    unnamed = tmp_path / "unnamed.toml"
    unnamed.write_text("[model]\nbeta = 4\n")
    with pytest.raises(ConfigError, match="experiment.name"):
        load_config(unnamed)


def test_relative_dataset_path(tmp_path):
    (tmp_path / "sub").mkdir()
    f = tmp_path / "sub" / "c.toml"
    f.write_text('[experiment]\nname = "t"\n[data]\ndataset = "d.zcd1"\n')
    assert load_config(f).data.dataset == str((tmp_path / "sub" / "d.zcd1").resolve())


# pipeline


def test_split_indices():
    tr, te = split_indices(10, 7, 0)
    assert len(tr) == 7 and len(te) == 3
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(10))
    tr2, _ = split_indices(10, 7, 0)
    assert np.array_equal(tr, tr2)
    assert len(split_indices(105996, 0, 0)[0]) == 24000
    with pytest.raises(ConfigError):
        split_indices(10, 10, 0)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return run_experiment(load_config(TINY), out, save_dataset=True)


def test_outputs_written(tiny_run):
    out = tiny_run.out_dir
    for name in REPORT_FILES + ("bundle_B1.zcm1", "bundle_B4.zcm1", "trajectory_B4.csv", "dataset.zcd1"):
        assert (out / name).is_file(), name
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert [r["method"] for r in rows] == ["1-zone beta=2", "4-zone beta=2"]
    assert int(rows[1]["params_encoder"]) == 4 * int(rows[0]["params_encoder"])
    assert rows[0]["multiplications"] == rows[1]["multiplications"]
    assert float(rows[0]["mpur_per_s"]) == 0.0


def test_manifest(tiny_run):
    m = json.loads((tiny_run.out_dir / "manifest.json").read_text())
    assert m["config_sha256"] == tiny_run.config.digest()
    assert m["delay_energy_retention"] >= 0.99
    four = m["methods"][1]
    assert four["B"] == 4 and len(four["zone_sizes"]) == 4 and sum(four["zone_sizes"]) == 120
    assert four["mean_nmse_db_oracle"] <= four["mean_nmse_db_position"]
    assert four["init_seeds"][2] == [0, 4, 3]
    hashes = m["artifacts_sha256"]
    assert "dataset.zcd1" in hashes and "manifest.json" not in hashes
    for name, digest in hashes.items():
        assert hashlib.sha256((tiny_run.out_dir / name).read_bytes()).hexdigest() == digest, name


def test_classifier_payload_counts_in_mptr(tiny_run):
    raw = load_config(TINY).to_dict()
    raw["mobility"]["include_classifier"] = True
    res = run_experiment(config_from_dict(raw))
    horizon = res.config.mobility.horizon_s
    for B in (1, 4):
        base, withc = tiny_run.method(B).result.overhead, res.method(B).result.overhead
        assert withc.extra_params == 2 * B
        assert withc.mptr == pytest.approx(base.mptr + 2 * B / horizon, rel=1e-12)


def test_report_text_is_stamped(tiny_run):
    first = (tiny_run.out_dir / "report.txt").read_text().splitlines()[0]
    assert first == f"config {tiny_run.config.experiment.name} sha256 {tiny_run.config.digest()}"


def test_mobility_region():
    pos = np.array([[1.0, -2.0, 1.5], [4.0, 3.0, 1.5], [2.0, 0.0, 1.5]])
    assert mobility_region(pos) == ((1.0, -2.0), (3.0, 5.0))
    with pytest.raises(DataError):
        mobility_region(pos[:, [0, 0, 2]] * [1, 0, 1])


def test_saved_bundle_reproduces_evaluation(tiny_run):
    run = tiny_run.method(4)
    bundle = load_model(tiny_run.out_dir / "bundle_B4.zcm1")
    pos, h = read_dataset(tiny_run.out_dir / "dataset.zcd1")
    _, te = split_indices(len(pos), 120, 0)
    rep = evaluate(bundle.models, bundle.partition, channels_to_vectors(h[te], 14), pos[te], bundle.normalizer)
    # stored models are float64 copies of the float64 training run
    np.testing.assert_allclose(rep.nmse_linear, run.result.evaluation.nmse_linear, rtol=1e-12)


def test_rerun_from_saved_dataset_matches(tiny_run, tmp_path):
    cfg = load_config(TINY)
    from dataclasses import replace

    cfg = replace(cfg, data=replace(cfg.data, dataset=str(tiny_run.out_dir / "dataset.zcd1")))
    again = run_experiment(cfg, tmp_path)
    assert (tmp_path / "report.csv").read_bytes() == (tiny_run.out_dir / "report.csv").read_bytes()
    assert again.method(1).result.evaluation.mean_nmse_linear == tiny_run.method(1).result.evaluation.mean_nmse_linear


def test_low_retention_is_a_data_error():
    cfg = config_from_dict({**_tiny_raw(), "transform": {"n_c": 8}})
    with pytest.raises(StageError) as info:
        run_experiment(cfg)
    assert info.value.stage == "data" and info.value.exit_code == DataError.exit_code


def test_too_many_zones_reports_stage():
    raw = _tiny_raw()
    raw["zones"] = {"b": [200]}
    with pytest.raises(StageError) as info:
        run_experiment(config_from_dict(raw))
    assert info.value.stage == "partition" and info.value.exit_code == 2


def _tiny_raw():
    import tomli

    with open(TINY, "rb") as f:
        return tomli.load(f)


# command line


def test_cli_count(capsys):
    assert main(["count", "--b", "8"]) == 0
    out = capsys.readouterr().out
    assert "34,103,808" in out and "68,239,872" in out and "4,261,888" in out and "9473.28" in out


def test_cli_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--activation", "linear", "--probes", "50"]) == 0
    assert main(["gradcheck", "--probes", "20", "--tol", "1e-30"]) == 4


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nbeta = 0\n")
    assert main(["--config", str(bad), "--out", str(tmp_path), "report"]) == 2
    assert main(["--config", str(tmp_path / "nope.toml"), "report"]) == 2
    junk = tmp_path / "junk.zcm1"
    junk.write_bytes(b"ZCM0" + bytes(60))
    assert main(["--out", str(tmp_path), "evaluate", "--bundle", str(junk)]) == 3
    assert main(["--threads", "0", "count"]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_stepwise_flow(tmp_path, capsys):
    base = ["--config", TINY, "--out", str(tmp_path), "--threads", "1"]
    assert main(base + ["generate"]) == 0
    ds = str(tmp_path / "dataset.zcd1")
    assert main(base + ["partition", "--dataset", ds, "--b", "4"]) == 0
    part = json.loads((tmp_path / "partition_B4.json").read_text())
    assert sum(part["sizes"]) == 160
    assert main(base + ["train", "--dataset", ds, "--b", "4"]) == 0
    bundle = str(tmp_path / "bundle_B4.zcm1")
    assert main(base + ["evaluate", "--bundle", bundle, "--dataset", ds]) == 0
    assert main(base + ["mobility", "--bundle", bundle, "--dataset", ds]) == 0
    out = capsys.readouterr().out
    assert "oracle routing" in out and "cache(4)" in out
    assert (tmp_path / "trajectory.csv").is_file()


def test_cli_report_matches_library(tmp_path, tiny_run, capsys):
    assert main(["--config", TINY, "--out", str(tmp_path), "report", "--save-dataset"]) == 0
    assert "4-zone beta=2" in capsys.readouterr().out
    for name in REPORT_FILES + ("dataset.zcd1",):
        assert (tmp_path / name).read_bytes() == (tiny_run.out_dir / name).read_bytes(), name


def test_cli_ingest(tmp_path):
    rows = []
    rng = np.random.default_rng(0)
    for _ in range(3):
        rows.append(",".join(f"{v:.6f}" for v in rng.normal(size=3 + 2 * 2 * 4)))
    f = tmp_path / "h.csv"
    f.write_text("\n".join(rows) + "\n")
    assert main(["--out", str(tmp_path), "ingest", str(f), "--n-t", "2", "--subcarriers", "4"]) == 0
    pos, h = read_dataset(tmp_path / "dataset.zcd1")
    assert pos.shape == (3, 3) and h.shape == (3, 2, 4)


def test_cli_ingest_npz(tmp_path, capsys):
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(5, 3))
    h = rng.normal(size=(5, 2, 4)) + 1j * rng.normal(size=(5, 2, 4))
    f = tmp_path / "h.npz"
    np.savez(f, positions=pos, channels=h)
    assert main(["--out", str(tmp_path), "ingest", str(f)]) == 0
    pos2, h2 = read_dataset(tmp_path / "dataset.zcd1")
    np.testing.assert_array_equal(pos2, pos)
    np.testing.assert_array_equal(h2, h.astype(np.complex64))  # ZCD1 stores complex64
    np.savez(tmp_path / "bad.npz", positions=pos)
    assert main(["--out", str(tmp_path), "ingest", str(tmp_path / "bad.npz")]) == 3
    assert "channels" in capsys.readouterr().err


def test_four_zone_scene_beats_single_model():
    res = run_experiment(load_config(str(Path(__file__).parent / "data" / "four_zone.toml")))
    one, four = res.method(1).result.evaluation, res.method(4).result.evaluation
    assert four.mean_nmse_linear < one.mean_nmse_linear


def test_training_loss_mostly_decreases():
    from zonecsi.autoenc import LayerSpec, TrainConfig, init_model, train
    from zonecsi.pipeline import load_or_generate
    from zonecsi.transform import fit_normalizer

    cfg = load_config(TINY)
    _, h, _ = load_or_generate(cfg)
    x = channels_to_vectors(h, 14)
    x = fit_normalizer(x, "rms").apply(x)
    m = init_model(LayerSpec(8, 14, 8, 2, "tanh"), 0)
    curve = np.array(train(m, x, TrainConfig(learning_rate=3e-3, batch_size=16, epochs=40)).loss_curve)
    smooth = np.convolve(curve, np.ones(3) / 3, mode="valid")
    rises = np.sum(np.diff(smooth) > 0)
    assert rises <= 0.05 * len(smooth)
    assert curve[-1] < curve[0]
