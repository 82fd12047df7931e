import json

import numpy as np
import pytest

from m2fmoe.cli import analyze_spectrum, load_run_config, main
from m2fmoe.data import RawSeries, load_csv, write_csv
from m2fmoe.errors import ConfigError
from m2fmoe.synthetic import generate
from m2fmoe.training import evaluate, load_model

SMALL = """\
[model]
t_in = 24
t_pred = 4
t_recent = 12
experts = 2
resolutions = 1, 3
hidden = 6
routing_hidden = 4
wavelet_hidden = 2
scales = 6

[train]
max_epochs = 2
batch_size = 32

[data]
val_count = 20
stride = 2
"""


@pytest.fixture
def workspace(tmp_path):
    cfg = tmp_path / "small.ini"
    cfg.write_text(SMALL)
    series = generate(length=600, n_spikes=3, seed=1)
    data = tmp_path / "series.csv"
    write_csv(data, series.to_raw())
    return tmp_path, cfg, data


def _run(*argv):
    return main([str(a) for a in argv])


def test_train_writes_artifacts(workspace, capsys):
    root, cfg, data = workspace
    out = root / "out"
    assert _run("train", "--config", cfg, "--input", data, "--output-dir", out, "--dump-routing") == 0
    for name in ("model.m2fm", "model.m2fm.json", "history.csv", "metrics.json", "routing.csv"):
        assert (out / name).is_file(), name
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["variant"] == "full" and np.isfinite(metrics["rmse"])
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["variant"] == "full"


def test_train_is_reproducible(workspace):
    root, cfg, data = workspace
    for d in ("a", "b"):
        assert _run("train", "--config", cfg, "--input", data, "--output-dir", root / d, "--seed", 4) == 0
    for name in ("model.m2fm", "history.csv", "metrics.json"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_missing_data_path_exit_2(workspace, capsys):
    root, cfg, _ = workspace
    assert _run("train", "--config", cfg, "--input", root / "nope.csv") == 2
    assert "nope.csv" in capsys.readouterr().err


def test_unknown_key_exit_2(workspace, capsys):
    root, cfg, data = workspace
    assert _run("train", "--config", cfg, "--input", data, "--set", "model.colour=blue") == 2
    assert "colour" in capsys.readouterr().err
    bad = root / "bad.ini"
    bad.write_text("[model]\nwidth = 3\n")
    assert _run("train", "--config", bad, "--input", data) == 2


def test_usage_error_exit_2(capsys):
    assert main(["frobnicate"]) == 2
    assert main([]) == 2


def test_data_error_exit_3(workspace):
    root, cfg, _ = workspace
    bad = root / "dup.csv"
    bad.write_text("timestamp,x\n0,1\n0,2\n")
    assert _run("train", "--config", cfg, "--input", bad) == 3


def test_predict_rows_and_matches_evaluate(workspace, capsys):
    root, cfg, data = workspace
    out = root / "out"
    assert _run("train", "--config", cfg, "--input", data, "--output-dir", out) == 0
    ckpt = out / "model.m2fm"
    pred_path = root / "pred.csv"
    assert _run("predict", "--checkpoint", ckpt, "--input", data, "--output", pred_path) == 0
    lines = pred_path.read_text().splitlines()
    assert lines[0] == "step,level"
    assert len(lines) - 1 == 4
    assert [int(r.split(",")[0]) for r in lines[1:]] == [1, 2, 3, 4]

    model, norm = load_model(ckpt)
    series = load_csv(data)
    z = norm.apply(series.values)
    from m2fmoe.data import windows_at
    tail = windows_at(np.vstack([z, np.zeros((4, 1))]), [len(z) - 24], 24, 4, norm)
    ref = norm.invert(model.predict(tail.inputs))[0, :, 0]
    got = np.array([float(r.split(",")[1]) for r in lines[1:]])
    assert np.array_equal(got, ref)

    assert _run("predict", "--checkpoint", ckpt, "--input", data, "--horizon", 7) == 2
    short = root / "short.csv"
    write_csv(short, RawSeries(np.arange(10), np.ones((10, 1)), ("level",)))
    assert _run("predict", "--checkpoint", ckpt, "--input", short) == 3
    assert _run("predict", "--checkpoint", root / "none.m2fm", "--input", data) == 2


def test_evaluate_command(workspace, capsys):
    root, cfg, data = workspace
    out = root / "out"
    _run("train", "--config", cfg, "--input", data, "--output-dir", out)
    capsys.readouterr()
    assert _run("evaluate", "--checkpoint", out / "model.m2fm", "--input", data, "--output-dir", out) == 0
    scores = json.loads(capsys.readouterr().out)
    assert scores["windows"] == (600 - 24) // 4
    assert (out / "metrics_eval.json").is_file()


def test_ablation_variants(workspace, capsys):
    root, cfg, data = workspace
    assert _run("ablation", "--config", cfg, "--input", data, "--variant", "w/o-DualView",
                "--output-dir", root) == 0
    m = json.loads((root / "metrics_w_o-DualView.json").read_text())
    assert m["variant"] == "w/o-DualView"
    assert _run("ablation", "--config", cfg, "--input", data, "--variant", "w/o-Magic") == 2
    assert "w/o-WaveletView" in capsys.readouterr().err


def test_analyze_spectrum_outputs(workspace):
    root, cfg, data = workspace
    assert _run("analyze-spectrum", "--config", cfg, "--input", data, "--output-dir", root) == 0
    rows = (root / "bands.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["band_index", "f_lo", "f_hi", "a_lo", "a_hi", "energy_dft", "energy_cwt"]
    assert len(rows) == 3
    assert (root / "spectrum.tsv").is_file() and (root / "scales.tsv").is_file()


def test_analyze_spectrum_constant_and_parseval():
    bands, _, _ = analyze_spectrum(np.full(64, 3.0))
    assert all(b["energy_dft"] == 0 and b["energy_cwt"] == 0 for b in bands)
    v = np.cumsum(np.random.default_rng(0).normal(size=200))
    bands, _, _ = analyze_spectrum(v)
    dx = np.diff(v)
    total = sum(b["energy_dft"] for b in bands)
    assert all(b["energy_dft"] >= 0 and b["energy_cwt"] >= 0 for b in bands)
    assert total == pytest.approx(len(dx) * np.sum(dx ** 2), rel=1e-6)


def test_analyze_spectrum_sinusoid_in_band():
    n = 241
    # differenced sinusoid stays a sinusoid; put it at 0.8 of Nyquist, inside the top band
    v = np.sin(0.8 * np.pi * np.arange(n))
    bands, _, _ = analyze_spectrum(v)
    e = [b["energy_dft"] for b in bands]
    assert e[2] / sum(e) > 0.9


def test_oversample_report(workspace, capsys):
    root, cfg, data = workspace
    assert _run("oversample-report", "--config", cfg, "--input", data, "--output-dir", root) == 0
    rep = json.loads((root / "oversample.json").read_text())
    assert set(rep) == {"extreme_count", "windows_added", "cap_applied"}


def test_run_config_overrides():
    rc = load_run_config(None, ["hidden=8", "train.lr=0.01", "model.variant=w/o-CSS"], seed=3)
    assert rc.model.hidden == 8 and rc.train.lr == 0.01 and rc.train.seed == 3
    assert rc.model.flags.uniform_splitter
    with pytest.raises(ConfigError):
        load_run_config(None, ["seedless"])
    with pytest.raises(ConfigError):
        load_run_config(None, ["model.t_recent=1000"])


REPO = __import__("pathlib").Path(__file__).resolve().parent.parent


def test_bundled_configs_parse_to_defaults():
    rc = load_run_config(str(REPO / "configs" / "default.ini"), [])
    assert rc.model == load_run_config(None, []).model
    assert rc.paths["data"] == "data/synthetic.csv"
    load_run_config(str(REPO / "configs" / "quick.ini"), [])


def test_quick_config_on_bundled_series(tmp_path):
    data = REPO / "data" / "synthetic.csv"
    assert len(load_csv(data)) == 4000
    assert _run("train", "--config", REPO / "configs" / "quick.ini", "--input", data,
                "--output-dir", tmp_path) == 0
    assert (tmp_path / "model.m2fm").is_file()


def test_options_before_subcommand_are_kept():
    from m2fmoe.cli import build_parser
    p = build_parser()
    assert p.parse_args(["--seed", "3", "train"]).seed == 3
    assert p.parse_args(["--seed", "3", "train", "--seed", "5"]).seed == 5
    assert p.parse_args(["train"]).set == []
