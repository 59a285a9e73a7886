"""Tests for the command-line front end: config parsing, artifacts,
exit codes and the machine-readable stdout contract."""

import json
import os

import numpy as np
import pytest

from imtl.cli import (ABLATE_CHOICES, SEED_ENV, load_config, main)
from imtl.errors import ConfigError
from imtl.harness import read_metrics

BASE_INI = """\
[run]
epochs = 30
batch = 20
lr = 1e-3
seeds = 0,1
cache_size = 200

[strategy]
kind = lp
"""


@pytest.fixture
def ini(tmp_path):
    path = tmp_path / "lp.ini"
    path.write_text(BASE_INI)
    return path


def write_ini(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out.splitlines(), captured.err


def stdout_fields(lines, tag):
    """Parsed key=value dicts of the stdout lines starting with `tag`."""
    rows = []
    for line in lines:
        parts = line.split()
        if parts and parts[0] == tag:
            rows.append(dict(p.split("=", 1) for p in parts[1:]))
    return rows


# -- config files --------------------------------------------------------------


def test_load_config_defaults(tmp_path):
    loaded = load_config(write_ini(tmp_path, "min.ini", "[strategy]\nkind = lp\n"))
    cfg = loaded.config
    assert cfg.epochs == 3000
    assert cfg.batch == 100
    assert cfg.lr == 1e-4
    assert cfg.seeds == tuple(range(10))
    assert cfg.strategy.window == 5
    assert cfg.strategy.epsilon == 0.1
    assert cfg.strategy.k == 1.0
    assert cfg.tasks == ("push", "hit", "stack")
    assert not loaded.single_baseline


def test_load_config_unknown_key_named(tmp_path):
    path = write_ini(tmp_path, "bad.ini", "[run]\nepochz = 10\n")
    with pytest.raises(ConfigError, match="epochz"):
        load_config(path)


def test_load_config_unknown_section(tmp_path):
    path = write_ini(tmp_path, "bad.ini", "[runner]\nepochs = 10\n")
    with pytest.raises(ConfigError, match="runner"):
        load_config(path)


def test_load_config_seed_forms(tmp_path):
    count = load_config(write_ini(tmp_path, "a.ini",
                                  "[run]\nseeds = 3\n[strategy]\nkind = lp\n"))
    assert count.config.seeds == (0, 1, 2)
    explicit = load_config(write_ini(tmp_path, "b.ini",
                                     "[run]\nseeds = 4,7\n[strategy]\nkind = lp\n"))
    assert explicit.config.seeds == (4, 7)


def test_load_config_task_name_resolution(tmp_path):
    loaded = load_config(write_ini(
        tmp_path, "b.ini",
        "[strategy]\nkind = block\nblock_order = stack,push,hit\n"))
    assert loaded.config.strategy.block_order == (2, 0, 1)
    loaded = load_config(write_ini(
        tmp_path, "s.ini", "[strategy]\nkind = single\nsingle_task = hit\n"))
    assert loaded.config.strategy.single_task == 1
    assert not loaded.single_baseline


def test_load_config_single_baseline_marker(tmp_path):
    loaded = load_config(write_ini(tmp_path, "s.ini",
                                   "[strategy]\nkind = single\n"))
    assert loaded.single_baseline


def test_load_config_missing_dataset_file(tmp_path):
    path = write_ini(tmp_path, "d.ini",
                     "[strategy]\nkind = lp\n[tasks]\n"
                     "data = a.csv,b.csv,c.csv\n")
    with pytest.raises(ConfigError, match="a.csv"):
        load_config(path)


# -- gen-data ------------------------------------------------------------------


def test_gen_data_deterministic_checksum(tmp_path, capsys):
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    code, lines, _ = run_cli(capsys, "gen-data", "--task", "push",
                             "--n", "250", "--seed", "5", "--out", out1)
    assert code == 0
    first = stdout_fields(lines, "dataset")[0]
    assert first["dims"] == "9,8,9"
    code, lines, _ = run_cli(capsys, "gen-data", "--task", "push",
                             "--n", "250", "--seed", "5", "--out", out2)
    assert code == 0
    assert stdout_fields(lines, "dataset")[0]["sha256"] == first["sha256"]
    with open(out1) as fh:
        assert fh.readline().strip() == "9,8,9"
        assert sum(1 for _ in fh) == 250


def test_gen_data_rejects_tiny_n(tmp_path, capsys):
    code, _, err = run_cli(capsys, "gen-data", "--task", "push", "--n", "0",
                           "--seed", "1", "--out", tmp_path / "x.csv")
    assert code == 2
    assert "n must be ≥ batch" in err


def test_gen_data_unknown_task(tmp_path, capsys):
    code, _, err = run_cli(capsys, "gen-data", "--task", "pull", "--n", "200",
                           "--seed", "1", "--out", tmp_path / "x.csv")
    assert code == 2
    assert "pull" in err


# -- run -----------------------------------------------------------------------


def test_run_writes_artifacts_and_summary(ini, tmp_path, capsys):
    code, lines, _ = run_cli(capsys, "run", "--config", ini,
                             "--out", tmp_path)
    assert code == 0
    summary_path = stdout_fields(lines, "artifact")[-1]["path"]
    with open(summary_path) as fh:
        summary = json.load(fh)
    assert summary["config"]["epochs"] == 30
    assert summary["seeds"] == [0, 1]
    for per_seed in summary["per_seed"]:
        assert sum(per_seed["engagement_counts"]) == 30
    assert set(summary["data_checksums"]) == {"push", "hit", "stack"}
    log = read_metrics(summary["artifacts"]["metrics"][0])
    assert log.epochs == 30
    assert os.path.exists(summary["artifacts"]["checkpoints"][0])


def test_run_seed_flag_overrides_config(ini, tmp_path, capsys):
    code, lines, _ = run_cli(capsys, "run", "--config", ini, "--seed", "6",
                             "--out", tmp_path)
    assert code == 0
    seeds = {row["seed"] for row in stdout_fields(lines, "artifact")
             if "seed" in row}
    assert seeds == {"6"}


def test_run_env_seed_overrides_flag(ini, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "8")
    code, lines, _ = run_cli(capsys, "run", "--config", ini, "--seed", "6",
                             "--out", tmp_path)
    assert code == 0
    seeds = {row["seed"] for row in stdout_fields(lines, "artifact")
             if "seed" in row}
    assert seeds == {"8"}


def test_run_emlp_config_echoed(tmp_path, capsys):
    path = write_ini(tmp_path, "emlp.ini", BASE_INI.replace(
        "kind = lp", "kind = emlp\nk = 1.0"))
    code, lines, _ = run_cli(capsys, "run", "--config", path,
                             "--out", tmp_path)
    assert code == 0
    with open(stdout_fields(lines, "artifact")[-1]["path"]) as fh:
        summary = json.load(fh)
    assert summary["config"]["strategy"]["kind"] == "emlp"
    assert summary["config"]["strategy"]["k"] == 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_abort_exits_3_with_partial_log(tmp_path, capsys):
    path = write_ini(tmp_path, "boom.ini", BASE_INI.replace(
        "lr = 1e-3", "lr = 1e9").replace("seeds = 0,1", "seeds = 1"))
    code, lines, err = run_cli(capsys, "run", "--config", path,
                               "--out", tmp_path)
    assert code == 3
    assert "aborted" in err
    partial = stdout_fields(lines, "artifact")[0]["path"]
    assert read_metrics(partial).failure


def test_run_single_baseline_runs_each_leg(tmp_path, capsys):
    path = write_ini(tmp_path, "single.ini", BASE_INI.replace(
        "kind = lp", "kind = single").replace("seeds = 0,1", "seeds = 1"))
    code, lines, _ = run_cli(capsys, "run", "--config", path,
                             "--out", tmp_path)
    assert code == 0
    with open(stdout_fields(lines, "artifact")[-1]["path"]) as fh:
        summary = json.load(fh)
    engaged = [p["engaged_task"] for p in summary["per_seed"]]
    assert engaged == [0, 1, 2]
    counts = [p["engagement_counts"] for p in summary["per_seed"]]
    assert all(c[i] == 30 for c, i in zip(counts, engaged))


# -- compare / block-suite -----------------------------------------------------


def test_compare_outputs_curves_and_midpoints(ini, tmp_path, capsys):
    rand = write_ini(tmp_path, "rand.ini",
                     BASE_INI.replace("kind = lp", "kind = rand"))
    code, lines, _ = run_cli(capsys, "compare", "--configs", ini, rand,
                             "--out", tmp_path)
    assert code == 0
    mids = stdout_fields(lines, "midpoint")
    assert [m["label"] for m in mids] == ["lp", "rand"]
    curves = np.genfromtxt(tmp_path / "compare_curves.csv", delimiter=",",
                           names=True, dtype=None, encoding="utf-8",
                           skip_header=1)
    assert set(curves["label"]) == {"lp", "rand"}
    assert np.sum(curves["label"] == "lp") == 30
    table = (tmp_path / "compare_midpoint.csv").read_text().splitlines()
    assert len(table) == 4  # magic + header + two rows


def test_compare_rejects_mismatched_epochs(ini, tmp_path, capsys):
    other = write_ini(tmp_path, "long.ini",
                      BASE_INI.replace("epochs = 30", "epochs = 60"))
    code, _, err = run_cli(capsys, "compare", "--configs", ini, other,
                           "--out", tmp_path)
    assert code == 2
    assert "epoch" in err


def test_block_suite_emits_all_orders(tmp_path, capsys):
    path = write_ini(tmp_path, "block.ini", BASE_INI.replace(
        "kind = lp", "kind = block\nblock_order = push,hit,stack").replace(
        "seeds = 0,1", "seeds = 1"))
    code, lines, _ = run_cli(capsys, "block-suite", "--config", path,
                             "--out", tmp_path)
    assert code == 0
    orders = {row["order"] for row in stdout_fields(lines, "forgetting")}
    assert len(orders) == 6
    table = (tmp_path / "block_forgetting.csv").read_text().splitlines()
    assert len(table) == 2 + 6 * 2  # two boundaries per order


# -- ablate / transfer / regime ------------------------------------------------


def test_ablate_mode_choices_match_grid():
    assert ABLATE_CHOICES == ("full", "no-flag", "no-attn", "no-both")


def test_ablate_runs_reduced_model(ini, tmp_path, capsys):
    code, lines, _ = run_cli(capsys, "ablate", "--config", ini, "--mode",
                             "no-both", "--seed", "0", "--out", tmp_path)
    assert code == 0
    with open(stdout_fields(lines, "artifact")[-1]["path"]) as fh:
        summary = json.load(fh)
    assert summary["config"]["use_attention"] is False
    assert summary["config"]["use_flag"] is False


def test_ablate_full_equals_run(ini, tmp_path, capsys):
    code, lines, _ = run_cli(capsys, "ablate", "--config", ini, "--mode",
                             "full", "--seed", "0", "--out", tmp_path)
    assert code == 0
    abl = read_metrics(tmp_path / "metrics_full_seed0.csv")
    code, _, _ = run_cli(capsys, "run", "--config", ini, "--seed", "0",
                         "--out", tmp_path)
    assert code == 0
    base = read_metrics(tmp_path / "metrics_lp_seed0.csv")
    assert np.array_equal(abl.eval_mae, base.eval_mae)


def test_transfer_report_from_checkpoints(ini, tmp_path, capsys):
    run_cli(capsys, "run", "--config", ini, "--seed", "0", "--out", tmp_path)
    data = tmp_path / "data"
    data.mkdir()
    for task in ("push", "hit", "stack"):
        run_cli(capsys, "gen-data", "--task", task, "--n", "300",
                "--seed", "2", "--out", data / f"{task}.csv")
    out = tmp_path / "transfer.csv"
    code, lines, _ = run_cli(capsys, "transfer", "--checkpoint",
                             tmp_path / "model_lp_seed0.ckpt",
                             "--data", data, "--out", out)
    assert code == 0
    rows = out.read_text().splitlines()
    assert rows[1] == "target,group,source,n,dl_mean,dl_std,l_full"
    controls = [r for r in rows[2:] if ",none," in r]
    assert controls and all(r.split(",")[4] == "0" for r in controls)


def test_regime_window_count(ini, tmp_path, capsys):
    path = write_ini(tmp_path, "r120.ini",
                     BASE_INI.replace("epochs = 30", "epochs = 120")
                     .replace("seeds = 0,1", "seeds = 1"))
    run_cli(capsys, "run", "--config", path, "--out", tmp_path)
    out = tmp_path / "regime.csv"
    code, lines, _ = run_cli(capsys, "regime", "--metrics",
                             tmp_path / "metrics_lp_seed0.csv", "--out", out)
    assert code == 0
    assert stdout_fields(lines, "regime")[0]["windows"] == "8"
    rows = out.read_text().splitlines()[2:]
    assert len(rows) == 8
    assert all(sum(int(c) for c in r.split(",")[1:]) == 50 for r in rows)


# -- plot ----------------------------------------------------------------------


def test_plot_renders_svg(ini, tmp_path, capsys):
    rand = write_ini(tmp_path, "rand.ini",
                     BASE_INI.replace("kind = lp", "kind = rand"))
    run_cli(capsys, "compare", "--configs", ini, rand, "--out", tmp_path)
    svg = tmp_path / "chart.svg"
    spec = write_ini(tmp_path, "plot.ini", f"""\
[plot]
out = {svg}
title = strategies
[series:lp]
file = {tmp_path / 'compare_curves.csv'}
[series:rand]
file = {tmp_path / 'compare_curves.csv'}
""")
    code, lines, _ = run_cli(capsys, "plot", "--spec", spec)
    assert code == 0
    assert svg.read_text().lstrip().startswith("<?xml")


def test_plot_metrics_file_single_polyline(ini, tmp_path, capsys):
    run_cli(capsys, "run", "--config", ini, "--seed", "0", "--out", tmp_path)
    svg = tmp_path / "m.svg"
    spec = write_ini(tmp_path, "plot.ini", f"""\
[plot]
out = {svg}
[series:seed0]
file = {tmp_path / 'metrics_lp_seed0.csv'}
column = eval:push
""")
    code, _, _ = run_cli(capsys, "plot", "--spec", spec)
    assert code == 0
    assert svg.exists()


def test_plot_rejects_unknown_series_key(tmp_path, capsys):
    spec = write_ini(tmp_path, "plot.ini",
                     "[plot]\nout = x.svg\n[series:a]\nfile = x\ncolor = red\n")
    code, _, err = run_cli(capsys, "plot", "--spec", spec)
    assert code == 2
    assert "color" in err
