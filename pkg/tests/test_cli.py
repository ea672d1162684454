import csv
import json

import numpy as np
import pytest

from feddp import cli, metrics
from feddp.config import load_config
from feddp.fed import Federation
from feddp.nn import preset


def tiny_config(tmp_path, name="tiny", **sections):
    cfg = {
        "dataset": {"kind": "synthetic", "classes": 4, "per_class": 20, "test_per_class": 10},
        "partition": {"num_clients": 4, "beta": 0.5},
        "federation": {"rounds": 2, "local_epochs": 1, "batch_size": 16,
                       "control_denominator": "total_steps"},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- run --------------------------------------------------------------------

def test_run_writes_one_row_per_round(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    got = rows(tmp_path / "o" / "metrics.csv")
    assert [r["round"] for r in got] == ["1", "2"]
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["rounds"] == 2 and "cost" in summary and "rounds_to_target" in summary
    assert summary["gate_bytes"] == 0


def test_bad_sample_rate_exits_2_naming_field(tmp_path, capsys):
    cfg = tiny_config(tmp_path, federation={"sample_rate": 1.5, "rounds": -1})
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    # every problem is reported, not just the first
    assert "federation.sample_rate" in err and "federation.rounds" in err
    assert not (tmp_path / "o").exists()


def test_unknown_field_and_missing_file_exit_2(tmp_path, capsys):
    cfg = tiny_config(tmp_path, federation={"learning_rate": 0.1})
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert "federation.learning_rate" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_divergence_exits_3_with_context(tmp_path, capsys):
    cfg = tiny_config(tmp_path, federation={"lr": 1e200})
    with np.errstate(all="ignore"):
        assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "round 1, client" in capsys.readouterr().err


def test_rerun_is_byte_identical(tmp_path):
    cfg = tiny_config(tmp_path)
    for out in ("a", "b"):
        assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
    for name in ("metrics.csv", "partition.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    cfg = tiny_config(tmp_path)
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "9"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != \
        (tmp_path / "b" / "metrics.csv").read_bytes()


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    cfg = tiny_config(tmp_path, name="envrun")
    assert cli.main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "root" / "envrun" / "metrics.csv").exists()


def test_strategies_share_shards_and_initial_weights(tmp_path):
    cfg = load_config(tiny_config(tmp_path))
    train, test, part = cli._prepare(cfg)
    model = cli.build_model(cfg, train)
    a = Federation.build(model, train, part, cfg.fl_config(strategy="fedavg"), test)
    b = Federation.build(model, train, part, cfg.fl_config(strategy="scaffold"), test)
    assert a.server.w.to_bytes() == b.server.w.to_bytes()
    for ca, cb in zip(a.clients, b.clients):
        assert np.array_equal(ca.train.labels, cb.train.labels)
        assert np.array_equal(ca.train.images, cb.train.images)


# -- partition ----------------------------------------------------------------

def partition_rows(tmp_path, **part):
    cfg = tiny_config(tmp_path, partition=part,
                      dataset={"per_class": 100})
    assert cli.main(["partition", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 0
    return rows(tmp_path / "p" / "histogram.csv")


def test_partition_single_client_holds_everything(tmp_path, capsys):
    got = partition_rows(tmp_path, num_clients=1)
    assert len(got) == 1
    assert [got[0][f"class{c}"] for c in range(4)] == ["100"] * 4
    assert got[0]["total"] == "400"
    assert "chi-square" in capsys.readouterr().out


def test_partition_huge_beta_is_uniform(tmp_path):
    got = partition_rows(tmp_path, num_clients=4, beta=1e6)
    assert sum(int(r["total"]) for r in got) == 400
    for r in got:
        counts = np.array([int(r[f"class{c}"]) for c in range(4)])
        assert np.all(np.abs(counts / counts.sum() - 0.25) <= 0.05)


def test_partition_json_is_stable(tmp_path):
    cfg = tiny_config(tmp_path)
    for out in ("a", "b"):
        cli.main(["partition", "--config", str(cfg), "--out", str(tmp_path / out)])
    assert (tmp_path / "a" / "partition.json").read_bytes() == \
        (tmp_path / "b" / "partition.json").read_bytes()


# -- flops --------------------------------------------------------------------

def flops_json(capsys, *argv):
    assert cli.main(["flops", "--json", *argv]) == 0
    return json.loads(capsys.readouterr().out)


def test_flops_full_width_is_no_reduction(capsys):
    rep = flops_json(capsys, "--model", "tiny-vgg", "--keep-ratio", "1.0")
    assert rep["reduction_pct"] == 0.0


def test_flops_vgg11_default_is_about_half(capsys):
    rep = flops_json(capsys)
    assert rep["model"] == "vgg11-shape"
    assert abs(rep["reduction_pct"] - 50.0) <= 2.0


def test_flops_table_lists_layers(capsys):
    assert cli.main(["flops", "--model", "tiny-vgg"]) == 0
    out = capsys.readouterr().out
    assert "conv3" in out and "reduction" in out


def test_mid_layer_scales_quadratically():
    model = preset("tiny-vgg")
    full = dict(metrics.layer_flops(model))
    half = dict(metrics.layer_flops(model, metrics.keep_widths(model, 0.5)))
    # conv3 sits between two gated convs: both widths halve
    assert 1 - half["conv3"] / full["conv3"] == 0.75


@pytest.mark.parametrize("argv", [["--model", "alexnet"], ["--keep-ratio", "0"]])
def test_flops_bad_arguments_exit_2(argv, capsys):
    assert cli.main(["flops", *argv]) == 2
    assert "error" in capsys.readouterr().err


# -- sweep --------------------------------------------------------------------

def test_sweep_restricted_to_one_cell(tmp_path):
    cfg = tiny_config(tmp_path, sweep={"strategies": ["fedavg"], "pruning": [False]})
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    got = rows(tmp_path / "s" / "sweep.csv")
    assert {(r["strategy"], r["pruning"]) for r in got} == {("fedavg", "false")}
    assert len(got) == 2


def test_full_sweep_has_eight_groups_on_one_partition(tmp_path):
    cfg = tiny_config(tmp_path, federation={"rounds": 1})
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    got = rows(tmp_path / "s" / "sweep.csv")
    assert len({(r["strategy"], r["pruning"]) for r in got}) == 8
    summary = json.loads((tmp_path / "s" / "sweep_summary.json").read_text())
    assert len({g["partition_sha256"] for g in summary["groups"]}) == 1
    parts = {p.read_bytes() for p in (tmp_path / "s").glob("*/partition.json")}
    assert len(parts) == 1
