import json

import pytest
import yaml

from fedchain.cli import cli_main
from fedchain.config import ConfigError, ScenarioConfig, config_from_mapping, dump_config, parse_config
from fedchain.harness import paper_tables, write_artifacts
from fedchain.metrics import CSV_HEADER, MetricsTable, emit_metrics, read_metrics
from fedchain.scenario import run_scenario

SMALL = dict(dataset="synthetic", peers=3, rounds=3, epochs=1, synthetic_n=150, synthetic_classes=3,
             synthetic_dim=4, synthetic_margin=1.0, hidden=4, learning_rate=0.1, batch_size=8,
             difficulty=4, block_interval=1.0)


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


# ------------------------------------------------------------- config

def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_config(write_yaml(tmp_path / "c.yaml", {"dataset": "synthetic"}))
    assert cfg.rounds == 10 and cfg.epochs == 5
    assert cfg.learning_rate == 0.01 and cfg.batch_size == 32 and cfg.peers == 3


def test_empty_file_is_all_defaults(tmp_path):
    p = tmp_path / "e.yaml"
    p.write_text("")
    assert parse_config(p) == ScenarioConfig()


def test_negative_learning_rate_names_key(tmp_path):
    with pytest.raises(ConfigError, match="^learning_rate"):
        parse_config(write_yaml(tmp_path / "c.yaml", {"learning_rate": -0.1}))


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="^colour: unknown key"):
        config_from_mapping({"colour": "blue"})


@pytest.mark.parametrize("data,key", [({"rounds": 2.5}, "rounds"), ({"mining": "yes"}, "mining"),
                                      ({"trigger": "quorum"}, "quorum_size"),
                                      ({"policy": "threshold_filter"}, "threshold"),
                                      ({"partitions": [{"peers": [0]}]}, "partitions")])
def test_bad_values_name_their_key(data, key):
    with pytest.raises(ConfigError, match=f"^{key}"):
        config_from_mapping(data)


def test_dump_parse_round_trip(tmp_path):
    cfg = ScenarioConfig(**SMALL, policy="threshold_filter", threshold=0.4,
                         partitions=({"peers": [1], "start": 0.0, "end": 3.0},), seed=7)
    p = tmp_path / "r.yaml"
    p.write_text(dump_config(cfg))
    assert parse_config(p) == cfg


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / "nope.yaml")


# ------------------------------------------------------------ metrics

def test_empty_metrics_is_header_only(tmp_path):
    p = emit_metrics(MetricsTable(), tmp_path / "m.csv")
    assert p.read_text() == ",".join(CSV_HEADER) + "\n"


def test_same_seed_gives_identical_csv(tmp_path):
    a = write_artifacts(run_scenario(ScenarioConfig(**SMALL, seed=3)), tmp_path / "a")
    b = write_artifacts(run_scenario(ScenarioConfig(**SMALL, seed=3)), tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.name == pb.name and pa.read_bytes() == pb.read_bytes()


def test_metrics_rows_have_expected_format(tmp_path):
    res = run_scenario(ScenarioConfig(**SMALL, policy="consider_best"))
    write_artifacts(res, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert len(rows) == 3 * 3 * 5
    assert {r["combo"] for r in rows if r["peer"] == "0"} == {"0", "0+1", "0+2", "1+2", "0+1+2"}
    assert all(len(r["accuracy"].split(".")[1]) == 4 for r in rows)


def test_thread_count_does_not_change_results():
    one = run_scenario(ScenarioConfig(**SMALL, policy="consider_best", threads=1))
    four = run_scenario(ScenarioConfig(**SMALL, policy="consider_best", threads=4))
    assert one.metrics.rows == four.metrics.rows
    assert one.peer_models == four.peer_models
    cen1 = run_scenario(ScenarioConfig(**SMALL, mode="centralized", threads=1))
    cen4 = run_scenario(ScenarioConfig(**SMALL, mode="centralized", threads=4))
    assert cen1.global_models == cen4.global_models


# ---------------------------------------------------------------- CLI

def test_cli_run_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert cli_main(["run", str(missing)]) != 0
    assert str(missing) in capsys.readouterr().err


def test_cli_run_writes_artifacts(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", SMALL)
    out = tmp_path / "out"
    assert cli_main(["run", str(cfg), "--out-dir", str(out), "--seed", "2"]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"metrics.csv", "trace.csv", "config.resolved.yaml", "chain_peer0.jsonl"} <= names
    assert parse_config(out / "config.resolved.yaml").seed == 2


def test_cli_replay_ok_and_tampered(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", SMALL)
    out = tmp_path / "out"
    assert cli_main(["run", str(cfg), "--out-dir", str(out)]) == 0
    dump = out / "chain_peer0.jsonl"
    assert cli_main(["replay-chain", str(dump)]) == 0
    assert "blocks OK" in capsys.readouterr().out

    lines = dump.read_text().splitlines()
    blk = json.loads(lines[1])
    sig = blk["updates"][0]["signature"]
    blk["updates"][0]["signature"] = ("0" if sig[0] != "0" else "1") + sig[1:]
    lines[1] = json.dumps(blk)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    assert cli_main(["replay-chain", str(bad)]) == 2
    msg = capsys.readouterr().out
    assert f"block height {blk['height']}" in msg and "bad_block_hash" in msg


def test_cli_gradcheck(capsys):
    assert cli_main(["gradcheck"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_paper_tables_on_synthetic_overrides(tmp_path):
    cfg_dir = tmp_path / "cfg"
    cfg_dir.mkdir()
    write_yaml(cfg_dir / "centralized.yaml", dict(SMALL, mode="centralized"))
    write_yaml(cfg_dir / "decentralized.yaml", dict(SMALL, policy="consider_best"))
    out = tmp_path / "tables"
    assert cli_main(["paper-tables", str(cfg_dir), "--out-dir", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["table2_consider.csv", "table2_not_consider.csv", "table3.csv", "table4.csv", "table5.csv"]
    assert len(read_metrics(out / "table3.csv")) == 3 * 5
    assert len(read_metrics(out / "table2_consider.csv")) == 3 * 3


def test_paper_tables_function_applies_overrides(tmp_path):
    cfg_dir = tmp_path / "cfg"
    cfg_dir.mkdir()
    write_yaml(cfg_dir / "centralized.yaml", SMALL)
    write_yaml(cfg_dir / "decentralized.yaml", SMALL)
    paths = paper_tables(cfg_dir, tmp_path / "t", {"rounds": 1})
    assert len(read_metrics(paths[-1])) == 5
