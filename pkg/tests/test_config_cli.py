import json

import pytest

from tpg import ConfigError
from tpg.cli import main
from tpg.config import ABLATIONS, RunConfig, apply_overrides, load_config
from tpg.data import read_manifest


def test_round_trip():
    run = RunConfig(seed=3, ablate=["no_cls"])
    back = RunConfig.from_dict(json.loads(run.to_json()))
    assert back == run
    assert back.hash() == run.hash()


def test_overrides():
    run = load_config(None, ["sldm.steps=12", "sldm.widths=[8,8,8]", "seed=5", "ldn.use_sat=false"])
    assert run.sldm.steps == 12 and run.sldm.widths == (8, 8, 8)
    assert run.seed == 5 and run.ldn.use_sat is False
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals_sign"])


def test_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"sldm": {"lr": 0.5}, "seed": 9}))
    run = load_config(p, ["sldm.steps=4"])
    assert run.sldm.lr == 0.5 and run.sldm.steps == 4 and run.seed == 9
    assert run.sldm.T == 1000  # untouched keys keep defaults


@pytest.mark.parametrize("bad", [
    {"ablate": ["no_everything"]},
    {"sldm": {"labeled_fraction": 0.0}},
    {"sldm": {"align_t_max": 0}},
    {"sldm": {"lambda_cls": -1.0}},
    {"sldm": {"not_a_key": 1}},
    {"bogus": 1},
])
def test_invalid(bad):
    d = RunConfig().to_dict()
    for k, v in bad.items():
        if isinstance(v, dict):
            d[k].update(v)
        else:
            d[k] = v
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)


def test_stage_hash_scope():
    a = RunConfig()
    b = RunConfig(ablate=["no_std"])
    assert a.stage_hash("ldn") == b.stage_hash("ldn")
    assert a.stage_hash("sldm") != b.stage_hash("sldm")
    assert set(ABLATIONS) >= {"no_ldn", "no_alignment", "no_cls", "no_std"}


def _err(capsys):
    return capsys.readouterr().err.strip()


def test_cli_bad_ablation(tmp_path, capsys):
    rc = main(["gen-data", "--out", str(tmp_path), "--ablate", "no_such"])
    assert rc == 2
    assert _err(capsys).startswith("error CONFIG_INVALID")


def test_cli_gen_data(tmp_path, capsys):
    rc = main(["gen-data", "--out", str(tmp_path / "d"), "--seed", "4",
               "--set", "data.labeled_count=3", "--set", "data.unlabeled_count=2"])
    assert rc == 0
    rows = read_manifest(tmp_path / "d" / "manifest.jsonl")
    assert len(rows) == 5
    resolved = json.loads((tmp_path / "d" / "resolved_config.json").read_text())
    assert resolved["seed"] == 4 and resolved["data"]["seed"] == 4
    assert '"labeled_count": 3' in capsys.readouterr().out


def test_cli_train_sldm_needs_stage_one(tmp_path, capsys):
    rc = main(["train-sldm", "--out", str(tmp_path / "run"), "--data", str(tmp_path / "m.jsonl")])
    assert rc == 2
    assert _err(capsys).startswith("error STATE_INVALID")
    assert not (tmp_path / "run" / "sldm.pt").exists()


def test_cli_missing_inputs(tmp_path, capsys):
    rc = main(["evaluate", "--out", str(tmp_path), "--data", str(tmp_path / "m.jsonl"),
               "--ldn", str(tmp_path / "a.pt"), "--sldm", str(tmp_path / "b.pt")])
    assert rc == 2
    assert _err(capsys).startswith("error ")


def test_cli_bad_config_file(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["gen-data", "--out", str(tmp_path), "--config", str(p)]) == 2
    assert _err(capsys).startswith("error CONFIG_INVALID")
