import json

import pytest

from ds2net.cli import main
from ds2net.synthdata import MANIFEST, read_manifest
from ds2net.trainer import RunConfig

FAST = dict(widths=[4, 8, 8], head_hidden=8, batch_size=2, iterations=4, eval_interval=2, checkpoint_interval=2)


def write_cfg(path, **kw):
    path.write_text(json.dumps({**FAST, **kw}))
    return str(path)


def small_spec(tmp_path, **counts):
    spec = {"n_train_A": 3, "n_test_A": 2, "n_train_B": 3, "n_test_B": 2, **counts}
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec))
    return str(p)


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--spec", small_spec(root), "--out", str(root / "data")]) == 0
    return root / "data"


def test_gen_data_writes_manifest_and_config(cli_data):
    assert len(read_manifest(cli_data / MANIFEST)) == 10
    cfg = json.loads((cli_data / "gen_config.json").read_text())
    assert cfg["seed"] == 0 and cfg["n_train_A"] == 3 and cfg["height"] == 96


def test_gen_data_rerun_without_force_is_config_error(cli_data, tmp_path, capsys):
    assert main(["gen-data", "--spec", small_spec(tmp_path), "--out", str(cli_data)]) == 2
    assert "force" in capsys.readouterr().err


def test_gen_data_seed_changes_files_not_schema(tmp_path):
    spec = small_spec(tmp_path)
    assert main(["gen-data", "--spec", spec, "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main(["gen-data", "--spec", spec, "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    a = (tmp_path / "a" / MANIFEST).read_text().splitlines()
    b = (tmp_path / "b" / MANIFEST).read_text().splitlines()
    assert a[0] == b[0] and a[1:] != b[1:]
    assert main(["gen-data", "--spec", spec, "--out", str(tmp_path / "a"), "--seed", "2", "--force"]) == 0
    assert (tmp_path / "a" / MANIFEST).read_text() == (tmp_path / "b" / MANIFEST).read_text()


def test_gen_data_bad_spec_key(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"hue": 3}))
    assert main(["gen-data", "--spec", str(p), "--out", str(tmp_path / "o")]) == 2


def test_train_source_only_summary(cli_data, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", name="src", symmetric=False, feature_align=False, ddsm=False, dusm=False)
    assert main(["train", "--config", cfg, "--data", str(cli_data), "--out", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and out[0].startswith("run=src-s0") and "A/test:IoU=" in out[0]
    assert RunConfig.from_json(tmp_path / "run" / "config.json").name == "src"


def test_train_resume_matches_uninterrupted(cli_data, tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    common = ["--config", cfg, "--data", str(cli_data)]
    assert main(["train", *common, "--out", str(tmp_path / "whole")]) == 0
    assert main(["train", *common, "--out", str(tmp_path / "part"), "--stop-at", "2"]) == 0
    assert main(["train", *common, "--out", str(tmp_path / "part")]) == 2
    assert main(["train", *common, "--out", str(tmp_path / "part"), "--resume"]) == 0
    for name in ("metrics.csv", "checkpoint.bin"):
        assert (tmp_path / "whole" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_train_bad_key_exit_2_names_key(cli_data, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", momentum_typo=0.5)
    assert main(["train", "--config", cfg, "--data", str(cli_data), "--out", str(tmp_path / "r")]) == 2
    assert "momentum_typo" in capsys.readouterr().err


def test_train_missing_data_exit_3(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exit_4(cli_data, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", lr_encoder=1e30, lr_head=1e30, symmetric=False, feature_align=False, ddsm=False, dusm=False)
    assert main(["train", "--config", cfg, "--data", str(cli_data), "--out", str(tmp_path / "r")]) == 4
    assert "first bad op" in capsys.readouterr().err


def test_eval_writes_results(cli_data, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    main(["train", "--config", cfg, "--data", str(cli_data), "--out", str(tmp_path / "run")])
    capsys.readouterr()
    assert main(["eval", "--run", str(tmp_path / "run"), "--data", str(cli_data), "--path", "t"]) == 0
    res = json.loads((tmp_path / "run" / "eval.json").read_text())
    assert res["path"] == "t" and set(res["results"]) == {"A/test", "B/test"}
    assert (tmp_path / "run" / "eval_config.json").exists()


def test_ablate_reproducible_and_ordered(cli_data, tmp_path, capsys):
    ladder = tmp_path / "ladder.json"
    ladder.write_text(json.dumps({"base": {**FAST, "iterations": 2, "eval_interval": 2, "checkpoint_interval": 2}}))
    args = ["ablate", "--ladder", str(ladder), "--data", str(cli_data), "--seeds", "0,1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 2
    assert main([*args, "--out", str(tmp_path / "b"), "--force"]) == 0
    assert (tmp_path / "a" / "ablation.csv").read_bytes() == (tmp_path / "b" / "ablation.csv").read_bytes()
    assert (tmp_path / "a" / "ablation.md").read_bytes() == (tmp_path / "b" / "ablation.md").read_bytes()
    names = [line.split(" | ")[0].strip("| ") for line in (tmp_path / "a" / "ablation.md").read_text().splitlines()[2:]]
    assert names == ["w/o-DA", "+Symmetric", "+FA", "+DDSM", "+DUSM"]
    assert json.loads((tmp_path / "a" / "ladder.json").read_text())["seeds"] == [0, 1]


def test_ablate_all_failed_nonzero(cli_data, tmp_path):
    ladder = tmp_path / "ladder.json"
    ladder.write_text(json.dumps([{**FAST, "image_size": 32, "symmetric": False, "feature_align": False, "ddsm": False, "dusm": False}]))
    assert main(["ablate", "--ladder", str(ladder), "--data", str(cli_data), "--seeds", "0", "--out", str(tmp_path / "o")]) == 4


def test_ablate_bad_seeds(cli_data, tmp_path):
    assert main(["ablate", "--data", str(cli_data), "--seeds", "0,x", "--out", str(tmp_path / "o")]) == 2


def test_grad_check_command(tmp_path, capsys):
    assert main(["grad-check", "--seeds", "2", "--family", "elementwise", "--family", "upsample", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and all(line.endswith("PASS") for line in lines)
    assert json.loads((tmp_path / "grad_check.json").read_text())["seeds"] == 2
    assert main(["grad-check", "--family", "nope"]) == 2


def test_log_verbosity_from_environment(monkeypatch, tmp_path, cli_data, capsys):
    import logging

    monkeypatch.setenv("DS2NET_LOG", "INFO")
    cfg = write_cfg(tmp_path / "c.json", symmetric=False, feature_align=False, ddsm=False, dusm=False)
    root = logging.getLogger()
    old = root.level
    try:
        root.handlers.clear()
        main(["train", "--config", cfg, "--data", str(cli_data), "--out", str(tmp_path / "r")])
        assert logging.getLogger().level == logging.INFO
    finally:
        root.setLevel(old)
