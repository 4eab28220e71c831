import json

import pytest

from fcrnseg.cli import build_parser, main


def test_fov_table_command(capsys, tmp_path):
    assert main(["fov-table", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    body = out.strip().splitlines()[1:]
    assert len(body) == 37 and all(line.endswith("yes") for line in body)
    assert any(" 5   12   392" in line for line in body)
    assert any(" 7   12   584" in line for line in body)
    assert (tmp_path / "fov_table.txt").read_text().strip() == out.strip()


def test_unknown_flag_is_validation_error(capsys):
    assert main(["fov-table", "--nope"]) == 1
    assert main([]) == 1


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as e:
        build_parser().parse_args(["run", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--manifest", "--checkpoint", "--out", "--top-n", "--box-nms", "--region-nms",
                 "--oracle-semantic", "--config"):
        assert flag in text


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    (root / "scene.json").write_text(json.dumps({"num_categories": 2, "instances_per_image": [1, 3], "seed": 5}))
    assert main(["synth", "--config", str(root / "scene.json"), "--count", "4", "--out", str(root / "data")]) == 0
    train = {"iterations": 3, "batch_size": 2, "network": {"num_categories": 2}}
    (root / "train.json").write_text(json.dumps(train))
    m = str(root / "data" / "manifest.json")
    for cmd, sub in (("train-semantic", "semantic"), ("train-loc", "localization")):
        assert main([cmd, "--config", str(root / "train.json"), "--manifest", m, "--min-kept", "64",
                     "--seed", "1", "--out", str(root / "ck" / sub)]) == 0
    return root


def test_training_outputs(workspace):
    meta = json.loads((workspace / "ck" / "localization" / "config.json").read_text())
    assert meta["network"]["head"] == "localization"
    assert meta["train"]["bootstrap"]["min_kept"] == 64
    assert meta["train"]["bootstrap"]["mode"] == "localization"
    assert len((workspace / "ck" / "semantic" / "log.csv").read_text().splitlines()) == 4


def test_file_based_pipeline(workspace, capsys):
    m = str(workspace / "data" / "manifest.json")
    for sub in ("semantic", "localization"):
        assert main(["infer", "--checkpoint", str(workspace / "ck" / sub), "--manifest", m,
                     "--out", str(workspace / "maps" / sub)]) == 0
    assert main(["assemble", "--probs", str(workspace / "maps" / "semantic"),
                 "--transforms", str(workspace / "maps" / "localization"), "--top-n", "1",
                 "--out", str(workspace / "asm")]) == 0
    index = json.loads((workspace / "asm" / "index.json").read_text())
    assert len(index["images"]) == 4 and index["pipeline"]["top_n"] == 1
    assert main(["eval-instance", "--assembly", str(workspace / "asm"), "--manifest", m,
                 "--out", str(workspace / "ev")]) == 0
    rep = json.loads((workspace / "ev" / "instance.json").read_text())
    assert 0.0 <= rep["map_r@0.5"] <= 1.0
    assert main(["eval-semantic", "--checkpoint", str(workspace / "ck" / "semantic"), "--manifest", m]) == 0
    assert "mean_iou" in capsys.readouterr().out


def test_run_is_deterministic(workspace):
    args = ["run", "--manifest", str(workspace / "data" / "manifest.json"),
            "--checkpoint", str(workspace / "ck")]
    assert main(args + ["--out", str(workspace / "r1")]) == 0
    assert main(args + ["--out", str(workspace / "r2")]) == 0
    a = (workspace / "r1" / "report.json").read_bytes()
    assert a == (workspace / "r2" / "report.json").read_bytes()
    assert main(args + ["--out", str(workspace / "r3"), "--oracle-semantic"]) == 0
    assert json.loads((workspace / "r3" / "report.json").read_text())["oracle_semantic"] is True


def test_run_empty_manifest(tmp_path, capsys):
    assert main(["synth", "--count", "0", "--out", str(tmp_path / "d")]) == 0
    assert main(["run", "--manifest", str(tmp_path / "d"), "--checkpoint", str(tmp_path / "none"),
                 "--out", str(tmp_path / "r")]) == 0
    assert json.loads((tmp_path / "r" / "report.json").read_text())["num_images"] == 0


def test_missing_checkpoint_is_validation_error(workspace, tmp_path, capsys):
    code = main(["run", "--manifest", str(workspace / "data" / "manifest.json"),
                 "--checkpoint", str(tmp_path), "--out", str(tmp_path / "r")])
    assert code == 1
    assert "semantic/config.json" in capsys.readouterr().err


def test_bad_pipeline_value(workspace, tmp_path):
    assert main(["run", "--manifest", str(workspace / "data" / "manifest.json"), "--checkpoint",
                 str(workspace / "ck"), "--out", str(tmp_path), "--box-nms", "1.5"]) == 1


def test_runtime_failure_exit_code(tmp_path, capsys):
    (tmp_path / "scene.json").write_text(json.dumps({"instances_per_image": [0, 0]}))
    main(["synth", "--config", str(tmp_path / "scene.json"), "--count", "2", "--out", str(tmp_path / "d")])
    code = main(["train-loc", "--manifest", str(tmp_path / "d" / "manifest.json"), "--iterations", "2",
                 "--out", str(tmp_path / "ck")])
    assert code == 2
    assert "no foreground pixels" in capsys.readouterr().err
