import json
import subprocess
import sys

import jsonschema
import pytest

from oncedet.cli import main
from oncedet.codec import DETECTION_SCHEMA

TINY_CONFIG = """\
seed = 7
[stage1]
epochs = 1
batch_size = 8
[stage2]
episodes = 3
tasks_per_batch = 1
n_way = 2
k_shot = 2
query_size = 2
val_episodes = 1
val_every = 1
[data]
base_train = 24
base_val = 6
base_test = 6
novel_support_pool = 30
novel_test = 6
"""


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, config):
    run = tmp_path_factory.mktemp("run") / "r"
    assert main(["train-base", "--run-dir", str(run), "--config", str(config)]) == 0
    assert main(["meta-train", "--run-dir", str(run)]) == 0
    return run


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("train-base", "meta-train", "enrol", "eval", "detect", "synth"):
        assert cmd in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "oncedet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "enrol" in res.stdout


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train-base"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1


def test_missing_config_creates_nothing(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train-base", "--run-dir", str(run), "--config", str(tmp_path / "absent.toml")]) == 1
    assert not run.exists()
    assert "not found" in capsys.readouterr().err


def test_commands_need_prerequisites(tmp_path):
    run = str(tmp_path / "empty")
    assert main(["meta-train", "--run-dir", run]) == 1
    assert main(["enrol", "--run-dir", run, "--synthetic", "6", "5"]) == 1
    assert main(["eval", "--run-dir", run]) == 1


def test_run_layout_and_manifest(trained_run):
    for rel in ("manifest.json", "stage1/extractor.ckpt", "stage1/codes.ckpt", "stage1/metrics.csv",
                "stage2/generator.ckpt", "stage2/episodes.csv", "stage2/val.csv", "registry.json"):
        assert (trained_run / rel).is_file(), rel
    doc = json.loads((trained_run / "manifest.json").read_text())
    assert doc["seed"] == 7 and doc["config"]["stage1"]["epochs"] == 1
    assert [c["command"] for c in doc["commands"]] == ["train-base", "meta-train"]
    assert all(c["status"] == "ok" for c in doc["commands"])
    assert doc["commands"][0]["outputs"]
    assert doc["commands"][1]["extractor_checksum"] == doc["commands"][0]["extractor_checksum"]


def test_refuses_overwrite_without_force(trained_run, config):
    ckpt = (trained_run / "stage1/extractor.ckpt").read_bytes()
    assert main(["train-base", "--run-dir", str(trained_run), "--config", str(config)]) == 1
    assert main(["meta-train", "--run-dir", str(trained_run)]) == 1
    assert (trained_run / "stage1/extractor.ckpt").read_bytes() == ckpt


def test_same_seed_same_checkpoints(trained_run, config, tmp_path):
    other = tmp_path / "again"
    assert main(["train-base", "--run-dir", str(other), "--config", str(config)]) == 0
    assert main(["meta-train", "--run-dir", str(other)]) == 0
    for rel in ("stage1/extractor.ckpt", "stage1/codes.ckpt", "stage2/generator.ckpt"):
        assert (other / rel).read_bytes() == (trained_run / rel).read_bytes(), rel


def test_enrol_duplicate_and_replace(trained_run, tmp_path, capsys):
    import shutil

    run = tmp_path / "copy"
    shutil.copytree(trained_run, run)
    assert main(["enrol", "--run-dir", str(run), "--synthetic", "6", "2"]) == 0
    out = capsys.readouterr().out
    assert "code checksum" in out and "enrolled class 6" in out
    before = (run / "registry.json").read_bytes()
    assert main(["enrol", "--run-dir", str(run), "--synthetic", "6", "2"]) == 1
    assert "already registered" in capsys.readouterr().err
    assert (run / "registry.json").read_bytes() == before
    assert main(["enrol", "--run-dir", str(run), "--synthetic", "6", "2", "--seed", "3", "--replace"]) == 0
    assert main(["enrol", "--run-dir", str(run), "--synthetic", "0", "2", "--replace"]) == 1
    assert main(["enrol", "--run-dir", str(run), "--synthetic", "42", "2"]) == 1


def test_enrol_from_support_dir_then_detect(trained_run, tmp_path, capsys):
    import shutil

    run = tmp_path / "copy"
    shutil.copytree(trained_run, run)
    pics = tmp_path / "pics"
    assert main(["synth", "--out", str(pics), "--split", "novel_support_pool", "--count", "6", "--seed", "7"]) == 0
    with pytest.raises(SystemExit):
        main(["enrol", "--run-dir", str(run), "--support-dir", str(pics)])
    assert main(["enrol", "--run-dir", str(run), "--support-dir", str(pics), "--class-id", "7", "--shots", "3",
                 "--name", "mystery"]) == 0
    registry = json.loads((run / "registry.json").read_text())
    assert {e["class_id"]: e["name"] for e in registry["entries"]}[7] == "mystery"

    image = sorted(pics.glob("*.png"))[0]
    out = tmp_path / "det"
    assert main(["detect", "--run-dir", str(run), str(image), "--threshold", "0.0", "--max-per-class", "3",
                 "--out", str(out)]) == 0
    records = json.loads((out / f"{image.stem}.detections.json").read_text())
    assert records
    for r in records:
        jsonschema.validate(r, DETECTION_SCHEMA)
    assert (out / f"{image.stem}.annotated.png").is_file()
    assert main(["detect", "--run-dir", str(run), str(image), "--out", str(out)]) == 1
    assert main(["detect", "--run-dir", str(run), str(tmp_path / "nope.png")]) == 1


def test_eval_writes_reports(trained_run, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["eval", "--run-dir", str(trained_run), "--protocol", "continual", "--shots", "1", "2",
                 "--out", str(out)]) == 0
    for k in (1, 2):
        rep = json.loads((out / f"continual_{k}shot.json").read_text())
        assert rep["mode"] == "continual" and len(rep["snapshots"]) == 4
        assert (out / f"continual_{k}shot.csv").is_file()
        assert (out / f"continual_{k}shot_curve.svg").read_text().lstrip().startswith("<?xml")
        assert (out / f"continual_{k}shot_pr.svg").is_file()
    table = (out / "continual_table.txt").read_text().splitlines()
    assert len(table) == 4
    assert main(["eval", "--run-dir", str(trained_run), "--protocol", "continual", "--shots", "1",
                 "--out", str(out)]) == 1
    assert main(["eval", "--run-dir", str(trained_run), "--registry", str(trained_run / "registry.json"),
                 "--split", "base_test", "--out", str(out)]) == 0
    rep = json.loads((out / "registry_base_test.json").read_text())
    assert {int(c) for c in rep["per_class"]} == set(range(6))


def test_synth_blank(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--blank", "--count", "2"]) == 0
    files = sorted(p.name for p in tmp_path.iterdir())
    assert len(files) == 4
    assert all(json.loads(p.read_text()) == [] for p in tmp_path.glob("*.json"))
