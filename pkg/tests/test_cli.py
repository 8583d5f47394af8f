import json

import numpy as np
import pytest

from superpose import cli, pipeline
from superpose.checkpoint import load_checkpoint, load_model, save_checkpoint
from superpose.pipeline import load_superposed

TINY = """
[experiment]
seed = 3
mode = "{mode}"
[model]
n_layers = 3
hidden = 16
n_heads = 2
context = 16
[expert]
steps = 20
[finetune]
steps = 10
[superpose]
epochs = 2
batch_size = 32
[analysis]
probe_tokens = 256
"""


def tiny_config(tmp, mode="2d"):
    path = tmp / f"tiny_{mode}.toml"
    path.write_text(TINY.format(mode=mode))
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(tmp)
    out = tmp / "run"
    assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 0
    return tmp, cfg, out


def test_run_writes_all_artifacts(tiny_run):
    _, _, out = tiny_run
    for name in ("report.json", "projections.csv", "diversity.csv", "activation.csv", "jsd.csv", "states.sptx",
                 "logs/superpose.csv", "logs/epochs.json", "logs/timing.json"):
        assert (out / name).is_file(), name
    rep = json.loads((out / "report.json").read_text())
    assert set(rep["perplexity"]) == set(pipeline.MODELS)
    assert set(rep["perplexity"]["superposed"]) == {"base_domain", "fine_domain", "combined"}
    assert len(rep["jsd_per_epoch"]) == 2
    assert rep["meta"]["mode"] == "2d"


def test_artifacts_load(tiny_run):
    _, _, out = tiny_run
    base = load_model(out / "checkpoints" / "base.sptx")
    assert base.config.n_layers == 3
    model = load_superposed(out / "checkpoints" / "superposed.sptx")
    assert model.schedule.mode == "2d"
    states = load_checkpoint(out / "states.sptx")
    assert states["states.superposed.fine_domain.layer2"].shape[1] == 16
    assert len(states) == 3 * 2 * 4


def test_same_seed_is_byte_identical(tiny_run):
    tmp, cfg, out = tiny_run
    out2 = tmp / "run2"
    assert cli.main(["run", "--config", cfg, "--out", str(out2)]) == 0
    for name in ("report.json", "diversity.csv", "activation.csv", "projections.csv", "states.sptx",
                 "checkpoints/superposed.sptx", "logs/superpose.csv"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes(), name


def test_eval_reproduces_report(tiny_run, capsys):
    _, cfg, out = tiny_run
    before = (out / "report.json").read_bytes()
    assert cli.main(["eval", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "report.json").read_bytes() == before
    assert "superposed" in capsys.readouterr().out


def test_missing_config_exit_code(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.toml")]) == 10
    with pytest.raises(SystemExit) as e:
        cli.main(["run", "--mode", "3d"])
    assert e.value.code == 2


def test_superpose_failure_exit_code(tiny_run, tmp_path):
    _, cfg, out = tiny_run
    ckpt = tmp_path / "checkpoints"
    ckpt.mkdir()
    for name in ("base", "fine"):
        arrays = load_checkpoint(out / "checkpoints" / f"{name}.sptx")
        if name == "fine":
            arrays["wte"] = np.full_like(arrays["wte"], np.nan)
        save_checkpoint(arrays, ckpt / f"{name}.sptx")
    assert cli.main(["superpose", "--config", cfg, "--out", str(tmp_path)]) == 14
    fail = json.loads((tmp_path / "logs" / "failure.json").read_text())
    assert fail["stage"] == "superpose" and fail["exit_code"] == 14


def test_train_expert_single_domain(tmp_path):
    cfg = tiny_config(tmp_path, "1d")
    assert cli.main(["train-expert", "--config", cfg, "--out", str(tmp_path / "o"), "--domain", "base"]) == 0
    assert (tmp_path / "o" / "checkpoints" / "base.sptx").is_file()
    assert not (tmp_path / "o" / "checkpoints" / "fine.sptx").exists()
    # fine-tuning without a base checkpoint fails in its own stage
    assert cli.main(["train-expert", "--config", cfg, "--out", str(tmp_path / "p"), "--domain", "fine"]) == 12
