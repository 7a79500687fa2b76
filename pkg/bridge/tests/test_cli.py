import numpy as np
from autov_rank.interaction import load_interaction_weights
from autov_rank.pipeline import load_dataset
from PIL import Image

from autov_bridge.cli import main


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_export_then_losses_chain(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, out, _ = run(["export", "--groups", "3", "--pool", "3",
                        "--seed", "0", "--out", "exp"], capsys)
    assert code == 0
    assert "# groups: 3" in out
    assert "# errors: 0" in out
    assert load_dataset(tmp_path / "exp" / "dataset.jsonl")

    code, out, _ = run(["losses", "--dataset", "exp/dataset.jsonl", "--out", "exp"], capsys)
    assert code == 0
    groups = load_dataset(tmp_path / "exp" / "scored.jsonl")
    assert all(c.loss is not None for g in groups for c in g.candidates)


def test_layer_command(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, out, _ = run(["layer", "--layer", "3", "--out", "w"], capsys)
    assert code == 0
    assert "# layer: 3" in out
    w = load_interaction_weights(tmp_path / "w")
    assert w.d_model == 32


def test_layer_out_of_range_exits_1(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(["layer", "--layer", "99", "--out", "w"], capsys)
    assert code == 1
    assert "error:" in err
    assert "24-layer" in err


def test_prompts_command_writes_pngs(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, out, _ = run(["prompts", "--color", "green", "--layers", "15,20",
                        "--out", "p"], capsys)
    assert code == 0
    assert "# layers: 15,20" in out
    for name in ("input.png", "layer15.png", "layer20.png"):
        img = np.asarray(Image.open(tmp_path / "p" / name))
        assert img.shape == (24, 24, 3)


def test_prompts_bad_layers_exits_2(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(["prompts", "--layers", "abc", "--out", "p"], capsys)
    assert code == 2
    assert "usage error:" in err


def test_missing_dataset_exits_1(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(["losses", "--dataset", "nope/missing.jsonl", "--out", "x"], capsys)
    assert code == 1
