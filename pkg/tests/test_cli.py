import json

import numpy as np
import pytest
import torch
from PIL import Image

from glico.cli import main
from glico.config import to_dict
from glico.data import DatasetManifest, load_dataset, load_split, save_packed
from glico.evaluation import DownstreamConfig
from glico.trainer import load_checkpoint

from conftest import blob_images, tiny_config


def _manifest(n_per_class, seed, dataset_id):
    x, y = blob_images(n_per_class, seed=seed)
    imgs = ((x + 1) * 127.5).round().clamp(0, 255).to(torch.uint8).numpy()
    return DatasetManifest(dataset_id, imgs, y)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    save_packed(_manifest(6, 0, "toy"), d / "toy.npz")
    save_packed(_manifest(4, 1, "toy-test"), d / "toy_test.npz")
    cfg = {
        "data": {"dataset": str(d / "toy.npz"), "test_dataset": str(d / "toy_test.npz"), "spc": 3},
        "glico": to_dict(tiny_config(epochs=2, checkpoint_every=1)),
        "classifier": to_dict(DownstreamConfig(epochs=2, batch_size=4, lr=0.05, width=8)),
    }
    (d / "cfg.json").write_text(json.dumps(cfg))
    return d


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "run"
    assert main(["train-glico", "--config", str(workspace / "cfg.json"), "--out", str(out), "--cpu", "--seed", "1"]) == 0
    return out


def test_split_command(tmp_path, capsys):
    out = tmp_path / "s.json"
    assert main(["split", "--spc", "5", "--seed", "1", "--out", str(out)]) == 0
    split = load_split(out, load_dataset("digits32"))
    assert len(split.train_indices) == 50
    assert "class 9: 5" in capsys.readouterr().out


def test_split_capacity_error(tmp_path, capsys):
    assert main(["split", "--spc", "10000", "--out", str(tmp_path / "s.json")]) != 0
    assert "fewer than spc" in capsys.readouterr().err


def test_train_glico_outputs(trained):
    for name in ("final.ckpt", "history.jsonl", "resolved_config.json", "input_hashes.json", "split.json"):
        assert (trained / name).exists(), name
    assert sorted(p.name for p in (trained / "checkpoints").iterdir()) == ["epoch_0001.ckpt", "epoch_0002.ckpt"]
    state = load_checkpoint(trained / "final.ckpt")
    assert state.epoch == 2
    resolved = json.loads((trained / "resolved_config.json").read_text())
    assert resolved["seed"] == 1 and resolved["device"] == "cpu"


def test_train_glico_repeatable(workspace, trained):
    again = workspace / "run2"
    main(["train-glico", "--config", str(workspace / "cfg.json"), "--out", str(again), "--cpu", "--seed", "1"])
    a = [json.loads(s) for s in (trained / "history.jsonl").read_text().splitlines()]
    b = [json.loads(s) for s in (again / "history.jsonl").read_text().splitlines()]
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        assert abs(ra["percep"] - rb["percep"]) < 1e-6 and abs(ra["ce"] - rb["ce"]) < 1e-6


def test_train_glico_transductive(workspace):
    out = workspace / "trans"
    assert main(["train-glico", "--config", str(workspace / "cfg.json"), "--out", str(out),
                 "--cpu", "--transductive"]) == 0
    splits = {json.loads(s)["split"] for s in (out / "history.jsonl").read_text().splitlines()}
    assert splits == {"labeled", "unlabeled"}


def test_unknown_config_key(workspace, tmp_path, capsys):
    rc = main(["train-glico", "--config", str(workspace / "cfg.json"), "--set", "glico.learning_rate=1",
               "--out", str(tmp_path / "x"), "--cpu"])
    assert rc != 0 and "learning_rate" in capsys.readouterr().err


def test_sample_grid_and_sidecar(trained, tmp_path):
    out = tmp_path / "samples.png"
    assert main(["sample", "--checkpoint", str(trained / "final.ckpt"), "--n", "6", "--out", str(out)]) == 0
    lines = (tmp_path / "samples.provenance.jsonl").read_text().splitlines()
    assert len(lines) == 6
    assert set(json.loads(lines[0])) >= {"source", "partner", "t", "seed"}
    assert Image.open(out).size[0] > 0


def test_reconstruct_files_identical(trained, tmp_path):
    ck = str(trained / "final.ckpt")
    main(["reconstruct", "--checkpoint", ck, "--indices", "0,1,2", "--out", str(tmp_path / "a.png")])
    main(["reconstruct", "--checkpoint", ck, "--indices", "0,1,2", "--out", str(tmp_path / "b.png")])
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_strip_seven_columns(trained, tmp_path):
    out = tmp_path / "strip.png"
    assert main(["strip", "--checkpoint", str(trained / "final.ckpt"), "--i", "0", "--j", "1",
                 "--steps", "5", "--out", str(out)]) == 0
    w, h = Image.open(out).size
    # torchvision grid: 8px tiles with 2px padding on both sides
    assert (w - 2) // (8 + 2) == 7 and (h - 2) // (8 + 2) == 1
    assert len((tmp_path / "strip.provenance.jsonl").read_text().splitlines()) == 7


def test_missing_checkpoint(tmp_path, capsys):
    assert main(["sample", "--checkpoint", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "s.png")]) != 0
    assert "error" in capsys.readouterr().err


def test_train_classifier_and_evaluate(workspace, trained, tmp_path, capsys):
    cfg = str(workspace / "cfg.json")
    out = tmp_path / "clf"
    assert main(["train-classifier", "--config", cfg, "--split", str(trained / "split.json"),
                 "--checkpoint", str(trained / "final.ckpt"), "--out", str(out), "--cpu", "--seed", "1"]) == 0
    trained_line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert trained_line["variant"] == "glico"
    assert main(["evaluate", "--classifier", str(out / "classifier.pt")]) == 0
    ev = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert ev["top1"] == pytest.approx(trained_line["top1"]) and ev["top1"] <= ev["top5"]


def test_classifier_rejects_foreign_split(workspace, trained, tmp_path, capsys):
    other = tmp_path / "other.json"
    main(["split", "--dataset", str(workspace / "toy.npz"), "--spc", "3", "--seed", "77", "--out", str(other)])
    rc = main(["train-classifier", "--config", str(workspace / "cfg.json"), "--split", str(other),
               "--checkpoint", str(trained / "final.ckpt"), "--out", str(tmp_path / "c"), "--cpu"])
    assert rc != 0 and "different split" in capsys.readouterr().err


def test_ablate_matrix(workspace, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(workspace / "cfg.json"), "--variants", "no-noise,lerp",
                 "--seeds", "3", "--out", str(out), "--cpu"]) == 0
    rows = [json.loads(s) for s in (out / "results.jsonl").read_text().splitlines()]
    assert len(rows) == 6
    table = json.loads((out / "table.json").read_text())
    assert [r["variant"] for r in table] == ["no-noise", "lerp"] and all(r["runs"] == 3 for r in table)
    assert "no-noise" in capsys.readouterr().out
    assert main(["report", "--results", str(out / "results.jsonl"), "--plot", str(out / "curves.png")]) == 0
    assert (out / "curves.png").exists()


def test_compare_delta_record(workspace, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(workspace / "cfg.json"), "--seeds", "2", "--out", str(out), "--cpu"]) == 0
    rec = json.loads((out / "delta.json").read_text())
    assert rec["delta"] == pytest.approx(rec["glico_mean"] - rec["baseline_mean"])
    assert len(rec["baseline_top1"]) == len(rec["glico_top1"]) == 2
    assert isinstance(rec["glico_better"], bool)


def test_fid_command(workspace, trained, tmp_path):
    out = tmp_path / "fid.json"
    assert main(["fid", "--config", str(workspace / "cfg.json"), "--split", str(trained / "split.json"),
                 "--checkpoint", str(trained / "final.ckpt"), "--n", "8", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["glico"]["score"] >= 0 and rep["random_latent"]["n_generated"] == 8


def test_yaml_config(workspace, tmp_path):
    import yaml

    cfg = json.loads((workspace / "cfg.json").read_text())
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train-glico", "--config", str(tmp_path / "cfg.yaml"), "--set", "glico.epochs=1",
                 "--out", str(tmp_path / "y"), "--cpu"]) == 0
    assert load_checkpoint(tmp_path / "y" / "final.ckpt").epoch == 1
