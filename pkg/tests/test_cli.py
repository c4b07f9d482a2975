import json

import numpy as np
import pytest

from rvqdiff import __version__
from rvqdiff.cli import main
from rvqdiff.evaluate import condition_grid, eval_samples, grid_search, guidance_accuracy
from rvqdiff.guidance import GuidanceWeights
from rvqdiff.oracle import ToyDistribution
from rvqdiff.synth import SynthConfig, enumerate_toy_distribution, read_records
from rvqdiff.training import load_model

TINY = """
seed = 3

[data]
n_records = 40
n_val = 8
n_real = 4
length = 8
frames_per_symbol = 4
embed_dim = 8

[model]
n_blocks = 1
hidden = 8
n_heads = 2
text_dim = 4
time_freqs = 4

[train]
batch_size = 16
epochs = 4
lr = 1e-3

[grid_search]
w0 = [1.0]
w1 = [1.0]
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    data = root / "data.jsonl"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    run = root / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out-dir", str(run)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "run": run, "ckpt": run / "ckpt_0003.ckpt"}


def test_gen_data_line_count_and_bytes(tmp_path, workspace):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen-data", "--config", str(workspace["cfg"]), "--n", "100", "--out", str(a)]) == 0
    assert main(["gen-data", "--config", str(workspace["cfg"]), "--n", "100", "--out", str(b)]) == 0
    assert len(a.read_text().splitlines()) == 100
    assert a.read_bytes() == b.read_bytes()


def test_invalid_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[data]\nn_reel = 4\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x.jsonl")]) == 2
    assert "data.n_reel" in capsys.readouterr().err
    assert main(["gen-data", "--set", "train.nope=1", "--out", str(tmp_path / "x.jsonl")]) == 2
    assert "train.nope" in capsys.readouterr().err


def test_train_outputs(workspace):
    lines = (workspace["run"] / "metrics.jsonl").read_text().splitlines()
    levels = [json.loads(l)["level"] for l in lines]
    assert levels == [1, 1, 1, 2]
    _, _, meta = load_model(workspace["ckpt"])
    assert meta["extra"]["config"]["seed"] == 3
    assert (workspace["run"] / "duration.ckpt").exists()


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.jsonl"), "--out-dir", str(tmp_path / "o")]) == 3


def test_train_rerun_and_resume(tmp_path, workspace):
    args = ["train", "--config", str(workspace["cfg"]), "--data", str(workspace["data"])]
    again = tmp_path / "again"
    assert main(args + ["--out-dir", str(again)]) == 0
    assert (again / "metrics.jsonl").read_bytes() == (workspace["run"] / "metrics.jsonl").read_bytes()
    part = tmp_path / "part"
    assert main(args + ["--out-dir", str(part), "--stop-after-epoch", "1"]) == 0
    assert len((part / "metrics.jsonl").read_text().splitlines()) == 2
    assert main(args + ["--out-dir", str(part), "--resume"]) == 0
    assert (part / "metrics.jsonl").read_bytes() == (workspace["run"] / "metrics.jsonl").read_bytes()
    assert (part / "ckpt_0003.ckpt").read_bytes() == workspace["ckpt"].read_bytes()


def test_train_corrupt_checkpoint(tmp_path, workspace, capsys):
    args = ["train", "--config", str(workspace["cfg"]), "--data", str(workspace["data"]), "--out-dir", str(tmp_path)]
    assert main(args + ["--stop-after-epoch", "0"]) == 0
    ck = tmp_path / "ckpt_0000.ckpt"
    blob = bytearray(ck.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    ck.write_bytes(bytes(blob))
    assert main(args + ["--resume"]) == 3
    assert "integrity" in capsys.readouterr().err.lower()


def test_sample_header_defaults(tmp_path, workspace):
    out = tmp_path / "s.jsonl"
    assert main(["sample", "--checkpoint", str(workspace["ckpt"]), "--out", str(out), "--identity", "1",
                 "--emotion", "0", "--text", "1,2", "--n", "3"]) == 0
    records, header = read_records(out)
    assert header["weights"] == {"w0": 1.9, "w1": 1.0, "w2": 1.0, "w3": 1.6}
    assert header["steps"] == 96
    assert header["conditions"] == {"identity": 1, "emotion": 0, "text": [1, 2]}
    assert header["version"] == __version__ and header["config"]["seed"] == 3
    assert len(records) == 3 and records[0].tokens.shape == (2, 8)
    assert all(r.tokens.max() < 4 for r in records)


def test_sample_seed_determinism(tmp_path, workspace):
    paths = [tmp_path / f"{k}.jsonl" for k in range(3)]
    for p, seed in zip(paths, ("5", "5", "6")):
        assert main(["sample", "--checkpoint", str(workspace["ckpt"]), "--out", str(p), "--emotion", "1",
                     "--n", "4", "--steps", "12", "--seed", seed]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_bytes() != paths[2].read_bytes()


def test_sample_usage_errors(tmp_path, workspace):
    base = ["sample", "--checkpoint", str(workspace["ckpt"]), "--out", str(tmp_path / "s.jsonl")]
    assert main(base + ["--length", "0"]) == 2
    assert main(base + ["--identity", "9"]) == 2
    assert main(base + ["--emotion", "5"]) == 2
    assert main(base + ["--text", "0,7"]) == 2
    assert main(base + ["--predict-length"]) == 2


def test_sample_predicted_length(tmp_path, workspace):
    out = tmp_path / "s.jsonl"
    assert main(["sample", "--checkpoint", str(workspace["ckpt"]), "--out", str(out), "--text", "0,1",
                 "--predict-length", "--steps", "8"]) == 0
    records, header = read_records(out)
    assert header["length"] >= 1 and records[0].tokens.shape[1] == header["length"]


def test_eval(tmp_path, workspace):
    out = tmp_path / "s.jsonl"
    main(["sample", "--checkpoint", str(workspace["ckpt"]), "--out", str(out), "--identity", "0",
          "--emotion", "1", "--n", "4", "--steps", "8"])
    report_path = tmp_path / "r.json"
    assert main(["eval", "--samples", str(out), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert set(report["accuracy"]) == {"identity", "emotion"}
    assert report["n_samples"] == 4 and report["tv_distance"] is None
    assert report["version"] == __version__ and report["config"]["seed"] == 3
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["eval", "--samples", str(empty)]) == 3


def test_eval_exact_draws_within_noise():
    cfg = SynthConfig(n_real=2, levels=2, length=3)
    toy = enumerate_toy_distribution(cfg)
    p0 = toy.unconditional
    from rvqdiff.synth import DatasetRecord

    n = 2000
    draws = p0.sample(np.random.default_rng(0), n)
    recs = [DatasetRecord(i, g, None, None, None, 3) for i, g in enumerate(draws)]
    report = eval_samples(recs, cfg, toy)
    assert report["tv_distance"] <= 0.5 * np.sqrt(len(p0.probs) / n)


def test_grid_search_cli(tmp_path, workspace):
    out = tmp_path / "g.json"
    assert main(["grid-search", "--checkpoint", str(workspace["ckpt"]), "--n-per", "2", "--steps", "4",
                 "--w2", "1.0", "--w3", "1.6", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert len(report["rows"]) == 1 and report["summary"]["cells"] == 1
    assert main(["grid-search", "--checkpoint", str(workspace["ckpt"]), "--w0", "1:2:0"]) == 2


def test_grid_one_cell_equals_eval(workspace):
    model, _, meta = load_model(workspace["ckpt"])
    synth = SynthConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["extra"]["data"].items()})
    w = GuidanceWeights()
    rows, _ = grid_search(model, synth, {"w0": [w.w0], "w1": [w.w1], "w2": [w.w2], "w3": [w.w3]}, n_per=2, steps=4, seed=1)
    assert rows[0]["metrics"] == guidance_accuracy(model, synth, w, 2, 4, 1, condition_grid(synth, 1))


def test_default_grid_axes():
    from rvqdiff.config import DEFAULTS

    g = DEFAULTS["grid_search"]
    assert (min(g["w0"]), max(g["w0"])) == (1.0, 2.0)
    assert (min(g["w1"]), max(g["w1"])) == (1.0, 1.4)


def test_oracle_check(capsys):
    small = ["--set", "oracle.n_real=2", "--set", "oracle.trials=10", "--chains", "500"]
    assert main(["oracle-check", *small]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS dse_stationarity" in out
    assert main(["oracle-check", *small, "--corrupt-scores", "1.5"]) == 4
    assert "FAIL dse_stationarity" in capsys.readouterr().out
    assert main(["oracle-check", "--set", "oracle.n_real=8", "--set", "oracle.length=8"]) == 3
