import json

import numpy as np
import pytest

from raaf.cli import main
from raaf.synthetic import synthetic_stream, write_synthetic_recording

RUN_CONFIG = """
out_dir = "{out}"

[data]
source = "synthetic"
n_samples = 8
n_subjects = 2
frame_shape = [7, 9]
patch = [2, 2]

[model]
n_frames = 2
n_glimpses = 2
n_copies = 2
conv_channels = [2, 2]
glimpse_window = [2, 2]
n_scales = 2
dim_what = 6
dim_g = 5
hidden_attention = 6
hidden_frame = 4

[train]
epochs = 2
batch_size = 4
micro_batch = 2
lr = 0.01
validation_fraction = 0.0
early_stopping = false
seed = 1
"""


@pytest.fixture
def run_config(tmp_path):
    def make(name="run"):
        path = tmp_path / f"{name}.toml"
        path.write_text(RUN_CONFIG.format(out=(tmp_path / name).as_posix()))
        return path
    return make


def test_train_eval_heatmap(run_config, tmp_path, capsys):
    cfg = run_config()
    assert main(["train", "--config", str(cfg), "--fold", "s1"]) == 0
    run = tmp_path / "run"
    for name in ("model.raaf", "model.raaf.json", "history.csv", "config.json"):
        assert (run / name).exists()
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(run / "model.raaf"),
                 "--out", str(tmp_path / "ev")]) == 0
    ev = tmp_path / "ev"
    confusion = ev.joinpath("confusion.csv").read_text().splitlines()
    assert len(confusion) == 3
    assert sum(int(v) for line in confusion[1:] for v in line.split(",")[1:]) == 4  # subject s1 only
    heat = np.loadtxt(ev / "heatmap.csv", delimiter=",")
    assert heat.shape == (7, 9) and heat.sum() == 4 * 2 * 2 * 2
    inv = ev.joinpath("involvement.csv").read_text().splitlines()
    assert abs(sum(float(v) for v in inv[1].split(",")[1:]) - 100) <= 0.1
    assert json.loads(ev.joinpath("config.json").read_text())["fold"] == "s1"
    assert main(["heatmap", "--config", str(cfg), "--checkpoint", str(run / "model.raaf"),
                 "--out", str(tmp_path / "hm")]) == 0
    assert (tmp_path / "hm" / "heatmap.csv").read_text() == (ev / "heatmap.csv").read_text()
    assert "accuracy" in capsys.readouterr().out


def test_train_twice_is_bit_identical(run_config, tmp_path):
    cfg = run_config()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("model.raaf", "history.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_environment_override(run_config, tmp_path, monkeypatch):
    cfg = run_config()
    monkeypatch.setenv("RAAF_SEED", "9")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "env")]) == 0
    assert json.loads((tmp_path / "env" / "config.json").read_text())["train"]["seed"] == 9
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "cli"), "--seed", "4"]) == 0
    assert json.loads((tmp_path / "cli" / "config.json").read_text())["train"]["seed"] == 4
    monkeypatch.setenv("RAAF_SEED", "x")
    assert main(["train", "--config", str(cfg)]) == 2


def test_loso_and_sweep(run_config, tmp_path):
    cfg = run_config()
    assert main(["loso", "--config", str(cfg), "--out", str(tmp_path / "loso")]) == 0
    lines = (tmp_path / "loso" / "loso.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["s1", "s2", "mean"]
    assert main(["sweep", "--config", str(cfg), "--sizes", "2,4", "--out", str(tmp_path / "sw")]) == 0
    sweep = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert sweep[0] == "n_labeled,mean_accuracy" and len(sweep) == 3
    full = float(sweep[2].split(",")[1])
    assert full == float(lines[-1].split(",")[3])


def test_bench_and_gradcheck(run_config, tmp_path):
    assert main(["bench", "--config", str(run_config()), "--samples", "3", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "bench.csv").read_text().startswith("samples,latency_mean_s")
    assert main(["gradcheck", "--trials", "2", "--out", str(tmp_path / "g")]) == 0
    rows = (tmp_path / "g" / "gradcheck.csv").read_text().splitlines()
    assert len(rows) == 12 and all(r.split(",")[4] == "True" for r in rows[1:])


def test_ingest_raw_recordings(tmp_path):
    rng = np.random.default_rng(0)
    raw = tmp_path / "raw"
    raw.mkdir()
    files = []
    for s in ("1", "2"):
        labels = np.repeat([0, 1, 2], 100)
        write_synthetic_recording(raw / f"s{s}.txt", synthetic_stream(3, labels, rng), labels, 50.0)
        files.append(f'[[files]]\npath = "s{s}.txt"\nsubject = "{s}"\n')
    rows = "".join(f'[[rows]]\nlabel = "r{k}"\ncolumns = [{2 + 3 * k}, {3 + 3 * k}, {4 + 3 * k}]\n' for k in range(3))
    layout = tmp_path / "layout.toml"
    layout.write_text('name = "fake"\nsampling_rate = 50.0\ntimestamp_column = 0\nlabel_column = 1\n'
                      'class_names = ["a", "b", "c"]\nwindow_seconds = 1.0\n'
                      + rows + '[labels]\n"0" = "a"\n"1" = "b"\n"2" = "c"\n' + "".join(files))
    assert main(["ingest", "--config", str(layout), "--data-dir", str(raw), "--out", str(tmp_path / "c")]) == 0
    counters = (tmp_path / "c" / "ingest.csv").read_text().splitlines()
    assert counters[0] == "subject,file,rows_in,rows_used,rows_dropped,rows_discarded" and len(counters) == 3
    cfg = tmp_path / "cached.toml"
    cfg.write_text(RUN_CONFIG.format(out=(tmp_path / "cached").as_posix())
                   .replace('source = "synthetic"', f'source = "cache"\ncache = "{(tmp_path / "c").as_posix()}"')
                   .replace("n_samples = 8\nn_subjects = 2\nframe_shape = [7, 9]\npatch = [2, 2]\n", ""))
    assert main(["train", "--config", str(cfg), "--fold", "1"]) == 2  # cache holds 5 frames, model wants 2
    assert main(["ingest", "--config", str(layout), "--data-dir", str(raw), "--out", str(tmp_path / "c"),
                 "--frames", "2"]) == 0
    assert main(["train", "--config", str(cfg), "--fold", "1"]) == 0
    meta = json.loads((tmp_path / "cached" / "model.raaf.json").read_text())
    assert meta["stats"] is not None and meta["model"]["frame_shape"] == [4, 9]


def test_exit_codes(run_config, tmp_path):
    cfg = run_config()
    assert main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nlr = -1\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["train", "--config", str(cfg), "--fold", "nobody"]) == 2
    assert main(["ingest", "--dataset", "pamap2", "--data-dir", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "nope.raaf")]) == 3
    assert main(["sweep", "--config", str(cfg), "--sizes", "4,2"]) == 2


def test_numeric_failure_exit_code(run_config, tmp_path):
    cfg = run_config()
    text = cfg.read_text().replace("lr = 0.01", "lr = 1e300")
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg)]) == 4
