import numpy as np
import pytest

from pointjepa.cli import main, read_metrics
from pointjepa.config import load_config
from pointjepa.data import write_cloud
from pointjepa.sequencer import is_permutation

TINY = """\
model.c = 8
model.k = 8
model.dim = 16
model.depth = 1
model.heads = 2
model.pred_dim = 8
model.pred_depth = 1
model.pred_heads = 2
model.h1 = 16
model.h2 = 16
model.h3 = 16
model.pos_hidden = 16
data.per_class = 25
data.n_points = 64
train.epochs = 3
train.warmup_epochs = 1
train.batch_size = 16
train.max_clouds = 32
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY + f"data.out_dir = '{root / 'data'}'\n", encoding="utf-8")
    assert main(["synth-data", "--config", str(cfg)]) == 0
    return root, cfg


@pytest.fixture(scope="module")
def trained(workspace):
    root, cfg = workspace
    out = root / "run"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
    return out


def test_synth_data(workspace, capsys):
    root, cfg = workspace
    assert (root / "data" / "index.txt").exists()
    assert main(["synth-data", "--config", str(cfg), "--out", str(root / "again")]) == 0
    assert "index:" in capsys.readouterr().out
    a = (root / "data" / "index.txt").read_bytes()
    assert (root / "again" / "index.txt").read_bytes() == a
    assert load_config(root / "again" / "effective_config.cfg").data.per_class == 25


def test_synth_data_missing_out_dir(tmp_path, capsys):
    assert main(["synth-data"]) == 2
    assert "data.out_dir" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    assert main(["synth-data", "--set", "model.dims=3", "--out", str(tmp_path)]) == 2
    assert "model.dims" in capsys.readouterr().err
    assert main(["synth-data", "--set", "nonsense", "--out", str(tmp_path)]) == 2
    assert main(["synth-data", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path)]) == 3
    assert main(["no-such-command"]) == 2


def test_pretrain_outputs(trained, capsys):
    for name in ("checkpoint.pjck", "loss.csv", "metrics.csv", "effective_config.cfg"):
        assert (trained / name).exists()
    lines = (trained / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss,lr,tau"
    assert all(np.isfinite(float(row.split(",")[2])) for row in lines[1:])
    m = read_metrics(trained / "metrics.csv")
    assert m["epochs_completed"] == "3" and np.isfinite(float(m["final_epoch_loss"]))


def test_pretrain_morton(workspace, tmp_path):
    _, cfg = workspace
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path),
                 "--set", "run.sequencer=morton", "--set", "train.epochs=1",
                 "--set", "train.warmup_epochs=0"]) == 0
    assert read_metrics(tmp_path / "metrics.csv")["sequencer"] == "morton"


def test_pretrain_resume_is_seamless(workspace, trained, tmp_path):
    _, cfg = workspace
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path), "--stop-after", "1"]) == 0
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path), "--resume"]) == 0
    assert (tmp_path / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()
    assert (tmp_path / "checkpoint.pjck").read_bytes() == (trained / "checkpoint.pjck").read_bytes()


def test_resume_with_different_config_is_mismatch(workspace, tmp_path):
    _, cfg = workspace
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path), "--stop-after", "1"]) == 0
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path), "--resume",
                 "--set", "train.lr_peak=0.01"]) == 5


def test_pretrain_numeric_failure(workspace, tmp_path, capsys):
    _, cfg = workspace
    code = main(["pretrain", "--config", str(cfg), "--out", str(tmp_path),
                 "--set", "train.lr_start=1e30", "--set", "train.lr_peak=1e38"])
    assert code == 4
    assert "step" in capsys.readouterr().err


def test_probe(workspace, trained, capsys):
    _, cfg = workspace
    assert main(["probe", "--config", str(cfg), "--checkpoint", str(trained / "checkpoint.pjck")]) == 0
    out = capsys.readouterr().out
    acc = float(out.split("accuracy:")[1].split()[0])
    assert 0.0 <= acc <= 1.0
    assert main(["probe", "--config", str(cfg), "--random-init", "--out", str(trained)]) == 0
    m = read_metrics(trained / "metrics.csv")
    assert 0.0 <= float(m["random_linear_accuracy"]) <= 1.0
    assert "final_epoch_loss" in m  # merged, not overwritten


def test_probe_model_mismatch(workspace, trained, capsys):
    _, cfg = workspace
    code = main(["probe", "--config", str(cfg), "--checkpoint", str(trained / "checkpoint.pjck"),
                 "--set", "model.dim=32"])
    assert code == 5
    assert main(["probe", "--config", str(cfg), "--checkpoint", str(trained / "absent.pjck")]) == 3


def test_fewshot(workspace, trained, capsys):
    _, cfg = workspace
    ck = str(trained / "checkpoint.pjck")
    assert main(["fewshot", "--config", str(cfg), "--checkpoint", ck,
                 "--m", "3", "--n", "2", "--trials", "10", "--out", str(trained)]) == 0
    assert "over 10 trials" in capsys.readouterr().out
    m = read_metrics(trained / "metrics.csv")
    assert 0.0 <= float(m["fewshot_3way_2shot_mean"]) <= 1.0
    assert m["fewshot_trials"] == "10"
    # 25 clouds per class cannot hold 10 support + 20 query
    assert main(["fewshot", "--config", str(cfg), "--checkpoint", ck, "--m", "5", "--n", "10"]) == 2


def _sequence(capsys, *argv):
    assert main(["sequence", *argv]) == 0
    return capsys.readouterr().out.splitlines()


def test_sequence(tmp_path, capsys):
    pts = np.random.default_rng(0).normal(size=(200, 3)).astype(np.float32)
    write_cloud(tmp_path / "c.pcj", pts)
    greedy = _sequence(capsys, str(tmp_path / "c.pcj"), "--c", "16", "--k", "8")
    morton = _sequence(capsys, str(tmp_path / "c.pcj"), "--c", "16", "--k", "8", "--sequencer", "morton")
    orders = []
    for lines in (greedy, morton):
        order = [int(t) for t in lines[0].split()]
        assert is_permutation(order, 16)
        assert len(lines) == 18 and lines[1].startswith("center ")
        assert float(lines[-1].split()[1]) >= 0
        orders.append(order)
    assert orders[0] != orders[1]


def test_sequence_single_patch(tmp_path, capsys):
    write_cloud(tmp_path / "one.pcj", np.array([[0.1, 0.2, 0.3]], dtype=np.float32))
    lines = _sequence(capsys, str(tmp_path / "one.pcj"))
    assert lines[0] == "0"
    assert float(lines[-1].split()[1]) == 0.0


def test_sequence_unreadable(tmp_path):
    (tmp_path / "bad.pcj").write_bytes(b"nope")
    assert main(["sequence", str(tmp_path / "bad.pcj")]) == 3
    assert main(["sequence", str(tmp_path / "absent.pcj")]) == 3


def test_info(workspace, trained, capsys):
    _, cfg = workspace
    assert main(["info", "--config", str(cfg), "--checkpoint", str(trained / "checkpoint.pjck")]) == 0
    out = capsys.readouterr().out
    assert "model.dim = 16" in out and "epoch=3" in out
