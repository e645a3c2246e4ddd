import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ganca import data
from ganca.cli import build_parser, main
from ganca.nca import build_seed, extract_rgba

TINY = ["--set", "depth=8", "--set", "hidden=8", "--set", "iter_lo=2", "--set", "iter_hi=3",
        "--set", "checkpoint_every=5", "--batch-size", "2"]


@pytest.fixture
def dataset(tmp_path):
    assert main(["-q", "faces", "--out", str(tmp_path / "gt"), "-n", "5", "--size", "16"]) == 0
    assert main(["-q", "edges", "--in", str(tmp_path / "gt"), "--out", str(tmp_path / "ds"),
                 "--size", "16", "16", "--val-fraction", "0.2"]) == 0
    return tmp_path / "ds" / "manifest.json"


def _train(tmp_path, manifest, name, *extra):
    out = tmp_path / name
    code = main(["-q", "train", "--manifest", str(manifest), "--out", str(out), "--steps", "10", *TINY, *extra])
    return code, out


def test_edges_writes_manifest_and_is_idempotent(dataset, tmp_path, capsys):
    doc = json.loads(dataset.read_text())
    assert len(doc["entries"]) == 5
    assert len(list((tmp_path / "ds").glob("*.edge.png"))) == 5
    before = dataset.read_bytes()
    assert main(["-q", "edges", "--in", str(tmp_path / "gt"), "--out", str(tmp_path / "ds"),
                 "--size", "16", "16", "--val-fraction", "0.2"]) == 0
    assert dataset.read_bytes() == before
    assert "train=4" in capsys.readouterr().out


def test_edges_empty_dir_exits_2(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["edges", "--in", str(tmp_path / "empty")]) == 2
    assert "no images found" in capsys.readouterr().err


def test_edges_collects_decode_errors(tmp_path, capsys):
    d = tmp_path / "imgs"
    d.mkdir()
    data.save_png(np.ones((8, 8, 4)), d / "ok.png")
    (d / "bad1.png").write_bytes(b"nope")
    (d / "bad2.png").write_bytes(b"nope")
    assert main(["edges", "--in", str(d)]) == 1
    err = capsys.readouterr().err
    assert "bad1.png" in err and "bad2.png" in err
    assert not (d / "manifest.json").exists()


def test_edges_with_perturbed_ood(dataset, tmp_path):
    assert main(["-q", "edges", "--in", str(tmp_path / "gt"), "--out", str(tmp_path / "ds2"),
                 "--size", "16", "16", "--ood-perturb", "0.5"]) == 0
    doc = json.loads((tmp_path / "ds2" / "manifest.json").read_text())
    assert sum(e["split"] == "ood" for e in doc["entries"]) == 5  # one per edge image


def test_train_supervised_smoke(dataset, tmp_path):
    code, out = _train(tmp_path, dataset, "sup")
    assert code == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert sum(r["split"] == "train" for r in rows) == 10
    assert (out / "final.ckpt").exists() and (out / "metrics.png").exists()


def test_train_is_deterministic(dataset, tmp_path):
    assert _train(tmp_path, dataset, "a", "--no-figures")[0] == 0
    assert _train(tmp_path, dataset, "b", "--no-figures")[0] == 0
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_train_ganca_wgan_schema(dataset, tmp_path):
    code, out = _train(tmp_path, dataset, "gan", "--mode", "ganca", "--loss-kind", "wgan", "--steps", "2")
    assert code == 0
    header = next(csv.reader(open(out / "metrics.csv")))
    assert header == ["step", "loss_g", "loss_d"]


def test_train_config_file_and_flag_precedence(dataset, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mode": "supervised", "manifest": str(dataset), "steps": 50,
                               "out_dir": str(tmp_path / "from_file")}))
    assert main(["-q", "train", "--config", str(cfg), "--steps", "3", "--no-figures", *TINY]) == 0
    rows = list(csv.DictReader(open(tmp_path / "from_file" / "metrics.csv")))
    assert len(rows) == 3


def test_train_reports_every_bad_field(dataset, tmp_path, capsys):
    code, _ = _train(tmp_path, dataset, "bad", "--set", "lr=-1", "--set", "reuse_prob=3", "--steps", "0")
    assert code == 2
    err = capsys.readouterr().err
    assert "lr" in err and "reuse_prob" in err and "steps" in err


def test_train_unknown_key_exits_2(dataset, tmp_path, capsys):
    assert _train(tmp_path, dataset, "bad", "--set", "colour=red")[0] == 2
    assert "unknown keys: colour" in capsys.readouterr().err


def test_resume_via_cli(dataset, tmp_path):
    assert _train(tmp_path, dataset, "r", "--no-figures")[0] == 0
    straight = (tmp_path / "r" / "final.ckpt").read_bytes()
    assert _train(tmp_path, dataset, "r", "--no-figures", "--resume",
                  str(tmp_path / "r" / "checkpoint_000005.ckpt"))[0] == 0
    assert (tmp_path / "r" / "final.ckpt").read_bytes() == straight


def test_generate_zero_iters_is_seed(dataset, tmp_path):
    _, out = _train(tmp_path, dataset, "g", "--no-figures")
    edge_path = next((tmp_path / "ds").glob("*.edge.png"))
    png = tmp_path / "gen.png"
    assert main(["-q", "generate", "--checkpoint", str(out / "final.ckpt"), "--edge", str(edge_path),
                 "--iters", "0", "--out", str(png)]) == 0
    edge = data.load_edge(edge_path)
    np.testing.assert_array_equal(data.load_png(png), extract_rgba(build_seed(edge, 8)))


def test_generate_frames(dataset, tmp_path):
    _, out = _train(tmp_path, dataset, "g", "--no-figures")
    edge_path = next((tmp_path / "ds").glob("*.edge.png"))
    png = tmp_path / "gen.png"
    assert main(["-q", "generate", "--checkpoint", str(out / "final.ckpt"), "--edge", str(edge_path),
                 "--iters", "4", "--out", str(png), "--frames"]) == 0
    frames = sorted((tmp_path / "gen_frames").glob("frame_*.png"))
    assert len(frames) == 5 and (tmp_path / "gen_frames" / "frames.png").exists()
    np.testing.assert_array_equal(data.load_png(png), data.load_png(frames[-1]))


def test_generate_missing_checkpoint_exits_2(tmp_path, capsys):
    data.save_edge(np.eye(8), tmp_path / "e.png")
    assert main(["generate", "--checkpoint", str(tmp_path / "nope.ckpt"), "--edge", str(tmp_path / "e.png")]) == 2
    assert "nope.ckpt" in capsys.readouterr().err


def test_eval_writes_report_with_val_split(dataset, tmp_path):
    _, out = _train(tmp_path, dataset, "e", "--no-figures")
    gan_code, gan = _train(tmp_path, dataset, "eg", "--no-figures", "--mode", "ganca", "--steps", "1")
    assert gan_code == 0
    report = tmp_path / "rep" / "report.json"
    assert main(["-q", "eval", "--checkpoint", str(out / "final.ckpt"), "--manifest", str(dataset),
                 "--iters", "5", "--out", str(report), "--ganca", str(gan / "final.ckpt")]) == 0
    doc = json.loads(report.read_text())
    assert doc["aggregates"]["val"]["count"] == 1
    assert report.with_suffix(".csv").exists()
    assert (tmp_path / "rep" / "figures" / "train.png").exists()
    assert len(list((tmp_path / "rep" / "figures" / "sheets").glob("*.png"))) == 5


def test_perturb_identity_and_determinism(tmp_path):
    edge = np.zeros((16, 16))
    edge[4:12, 4] = edge[4, 4:12] = 1
    src = tmp_path / "e.png"
    data.save_edge(edge, src)
    assert main(["-q", "perturb", "--in", str(src), "--strength", "0", "--out", str(tmp_path / "z.png")]) == 0
    np.testing.assert_array_equal(data.load_edge(tmp_path / "z.png"), data.load_edge(src))
    for name in ("a.png", "b.png"):
        assert main(["-q", "perturb", "--in", str(src), "--seed", "4", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert main(["-q", "perturb", "--in", str(src)]) == 0
    assert (tmp_path / "e.ood.png").exists()


def test_report_command(tmp_path, capsys):
    m = tmp_path / "metrics.csv"
    m.write_text("step,split,loss\n1,train,1.0\n2,train,0.5\n")
    assert main(["-q", "report", "--metrics", str(m)]) == 0
    assert (tmp_path / "metrics.png").exists()
    assert main(["report", "--metrics", str(tmp_path / "none.csv")]) == 2


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["train", "--mode", "vae"]) == 2
    assert main(["frobnicate"]) == 2


def test_help_documents_every_flag_with_defaults():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    assert {"edges", "train", "generate", "eval", "perturb"} <= set(sub.choices)
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.default not in (None, False, [], "==SUPPRESS==") and action.option_strings:
                assert "default:" in text, (name, action.dest)


def test_module_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "ganca.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "generate" in res.stdout
