import json

import numpy as np
import pytest

from sgmp.checkpoint import load_checkpoint, save_checkpoint
from sgmp.cli import RunConfig, build_parser, main, resolve_config
from sgmp.errors import ParseError
from sgmp.model import ModelParams


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--images", "6", "--seed", "7", "--features", "8", "--out", str(d / "d.jsonl")]) == 0
    assert main(["train", "--data", str(d / "d.jsonl"), "--epochs", "2", "--hidden", "6",
                 "--out", str(d / "m.ckpt")]) == 0
    return d


def test_synth_exit_codes(tmp_path):
    assert main(["synth", "--images", "20", "--seed", "7", "--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(["synth", "--images", "20", "--seed", "7", "--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert main(["synth", "--images", "20"]) == 2
    assert main(["synth", "--images", "2", "--ambiguity", "3", "--out", str(tmp_path / "c.jsonl")]) == 2
    assert main(["synth", "--out", str(tmp_path / "missing" / "x.jsonl")]) == 3
    assert main(["synth", "--bogus"]) == 2


def test_train_zero_epochs_is_initialisation(workdir):
    out = workdir / "zero.ckpt"
    assert main(["train", "--data", str(workdir / "d.jsonl"), "--epochs", "0", "--hidden", "6",
                 "--seed", "4", "--out", str(out)]) == 0
    params, meta = load_checkpoint(out)
    assert params.bitwise_equal(ModelParams.init(8, 6, 6, 5, seed=4))
    assert meta["seed"] == 4 and meta["T"] == 2 and meta["pooling"] == "weighted"


def test_train_log_has_one_record_per_epoch(workdir):
    log = (workdir / "m.ckpt.log.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in log] == [1, 2]


def test_training_is_bit_reproducible(workdir):
    again = workdir / "again.ckpt"
    assert main(["train", "--data", str(workdir / "d.jsonl"), "--epochs", "2", "--hidden", "6",
                 "--out", str(again)]) == 0
    assert again.read_bytes() == (workdir / "m.ckpt").read_bytes()


def test_checkpoint_round_trip(tmp_path):
    p = ModelParams.init(5, 4, 3, 3, seed=2)
    save_checkpoint(tmp_path / "c.ckpt", p, {"seed": 2})
    q, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert q.bitwise_equal(p) and meta == {"seed": 2}
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_eval_sections_and_bad_task(workdir, capsys):
    data, ckpt = str(workdir / "d.jsonl"), str(workdir / "m.ckpt")
    report = workdir / "r.txt"
    assert main(["eval", "--data", data, "--checkpoint", ckpt, "--task", "predcls,sgcls,sggen",
                 "--report", str(report)]) == 0
    text = report.read_text()
    assert [ln for ln in text.splitlines() if ln.startswith("[")] == ["[predcls]", "[sgcls]", "[sggen]"]
    assert main(["eval", "--data", data, "--checkpoint", ckpt, "--task", "predcls,sgcls,sggen",
                 "--report", str(workdir / "r2.txt")]) == 0
    assert (workdir / "r2.txt").read_bytes() == report.read_bytes()
    assert main(["eval", "--data", data, "--checkpoint", ckpt, "--task", "detection"]) == 2
    assert main(["eval", "--data", str(workdir / "nope.jsonl"), "--checkpoint", ckpt]) == 3


def test_eval_vocab_mismatch(workdir, tmp_path):
    other = tmp_path / "o.jsonl"
    assert main(["synth", "--images", "2", "--classes", "4", "--features", "8", "--out", str(other)]) == 0
    assert main(["eval", "--data", str(other), "--checkpoint", str(workdir / "m.ckpt")]) == 2


def test_predict_and_dot(workdir):
    out, dots = workdir / "p.jsonl", workdir / "dots"
    assert main(["predict", "--data", str(workdir / "d.jsonl"), "--checkpoint", str(workdir / "m.ckpt"),
                 "--out", str(out), "--dot-dir", str(dots)]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 6 and all(r["task"] == "predcls" for r in recs)
    scores = [t["score"] for t in recs[0]["triplets"]]
    assert scores == sorted(scores, reverse=True)
    assert len(list(dots.glob("*.dot"))) == 6
    assert main(["export-dot", "--data", str(workdir / "d.jsonl"), "--index", "1",
                 "--out", str(workdir / "one.dot")]) == 0
    assert (workdir / "one.dot").read_text().startswith("digraph")
    assert main(["export-dot", "--data", str(workdir / "d.jsonl"), "--index", "99"]) == 2


@pytest.mark.parametrize("argv", [[], ["--iters", "0"], ["--hidden", "1", "--features", "1"]])
def test_gradcheck_passes(argv, capsys):
    assert main(["gradcheck", *argv]) == 0
    assert "worst=" in capsys.readouterr().out


def test_gradcheck_failure_exit(monkeypatch):
    import sgmp.cli as cli
    monkeypatch.setattr(cli, "run_gradcheck", lambda **kw: (0.5, "pool.v1", 3))
    assert main(["gradcheck"]) == 5


def test_non_finite_training_exit(workdir, monkeypatch):
    import sgmp.cli as cli
    from sgmp.errors import TrainingError

    def boom(*a, **kw):
        raise TrainingError("epoch 1, image x: non-finite value produced by exp")

    monkeypatch.setattr(cli, "fit", boom)
    assert main(["train", "--data", str(workdir / "d.jsonl"), "--out", str(workdir / "b.ckpt")]) == 4


def test_ablate_table(workdir, capsys):
    out = workdir / "abl.tsv"
    assert main(["ablate", "--data", str(workdir / "d.jsonl"), "--epochs", "1", "--hidden", "4",
                 "--out", str(out)]) == 0
    rows = [ln.split("\t") for ln in out.read_text().splitlines()[1:]]
    assert len(rows) == 12
    assert all(0.0 <= float(r[2]) <= 1.0 and 0.0 <= float(r[3]) <= 1.0 for r in rows)
    t0 = [r[2:] for r in rows if r[0] == "0"]
    assert len(t0) == 3 and t0[0] == t0[1] == t0[2]


def test_config_precedence(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[sgmp]\nepochs = 7\nhidden = 9\nlr = 0.01\n")
    args = build_parser().parse_args(["train", "--config", str(ini), "--hidden", "5"])
    cfg = resolve_config(args)
    assert (cfg.epochs, cfg.hidden, cfg.lr, cfg.max_edges) == (7, 5, 0.01, RunConfig().max_edges)
    ini.write_text("[sgmp]\nepochs = seven\n")
    assert main(["train", "--config", str(ini), "--data", "x", "--out", "y"]) == 2
    ini.write_text("[sgmp]\nwibble = 1\n")
    assert main(["synth", "--config", str(ini), "--out", str(tmp_path / "z")]) == 2


def test_effective_config_printed(tmp_path, capsys):
    assert main(["synth", "--images", "1", "--out", str(tmp_path / "a.jsonl")]) == 0
    err = capsys.readouterr().err
    line = next(ln for ln in err.splitlines() if ln.startswith("# sgmp synth "))
    assert json.loads(line[len("# sgmp synth "):])["images"] == 1


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "sgmp", "gradcheck", "--iters", "0", "--hidden", "2",
                          "--features", "2"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert np.isfinite(float(res.stdout.split("max_rel_error=")[1].split()[0]))
