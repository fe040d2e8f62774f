import os
import re
import subprocess
import sys

import pytest

from metalstm.checkpoint import load_checkpoint
from metalstm.cli import main
from metalstm.config import ConfigError, load_config, parse_config

TINY = {"d": "6", "h": "6", "m": "3", "z": "3", "max_epochs": "1"}


def set_keys(cfg_path, **keys):
    text = cfg_path.read_text()
    for k, v in keys.items():
        if re.search(rf"^{k} = ", text, flags=re.M):
            text = re.sub(rf"^{k} = .*$", f"{k} = {v}", text, count=1, flags=re.M)
        else:
            text = f"{k} = {v}\n" + text
    cfg_path.write_text(text)


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp("suite")
    assert main(["synth", "--tasks", "3", "--seed", "1", "--out", str(root)]) == 0
    set_keys(root / "synth.cfg", **TINY)
    return root


# ----------------------------------------------------------------- config


def test_parse_config_sections_and_types(tmp_path):
    (tmp_path / "a.tsv").write_text("1\tx\n")
    cfg = parse_config("arch = ssp\nd = 8\nfine_tune = yes ; comment\n\n[task:a]\ndata = a.tsv\nlam = 2\n", tmp_path)
    assert cfg.arch == "ssp" and cfg.d == 8 and cfg.fine_tune is True
    assert cfg.tasks[0].name == "a" and cfg.tasks[0].lam == 2.0
    assert cfg.tasks[0].data == (tmp_path / "a.tsv").resolve()


@pytest.mark.parametrize(
    "text, msg",
    [
        ("colour = red\n[task:a]\ndata = a.tsv\n", "unknown key"),
        ("[tasks]\n", "unknown section"),
        ("d = many\n", "cannot read"),
        ("[task:a]\nweight = 1\n", "unknown key"),
    ],
)
def test_parse_config_errors(tmp_path, text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text, tmp_path)


def test_validation_lists_missing_paths(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("[task:a]\ndata = nowhere.tsv\n")
    with pytest.raises(ConfigError, match="nowhere.tsv"):
        load_config(p)


def test_validation_rejects_bad_dims_and_arch(tmp_path):
    (tmp_path / "a.tsv").write_text("1\tx\n")
    p = tmp_path / "c.cfg"
    p.write_text("h = 0\n[task:a]\ndata = a.tsv\n")
    with pytest.raises(ConfigError, match="h must be positive"):
        load_config(p)
    p.write_text("arch = asp\n[task:a]\ndata = a.tsv\n")
    with pytest.raises(ConfigError, match="arch"):
        load_config(p)


def test_overrides_apply_before_validation(suite):
    cfg = load_config(suite / "synth.cfg", {"seed": 7, "arch": "psp", "out": None})
    assert cfg.seed == 7 and cfg.arch == "psp" and cfg.d == 6


# ------------------------------------------------------------------- train


def test_train_is_deterministic_and_emits_curves(suite, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["train", "--config", str(suite / "synth.cfg"), "--seed", "1", "--out", str(out)]) == 0
    assert (outs[0] / "loss_log.tsv").read_bytes() == (outs[1] / "loss_log.tsv").read_bytes()
    for name in ("final.ckpt", "best.ckpt", "meta.ckpt", "eval_report.tsv", "run.log", "dev_curves.tsv"):
        assert (outs[0] / name).is_file()
    header = (outs[0] / "dev_curves.tsv").read_text().splitlines()[0].split("\t")
    assert header == ["epoch", "task0", "task1", "task2"]
    tasks_logged = {line.split("\t")[1] for line in (outs[0] / "loss_log.tsv").read_text().splitlines()[1:]}
    assert tasks_logged == {"task0", "task1", "task2"}
    # re-running into the same directory overwrites with identical bytes
    before = (outs[0] / "loss_log.tsv").read_bytes()
    assert main(["train", "--config", str(suite / "synth.cfg"), "--seed", "1", "--out", str(outs[0])]) == 0
    assert (outs[0] / "loss_log.tsv").read_bytes() == before
    assert "seed\t1" in (outs[0] / "run.log").read_text()


def test_missing_corpus_fails_before_training(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("[task:a]\ntrain = x.tsv\ndev = y.tsv\ntest = z.tsv\n")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 1
    assert "missing input paths" in capsys.readouterr().err
    assert not out.exists()


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--arch", "nope"])
    assert exc.value.code == 2
    assert main(["train"]) == 2


def test_thread_variable_is_validated(suite, monkeypatch):
    monkeypatch.setenv("METALSTM_THREADS", "zero")
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--config", str(suite / "synth.cfg")])
    assert exc.value.code == 2


# --------------------------------------------------------- eval / transfer


@pytest.fixture(scope="module")
def trained(suite, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert main(["train", "--config", str(suite / "synth.cfg"), "--out", str(out)]) == 0
    return out


def test_eval_reproduces_training_report(suite, trained, tmp_path):
    assert main(["eval", "--config", str(suite / "synth.cfg"), "--checkpoint", str(trained / "best.ckpt"), "--out", str(tmp_path)]) == 0
    ev = dict(line.split("\t") for line in (tmp_path / "eval_test.tsv").read_text().splitlines())
    tr = dict(line.split("\t") for line in (trained / "eval_report.tsv").read_text().splitlines())
    assert all(ev[k] == tr[k] for k in ev)


def test_transfer_onto_a_training_task_keeps_meta(suite, trained, tmp_path):
    cfg = tmp_path / "one.cfg"
    text = (suite / "synth.cfg").read_text().split("[task:task1]")[0]
    cfg.write_text(text.replace("= task0", f"= {suite}/task0"))
    assert main(["transfer", "--config", str(cfg), "--meta", str(trained / "meta.ckpt"), "--out", str(tmp_path)]) == 0
    rep = dict(line.split("\t") for line in (tmp_path / "transfer_task0.tsv").read_text().splitlines())
    assert rep["meta_unchanged"] == "1"
    assert rep["meta_hash_loaded"] == rep["meta_hash_after"]
    _, arrays = load_checkpoint(tmp_path / "transfer_task0.ckpt")
    _, meta = load_checkpoint(trained / "meta.ckpt")
    for name, v in meta.items():
        assert arrays[f"shared/{name}"].tobytes() == v.tobytes()


def test_transfer_leave_one_out_writes_a_report_per_task(tmp_path):
    root = tmp_path / "s"
    assert main(["synth", "--tasks", "4", "--seed", "2", "--out", str(root)]) == 0
    set_keys(root / "synth.cfg", **TINY)
    assert main(["train", "--config", str(root / "synth.cfg"), "--out", str(tmp_path / "m")]) == 0
    assert main(["transfer", "--config", str(root / "synth.cfg"), "--meta", str(tmp_path / "m" / "meta.ckpt"), "--out", str(tmp_path / "t")]) == 0
    reports = sorted(p.name for p in (tmp_path / "t").glob("transfer_task?.tsv"))
    assert reports == [f"transfer_task{k}.tsv" for k in range(4)]


def test_transfer_rejects_corrupted_checkpoint(suite, trained, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((trained / "meta.ckpt").read_bytes())
    raw[-1] ^= 0x01
    bad.write_bytes(bytes(raw))
    assert main(["transfer", "--config", str(suite / "synth.cfg"), "--meta", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "checksum" in capsys.readouterr().err


def test_transfer_dimension_mismatch_is_explicit(suite, trained, tmp_path, capsys):
    cfg = tmp_path / "wide.cfg"
    cfg.write_text((suite / "synth.cfg").read_text().replace("m = 3", "m = 5").replace("= task", f"= {suite}/task"))
    assert main(["transfer", "--config", str(cfg), "--meta", str(trained / "meta.ckpt"), "--out", str(tmp_path)]) == 1
    assert "m: expected 5, found 3" in capsys.readouterr().err


# ---------------------------------------------------------------- diagnose


def test_diagnose_writes_trace_report_and_grad_check(suite, trained, tmp_path):
    inp = tmp_path / "in.txt"
    inp.write_text("w02 w10 w00 w04 w20\nw03 w11\n")
    rc = main(["diagnose", "--config", str(suite / "synth.cfg"), "--checkpoint", str(trained / "best.ckpt"),
               "--input", str(inp), "--out", str(tmp_path)])
    assert rc == 0
    trace = (tmp_path / "trace.tsv").read_text().splitlines()
    assert trace[0] == "pos\ttoken\tdiff_i\tdiff_g\tdiff_f\tdiff_o\tscore"
    assert len([line for line in trace[1:] if line]) == 7
    gc = dict(line.split("\t") for line in (tmp_path / "grad_check.tsv").read_text().splitlines())
    assert float(gc["max_rel_error"]) < 1e-4 and gc["pass"] == "1"
    assert "total" in (tmp_path / "param_report.tsv").read_text()


def test_diagnose_empty_input_is_usage_error(suite, trained, tmp_path):
    inp = tmp_path / "empty.txt"
    inp.write_text("\n")
    rc = main(["diagnose", "--config", str(suite / "synth.cfg"), "--checkpoint", str(trained / "best.ckpt"),
               "--input", str(inp), "--out", str(tmp_path)])
    assert rc == 2


def test_param_report_at_reference_dims(suite, tmp_path):
    cfg = tmp_path / "big.cfg"
    text = (suite / "synth.cfg").read_text().split("[task:task1]")[0]
    text = re.sub(r"^d = .*$", "d = 100", text, flags=re.M)
    text = re.sub(r"^h = .*$", "h = 100", text, flags=re.M)
    text = re.sub(r"^m = .*$", "m = 20", text, flags=re.M)
    text = re.sub(r"^z = .*$", "z = 20", text, flags=re.M)
    text = re.sub(r"^max_epochs = .*$", "max_epochs = 0", text, flags=re.M)
    cfg.write_text(text.replace("= task0", f"= {suite}/task0"))
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    inp = tmp_path / "in.txt"
    inp.write_text("w02 w05\n")
    assert main(["diagnose", "--config", str(cfg), "--input", str(inp), "--out", str(out)]) == 0
    lines = dict(line.split("\t", 1) for line in (out / "param_report.tsv").read_text().splitlines())
    assert lines["cell_excl_bias_gen"] == "42080"


def test_console_entry_point(tmp_path):
    env = dict(os.environ, METALSTM_THREADS="1")
    res = subprocess.run([sys.executable, "-m", "metalstm.cli", "synth", "--tasks", "1", "--out", str(tmp_path)],
                         capture_output=True, text=True, env=env)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "task0.train.tsv").read_text().count("\n") == 600
