import csv
import hashlib
import json
import math
import statistics
import subprocess
import sys

import pytest

from helpers import TRIANGULAR_DOC, jacobi
from polyloop.cli import EXIT_INPUT, EXIT_OK, EXIT_WEIGHTS, build_parser, main
from polyloop.cost_model import init_weights, predict_many, save_weights
from polyloop.cost_model.weights_io import weights_bytes
from polyloop.datagen import Datapoint, GenConfig, gen_programs, gen_dataset, header, read_dataset, write_dataset
from polyloop.executor import ExecConfig
from polyloop.ir import serialize_program

SMALL = ["--hidden", "16", "--embed", "8", "--fc", "16"]


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    prog = d / "jacobi.json"
    prog.write_text(serialize_program(jacobi(8, 12), indent=2))
    data = d / "data.jsonl"
    assert main(["datagen", "--programs", "4", "--schedules-per-program", "8", "--seed", "3", "--out", str(data)]) == 0
    return d, prog, data


def _subparsers():
    ap = build_parser()
    sub = next(a for a in ap._actions if a.__class__.__name__ == "_SubParsersAction")
    return ap, sub.choices


def test_help_documents_every_flag():
    ap, subs = _subparsers()
    assert set(subs) == {"autoschedule", "datagen", "train", "eval", "compare"}
    for name, sp in subs.items():
        text = sp.format_help()
        for act in sp._actions:
            for opt in act.option_strings:
                assert opt in text, (name, opt)
            if act.option_strings and act.dest != "help":
                assert act.help, (name, act.option_strings)


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "polyloop", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "autoschedule" in r.stdout


def test_unknown_flag_is_an_error(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["eval", "--data", "x", "--weights", "y", "--bogus"])
    assert ei.value.code == EXIT_INPUT


def test_autoschedule_exec(work, capsys):
    d, prog, _ = work
    out = d / "auto.json"
    assert main(["autoschedule", "--program", str(prog), "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["measured_speedup"] >= 1.0
    assert doc["search"]["stats"]["evaluated"] > 1
    assert "best schedule" in capsys.readouterr().out


def test_autoschedule_missing_weights(work):
    d, prog, _ = work
    out = d / "never.json"
    code = main(["autoschedule", "--program", str(prog), "--evaluator", "model",
                 "--weights", str(d / "missing.bin"), "--out", str(out)])
    assert code == EXIT_WEIGHTS and not out.exists()
    assert main(["autoschedule", "--program", str(prog), "--evaluator", "model", "--out", str(out)]) == EXIT_WEIGHTS


def test_bad_program_is_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["autoschedule", "--program", str(bad)]) == EXIT_INPUT
    doc = json.loads(json.dumps(TRIANGULAR_DOC))
    doc["computations"][0]["domain"] = [[1, 0]]
    bad.write_text(json.dumps(doc))
    assert main(["autoschedule", "--program", str(bad)]) == EXIT_INPUT


def test_even_repetitions_rejected_in_wallclock(work):
    _, prog, _ = work
    assert main(["autoschedule", "--program", str(prog), "--exec-mode", "wallclock", "--repetitions", "4"]) == EXIT_INPUT


def test_train_zero_epochs_is_init(work):
    d, _, data = work
    out = d / "w0.bin"
    assert main(["train", "--data", str(data), "--epochs", "0", "--seed", "7", "--out", str(out)] + SMALL) == 0
    expect = weights_bytes(init_weights(7, {"embed": 8, "hidden": 16, "fc": 16}))
    assert hashlib.sha256(out.read_bytes()).hexdigest() == hashlib.sha256(expect).hexdigest()


def test_train_writes_history(work):
    d, _, data = work
    out = d / "w2.bin"
    assert main(["train", "--data", str(data), "--epochs", "2", "--val-fraction", "0.25", "--out", str(out)] + SMALL) == 0
    rows = list(csv.DictReader(open(d / "w2.history.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert all(float(r["val_mape"]) >= 0 for r in rows)


def test_eval_on_perfect_fixture(tmp_path):
    w = init_weights(0, {"embed": 8, "hidden": 16, "fc": 16})
    recs = gen_dataset(gen_programs(GenConfig(program_count=2, seed=1)), 6)
    # labels from the same batched pass the evaluator runs
    pred = predict_many(w, [r.features for r in recs])
    perfect = [Datapoint(r.pid, r.features, r.schedule, float(v), r.mode) for r, v in zip(recs, pred)]
    data, wpath, out = tmp_path / "p.jsonl", tmp_path / "w.bin", tmp_path / "m.json"
    write_dataset(data, perfect, header(None, ExecConfig()))
    save_weights(w, wpath)
    assert main(["eval", "--data", str(data), "--weights", str(wpath), "--out", str(out)]) == 0
    m = json.loads(out.read_text())
    assert m["mape"] == 0.0 and m["spearman"] == pytest.approx(1.0) and m["ndcg"] == pytest.approx(1.0)


def test_compare_footer_recomputes(work):
    d, _, data = work
    wpath = d / "wc.bin"
    assert main(["train", "--data", str(data), "--epochs", "1", "--out", str(wpath)] + SMALL) == 0
    out = d / "cmp.json"
    progs = d / "data.programs.jsonl"
    assert main(["compare", "--programs", str(progs), "--weights", str(wpath), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    ratios = [r["ratio"] for r in doc["rows"]]
    assert len(ratios) == 4
    assert all(r["ratio"] == pytest.approx(r["model_speedup"] / r["exec_speedup"]) for r in doc["rows"])
    gm = math.exp(sum(math.log(x) for x in ratios) / len(ratios))
    assert doc["summary"]["geomean_ratio"] == pytest.approx(gm)
    assert doc["summary"]["median_ratio"] == pytest.approx(statistics.median(ratios))
    assert "geomean_time_ratio" not in doc["summary"]
    timed = d / "cmp_t.json"
    assert main(["compare", "--programs", str(progs), "--weights", str(wpath), "--include-timing", "--out", str(timed)]) == 0
    assert "geomean_time_ratio" in json.loads(timed.read_text())["summary"]


def test_subcommands_deterministic(work, tmp_path):
    d, prog, _ = work
    outs = []
    for k in range(2):
        base = tmp_path / f"run{k}"
        base.mkdir()
        data, w, auto = base / "d.jsonl", base / "w.bin", base / "a.json"
        assert main(["datagen", "--programs", "2", "--schedules-per-program", "6", "--seed", "11", "--out", str(data)]) == 0
        assert main(["train", "--data", str(data), "--epochs", "1", "--seed", "11", "--out", str(w)] + SMALL) == 0
        assert main(["autoschedule", "--program", str(prog), "--evaluator", "model", "--weights", str(w),
                     "--out", str(auto)]) == 0
        outs.append([sha(data), sha(w), sha(base / "w.history.csv"), sha(auto), sha(base / "d.programs.jsonl")])
    assert outs[0] == outs[1]


def test_env_precedence(work, monkeypatch):
    d, _, _ = work
    monkeypatch.setenv("LOOPER_SEED", "5")
    a = d / "env.jsonl"
    assert main(["datagen", "--programs", "1", "--schedules-per-program", "3", "--out", str(a)]) == 0
    assert read_dataset(a)[0]["config"]["seed"] == 5
    b = d / "flag.jsonl"
    assert main(["datagen", "--programs", "1", "--schedules-per-program", "3", "--seed", "6", "--out", str(b)]) == 0
    assert read_dataset(b)[0]["config"]["seed"] == 6
    monkeypatch.setenv("LOOPER_THREADS", "zero")
    assert main(["datagen", "--programs", "1", "--out", str(b)]) == EXIT_INPUT
