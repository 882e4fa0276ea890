import json
import os

import numpy as np
import pytest

from glyforge import cli
from glyforge import pipeline as pl
from glyforge import store
from glyforge.matching import MatchResult
from glyforge.neural import NonFiniteLoss

TINY = ["patients=8", "days=2", "stride=120", "population_size=20", "hidden=6", "max_epochs=2",
        "recursive_hidden=6", "recursive_max_epochs=2", "worst_k=5"]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def tiny_args(out):
    return ["--threads", "1", "pipeline", "--out", str(out)] + sum((["--set", s] for s in TINY), [])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(tiny_args(out)) == 0
    return out


def test_pipeline_layout(tiny_run):
    for stage in pl.STAGES:
        d = tiny_run / stage
        assert d.is_dir(), stage
        assert (d / "config.txt").exists() or stage in ("train", "forecast")
    for name in ("cgm.tsv", "insulin.tsv", "ground_truth.tsv"):
        assert (tiny_run / "synth" / name).exists()
    assert (tiny_run / "evaluate" / "metrics.tsv").exists()
    assert (tiny_run / "report" / "summary.txt").exists()
    manifest = (tiny_run / "match" / "manifest.tsv").read_text().splitlines()
    assert manifest[0] == "input\tsha256" and len(manifest) == 3


def test_pipeline_is_byte_reproducible(tiny_run, tmp_path):
    assert cli.main(tiny_args(tmp_path)) == 0
    for rel in ("evaluate/metrics.tsv", "match/matches.jsonl", "synth/cgm.tsv",
                "train/seq2seq_ode/checkpoint.txt", "forecast/recursive/predictions.tsv"):
        assert (tmp_path / rel).read_bytes() == (tiny_run / rel).read_bytes(), rel


def test_missing_predecessor_names_stage(tmp_path, capsys):
    code, _, err = run(["match", "--set", f"data_dir={tmp_path}",
                        "--segments", str(tmp_path / "nowhere"),
                        "--population", str(tmp_path / "pop.tsv")], capsys)
    assert code == 3
    report = json.loads(err.strip().splitlines()[-1])
    assert report["status"] == 3 and "'extract' stage" in report["message"]


def test_config_errors_exit_2(tmp_path, capsys):
    code, _, err = run(["synth", "--set", "no_such_key=1"], capsys)
    assert code == 2 and "no_such_key" in err
    cfg = tmp_path / "bad.txt"
    cfg.write_text("patients = many\n")
    code, _, _ = run(["synth", "--config", str(cfg)], capsys)
    assert code == 2
    code, _, _ = run(["pipeline", "--set", "models=transformer"], capsys)
    assert code == 2


def test_numeric_failure_exit_4(monkeypatch, tmp_path, capsys):
    def diverge(*args, **kwargs):
        raise NonFiniteLoss("non-finite loss in epoch 3")

    monkeypatch.setattr(pl, "run_train", diverge)
    code, _, err = run(["train", "--model", "seq2seq", "--set", f"data_dir={tmp_path}"], capsys)
    assert code == 4 and json.loads(err)["error"] == "NonFiniteLoss"


def test_env_var_sets_data_dir(monkeypatch, tmp_path):
    monkeypatch.setenv("GLYFORGE_DATA_DIR", str(tmp_path))
    assert pl.load_config().data_dir == str(tmp_path)


def test_stage_subcommands_match_pipeline(tiny_run, tmp_path, capsys):
    pop = tmp_path / "pop.tsv"
    assert run(["population", "generate", "--seed", "0", "--size", "20", "--out", str(pop)],
               capsys)[0] == 0
    assert pop.read_bytes() == (tiny_run / "population" / "population.tsv").read_bytes()
    code, _, _ = run(["forecast", "--model", str(tiny_run / "train/seq2seq/checkpoint.txt"),
                      "--segments", str(tiny_run / "extract"), "--matches", str(tiny_run / "match"),
                      "--population", str(pop), "--out", str(tmp_path / "fc")] +
                     sum((["--set", s] for s in TINY), []), capsys)
    assert code == 0
    assert (tmp_path / "fc" / "predictions.tsv").read_bytes() == \
        (tiny_run / "forecast" / "seq2seq" / "predictions.tsv").read_bytes()


def test_forecast_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(["forecast", "--model", str(tmp_path / "none.txt")], capsys)
    assert code == 3 and "'train' stage" in err


def test_segment_and_match_roundtrip(tiny_run, tmp_path):
    segs, splits = store.read_segments(tiny_run / "extract" / store.SEGMENTS_FILE)
    assert set(splits) <= {"train", "validation", "test"}
    path = tmp_path / "s.jsonl"
    store.write_segments(path, segs, dict(zip([s.patient_id for s in segs], splits)))
    again, _ = store.read_segments(path)
    for a, b in zip(segs, again):
        assert a.segment_id == b.segment_id
        assert np.array_equal(a.history_cgm, b.history_cgm) and np.array_equal(a.iob_fut, b.iob_fut)
        assert a.insulin_context == b.insulin_context and a.qc_flags == b.qc_flags
    r = MatchResult(4, 1.25, np.random.default_rng(0).normal(size=(37, 10)), np.ones((48, 10)),
                    0.3, "P1:180")
    store.write_matches(tmp_path / "m.jsonl", [r])
    back = store.read_matches(tmp_path / "m.jsonl")["P1:180"]
    assert np.array_equal(back.X_hist, r.X_hist) and back.rmse == r.rmse


def test_prediction_file_exact(tmp_path):
    p = np.random.default_rng(1).uniform(40, 400, (3, 48))
    store.write_predictions(tmp_path / "p.tsv", ["a", "b", "c"], p)
    back = store.read_predictions(tmp_path / "p.tsv")
    assert np.array_equal(np.stack([back[k] for k in "abc"]), p)


def test_malformed_segments_name_line(tmp_path):
    path = tmp_path / "segments.jsonl"
    path.write_text('{"patient_id": "x"}\n')
    with pytest.raises(ValueError, match=":1:"):
        store.read_segments(path)
