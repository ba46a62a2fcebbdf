import csv
import json
import math

import numpy as np
import pytest

from lagdecode import cli
from lagdecode.decoder import Constraint, DecoderConfig, decode_fixed_length, threshold_at
from lagdecode.harness import (ConfigError, ConstraintSpec, ExperimentConfig, SearchSpaceTooLarge,
                               cmd_figure1, oracle_decode, oracle_instance, oracle_suite_models,
                               read_csv, write_trace_csv)
from lagdecode.objectives import ObjectiveHandle, discrete_eval
from lagdecode.toy_models import uniform_lm


def test_oracle_uniform_ties_to_lexicographic_smallest():
    best, count, opt = oracle_decode((1,), 3, uniform_lm(4), [])
    assert best == (0, 0, 0) and count == 64
    assert opt == pytest.approx(3 * math.log(4))


def test_oracle_infeasible(small_lm, small_clf):
    obj = ObjectiveHandle("classifier", small_clf, 1)
    global_min = min(discrete_eval(obj, (), (a, b)) for a in range(6) for b in range(6))
    c = Constraint(obj, global_min * 0.5, 10.0)
    assert oracle_decode((1,), 2, small_lm, [c]) == (None, 0, None)


def test_oracle_matches_bruteforce_on_feasible_set(small_lm, small_clf):
    c = Constraint.default(ObjectiveHandle("classifier", small_clf, 0))
    best, count, opt = oracle_decode((2, 3), 2, small_lm, [c])
    feas = [(a, b) for a in range(6) for b in range(6)
            if discrete_eval(c.objective, (2, 3), (a, b)) <= c.epsilon_final]
    assert count == len(feas)
    assert opt == min(discrete_eval(ObjectiveHandle("primary-nll", small_lm), (2, 3), y) for y in feas)


def test_oracle_regression_instance_seven():
    cfg = ExperimentConfig()
    corpus, lm, clf = oracle_suite_models(cfg)
    x, con = oracle_instance(corpus, clf, 7, 3)
    best, count, opt = oracle_decode(x, 3, lm, [con])
    assert (x, con.objective.label) == ((2, 3, 3), 0)
    assert best == (3, 4, 3) and count == 120
    assert opt == pytest.approx(3.920931915189364, abs=1e-9)


def test_oracle_search_bound():
    with pytest.raises(SearchSpaceTooLarge):
        oracle_decode((1,), 5, uniform_lm(32), [])


# --- config -----------------------------------------------------------------

def test_config_json_roundtrip(tmp_path):
    cfg = ExperimentConfig(seed=3, constraints=[ConstraintSpec("wmd", epsilon_final=0.3)],
                           decoder=DecoderConfig(eta1=7.0))
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    back = ExperimentConfig.load(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.decoder.eta1 == 7.0 and back.constraints[0].epsilon_init == 2.0


@pytest.mark.parametrize("bad", [
    {"constraints": [{"kind": "bleu"}]},
    {"constraints": [{"kind": "classifier", "epsilon_final": float("inf")}]},
    {"decoder": {"eta1": -1}},
    {"no_such_field": 1},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_missing_model_files(tmp_path):
    cfg = ExperimentConfig(out_dir=str(tmp_path))
    with pytest.raises(ConfigError, match="missing files"):
        cfg.require_files("lm_path")


# --- traces and CLI ---------------------------------------------------------

def test_trace_csv_layout(tmp_path, small_lm, small_clf):
    c = Constraint.default(ObjectiveHandle("classifier", small_clf, 1))
    cfg = DecoderConfig()
    _, trace = decode_fixed_length((1, 2), 3, small_lm, [c], cfg)
    write_trace_csv(trace, tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["step", "primary_loss", "loss_0", "lambda_0", "threshold_0",
                      "num_satisfied", "candidate_tokens"]
    rows = read_csv(tmp_path / "t.csv")
    assert len(rows) == cfg.max_steps
    assert [float(r["threshold_0"]) for r in rows] == [threshold_at(cfg.schedule, c, t) for t in range(100)]
    assert all(len(r["candidate_tokens"].split()) == 3 for r in rows)


def test_cli_error_line(tmp_path, capsys):
    code = cli.main(["decode", "--out", str(tmp_path)])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == "error" and err["command"] == "decode"
    assert err["type"] == "ConfigError"


def test_cli_bad_config_path(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == 1
    assert "config file not found" in capsys.readouterr().err


def test_cli_seed_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5}))
    args = cli.build_parser().parse_args(["oracle", "--config", str(path), "--seed", "9",
                                          "--out", str(tmp_path)])
    cfg = cli.load_config(args)
    assert cfg.seed == 9 and cfg.out_dir == str(tmp_path)


def test_figure1_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cmd_figure1(ExperimentConfig(out_dir=str(a)))
    cmd_figure1(ExperimentConfig(out_dir=str(b)))
    names = ["figure1_mdmm.csv", "figure1_mdmm-undamped.csv", "figure1_linear-combination.csv"]
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
        assert len(read_csv(a / n)) == 100
    lin = read_csv(a / names[2])[0]
    assert "primary_loss@alpha=0.9" in lin and "loss_0@alpha=0.1" in lin
