import json

import numpy as np
import pytest

from ditto.envsim import ConstantPolicy, ScriptedExpert, make_env
from ditto.evaluation import RunReport, evaluate, mean_stderr
from ditto.plotting import band_plot, read_band_csv, summarize


def test_mean_stderr():
    assert mean_stderr([4.0]) == (4.0, 0.0)
    m, se = mean_stderr([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    with pytest.raises(ValueError):
        mean_stderr([])


def test_expert_scores_one():
    env = make_env("patrol")
    result = evaluate(ScriptedExpert(env), env, episodes=4, seed=0)
    assert result.relative == 1.0 and result.n == 4


def test_constant_policy_below_expert():
    env = make_env("patrol")
    result = evaluate(ConstantPolicy(0), env, episodes=4, seed=0)
    assert result.mean < result.expert_mean


def test_report_roundtrip(tmp_path):
    report = RunReport("ditto_ne2_h15_s0", "patrol", 0, 2, {"mean": 1.0}, [0.1, 0.2],
                       {"adversarial_collapse": False}, {"seed": 0}, {"git": "abc", "wm": "x"})
    report.save(tmp_path / "r.json")
    again = RunReport.load(tmp_path / "r.json")
    assert again == report
    assert "git" not in again.metrics()["hashes"]
    json.loads((tmp_path / "r.json").read_text())


def test_single_run_has_zero_band():
    assert summarize({4: [0.7]}) == [(4.0, 0.7, 0.0, 1)]


def test_band_plot_outputs(tmp_path):
    written = band_plot({"ditto": {4: [0.5, 0.7], 8: [0.9]}, "dbc": {4: [0.2, 0.3]}}, tmp_path / "score",
                        "expert episodes", "relative score", logx=True, reference={"expert": 1.0})
    names = sorted(p.name for p in written)
    assert names == ["score.dbc.csv", "score.ditto.csv", "score.png"]
    header = (tmp_path / "score.ditto.csv").read_text().splitlines()[0]
    assert header == "x,mean,stderr,n"
    rows = read_band_csv(tmp_path / "score.ditto.csv")
    assert rows[0][:2] == (4.0, pytest.approx(0.6)) and rows[1] == (8.0, 0.9, 0.0, 1)
    assert (tmp_path / "score.png").stat().st_size > 0
