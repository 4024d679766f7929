import json
import subprocess
import sys

import pytest

from ditto.cli import MissingArtifactError, agent_name, main, parse_seeds, run, stream_seeds
from ditto.evaluation import RunReport

TINY = """
data.wm_episodes = 3
data.expert_episodes = 2
wm.steps = 3
wm.batch_size = 2
wm.seq_len = 8
wm.deter = 16
wm.hidden = 16
wm.cnn_depth = 4
wm.groups = 4
wm.classes = 3
agent.steps = 3
agent.batch_size = 4
agent.hidden = 16
agent.horizon = 3
bc.steps = 3
bc.batch_size = 8
eval.episodes = 2
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    conf = root / "tiny.conf"
    conf.write_text(TINY)
    base = ["--runs-dir", str(root), "--run", "r"]
    run(["collect", *base, "--config", str(conf), "--seed", "0"])
    run(["train-wm", *base])
    run(["encode", *base])
    return root, base


def test_parse_seeds():
    assert parse_seeds("0,1,2", 9) == [0, 1, 2]
    assert parse_seeds("0-2,5", 9) == [0, 1, 2, 5]
    assert parse_seeds(None, 9) == [9]


def test_stream_seeds_distinct():
    s = stream_seeds(0)
    assert len(set(s.values())) == 3 and s == stream_seeds(0) and s != stream_seeds(1)


def test_agent_names():
    assert agent_name("dbc", 4, 15, 0) == "dbc_ne4_s0"
    assert agent_name("ditto", 4, 9, 1) == "ditto_ne4_h9_s1"


def test_layout(pipeline):
    root, _ = pipeline
    r = root / "r"
    for path in ("config.echo", "data/wm", "data/expert", "wm/model.ckpt", "wm/loss.csv", "latents/expert.npz"):
        assert (r / path).exists(), path
    assert "wm.deter = 16" in (r / "config.echo").read_text()


def test_missing_phase_names_the_fix(tmp_path, capsys):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "config.echo").write_text("seed = 0\n")
    with pytest.raises(MissingArtifactError, match="train-wm"):
        run(["encode", "--runs-dir", str(tmp_path), "--run", "x"])
    assert main(["train-agent", "--runs-dir", str(tmp_path), "--run", "x", "--agent", "ditto"]) == 2
    assert "run `ditto" in capsys.readouterr().err
    assert main(["train-wm", "--runs-dir", str(tmp_path), "--run", "missing"]) == 2


def test_agents_share_one_store_and_seed_is_reproducible(pipeline):
    root, base = pipeline
    for kind in ("dbc", "ditto"):
        run(["train-agent", *base, "--agent", kind, "--seed", "1"])
    a = run(["evaluate", *base, "--agent", "ditto", "--seed", "1"])
    r1 = RunReport.load(root / "r" / "eval" / "ditto_ne2_h3_s1.json")
    run(["evaluate", *base, "--agent", "dbc", "--seed", "1"])
    dbc = RunReport.load(root / "r" / "eval" / "dbc_ne2_s1.json")
    assert dbc.hashes["world_model"] == r1.hashes["world_model"]
    # retrain and re-evaluate the same seed from scratch
    run(["train-agent", *base, "--agent", "ditto", "--seed", "1"])
    b = run(["evaluate", *base, "--agent", "ditto", "--seed", "1"])
    r2 = RunReport.load(root / "r" / "eval" / "ditto_ne2_h3_s1.json")
    assert a == b and r1.metrics() == r2.metrics()
    assert len(r1.intrinsic_curve) == 3


def test_seed_fan_out_and_plots(pipeline):
    root, base = pipeline
    run(["train-agent", *base, "--agent", "bc", "--seeds", "0-1", "--jobs", "2"])
    run(["train-agent", *base, "--agent", "dgail", "--seeds", "0"])
    run(["evaluate", *base, "--agent", "bc", "--seeds", "0-1"])
    run(["evaluate", *base, "--agent", "dgail", "--seeds", "0"])
    run(["evaluate", *base, "--agent", "expert"])
    rep = RunReport.load(root / "r" / "eval" / "dgail_ne2_h3_s0.json")
    assert isinstance(rep.collapse["adversarial"], bool)
    expert = RunReport.load(root / "r" / "eval" / "expert_s0.json")
    assert expert.eval["relative"] == 1.0
    files = run(["plot", str(root / "r")])
    names = {p.rsplit("/", 1)[-1] for p in files}
    assert {"score_vs_expert_episodes.png", "score_vs_expert_episodes.bc.csv", "intrinsic_return.png"} <= names


def test_ablate_horizon(pipeline):
    root, base = pipeline
    out = run(["ablate-horizon", *base, "--horizons", "2,3", "--seeds", "0"])
    plots = root / "r" / "plots"
    assert (plots / "horizon.png").exists() and (plots / "horizon.ditto.csv").exists()
    assert (plots / "horizon.dbc.csv").exists()
    rows = (plots / "horizon.ditto.csv").read_text().splitlines()
    assert rows[0] == "x,mean,stderr,n" and len(rows) == 3
    assert out["horizons"] == [2, 3]


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ditto", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train-agent" in out.stdout
