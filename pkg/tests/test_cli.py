import json

from subflowsim.cli import main
from subflowsim.scenarios import OUTPUT_NAMES


def write_config(tmp_path, **extra):
    data = {
        "name": "cli",
        "duration_s": 3,
        "controller": {"warmup_ms": 1000},
        "ues": [
            {"id": 0, "snr_db": 8, "flows": [{"type": "zoom", "direction": "DL"}]},
            {"id": 1, "snr_db": 20, "flows": [{"type": "background", "direction": "DL"}]},
        ],
    }
    data.update(extra)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(data))
    return p


def test_config_error_exits_2(tmp_path, capsys):
    assert main(["run", "--config", str(write_config(tmp_path, mystery=True)), "--out", str(tmp_path)]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_run_then_score_then_flow2frame(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
    assert "QoE sum" in capsys.readouterr().out
    assert all((out / f"{n}.csv").exists() for n in OUTPUT_NAMES)

    assert main(["score", "--trace", str(out / "trace.csv"), "--duration", "3", "--out", str(tmp_path / "q.csv")]) == 0
    assert capsys.readouterr().out.startswith("zoom-ue0-Downlink-0:")

    args = ["flow2frame", "--trace", str(out / "trace.csv"), "--frames", str(out / "frames.csv"),
            "--flow", "zoom-ue0-Downlink-0", "--out", str(tmp_path / "m.csv")]
    assert main(args) == 0
    assert "agreement" in capsys.readouterr().out
    assert (tmp_path / "m.csv").exists()


def test_sweep_writes_frontier(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["sweep", "--config", str(cfg), "--betas", "0,1", "--baselines", "DChannelStyle", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "frontier.csv").read_text().splitlines()
    assert lines[0].startswith("point,mode") and len(lines) == 4


def test_overrides_reach_the_run(tmp_path, capsys):
    assert main(["run", "--config", str(write_config(tmp_path)), "--baseline", "Vanilla5G:300", "--seed", "3",
                 "--out", str(tmp_path / "o")]) == 0
    assert "[Vanilla5G:300]" in capsys.readouterr().out
