from __future__ import annotations

import json
import sys

import numpy as np
import pytest

from adwynn.cli import RunConfig, load_config, main, read_replay_file
from adwynn.model import builtin_bundle


def _write_config(tmp_path, name="cfg.json", **overrides):
    cfg = {
        "model": {"name": "michaelis_menten"},
        "theta_bar": [1.0, 1.0],
        "noise": {"variant": "iid_gaussian", "sigma": 0.1},
        "wynn": {"n_max": 12},
        "mc": {"replicates": 2, "checkpoints": [8, 12], "workers": 1},
        "oracle": {"theta": [1.0, 1.0], "tol": 1e-4},
        "seed": 7,
        "output": {"dir": str(tmp_path), "prefix": "t"},
    }
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path, cfg


# ---------------------------------------------------------------- config


def test_config_roundtrip(tmp_path):
    path, raw = _write_config(tmp_path)
    cfg = load_config(str(path))
    again = RunConfig(cfg.to_jsonable())
    assert cfg.to_jsonable() == again.to_jsonable() == raw


def test_config_missing_model_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"wynn": {"n_max": 5}}))
    rc = main(["simulate", "--config", str(path)])
    assert rc == 2
    assert "missing required key $.model" in capsys.readouterr().err


def test_config_invalid_json_reports_line(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n "model": {\n BROKEN\n}\n}')
    rc = main(["simulate", "--config", str(path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert ":3:" in err  # line of the defect


def test_config_validates_theta_bar(tmp_path, capsys):
    path, _ = _write_config(tmp_path, theta_bar=[9.0, 9.0])
    rc = main(["simulate", "--config", str(path)])
    assert rc == 2
    assert "theta_bar" in capsys.readouterr().err


def test_config_validates_noise(tmp_path, capsys):
    path, _ = _write_config(tmp_path, noise={"variant": "iid_scaled_t", "df": 3.0, "scale": 1.0})
    rc = main(["simulate", "--config", str(path)])
    assert rc == 2


def test_config_rejects_non_numeric_values(tmp_path, capsys):
    path, _ = _write_config(tmp_path, wynn={"n_max": "many"})
    assert main(["simulate", "--config", str(path)]) == 2
    path, _ = _write_config(tmp_path, theta_bar=["a", "b"])
    assert main(["simulate", "--config", str(path)]) == 2
    path, _ = _write_config(
        tmp_path, mc={"replicates": 2, "checkpoints": ["x"], "workers": 1}
    )
    assert main(["mc", "--config", str(path)]) == 2
    path, _ = _write_config(tmp_path, noise={"variant": "iid_gaussian", "sigma": "low"})
    assert main(["simulate", "--config", str(path)]) == 2


# ---------------------------------------------------------------- simulate


def test_simulate_writes_trajectory(tmp_path, capsys):
    path, _ = _write_config(tmp_path)
    rc = main(["simulate", "--config", str(path), "--n-max", "4"])
    assert rc == 0
    csv_lines = (tmp_path / "t_trajectory.csv").read_text().splitlines()
    assert csv_lines[0] == "n,x0,y,theta0,theta1,logdet,max_d"
    assert len(csv_lines) == 1 + (4 - 2)  # header + n_max - n_start rows
    obj = json.loads((tmp_path / "t_trajectory.json").read_text())
    assert obj["schema"] == "adwynn.trajectory.v1"
    assert len(obj["points"]) == 4


def test_simulate_deterministic_bytes(tmp_path):
    path, _ = _write_config(tmp_path)
    main(["simulate", "--config", str(path), "--prefix", "a"])
    main(["simulate", "--config", str(path), "--prefix", "b"])
    a = (tmp_path / "a_trajectory.json").read_bytes()
    b = (tmp_path / "b_trajectory.json").read_bytes()
    assert a == b
    assert (tmp_path / "a_trajectory.csv").read_bytes() == (
        tmp_path / "b_trajectory.csv"
    ).read_bytes()
    main(["simulate", "--config", str(path), "--prefix", "c", "--seed", "8"])
    assert (tmp_path / "c_trajectory.json").read_bytes() != a


def test_simulate_replay_source(tmp_path):
    replay = tmp_path / "replay.txt"
    replay.write_text("OBSERVE 0.5\nOBSERVE 0.7\n\nOBSERVE 0.2\nOBSERVE 0.1\n")
    path, _ = _write_config(
        tmp_path, source={"kind": "replay", "replay_file": str(replay)}
    )
    rc = main(["simulate", "--config", str(path), "--n-max", "4", "--prefix", "rp"])
    assert rc == 0
    obj = json.loads((tmp_path / "rp_trajectory.json").read_text())
    assert obj["responses"] == [0.5, 0.7, 0.2, 0.1]


def test_simulate_replay_exhaustion_exits_1(tmp_path, capsys):
    replay = tmp_path / "replay.txt"
    replay.write_text("OBSERVE 0.5\n")
    path, _ = _write_config(
        tmp_path, source={"kind": "replay", "replay_file": str(replay)}
    )
    rc = main(["simulate", "--config", str(path), "--n-max", "4"])
    assert rc == 1
    assert "exhausted" in capsys.readouterr().err


def test_read_replay_file_validates(tmp_path):
    from adwynn.errors import ConfigError

    bad = tmp_path / "bad.txt"
    bad.write_text("OBSERVE 1.0\nNOPE 2\n")
    with pytest.raises(ConfigError):
        read_replay_file(str(bad))


# ---------------------------------------------------------------- oracle


def test_oracle_polynomial(tmp_path):
    cfg = {
        "model": {"name": "polynomial", "params": {"degree": 1}},
        "oracle": {"theta": [0.0, 0.0], "tol": 1e-6},
        "output": {"dir": str(tmp_path), "prefix": "po"},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    rc = main(["oracle", "--config", str(path)])
    assert rc == 0
    obj = json.loads((tmp_path / "po_design.json").read_text())
    w = {round(s[0], 6): w for s, w in zip(obj["support"], obj["weights"])}
    assert w[-1.0] == pytest.approx(0.5, abs=1e-3)
    assert w[1.0] == pytest.approx(0.5, abs=1e-3)
    assert obj["equivalence_gap"] <= 2e-6
    assert "logdet" in obj


def test_oracle_single_parameter_model(tmp_path):
    cfg = {
        "model": {"name": "one_param_exponential"},
        "oracle": {"theta": [1.0], "tol": 1e-6},
        "output": {"dir": str(tmp_path), "prefix": "p1"},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    rc = main(["oracle", "--config", str(path)])
    assert rc == 0
    obj = json.loads((tmp_path / "p1_design.json").read_text())
    assert len(obj["support"]) == 1
    assert obj["weights"] == [1.0]


def test_oracle_unattainable_tol_exits_1(tmp_path, capsys):
    path, _ = _write_config(tmp_path)
    rc = main(["oracle", "--config", str(path), "--tol", "0"])
    assert rc == 1
    assert "gap" in capsys.readouterr().err


# ---------------------------------------------------------------- mc


def test_mc_smoke_run(tmp_path):
    import time

    path, _ = _write_config(
        tmp_path, wynn={"n_max": 50}, mc={"replicates": 2, "checkpoints": [25, 50], "workers": 1}
    )
    t0 = time.time()
    rc = main(["mc", "--config", str(path)])
    assert time.time() - t0 < 10.0
    assert rc == 0
    obj = json.loads((tmp_path / "t_mc.json").read_text())
    assert obj["replicates"] == 2
    assert set(obj["per_checkpoint"]) == {"25", "50"}
    csv_lines = (tmp_path / "t_mc.csv").read_text().splitlines()
    assert len(csv_lines) == 1 + 2 * 2  # header + R x checkpoints


def test_mc_zero_noise_errors_tiny(tmp_path):
    path, _ = _write_config(
        tmp_path,
        noise={"variant": "iid_gaussian", "sigma": 0.0},
        mc={"replicates": 5, "checkpoints": [10], "workers": 1},
    )
    rc = main(["mc", "--config", str(path)])
    assert rc == 0
    obj = json.loads((tmp_path / "t_mc.json").read_text())
    errs = obj["per_checkpoint"]["10"]["error_samples"]
    assert max(errs) <= 1e-6


def test_mc_deterministic_bytes(tmp_path):
    path, _ = _write_config(tmp_path)
    main(["mc", "--config", str(path), "--prefix", "m1"])
    main(["mc", "--config", str(path), "--prefix", "m2"])
    assert (tmp_path / "m1_mc.json").read_bytes() == (tmp_path / "m2_mc.json").read_bytes()
    assert (tmp_path / "m1_mc.csv").read_bytes() == (tmp_path / "m2_mc.csv").read_bytes()


def test_mc_checkpoint_before_start_exits_1(tmp_path, capsys):
    path, _ = _write_config(
        tmp_path, mc={"replicates": 2, "checkpoints": [1], "workers": 1}
    )
    rc = main(["mc", "--config", str(path)])
    assert rc == 1


# ---------------------------------------------------------------- diagnose


def test_diagnose_two_point_trajectory(tmp_path):
    path, _ = _write_config(tmp_path)
    main(["simulate", "--config", str(path), "--n-max", "30", "--prefix", "dg"])
    rc = main(
        [
            "diagnose",
            str(tmp_path / "dg_trajectory.json"),
            "--d",
            "0.05",
            "--cell-diameter",
            "0.05",
            "--out-dir",
            str(tmp_path),
            "--prefix",
            "dg",
        ]
    )
    assert rc == 0
    obj = json.loads((tmp_path / "dg_diagnostics.json").read_text())
    assert obj["requested_clusters"] == 2
    assert obj["n0"] is None or obj["n0"] >= 1
    assert len(obj["window_masses"]) == 30


def test_diagnose_huge_window_is_total_mass(tmp_path):
    path, _ = _write_config(tmp_path)
    main(["simulate", "--config", str(path), "--n-max", "10", "--prefix", "dh"])
    rc = main(
        [
            "diagnose",
            str(tmp_path / "dh_trajectory.json"),
            "--d",
            "10.0",
            "--cell-diameter",
            "0.1",
            "--out-dir",
            str(tmp_path),
            "--prefix",
            "dh",
        ]
    )
    assert rc == 0
    obj = json.loads((tmp_path / "dh_diagnostics.json").read_text())
    assert all(v == 1.0 for v in obj["window_masses"].values())


def test_diagnose_masses_match_recount(tmp_path):
    path, _ = _write_config(tmp_path)
    main(["simulate", "--config", str(path), "--n-max", "25", "--prefix", "dr"])
    traj = json.loads((tmp_path / "dr_trajectory.json").read_text())
    main(
        [
            "diagnose",
            str(tmp_path / "dr_trajectory.json"),
            "--d",
            "0.05",
            "--cell-diameter",
            "0.05",
            "--out-dir",
            str(tmp_path),
            "--prefix",
            "dr",
        ]
    )
    obj = json.loads((tmp_path / "dr_diagnostics.json").read_text())
    pts = np.asarray(traj["points"], dtype=float).ravel()
    for cluster in obj["clusters"]:
        lo, hi = cluster["point_min"][0], cluster["point_max"][0]
        count = int(np.sum((pts >= lo) & (pts <= hi)))
        assert cluster["count"] <= count  # recount over the span bounds the members


def test_diagnose_parse_failure_exits_2(tmp_path, capsys):
    bad = tmp_path / "nope.json"
    bad.write_text("{broken")
    rc = main(["diagnose", str(bad), "--d", "0.1", "--cell-diameter", "0.1"])
    assert rc == 2


# ---------------------------------------------------------------- session


class _Duplex:
    """Joint fake stdin/stdout driving the session protocol in-process."""

    def __init__(self, respond):
        self.out_lines: list[str] = []
        self._respond = respond
        self._buffer = ""

    # stdout side
    def write(self, s):
        self._buffer += s
        while "\n" in self._buffer:
            line, self._buffer = self._buffer.split("\n", 1)
            self.out_lines.append(line)

    def flush(self):
        pass

    # stdin side
    def readline(self):
        reply = self._respond(self.out_lines)
        return reply if reply is not None else ""


def _session_config(tmp_path, n_max=8):
    cfg = {
        "model": {"name": "michaelis_menten"},
        "wynn": {"n_max": n_max},
        "seed": 3,
        "output": {"dir": str(tmp_path), "prefix": "s"},
    }
    path = tmp_path / "sess.json"
    path.write_text(json.dumps(cfg))
    return path


def test_session_noiseless_pipe_recovers_truth(tmp_path, monkeypatch):
    theta_bar = np.array([1.0, 1.0])
    bundle = builtin_bundle("michaelis_menten")

    def respond(lines):
        last = lines[-1]
        assert last.startswith("SUGGEST") or last.startswith("ERR")
        for line in reversed(lines):
            if line.startswith("SUGGEST"):
                x = float(line.split()[2])
                y = float(bundle.model.mu(np.array([x]), theta_bar))
                return f"OBSERVE {y!r}\n"
        raise AssertionError("no SUGGEST before read")

    duplex = _Duplex(respond)
    monkeypatch.setattr(sys, "stdin", duplex)
    monkeypatch.setattr(sys, "stdout", duplex)
    rc = main(["session", "--config", str(_session_config(tmp_path, n_max=20))])
    assert rc == 0
    obj = json.loads((tmp_path / "s_trajectory.json").read_text())
    assert np.allclose(obj["final_fit"]["theta_hat"], theta_bar, atol=1e-6)
    estimates = [l for l in duplex.out_lines if l.startswith("ESTIMATE")]
    assert len(estimates) == 20 - obj["n_start"] + 1

    # cross-check against a zero-noise simulated run: identical responses
    # must drive identical point selection and an identical final record
    sim_cfg = {
        "model": {"name": "michaelis_menten"},
        "theta_bar": [1.0, 1.0],
        "noise": {"variant": "iid_gaussian", "sigma": 0.0},
        "wynn": {"n_max": 20},
        "seed": 3,
        "output": {"dir": str(tmp_path), "prefix": "simref"},
    }
    (tmp_path / "simref.json").write_text(json.dumps(sim_cfg))
    assert main(["simulate", "--config", str(tmp_path / "simref.json")]) == 0
    ref = json.loads((tmp_path / "simref_trajectory.json").read_text())
    assert ref["points"] == obj["points"]
    assert np.allclose(ref["final_fit"]["theta_hat"], obj["final_fit"]["theta_hat"], atol=1e-12)


def test_session_immediate_quit_saves_partial(tmp_path, monkeypatch):
    duplex = _Duplex(lambda lines: "QUIT\n")
    monkeypatch.setattr(sys, "stdin", duplex)
    monkeypatch.setattr(sys, "stdout", duplex)
    rc = main(["session", "--config", str(_session_config(tmp_path))])
    assert rc == 1
    obj = json.loads((tmp_path / "s_trajectory.json").read_text())
    assert obj["points"] == []
    assert obj["final_fit"] is None


def test_session_malformed_observe_reprompts(tmp_path, monkeypatch):
    state = {"bad_sent": False}

    def respond(lines):
        if not state["bad_sent"]:
            state["bad_sent"] = True
            return "OBSERVE abc\n"
        return "QUIT\n"

    duplex = _Duplex(respond)
    monkeypatch.setattr(sys, "stdin", duplex)
    monkeypatch.setattr(sys, "stdout", duplex)
    rc = main(["session", "--config", str(_session_config(tmp_path))])
    assert rc == 1
    suggests = [l for l in duplex.out_lines if l.startswith("SUGGEST")]
    errs = [l for l in duplex.out_lines if l.startswith("ERR")]
    assert len(errs) == 1
    assert len(suggests) == 2
    assert suggests[0] == suggests[1]  # state unchanged, same prompt repeated
    obj = json.loads((tmp_path / "s_trajectory.json").read_text())
    assert obj["points"] == []


def test_session_eof_before_start_exits_1(tmp_path, monkeypatch):
    duplex = _Duplex(lambda lines: None)  # immediate EOF
    monkeypatch.setattr(sys, "stdin", duplex)
    monkeypatch.setattr(sys, "stdout", duplex)
    rc = main(["session", "--config", str(_session_config(tmp_path))])
    assert rc == 1
