"""End-to-end tests of the command-line interface.

Every subcommand is driven in-process through ``main(argv)`` with small
grids and replication counts.  Thread invariance of artifacts runs the
installed console entry point in real subprocesses so the MFLQ_THREADS
environment variable is read fresh by each process.
"""

import csv
import json
import os
import subprocess
import sys

import pytest

from mflq.cli import main

# ---------------------------------------------------------------------------
# problem fixtures written as JSON files
# ---------------------------------------------------------------------------

SCALAR_PROBLEM = {
    "dims": {"n": 1, "m": 1, "T": 1.0, "n_t": 200},
    "x0": [1.0],
    "coeffs": {"A": [[0.3]], "B": [[1.0]], "C": [[0.2]]},
    "weights": {
        "Q": [[1.0]],
        "R": [[1.0]],
        "G": [[1.0]],
        "Gamma1": [[0.5]],
        "Gamma2": [[0.5]],
    },
}

# Zero dynamics with a negative control weight: every Riccati equation
# stays at zero, so the gain operator equals R and is not positive.
IRREGULAR_PROBLEM = {
    "dims": {"n": 1, "m": 1, "T": 1.0, "n_t": 100},
    "x0": [1.0],
    "weights": {
        "Q": [[0.0]],
        "R": [[-1.0]],
        "G": [[0.0]],
        "Gamma1": [[0.0]],
        "Gamma2": [[0.0]],
    },
}

# Uncontrolled unstable drift: P(t) = exp(80 (1 - t)) exceeds any
# reasonable magnitude guard long before t reaches 0.
BLOWUP_PROBLEM = {
    "dims": {"n": 1, "m": 1, "T": 1.0, "n_t": 400},
    "x0": [0.0],
    "coeffs": {"A": [[40.0]]},
    "weights": {
        "Q": [[0.0]],
        "R": [[1.0]],
        "G": [[1.0]],
        "Gamma1": [[0.0]],
        "Gamma2": [[0.0]],
    },
}


def _write_problem(tmp_path, payload, name="problem.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def _read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _header(path):
    with open(path, encoding="utf-8") as fh:
        return fh.readline().strip()


# ---------------------------------------------------------------------------
# exit codes for bad input
# ---------------------------------------------------------------------------

class TestExitCodes:
    def test_no_command_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_malformed_json_exits_2(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{not valid json", encoding="utf-8")
        code = main(["riccati", "--problem", str(path), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "invalid JSON" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path, capsys):
        code = main(["riccati", "--problem", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "out")])
        assert code == 2
        assert "cannot read problem" in capsys.readouterr().err

    def test_unknown_builtin_name_exits_2(self, tmp_path):
        assert main(["riccati", "--problem", "builtin:other",
                     "--out", str(tmp_path / "out")]) == 2

    def test_unknown_top_level_key_exits_2(self, tmp_path, capsys):
        bad = dict(SCALAR_PROBLEM)
        bad["extra"] = {}
        code = main(["riccati", "--problem", _write_problem(tmp_path, bad),
                     "--out", str(tmp_path / "out")])
        assert code == 2
        assert "invalid problem" in capsys.readouterr().err

    def test_missing_weight_exits_2(self, tmp_path):
        bad = json.loads(json.dumps(SCALAR_PROBLEM))
        del bad["weights"]["Gamma1"]
        assert main(["riccati", "--problem", _write_problem(tmp_path, bad),
                     "--out", str(tmp_path / "out")]) == 2

    def test_unknown_coefficient_key_exits_2(self, tmp_path):
        bad = json.loads(json.dumps(SCALAR_PROBLEM))
        bad["coeffs"]["Z"] = [[1.0]]
        assert main(["riccati", "--problem", _write_problem(tmp_path, bad),
                     "--out", str(tmp_path / "out")]) == 2

    def test_irregular_gain_operator_exits_3(self, tmp_path, capsys):
        code = main(["riccati", "--problem", _write_problem(tmp_path, IRREGULAR_PROBLEM),
                     "--out", str(tmp_path / "out")])
        assert code == 3
        assert "error:" in capsys.readouterr().err

    def test_riccati_blowup_exits_4(self, tmp_path, capsys):
        code = main(["riccati", "--problem", _write_problem(tmp_path, BLOWUP_PROBLEM),
                     "--out", str(tmp_path / "out")])
        assert code == 4
        assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# riccati
# ---------------------------------------------------------------------------

RICCATI_ARTIFACTS = (
    "re1_trace.csv", "re2_trace.csv", "re3_trace.csv",
    "gains_mc_mt.csv", "gains_mg.csv", "regularity.json",
)


class TestRiccatiCommand:
    def test_builtin_artifacts(self, tmp_path):
        out = tmp_path / "out"
        assert main(["riccati", "--nt", "200", "--out", str(out)]) == 0
        for name in RICCATI_ARTIFACTS:
            assert (out / name).exists(), name

        header = _header(out / "re1_trace.csv")
        assert header == "t,P_11,P_12,P_21,P_22,min_eig_R"
        with open(out / "re1_trace.csv", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        assert len(lines) == 1 + 201  # header plus one row per grid node
        times = [float(line.split(",")[0]) for line in lines[1:]]
        assert times[0] == 0.0 and times[-1] == 1.0
        assert all(a < b for a, b in zip(times, times[1:]))

        gains_header = _header(out / "gains_mc_mt.csv")
        assert gains_header.startswith("t,theta_mean_11,")
        assert "theta_dev_22" in gains_header

        with open(out / "regularity.json", encoding="utf-8") as fh:
            reg = json.load(fh)
        assert set(reg) == {"eps_reg", "equations"}
        assert set(reg["equations"]) == {"RE1", "RE2", "RE3"}
        for entry in reg["equations"].values():
            assert entry["regular"] is True
            assert entry["global_min_eig"] > 0.0

    def test_problem_file(self, tmp_path):
        out = tmp_path / "out"
        code = main(["riccati", "--problem", _write_problem(tmp_path, SCALAR_PROBLEM),
                     "--out", str(out)])
        assert code == 0
        assert _header(out / "re1_trace.csv") == "t,P_11,min_eig_R"

    def test_artifacts_are_deterministic(self, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert main(["riccati", "--nt", "150", "--out", str(out)]) == 0
        for name in RICCATI_ARTIFACTS:
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

class TestSimulateCommand:
    def _run(self, out, law, *extra):
        return main(["simulate", "--law", law, "--N", "3", "--M", "6",
                     "--sde-steps", "50", "--nt", "150", "--out", str(out), *extra])

    def test_team_costs(self, tmp_path):
        out = tmp_path / "out"
        assert self._run(out, "mc-mt") == 0
        rows = _read_csv(out / "costs.csv")
        assert [r["problem_tag"] for r in rows] == ["MT_social", "MT_per_agent"]
        for row in rows:
            assert row["N"] == "3" and row["M"] == "6"
            float(row["mean"]), float(row["stderr"])

    def test_game_costs(self, tmp_path):
        out = tmp_path / "out"
        assert self._run(out, "mg") == 0
        rows = _read_csv(out / "costs.csv")
        assert [r["problem_tag"] for r in rows] == ["MG_individual"]

    def test_trajectory_artifact(self, tmp_path):
        out = tmp_path / "out"
        assert self._run(out, "mc-mt", "--trajectory") == 0
        path = out / "trajectory.csv"
        assert _header(path) == "t,agent,x_1,x_2,u_1,u_2"
        with open(path, encoding="utf-8") as fh:
            n_lines = sum(1 for _ in fh)
        assert n_lines == 1 + 3 * 51  # header + N agents at 51 time nodes

    def test_seed_changes_costs(self, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out, seed in zip(outs, ("0", "1")):
            assert self._run(out, "mc-mt", "--seed", seed) == 0
        assert (outs[0] / "costs.csv").read_bytes() != (outs[1] / "costs.csv").read_bytes()


# ---------------------------------------------------------------------------
# compare / convergence
# ---------------------------------------------------------------------------

class TestCompareCommand:
    def test_artifacts(self, tmp_path):
        out = tmp_path / "out"
        code = main(["compare", "--N", "2", "--N", "4", "--M", "8",
                     "--sde-steps", "50", "--nt", "150", "--out", str(out)])
        assert code == 0

        rows = _read_csv(out / "costs_vs_N.csv")
        assert rows[0]["problem_tag"] == "MC_limit"
        assert rows[0]["N"] == "0" and rows[0]["stderr"] == "0"
        tags = [r["problem_tag"] for r in rows[1:]]
        assert tags == ["MT_per_agent", "MG_individual"] * 2

        with open(out / "report.json", encoding="utf-8") as fh:
            data = json.load(fh)
        ordering = data["ordering"]
        assert {"value", "c", "slope", "chain_holds", "mg_all_strict",
                "all_close", "per_N"} <= set(ordering)
        assert [e["N"] for e in ordering["per_N"]] == [2, 4]


class TestConvergenceCommand:
    def test_artifacts(self, tmp_path):
        out = tmp_path / "out"
        code = main(["convergence", "--N", "2", "--N", "4", "--N", "8", "--M", "8",
                     "--sde-steps", "50", "--nt", "150", "--out", str(out)])
        assert code == 0

        assert _header(out / "convergence.csv") == "N,M,mean,stderr,gap"
        rows = _read_csv(out / "convergence.csv")
        assert [r["N"] for r in rows] == ["2", "4", "8"]
        assert all(float(r["gap"]) >= 0.0 for r in rows)

        with open(out / "report.json", encoding="utf-8") as fh:
            data = json.load(fh)
        assert set(data) == {"reference", "N_list", "M", "gaps", "slope",
                             "intercept", "residual", "decreasing", "noise_floor"}
        assert data["N_list"] == [2, 4, 8]
        assert data["M"] == 8

    def test_repeat_runs_are_byte_identical(self, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert main(["convergence", "--N", "2", "--N", "4", "--M", "8",
                         "--sde-steps", "50", "--nt", "150", "--seed", "7",
                         "--out", str(out)]) == 0
        for name in ("convergence.csv", "report.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


# ---------------------------------------------------------------------------
# verify / paper-example
# ---------------------------------------------------------------------------

class TestVerifyCommand:
    def test_builtin_passes(self, capsys):
        code = main(["verify", "--M", "300", "--sde-steps", "100", "--nt", "300"])
        out = capsys.readouterr().out
        assert code == 0
        assert out.count("[PASS]") == 4
        assert "[FAIL]" not in out
        assert "all verification checks passed" in out


class TestPaperExampleCommand:
    def test_small_battery(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["paper-example", "--N", "2", "--N", "4", "--M", "8",
                     "--M-value", "300", "--nt", "150", "--sde-steps", "50",
                     "--out", str(out)])
        assert code == 0
        for name in ("r_eigs.csv", "costs_vs_N.csv", "costs_vs_N_special.csv",
                     "report.json"):
            assert (out / name).exists(), name
        with open(out / "report.json", encoding="utf-8") as fh:
            report = json.load(fh)
        assert {"weights", "value", "ordering", "equivalence_special"} <= set(report)
        assert all(v["ok"] for v in report["weights"].values())
        assert report["equivalence_special"]["ok"] is True
        assert "weight eigenvalues: ok" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# thread invariance of artifacts
# ---------------------------------------------------------------------------

class TestThreadInvariance:
    def test_costs_identical_across_thread_counts(self, tmp_path):
        outs = []
        for threads in ("1", "3"):
            out = tmp_path / f"threads_{threads}"
            env = dict(os.environ, MFLQ_THREADS=threads)
            proc = subprocess.run(
                [sys.executable, "-m", "mflq", "simulate", "--law", "mc-mt",
                 "--N", "3", "--M", "6", "--sde-steps", "50", "--nt", "150",
                 "--trajectory", "--out", str(out)],
                env=env, cwd=tmp_path, capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            outs.append(out)
        for name in ("costs.csv", "trajectory.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
