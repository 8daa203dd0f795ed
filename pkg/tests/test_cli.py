import json
import subprocess
import sys

import numpy as np
import pytest

from privplf.cli import main

from conftest import DATA


def run_args(out, *extra):
    return [
        "run",
        "--case", str(DATA / "case6_2region.json"),
        "--graph", str(DATA / "ring2.json"),
        "--gmm", str(DATA / "case6_injection.json"),
        "--out", str(out),
        *extra,
    ]


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(run_args(out)) == 0
    return out


def test_run_writes_artifacts(run_dir):
    names = sorted(p.name for p in run_dir.iterdir())
    assert names == [
        "diagnostics.json", "injection.json", "manifest.json",
        "region_01.json", "region_02.json", "run.json",
    ]
    diag = json.loads((run_dir / "diagnostics.json").read_text())
    assert diag["h"] == 2 and diag["m_hat"] == 2 * diag["m"] + diag["h"] + 1
    assert list(diag["messages"]) == ["MaskedPayload:aac"]
    assert max(diag["apc_rel_error"]) < 1e-5
    assert "runtime_s" not in diag
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert {f["name"] for f in manifest["files"]} == set(names) - {"manifest.json"}


def test_run_is_byte_identical(run_dir, tmp_path):
    assert main(run_args(tmp_path)) == 0
    for name in ("region_01.json", "region_02.json", "diagnostics.json", "run.json", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()


def test_compare_against_oracle(run_dir, tmp_path, capsys):
    assert main(["compare", "--run", str(run_dir), "--mc", "2000", "--jsd-samples", "2000", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [ln.split(":")[0] for ln in lines] == ["region 1", "region 2"]
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["mc_scenarios"] == 2000
    for r in report["regions"]:
        for stats in r["jsd"].values():
            assert stats["max"] < 1e-3
    for name in ("jsd.csv", "apc_error.csv", "mean_error.csv"):
        assert (tmp_path / name).is_file()


def test_compare_run_against_itself(run_dir, tmp_path):
    assert main(["compare", "--run", str(run_dir), "--against", str(run_dir), "--jsd-samples", "1000", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert all(s["max"] == 0.0 for r in report["regions"] for s in r["jsd"].values())


def test_config_file_and_flag_precedence(tmp_path):
    cfg = {
        "case": str(DATA / "case6_2region.json"),
        "graph": str(DATA / "ring2.json"),
        "gmm": str(DATA / "case6_injection.json"),
        "rho": 0.0,
        "seed": 4,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "o"
    assert main(["--seed", "9", "run", "--config", str(path), "--out", str(out)]) == 0
    resolved = json.loads((out / "run.json").read_text())
    assert resolved["rho"] == 0.0 and resolved["seed"] == 9
    path.write_text(json.dumps({**cfg, "bogus": 1}))
    assert main(["run", "--config", str(path), "--out", str(out)]) == 2


def test_samples_input(tmp_path):
    rng = np.random.default_rng(0)
    csv = tmp_path / "s.csv"
    rows = rng.uniform(0.1, 0.5, size=(200, 2))
    csv.write_text("w1,w2\n" + "\n".join(f"{a},{b}" for a, b in rows) + "\n")
    out = tmp_path / "o"
    argv = ["run", "--case", str(DATA / "case6_2region.json"), "--graph", str(DATA / "ring2.json"),
            "--samples", str(csv), "--k", "2", "--out", str(out)]
    assert main(argv) == 0
    inj = json.loads((out / "injection.json").read_text())
    assert len(inj["weights"]) == 2 and len(inj["means"][0]) == 4


def test_mc_command(tmp_path):
    argv = ["mc", "--case", str(DATA / "case6_2region.json"), "--gmm", str(DATA / "case6_injection.json"),
            "--n", "1000", "--out", str(tmp_path)]
    assert main(argv) == 0
    payload = json.loads((tmp_path / "mc.json").read_text())
    assert payload["n"] == 1000 and len(payload["states"]) == len(payload["mean"])
    assert main(argv[:-4] + ["--out", str(tmp_path)]) == 2


def test_validate(capsys, tmp_path):
    assert main(["validate", "--case", str(DATA / "case118_9region.json"), "--graph", str(DATA / "isos9.json")]) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith("ok") and "9 regions" in out
    assert main(["validate", "--graph", str(DATA / "ring2.json")]) == 0
    assert "warning" in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text('{"base_mva": 100,\n  "buses": [}')
    assert main(["validate", "--case", str(bad)]) == 2
    err = error_of(capsys)
    assert err["exit_code"] == 2 and err["line"] == 2
    split = tmp_path / "split.json"
    split.write_text('{"h": 4, "edges": [[1, 2], [3, 4]]}')
    assert main(["validate", "--graph", str(split)]) == 2


def test_input_errors(tmp_path, capsys):
    assert main(run_args(tmp_path, "--sigma", "1.5")) == 2
    assert main(["run", "--case", "nope.json", "--out", str(tmp_path)]) == 2
    err = error_of(capsys)
    assert err["error"] == "InputError" and "nope.json" in err["message"]
    assert main(["run", "--case", str(DATA / "case6_2region.json"), "--graph", str(DATA / "isos9.json"),
                 "--gmm", str(DATA / "case6_injection.json"), "--out", str(tmp_path)]) == 2


def test_non_convergence_exit_code(tmp_path, capsys):
    assert main(run_args(tmp_path, "--max-iters", "1")) == 3
    err = error_of(capsys)
    assert err["step"] == 2 and err["cause"] == "ConvergenceError"


def test_numeric_failure_exit_code(tmp_path, capsys):
    case = json.loads((DATA / "case6_2region.json").read_text())
    # two parallel lines with opposite reactance cancel and leave bus 2 floating
    case["branches"] = [b for b in case["branches"] if 2 not in (b["from"], b["to"])]
    case["branches"] += [{"from": 1, "to": 2, "x": 0.1}, {"from": 1, "to": 2, "x": -0.1}]
    path = tmp_path / "singular.json"
    path.write_text(json.dumps(case))
    argv = run_args(tmp_path / "o")
    argv[argv.index("--case") + 1] = str(path)
    assert main(argv) == 1
    assert error_of(capsys)["exit_code"] == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "privplf", "validate", "--graph", str(DATA / "isos9.json")],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0 and proc.stdout.strip() == "ok"
