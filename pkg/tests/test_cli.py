import json

import numpy as np
import pytest

from dyadsel.cli import main
from dyadsel.data import load_panel
from dyadsel.inference import InferenceFit, run_inference_procedure


@pytest.fixture
def panel_csv(tmp_path):
    path = tmp_path / "panel.csv"
    assert main(["simulate", "--n", "40", "--seed", "3", "--out", str(path)]) == 0
    return path


def test_estimate_writes_three_files(panel_csv, tmp_path):
    out = tmp_path / "est"
    code = main(["estimate", str(panel_csv), "--out", str(out)])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["estimates.txt", "first_step.txt", "fit.json"]


def test_json_round_trip(panel_csv, tmp_path):
    out = tmp_path / "est"
    main(["estimate", str(panel_csv), "--out", str(out), "--format", "csv"])
    saved = InferenceFit.from_dict(json.loads((out / "fit.json").read_text()))
    mem = run_inference_procedure(load_panel(panel_csv))
    assert saved.to_json() == mem.to_json()
    assert (out / "estimates.csv").read_text().startswith("variable,beta_hat")


def test_duplicate_key_exit(tmp_path, capsys):
    p = tmp_path / "dup.csv"
    p.write_text("i,j,t,d,y,w_1,r_1,r_2\n1,2,1,1,1.0,1.0,0.5,0.1\n1,2,1,1,1.0,1.0,0.5,0.1\n")
    assert main(["estimate", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "duplicate key (i=1, j=2, t=1)" in capsys.readouterr().err


def test_bad_delta(panel_csv, tmp_path):
    assert main(["estimate", str(panel_csv), "--delta", "0.9", "--out", str(tmp_path / "o")]) == 2


def test_numerical_failure(tmp_path):
    p = tmp_path / "sep.csv"
    rows = ["i,j,t,d,y,w_1,r_1,r_2"]
    rng = np.random.default_rng(0)
    k = 0
    for a in range(6):
        for b in range(a + 1, 6):
            r1 = rng.normal()
            first = 1 if r1 > 0 else 0
            rows.append(f"{a},{b},1,{first},{'1.0' if first else ''},1.0,{r1},{k}")
            rows.append(f"{a},{b},2,{1 - first},{'' if first else '1.0'},0.0,0.0,{k}")
            k += 1
    p.write_text("\n".join(rows) + "\n")
    assert main(["estimate", str(p), "--out", str(tmp_path / "o")]) == 3


def test_verify_kernel(capsys):
    assert main(["verify-kernel"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["verify-kernel", "--kernel", "nope"]) == 2


def test_replicate_resume(tmp_path, capsys):
    args = ["replicate-tables", "--reps", "1", "--n", "30", "--theta", "-2", "--sigma", "1",
            "--out", str(tmp_path), "--no-ppml"]
    assert main(args) == 0
    first = (tmp_path / "table1.csv").read_text()
    assert len(first.strip().splitlines()) == 2
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["reps"] == 1 and manifest["config"]["base_seed"] == 0
    assert "numpy" in manifest["versions"]
    capsys.readouterr()
    assert main(args) == 0
    assert "skip" in capsys.readouterr().out
    assert (tmp_path / "table1.csv").read_text() == first


def test_threads_do_not_change_output(tmp_path):
    base = ["replicate-tables", "--reps", "2", "--n", "25", "--theta", "-2", "--sigma", "1", "--no-ppml"]
    assert main(base + ["--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    for name in ("table1.csv", "table2.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_text() == (tmp_path / "b" / name).read_text()


def test_guard_exit(tmp_path, capsys):
    # noiseless outcomes: every fit is exact, so the bandwidth guard trips
    from dyadsel.data import save_panel
    from dyadsel.montecarlo import DgpConfig, simulate_panel
    from dyadsel.data import DyadicPanel

    p = simulate_panel(DgpConfig(n=30, seed=1))
    y = np.where(p.d == 1, p.w[:, :, 0] + 0.5, np.nan)
    exact = DyadicPanel(p.labels, p.src, p.dst, p.d, y, p.w, p.r)
    save_panel(exact, tmp_path / "exact.csv")
    out = tmp_path / "o"
    assert main(["estimate", str(tmp_path / "exact.csv"), "--out", str(out)]) == 4
    assert "clamped" in capsys.readouterr().err
    assert (out / "fit.json").exists()
