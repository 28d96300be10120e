import csv
import subprocess
import sys

import pytest

from fwdguide.cli import COMPARE_ROWS, main, parse_depths, UsageError

FAST = """[schedule]
T = 12
[model]
hidden = 8
freqs = 2
[train]
steps = 40
batch = 32
[data]
n = 200
[run]
n = 24
depths = 2,4
[guidance]
lam = 0.01
"""


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "fast.ini"
    cfg.write_text(FAST)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    return cfg, out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_outputs(workdir):
    cfg, out = workdir
    rows = read_csv(out / "train_loss.csv")
    assert rows[0] == ["step", "loss"]
    assert [int(r[0]) for r in rows[1:]][-1] == 40
    assert (out / "model.ckpt").read_text().startswith("fwdguide-ckpt-v1")
    resolved = (out / "config.resolved.ini").read_text()
    assert "beta_end = 0.02" in resolved and "T = 12" in resolved


def test_train_bytes_repeatable(workdir, tmp_path):
    cfg, out = workdir
    again = tmp_path / "again"
    assert main(["train", "--config", str(cfg), "--out-dir", str(again)]) == 0
    assert (again / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()
    other = tmp_path / "other"
    assert main(["train", "--config", str(cfg), "--out-dir", str(other), "--seed", "99"]) == 0
    assert (other / "model.ckpt").read_bytes() != (out / "model.ckpt").read_bytes()


def test_guide_titan_score(workdir, capsys):
    cfg, out = workdir
    assert main(["guide", "--config", str(cfg), "--out-dir", str(out), "--strategy", "titan", "--guess", "score"]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert "tape_scalars=0" in line
    assert read_csv(out / "samples_titan-score.csv")[0] == ["x", "y"]
    assert len(read_csv(out / "samples_titan-score.csv")) == 25
    traj = read_csv(out / "trajectory_titan-score.csv")
    assert traj[0] == ["t", "loss", "h", "update_norm"] and len(traj) == 13
    assert (out / "samples_titan-score.svg").read_text().count('class="sample"') == 24
    assert not list(out.glob("*.tmp"))


def test_guide_unguided_has_no_trajectory_rows(workdir):
    cfg, out = workdir
    assert main(["guide", "--config", str(cfg), "--out-dir", str(out), "--strategy", "unguided"]) == 0
    assert read_csv(out / "trajectory_unguided.csv") == [["t", "loss", "h", "update_norm"]]


def test_compare_rows_and_determinism(workdir):
    cfg, out = workdir
    assert main(["compare", "--config", str(cfg), "--out-dir", str(out)]) == 0
    first = (out / "compare.csv").read_bytes()
    rows = read_csv(out / "compare.csv")
    assert rows[0] == ["strategy", "guess", "satisfaction", "median_residual", "energy_distance",
                       "dispersion", "peak_scalars"]
    assert [(r[0], r[1]) for r in rows[1:]] == list(COMPARE_ROWS)
    peaks = {(r[0], r[1]): int(r[6]) for r in rows[1:]}
    assert all(peaks[("direct", "")] > peaks[("titan", g)] for g in ("random", "score", "sampled"))
    assert main(["compare", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert (out / "compare.csv").read_bytes() == first


def test_membench(workdir):
    cfg, out = workdir
    assert main(["membench", "--config", str(cfg), "--out-dir", str(out), "--depths", "2,4,8"]) == 0
    rows = read_csv(out / "membench.csv")
    assert rows[0] == ["strategy", "depth", "peak_scalars", "tape_scalars"]
    assert len(rows) == 13
    assert all(r[3] == "0" for r in rows[1:] if r[0] == "titan")


def test_exit_codes(workdir, tmp_path):
    cfg, out = workdir
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["guide", "--config", str(cfg), "--out-dir", str(tmp_path / "empty")]) == 2
    assert main(["membench", "--config", str(cfg), "--out-dir", str(out), "--depths", "5,x"]) == 2
    assert main(["membench", "--config", str(cfg), "--out-dir", str(out), "--depths", "50"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[guidance]\nstrategy = nope\n")
    assert main(["compare", "--config", str(bad)]) == 2
    with pytest.raises(SystemExit) as info:
        main(["guide", "--strategy", "nope"])
    assert info.value.code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    cfg = tmp_path / "boom.ini"
    cfg.write_text(FAST.replace("[train]\n", "[train]\nlr = 1e300\n"))
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 3


def test_parse_depths():
    assert parse_depths("5,10,20") == (5, 10, 20)
    for bad in ("", "5,,6", "a", "0,3"):
        with pytest.raises(UsageError):
            parse_depths(bad)


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "fwdguide", "membench", "--out-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "checkpoint" in res.stderr
