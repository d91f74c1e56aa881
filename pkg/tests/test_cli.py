import csv

import numpy as np
import pytest

from mfbnet import checks, cli, serialize
from mfbnet.errors import ContractError


def write_cfg(tmp_path, text, name="run.txt"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


SMALL_TRAIN = """max_iters = 12
train_samples = 64
test_samples = 32
batch_size = 16
hidden = 8
embed_dim = 6
att_hidden = 8
o = 8
att_o = 8
k = 2
log_interval = 4
"""


# ------------------------------------------------------------------ checks

def test_equivalence_suites_pass():
    assert checks.run_equivalence(instances=30) == []


def test_fault_is_reported_with_its_seed():
    failures = checks.run_equivalence(instances=5, seed=40, fault=1e-3)
    assert {f.seed for f in failures} == set(range(40, 45))
    assert {f.suite for f in failures} == {"factorization", "mlb_specialization"}
    s = failures[0].seed
    assert checks.check_factorization(s, fault=1e-3) == pytest.approx(failures[0].error)


def test_fault_size_shows_in_error():
    # the fault perturbs U[0,0] by delta, so the output moves by at most delta*|x0|*max|V|
    err = checks.check_factorization(3, fault=0.5)
    assert 0 < err <= 0.5 * 2 * 1


def test_admissible_exhaustion_is_contract_error():
    with pytest.raises(ContractError):
        checks.admissible(checks.CASES["power_normalize"], 0, margin=1e9, relu_margin=0, step=1e-3,
                          fd_agreement=1, max_tries=3)


def test_admissible_is_deterministic():
    a = checks.admissible(checks.CASES["l2_normalize"], 5, 0.05, 0.01, 1e-3, 1e-4)
    b = checks.admissible(checks.CASES["l2_normalize"], 5, 0.05, 0.01, 1e-3, 1e-4)
    assert a[2] == b[2]
    for k in a[1]:
        np.testing.assert_array_equal(a[1][k], b[1][k])


# ------------------------------------------------------------------ cli

def test_equivalence_command(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "instances = 10\n")
    assert cli.main(["equivalence", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert rows(tmp_path / "equivalence.csv") == []


def test_equivalence_command_fault(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "instances = 3\nseed = 17\nfault = 0.01\n")
    assert cli.main(["equivalence", "--config", cfg, "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    for s in (17, 18, 19):
        assert f"seed {s}" in err
    assert {int(r["seed"]) for r in rows(tmp_path / "equivalence.csv")} == {17, 18, 19}


def test_zero_instances_is_config_error(tmp_path):
    cfg = write_cfg(tmp_path, "instances = 0\n")
    assert cli.main(["equivalence", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_bad_config_files(tmp_path):
    assert cli.main(["bench", "--config", write_cfg(tmp_path, "nope = 1\n"), "--out", str(tmp_path)]) == 2
    assert cli.main(["bench", "--config", str(tmp_path / "missing.txt"), "--out", str(tmp_path)]) == 2
    assert cli.main(["bench", "--config", write_cfg(tmp_path, "bench_grid = \n"), "--out", str(tmp_path)]) == 2


def test_bench_counts(tmp_path):
    cfg = write_cfg(tmp_path, "bench_timing = false\n")
    assert cli.main(["bench", "--config", cfg, "--out", str(tmp_path)]) == 0
    out = rows(tmp_path / "bench.csv")
    assert any(r["operator"] == "mfb" and r["projection_param_count"] == "20480000" for r in out)


def test_gradcheck_subset_and_zero_tolerance(tmp_path, monkeypatch, capsys):
    real = checks.run_gradcheck_suite
    names = ["matmul", "power_normalize", "mfb"]
    monkeypatch.setattr(checks, "run_gradcheck_suite", lambda *a, **kw: real(*a, names=names, **kw))
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    got = rows(tmp_path / "gradcheck.csv")
    assert [r["op"] for r in got] == names and all(r["pass"] == "true" for r in got)

    cfg = write_cfg(tmp_path, "tol = 0\n")
    assert cli.main(["gradcheck", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "FAIL" in capsys.readouterr().err
    assert any(r["pass"] == "false" for r in rows(tmp_path / "gradcheck.csv"))


def test_train_writes_outputs(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_TRAIN)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    for name in ["metrics.csv", "accuracy.csv", "percentiles.csv", "summary.csv", "model.bin", "config.txt"]:
        assert (out / name).exists(), name
    metrics = rows(out / "metrics.csv")
    assert [int(r["iter"]) for r in metrics] == list(range(12))
    params = serialize.load(out / "model.bin")
    assert params and all(np.all(np.isfinite(v)) for v in params.values())
    assert rows(out / "summary.csv")[0]["label"] == "standard"


def test_train_divergence_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_TRAIN + "base_lr = 1e300\nfusion = concat\n")
    with np.errstate(all="ignore"):
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == 3


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        cli.main(["fly"])
