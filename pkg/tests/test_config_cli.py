import shutil
from pathlib import Path

import numpy as np
import pytest

from koopman_lora.autonn import init_params, load_checkpoint
from koopman_lora.cli import main
from koopman_lora.config import RunConfig, expand_sweep, load_config, parse_config
from koopman_lora.errors import InvalidInputError
from koopman_lora.metrics import REPORT_COLUMNS, MetricReport
from koopman_lora.systems import derive_rng

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
CHAIN2 = CONFIGS / "chain2_lora.cfg"


def write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# -- parsing ----------------------------------------------------------------------------

def test_parse_values_and_comments():
    values, sweeps = parse_config("run.seed = 3  # trailing\n\n# full line\noptim.lr = 1e-3\n")
    assert values == {"run.seed": "3", "optim.lr": "1e-3"} and sweeps == {}


@pytest.mark.parametrize("text", [
    "run.sede = 1",                       # typo in key
    "bogus.seed = 1",                     # unknown section
    "run.seed = 1\nrun.seed = 2",         # duplicate
    "run.seed 1",                         # no '='
    "sweep.optim.lr = 1e-3 | ",           # empty sweep value
])
def test_parse_errors(text):
    with pytest.raises(InvalidInputError):
        parse_config(text)


def test_typed_access():
    cfg = RunConfig({"a.b": "2", "a.c": "x", "a.l": "1, 2,3", "a.m": "1,0;0,1", "a.t": "yes"})
    assert cfg.get_int("a.b") == 2 and cfg.get_float("a.b") == 2.0
    assert cfg.get_list("a.l", cast=int) == (1, 2, 3)
    assert np.array_equal(cfg.matrix("a.m"), np.eye(2))
    assert cfg.get_bool("a.t") is True
    assert cfg.get_int("a.z", 5) == 5
    with pytest.raises(InvalidInputError):
        cfg.get_int("a.c")
    with pytest.raises(InvalidInputError):
        cfg.get_str("a.z")


def test_hash_ignores_order_and_comments():
    a = RunConfig(parse_config("run.seed = 1\noptim.lr = 0.1\n")[0])
    b = RunConfig(parse_config("# c\noptim.lr = 0.1\nrun.seed = 1 # x\n")[0])
    c = RunConfig(parse_config("run.seed = 2\noptim.lr = 0.1\n")[0])
    assert a.hash() == b.hash() != c.hash()
    assert len(a.hash()) == 12


def test_sweep_expansion(tmp_path):
    cfg, sweeps = load_config(write(tmp_path, "run.seed = 0\nsweep.optim.lr = 1 | 2\nsweep.loss.kind = lora | vamp\n"))
    runs = expand_sweep(cfg, sweeps)
    assert len(runs) == 4
    assert {(r.get_str("loss.kind"), r.get_str("optim.lr")) for r in runs} == {
        ("lora", "1"), ("lora", "2"), ("vamp", "1"), ("vamp", "2")}
    assert len({r.hash() for r in runs}) == 4


def test_seed_is_mandatory(tmp_path):
    with pytest.raises(InvalidInputError):
        load_config(write(tmp_path, "optim.lr = 1\n"))


# -- exit codes -------------------------------------------------------------------------

def test_usage_errors_exit_2(tmp_path):
    assert main(["frobnicate", "--config", str(CHAIN2)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["train", "--config", str(CHAIN2), "--jobs", "0"]) == 2
    assert main(["eval", "--config", str(CHAIN2), "--out", str(tmp_path / "empty")]) == 2
    assert main(["oracle", "--config", str(CONFIGS / "cyclic_lora.cfg"), "--out", str(tmp_path)]) == 2
    bad = write(tmp_path, "run.seed = 0\nsystem.name = finite_chain\nsystem.transition = 1,0;0,1\nloss.kind = nope\n")
    assert main(["train", "--config", bad, "--out", str(tmp_path / "o")]) == 2


def test_degenerate_objective_exits_3(tmp_path):
    cfg = write(tmp_path, """run.seed = 0
system.name = finite_chain
system.transition = 0.5, 0.5; 0.5, 0.5
data.enumerate = true
encoder.modes = 2
encoder.constant = false
loss.kind = vamp
loss.r = 1
optim.epochs = 5
""")
    out = tmp_path / "deg"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 3
    assert (out / "train_log.csv").exists()
    assert not (out / "checkpoint.bin").exists()


# -- end-to-end on the two-state chain ------------------------------------------------------

@pytest.fixture(scope="module")
def chain2_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("chain2")
    for command in ("oracle", "train", "eval"):
        assert main([command, "--config", str(CHAIN2), "--out", str(out)]) == 0
    return out


def test_oracle_rows(chain2_run):
    eig = (chain2_run / "eig_true.csv").read_text().splitlines()
    assert eig == ["index,re,im", "1,1.0,0.0", "2,0.5,0.0"]
    sigma = [float(line.split(",")[1]) for line in (chain2_run / "sigma_true.csv").read_text().splitlines()[1:]]
    assert np.allclose(sigma, [1.0, 0.5], atol=1e-12)


def test_oracle_is_byte_identical(chain2_run, tmp_path):
    assert main(["oracle", "--config", str(CHAIN2), "--out", str(tmp_path)]) == 0
    for name in ("eig_true.csv", "sigma_true.csv"):
        assert (tmp_path / name).read_bytes() == (chain2_run / name).read_bytes()


def test_chain2_eval(chain2_run):
    report = MetricReport.read(chain2_run / "metrics.csv")
    header = (chain2_run / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(REPORT_COLUMNS)
    cfg, _ = load_config(CHAIN2)
    assert {r[0] for r in report.to_rows()} == {cfg.hash()}
    assert report.get("hausdorff", 2) < 1e-12
    assert report.get("vamp2") == pytest.approx(1.25, abs=1e-8)
    assert report.get("sigma_hat", 2) == pytest.approx(0.5, abs=1e-8)
    for t in (-10, -1, 1, 10):
        assert report.get("rmse_cca_constant", t) < 1e-12
        assert report.get("rmse_edmd_constant", t) < 1e-12


def test_train_and_eval_are_deterministic(chain2_run, tmp_path):
    shutil.copy(chain2_run / "eig_true.csv", tmp_path)
    shutil.copy(chain2_run / "sigma_true.csv", tmp_path)
    for command in ("train", "eval"):
        assert main([command, "--config", str(CHAIN2), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "checkpoint.bin").read_bytes() == (chain2_run / "checkpoint.bin").read_bytes()
    assert (tmp_path / "metrics.csv").read_bytes() == (chain2_run / "metrics.csv").read_bytes()


def test_zero_epochs_checkpoint_is_the_initialisation(tmp_path):
    cfg = write(tmp_path, CHAIN2.read_text().replace("optim.epochs = 200", "optim.epochs = 0"))
    assert main(["train", "--config", cfg, "--out", str(tmp_path), "--seed", "4"]) == 0
    specs, params, _ = load_checkpoint(str(tmp_path / "checkpoint.bin"))
    fresh = init_params(specs, derive_rng(4, 1))
    assert np.array_equal(params.values, fresh.values)


def test_seed_override_changes_initialisation(tmp_path):
    cfg = write(tmp_path, CHAIN2.read_text().replace("optim.epochs = 200", "optim.epochs = 0"))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", cfg, "--out", str(a), "--seed", "1"]) == 0
    assert main(["train", "--config", cfg, "--out", str(b), "--seed", "2"]) == 0
    assert (a / "checkpoint.bin").read_bytes() != (b / "checkpoint.bin").read_bytes()


def test_sweep_runs_in_parallel(tmp_path):
    text = CHAIN2.read_text().replace("optim.epochs = 200", "optim.epochs = 3").replace("run.seed = 0\n", "")
    cfg = write(tmp_path, text + "sweep.run.seed = 0 | 1\nsweep.loss.kind = lora | dp\n")
    out = tmp_path / "sweep"
    assert main(["train", "--config", cfg, "--out", str(out), "--jobs", "2"]) == 0
    runs = sorted(p.name for p in out.iterdir())
    assert len(runs) == 4 and all(name.startswith("run00") for name in runs)
    assert all((out / name / "checkpoint.bin").exists() for name in runs)
