import json
from pathlib import Path

import pytest
from sqlalchemy.orm import sessionmaker

import cli
import db
from init_db import init_db
from models import ExperimentRun, RunCheck

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def registry(tmp_path, monkeypatch):
    engine = db.make_engine(f"sqlite:///{tmp_path / 'runs.db'}")
    init_db(bind=engine)
    Session = sessionmaker(bind=engine)
    monkeypatch.setattr(db, "SessionLocal", Session)
    return Session


def _solve(config, out, *extra):
    return cli.main(["solve", "--config", str(config), "--out", str(out), "--no-record", *extra])


def test_solve_is_reproducible(tmp_path, monkeypatch):
    config = CONFIGS / "diffusion.toml"
    assert _solve(config, tmp_path / "a") == 0
    assert _solve(config, tmp_path / "b") == 0
    monkeypatch.setenv("OPENFOCK_THREADS", "3")
    assert _solve(config, tmp_path / "c") == 0
    first = (tmp_path / "a" / "solve.csv").read_bytes()
    assert first == (tmp_path / "b" / "solve.csv").read_bytes()
    assert first == (tmp_path / "c" / "solve.csv").read_bytes()


def test_manifest_reproduces_the_run(tmp_path):
    assert _solve(CONFIGS / "diffusion.toml", tmp_path / "a") == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["subcommand"] == "solve"
    assert manifest["version"] == cli.VERSION
    assert manifest["artifacts"] == ["solve.csv"]
    assert _solve(tmp_path / "a" / "manifest.json", tmp_path / "b") == 0
    assert (tmp_path / "a" / "solve.csv").read_bytes() == (tmp_path / "b" / "solve.csv").read_bytes()


def test_overrides_reach_the_manifest(tmp_path):
    assert _solve(CONFIGS / "diffusion.toml", tmp_path, "--seed", "11", "--t-final", "0.1") == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 11
    assert manifest["config"]["solver"]["t_final"] == 0.1


def test_stationary_artifact(tmp_path):
    out = tmp_path / "bd"
    assert _solve(CONFIGS / "birth_death.toml", out, "--t-final", "0.01") == 0
    lines = (out / "stationary.csv").read_text().splitlines()
    assert lines[0] == "key,p"
    assert len(lines) == 1 + 13


def test_sample_writes_events_and_density(tmp_path):
    args = ["sample", "--config", str(CONFIGS / "dimerization.toml"), "--out", str(tmp_path),
            "--trajectories", "5", "--t-final", "0.05", "--no-record"]
    assert cli.main(args) == 0
    assert (tmp_path / "sample.csv").read_text().startswith("time,p_0,p_1")
    assert (tmp_path / "events.csv").read_text().startswith("trajectory,time,kind,reactants,products")
    density = (tmp_path / "density.csv").read_text().splitlines()
    assert density[0] == "cell,A"
    assert len(density) == 1 + 8
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["artifacts"] == ["density.csv", "events.csv", "sample.csv"]
    assert manifest["config"]["sampler"]["t_final"] == 0.05


def test_reduce_header(tmp_path):
    args = ["reduce", "--config", str(CONFIGS / "association.toml"), "--out", str(tmp_path),
            "--trajectories", "20", "--no-record"]
    assert cli.main(args) == 0
    header = (tmp_path / "reduce.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["time", "cme_p_0_0_0"]
    assert "ssa_p_2_2_0" in header
    assert header[-3:] == ["mf_A", "mf_B", "mf_C"]


def test_config_error_exits_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid]\ncels = 4\n")
    assert cli.main(["solve", "--config", str(bad), "--out", str(tmp_path / "out"), "--no-record"]) == 2
    assert not (tmp_path / "out" / "manifest.json").exists()


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["solve", "--config", str(tmp_path / "nope.toml"), "--no-record"]) == 2


def test_bad_thread_count_exits_2(tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("OPENFOCK_THREADS", "many")
    args = ["solve", "--config", str(CONFIGS / "diffusion.toml"), "--out", str(tmp_path), "--no-record"]
    assert cli.main(args) == 2
    assert "OPENFOCK_THREADS" in caplog.text
    assert not (tmp_path / "manifest.json").exists()


def test_validate_is_recorded(tmp_path, registry):
    args = ["validate", "--config", str(CONFIGS / "diffusion.toml"), "--out", str(tmp_path)]
    assert cli.main(args) == 0
    report = json.loads((tmp_path / "validate.json").read_text())
    assert report["passed"] is True
    names = {c["name"] for c in report["checks"]}
    assert "invariants.negativity" in names
    with registry() as session:
        run = session.query(ExperimentRun).one()
        assert run.subcommand == "validate"
        assert run.status == 0
        assert session.query(RunCheck).count() == len(report["checks"])


def test_no_record_skips_the_registry(tmp_path, registry):
    assert _solve(CONFIGS / "diffusion.toml", tmp_path, "--t-final", "0.05") == 0
    with registry() as session:
        assert session.query(ExperimentRun).count() == 0


def test_init_db(tmp_path, monkeypatch):
    engine = db.make_engine(f"sqlite:///{tmp_path / 'fresh.db'}")
    monkeypatch.setattr("init_db.engine", engine)
    assert cli.main(["init-db"]) == 0
    assert (tmp_path / "fresh.db").exists()


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(p.stem for p in CONFIGS.glob("*.toml")))
def test_shipped_configs_validate(name, tmp_path):
    args = ["validate", "--config", str(CONFIGS / f"{name}.toml"), "--out", str(tmp_path), "--no-record"]
    assert cli.main(args) == 0


def test_reduce_is_identical_across_thread_counts(tmp_path, monkeypatch):
    def reduce(out):
        args = ["reduce", "--config", str(CONFIGS / "association.toml"), "--out", str(out),
                "--trajectories", "20", "--no-record"]
        assert cli.main(args) == 0
        return (out / "reduce.csv").read_bytes()

    first = reduce(tmp_path / "a")
    monkeypatch.setenv("OPENFOCK_THREADS", "4")
    assert reduce(tmp_path / "b") == first


def test_sample_manifest_reproduces_the_event_log(tmp_path):
    args = ["sample", "--config", str(CONFIGS / "dimerization.toml"), "--out", str(tmp_path / "a"),
            "--trajectories", "4", "--t-final", "0.05", "--no-record"]
    assert cli.main(args) == 0
    rerun = ["sample", "--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b"), "--no-record"]
    assert cli.main(rerun) == 0
    assert (tmp_path / "a" / "events.csv").read_bytes() == (tmp_path / "b" / "events.csv").read_bytes()
    other = args[:5] + ["--seed", "99"] + args[5:]
    other[4] = str(tmp_path / "c")
    assert cli.main(other) == 0
    assert (tmp_path / "a" / "events.csv").read_bytes() != (tmp_path / "c" / "events.csv").read_bytes()
