import math
import re

import numpy as np
import pytest

from rlab import constants
from rlab.cli import ExperimentConfig, convert, execute, load_config, main, parse_config, run_dir
from rlab.errors import ConfigParse, EmptyTable, Unwritable
from rlab.report import ResultTable, SchemaError, bilinear_fit_from_table, emit_plot, loglog_slope
from rlab.restriction import fit_loglog

SMALL = {
    "cgo": "d = 3\nN = 16\nL = 1.0\ntau = 8, 16\nsamples = 2\n",
    "expectation": "d = 3\nN = 16\nL = 2.0\nM = 8, 16\nsamples = 20\n",
    "bilinear": "n = 2\nmu = 2^-4, 2^-5, 2^-6, 2^-7\nnu = 2^-2, 2^-3, 2^-4, 2^-5, 2^-6, 2^-7\ncandidates = 1\n",
    "wavepacket": "n = 2\nR = 256\nsamples = 1\nprobes = 20\n",
    "kakeya": "n = 2\nR = 64\nconfigs = 2\ncount1 = 8\ncount2 = 8\n",
    "induction": "n = 2\nnu = 0.25\nR = 4, 8, 16\ncandidates = 1\n",
}


def config_text(exp, body=None, seed=1, extra=""):
    return f"[run]\nexperiment = {exp}\nseed = {seed}\n{extra}\n[{exp}]\n{SMALL[exp] if body is None else body}"


def write_config(tmp_path, exp, **kw):
    p = tmp_path / f"{exp}.cfg"
    p.write_text(config_text(exp, **kw))
    return p


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "out"
    monkeypatch.setenv("RLAB_OUT", str(root))
    return root


# --- config parsing ----------------------------------------------------------------------


def test_parse_defaults_and_lists():
    cfg = parse_config("[run]\nexperiment = bilinear\n[bilinear]\nmu = 2^-5, 2^-6\n")
    assert cfg.params["mu"] == [2**-5, 2**-6]
    assert cfg.params["p_prime"] == 2.0
    assert cfg.seed == 0
    assert convert("floats", "1, 2^3, 0.5", "x") == [1.0, 8.0, 0.5]
    assert convert("int", "2^4", "x") == 16


def test_canonical_form_and_digest():
    a = parse_config("[run]\nexperiment = cgo\n[cgo]\nN = 32\n# comment\n")
    b = parse_config("# leading\n[cgo]\nN=32\n[run]\nexperiment=cgo\n")
    assert a.canonical() == b.canonical()
    assert a.digest() == b.digest()
    assert re.fullmatch(r"[0-9a-f]{16}", a.digest())
    c = parse_config("[run]\nexperiment = cgo\n[cgo]\nN = 16\n")
    assert c.digest() != a.digest()
    # the canonical text parses back to the same config
    assert parse_config(a.canonical()).digest() == a.digest()


@pytest.mark.parametrize("text,key,line", [
    ("[run]\nexperiment = cgo\n[cgo]\nN = abc\n", "N", 4),
    ("[run]\nexperiment = cgo\n[cgo]\nN = 16\nN = 32\n", "N", 5),
    ("[run]\nexperiment = cgo\n[cgo]\nbogus = 1\n", "bogus", 4),
    ("[run]\nexperiment = nope\n", "experiment", 2),
    ("[run]\nexperiment = cgo\ncolour = red\n", "colour", 3),
    ("N = 3\n[run]\nexperiment = cgo\n", "N", 1),
    ("[run]\nexperiment = cgo\n[cgo]\ntau = 8,,16\n", "tau", 4),
    ("[run]\nexperiment = cgo\n[cgo]\nN = -16\n", "N", 4),
    ("[run]\nexperiment = bilinear\n[bilinear]\np_prime = 3\n", "p_prime", 4),
    ("[run]\nexperiment = expectation\n[expectation]\nsamples = 5\n", "samples", 4),
])
def test_parse_errors_name_key_and_line(text, key, line):
    with pytest.raises(ConfigParse) as err:
        parse_config(text)
    assert err.value.key == key and err.value.line == line
    assert f"key '{key}'" in str(err.value) and f"line {line}" in str(err.value)


def test_parse_errors_without_key():
    with pytest.raises(ConfigParse) as err:
        parse_config("[run\nexperiment = cgo\n")
    assert err.value.line == 1
    with pytest.raises(ConfigParse):
        parse_config("[run]\nexperiment = cgo\n[run]\n")
    with pytest.raises(ConfigParse):
        parse_config("[run]\nexperiment = cgo\n[extra]\nx = 1\n")
    with pytest.raises(ConfigParse):
        parse_config("[run]\nexperiment = cgo\n", experiment="kakeya")
    with pytest.raises(ConfigParse):
        load_config("/nonexistent/file.cfg")


# --- reports ----------------------------------------------------------------------------


def test_table_validation_and_round_trip():
    t = ResultTable(("R", "estimate"), [(8.0, 0.1), (16.0, 1 / 3)], "induction").validate()
    back = ResultTable.from_csv(t.to_csv(), "induction")
    assert back.rows == t.rows
    with pytest.raises(SchemaError):
        ResultTable(("R",), [(1.0,)], "induction").validate()
    with pytest.raises(SchemaError):
        ResultTable(("R", "estimate"), [(1.0, "x")], "induction").validate()
    with pytest.raises(SchemaError):
        ResultTable(("R", "estimate"), [(1.0, math.nan)], "induction").validate()
    with pytest.raises(SchemaError):
        ResultTable(("R", "estimate"), [(1.0,)], None).validate()
    with pytest.raises(SchemaError):
        ResultTable(("sample", "distance", "amplitude"), [(0.5, 1.0, 1.0)], "decay").validate()


def test_empty_table_is_refused(tmp_path):
    with pytest.raises(EmptyTable):
        emit_plot(ResultTable(("R", "estimate"), [], "induction"), "loglog", tmp_path / "x.svg", "R", "estimate")


def test_two_point_slope(tmp_path):
    t = ResultTable(("R", "estimate"), [(2.0, 3.0), (8.0, 48.0)], "induction")
    info = emit_plot(t, "loglog", tmp_path / "s.svg", "R", "estimate")
    assert info.numbers["slope"] == pytest.approx(2.0)
    assert loglog_slope([1, 10], [5, 0.5]) == pytest.approx((-1.0, math.log(5)))
    assert "slope = 2.000000" in (tmp_path / "s.svg").read_text()


def test_trend_plot_numbers(tmp_path):
    t = ResultTable(("tau", "sample", "iterations", "residual", "psi_norm", "contraction"),
                    [(8.0, 0, 3, 1e-12, 1.0, 0.1), (8.0, 1, 3, 1e-12, 3.0, 0.1), (16.0, 0, 3, 1e-12, 0.5, 0.1)],
                    "cgo")
    info = emit_plot(t, "trend", tmp_path / "t.svg", "tau", "psi_norm")
    assert info.numbers["mean"] == [2.0, 0.5]
    assert info.numbers["se"][0] == pytest.approx(1.0)


def test_bilinear_annotation_matches_the_fit(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for mu in (2**-5, 2**-6, 2**-7, 2**-8):
        for nu in (2**-2, 2**-3, 2**-4, 2**-5, 2**-6):
            for kind in ("planar-cap", "random"):
                rows.append((2, "paraboloid", 2.0, mu, nu, kind, mu**0.5 * nu**0.5 * rng.uniform(0.5, 1)))
    table = ResultTable(("n", "surface", "p_prime", "mu", "nu", "construction", "ratio"), rows, "bilinear")
    info = emit_plot(table, "loglog", tmp_path / "b.svg")
    fit = bilinear_fit_from_table(table)
    cells = fit["cells"]
    e_mu, e_nu, _, _ = fit_loglog([c[0] for c in cells], [c[1] for c in cells], fit["best"])
    assert info.numbers["e_mu"] == pytest.approx(e_mu, abs=1e-6)
    assert info.numbers["e_nu"] == pytest.approx(e_nu, abs=1e-6)
    svg = (tmp_path / "b.svg").read_text()
    assert f"e_mu = {e_mu:.6f}" in svg


def test_constants_file():
    vals = constants.load()
    assert vals["symbol_ratio_lo"] < 2 < vals["symbol_ratio_hi"]
    with pytest.raises(KeyError):
        constants.get("no_such_constant")
    text = constants.format_constants({"b": 2.0, "a": 0.1}, "hdr")
    assert constants.parse_constants(text) == {"a": 0.1, "b": 2.0}
    with pytest.raises(ConfigParse):
        constants.parse_constants("a = one\n")


# --- running -------------------------------------------------------------------------------


def test_expectation_run_writes_two_rows(tmp_path, out_root):
    path = write_config(tmp_path, "expectation")
    assert main(["expectation", "--config", str(path)]) == 0
    cfg = load_config(path)
    target = run_dir(cfg)
    assert target.parent == out_root
    table = ResultTable.from_csv((target / "results.csv").read_text(), "expectation")
    assert len(table) == 2 and table.column("samples") == [20, 20]
    names = sorted(p.name for p in target.iterdir())
    assert names == ["config.txt", "mqnorm.svg", "qnorm.svg", "results.csv", "summary.txt", "version.txt"]


def test_rerun_is_a_noop_unless_forced(tmp_path, out_root):
    path = write_config(tmp_path, "cgo")
    assert main(["cgo", "--config", str(path)]) == 0
    cfg = load_config(path)
    summary = run_dir(cfg) / "summary.txt"
    summary.write_text(summary.read_text() + "marker\n")
    target, out = execute(cfg)
    assert out is None and summary.read_text().endswith("marker\n")
    assert main(["cgo", "--config", str(path), "--force"]) == 0
    assert not summary.read_text().endswith("marker\n")


def test_seed_override_changes_the_run_dir(tmp_path, out_root):
    path = write_config(tmp_path, "cgo")
    assert main(["cgo", "--config", str(path), "--seed", "7"]) == 0
    dirs = [p.name for p in out_root.iterdir()]
    cfg = load_config(path)
    cfg.seed = 7
    assert run_dir(cfg).name in dirs


def test_exit_codes(tmp_path, out_root):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[run]\nexperiment = cgo\n[cgo]\nN = x\n")
    assert main(["cgo", "--config", str(bad)]) == 1
    strict = write_config(tmp_path, "cgo", body=SMALL["cgo"] + "residual_limit = 1e-300\n")
    assert main(["cgo", "--config", str(strict)]) == 2
    # a rerun reports the stored failure without recomputing
    assert main(["cgo", "--config", str(strict)]) == 2
    text = (run_dir(load_config(strict)) / "summary.txt").read_text()
    assert "status = invariant-failure" in text and "check residual = FAIL" in text
    assert main(["cgo", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_output_key_and_env_override(tmp_path, monkeypatch):
    monkeypatch.delenv("RLAB_OUT", raising=False)
    own = tmp_path / "own"
    path = write_config(tmp_path, "cgo", extra=f"output = {own}\n")
    assert main(["cgo", "--config", str(path)]) == 0
    assert any(own.iterdir())
    env = tmp_path / "env"
    monkeypatch.setenv("RLAB_OUT", str(env))
    assert main(["cgo", "--config", str(path)]) == 0
    assert any(env.iterdir())


def test_unwritable_output(tmp_path, monkeypatch):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    monkeypatch.setenv("RLAB_OUT", str(blocker / "sub"))
    cfg = parse_config(config_text("cgo"))
    with pytest.raises(Unwritable):
        execute(cfg)
    path = write_config(tmp_path, "cgo")
    assert main(["cgo", "--config", str(path)]) == 1


def test_module_errors_name_the_experiment(tmp_path, out_root, caplog):
    # mu levels too few for the fit
    path = write_config(tmp_path, "bilinear", body="mu = 2^-5, 2^-6\n")
    with caplog.at_level("ERROR"):
        assert main(["bilinear", "--config", str(path)]) == 1
    assert "bilinear: need at least four" in caplog.text


@pytest.mark.parametrize("exp", sorted(SMALL))
def test_every_experiment_runs_and_repeats_byte_for_byte(exp, tmp_path, monkeypatch):
    trees = []
    for k in range(2):
        root = tmp_path / f"out{k}"
        monkeypatch.setenv("RLAB_OUT", str(root))
        assert main([exp, "--config", str(write_config(tmp_path, exp))]) == 0
        (target,) = list(root.iterdir())
        trees.append({p.relative_to(target): p.read_bytes() for p in sorted(target.rglob("*"))})
    assert trees[0] == trees[1]
    assert any(str(p).endswith(".svg") for p in trees[0])
