import numpy as np
import pytest
from scipy import stats

from schrodinger_da import cli
from schrodinger_da.exceptions import ConfigError, StepError

SELF_TWIN = """
[experiment]
cycles = 5

[model]
name = brownian
gamma = 0
dt = 0.1
z0 = 0.3

[observation]
R = 1e12

[ensemble]
M = 1
var = 0

[filter]
method = bootstrap
"""

SMALL_CONTINUOUS = """
[experiment]
mode = continuous
horizon = 0.5
record_every = 10

[model]
name = linear_sde
A = -1
gamma = 0.5
dt = 0.01
z0 = 1

[observation]
R = 0.2

[ensemble]
M = 8
var = 0.1

[filter]
method = enkbf-stoch-mean

[sweep]
methods = enkbf-stoch-mean
M = 8
seeds = 3
"""


def test_self_twin_has_zero_rmse():
    res = cli.run_twin_experiment(cli.parse_config(SELF_TWIN))
    assert res.ok
    np.testing.assert_array_equal(res.rmse_steps, 0.0)
    assert [r.step for r in res.records] == [1, 2, 3, 4, 5]


def test_example25_weights_and_moments(tmp_path):
    cfg = cli.load_config("example25")
    states, w, _ = cli.smoothing_at_zero(cfg)
    z0 = states[:, 0]
    g = np.exp(-(z0 + 0.5) ** 2 / 0.4)
    np.testing.assert_allclose(w, 11 * g / g.sum(), rtol=1e-12)
    # filtering moments with 1000 proposal draws per atom
    big = cli.load_config("example25", ["ensemble.replicate=1000"])
    res = cli.run_twin_experiment(big)
    z, wts = res.final.states[:, 0], res.final.weights
    mean = wts @ z / wts.sum()
    pm = stats.norm(z0, np.sqrt(0.2)).pdf(-0.5)
    pm /= pm.sum()
    post_means = z0 + 0.5 * (-0.5 - z0)
    exact_mean = pm @ post_means
    exact_var = pm @ (0.05 + post_means ** 2) - exact_mean ** 2
    se = np.sqrt(exact_var / z.size)
    assert abs(mean - exact_mean) < 3 * se
    assert np.var(z) == pytest.approx(exact_var, rel=0.05)


def test_smooth_subcommand_writes_weights(tmp_path, capsys):
    out = tmp_path / "w.csv"
    assert cli.main(["smooth", "--config", "example25", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "particle,z0,weight"
    assert len(rows) == 12
    w = np.array([float(r.split(",")[2]) for r in rows[1:]])
    assert w.sum() == pytest.approx(11, abs=1e-8)


def test_single_cell_sweep_equals_run_summary():
    cfg = cli.parse_config(SMALL_CONTINUOUS)
    rows, cells = cli.run_sweep(cfg)
    run = cli.run_twin_experiment(cfg, method="enkbf-stoch-mean", M=8, seed=3)
    assert len(rows) == 1
    m, M, mean, se, n = rows[0]
    assert (m, M, n) == ("enkbf-stoch-mean", 8, 1)
    assert mean == run.summary(cfg.burn_in)
    assert np.isnan(se)


def test_two_seed_standard_error():
    cfg = cli.parse_config(SMALL_CONTINUOUS, overrides=["sweep.seeds=1, 2"])
    rows, cells = cli.run_sweep(cfg)
    vals = np.array([c[3] for c in cells])
    assert rows[0][3] == pytest.approx(vals.std(ddof=1) / np.sqrt(2), rel=1e-14)
    assert rows[0][2] == pytest.approx(vals.mean(), rel=1e-14)


def test_sweep_failure_is_a_missing_cell(monkeypatch):
    real = cli.continuous_step

    def flaky(fcfg, ens, *args, **kw):
        if ens.states.shape[0] == 5:
            raise StepError("forced failure")
        return real(fcfg, ens, *args, **kw)

    monkeypatch.setattr(cli, "continuous_step", flaky)
    cfg = cli.parse_config(SMALL_CONTINUOUS, overrides=["sweep.M=5, 8", "sweep.seeds=0, 1"])
    rows, cells = cli.run_sweep(cfg)
    by_m = {r[1]: r for r in rows}
    assert by_m[5][4] == 0 and np.isnan(by_m[5][2])
    assert by_m[8][4] == 2
    failed = [c for c in cells if c[3] is None]
    assert len(failed) == 2 and all("forced failure" in c[4] for c in failed)
    text = cli.cells_csv(cells)
    assert text.splitlines()[0] == "method,M,seed,summary_rmse,error"


def test_numerical_failure_exit_code_and_partial_output(monkeypatch, tmp_path):
    real = cli.continuous_step
    calls = {"n": 0}

    def failing(*args, **kw):
        calls["n"] += 1
        if calls["n"] > 20:
            raise StepError("blow-up")
        return real(*args, **kw)

    monkeypatch.setattr(cli, "continuous_step", failing)
    cfg_path = tmp_path / "c.cfg"
    cfg_path.write_text(SMALL_CONTINUOUS)
    out = tmp_path / "run.csv"
    assert cli.main(["cfilter", "--config", str(cfg_path), "--out", str(out)]) == 2
    rows = out.read_text().splitlines()
    assert rows[0] == "step,time,rmse,ess,log_evidence"
    assert [int(r.split(",")[0]) for r in rows[1:]] == [10, 20]


def test_same_seed_gives_identical_csv(tmp_path):
    for args in (["filter", "--config", "example25"],
                 ["filter", "--config", "double_well", "--set", "ensemble.M=100"],
                 ["cfilter", "--config", "lorenz63", "--set", "experiment.horizon=0.5",
                  "--set", "experiment.record_every=5"]):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert cli.main(args + ["--out", str(a)]) == 0
        assert cli.main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        for tag in ("ensemble", "hist"):
            sa, sb = tmp_path / f"a.{tag}.csv", tmp_path / f"b.{tag}.csv"
            if sa.exists():
                assert sa.read_bytes() == sb.read_bytes()


def test_different_seeds_differ(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    base = ["cfilter", "--config", "lorenz63", "--set", "experiment.horizon=0.2", "--set",
            "experiment.record_every=5"]
    cli.main(base + ["--seed", "1", "--out", str(a)])
    cli.main(base + ["--seed", "2", "--out", str(b)])
    assert a.read_bytes() != b.read_bytes()


def test_unknown_key_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[model]\nname = brownian\n\n[ensemble]\nM = 3\nsize = 4\n")
    assert cli.main(["filter", "--config", str(p)]) == 1
    err = capsys.readouterr().err
    assert f"{p}:6" in err and "size" in err


@pytest.mark.parametrize("text, fragment", [
    ("[ensemble]\nM = ten\n", ":2"),
    ("[model]\nname = lorenz\n", "unknown model"),
    ("[ensemble]\nM = 0\n", "must be >= 1"),
    ("[observation]\noperator = cube\n", "unknown operator"),
    ("[colours]\nred = 1\n", "unknown section"),
    ("[experiment]\nmode = continuous\nhorizon = 0.015\n[model]\nname = brownian\n", "multiple of dt"),
    ("[filter]\nmethod = fpf\n", "not a discrete method"),
])
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError) as exc:
        cli.parse_config(text, "t.cfg")
    assert fragment in str(exc.value)


def test_overrides_and_bundled_configs():
    names = cli.bundled_configs()
    assert {"example25", "double_well", "lorenz63", "lorenz63_sweep"} <= set(names)
    cfg = cli.load_config("lorenz63", ["ensemble.M=20", "filter.method=fpf"])
    assert cfg.M == 20 and cfg.method == "fpf"
    with pytest.raises(ConfigError):
        cli.parse_config("", overrides=["noequals"])


def test_matrix_and_vector_grammar():
    cfg = cli.parse_config("[model]\nname = linear_sde\ndim = 2\nA = 0, 1; -1, 0\nz0 = 1, 2\n"
                           "[ensemble]\nvar = 0.5\n[observation]\nR = 2\n[experiment]\n")
    np.testing.assert_array_equal(cfg.A, [[0, 1], [-1, 0]])
    np.testing.assert_array_equal(cfg.var, 0.5 * np.eye(2))
    np.testing.assert_array_equal(cfg.R, 2 * np.eye(2))


def test_simulate_subcommand(tmp_path):
    out = tmp_path / "sim.csv"
    assert cli.main(["simulate", "--config", "double_well", "--set", "experiment.cycles=3", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "step,time,z0,y0"
    assert len(rows) == 5
    assert rows[2].split(",")[1] == "2.000000"


def test_snapshot_histogram_and_coupling_files(tmp_path):
    out = tmp_path / "dw.csv"
    args = ["filter", "--config", "double_well", "--set", "ensemble.M=200", "--out", str(out)]
    assert cli.main(args) == 0
    hist = (tmp_path / "dw.hist.csv").read_text().splitlines()
    assert hist[0] == "step,left,right,mass"
    assert sum(float(r.split(",")[3]) for r in hist[1:]) == pytest.approx(1.0)
    out2 = tmp_path / "e.csv"
    assert cli.main(["filter", "--config", "example25", "--scenario", "schroedinger", "--dump-coupling",
                     "--out", str(out2)]) == 0
    P = np.loadtxt(tmp_path / "e.coupling.csv", delimiter=",")
    np.testing.assert_allclose(P.sum(0), 1.0, atol=1e-8)
    snap = (tmp_path / "e.ensemble.csv").read_text().splitlines()
    assert snap[0] == "step,particle,weight,z0"


def test_fbsde_smoothing_values(tmp_path):
    out = tmp_path / "s.csv"
    assert cli.main(["smooth", "--config", "double_well", "--set", "ensemble.M=100", "--fbsde",
                     "--out", str(out)]) == 0
    head = out.read_text().splitlines()[0]
    assert head == "particle,z0,weight,fbsde_value"
