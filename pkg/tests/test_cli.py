import configparser
import csv
import subprocess
import sys

import numpy as np
import pytest

from polcavity.cavity import REFERENCE_CAVITY
from polcavity.cli import CURVE_HEADER, main
from polcavity.config import load_config
from polcavity.errors import ConfigError
from polcavity.estimation import coupling_of_min_purity, read_fit_result
from polcavity.polarization import D
from polcavity.tomography import CSV_HEADER, read_dataset

BASE = """
[cavity]
delta_omega_ueV = 63
kappa_h_ueV = 105
kappa_v_ueV = 86
eta_out = 0.53

[coupling]
eta_in = {eta_in}
input_state = {state}

[scan]
omega_min_ueV = -300
omega_max_ueV = 300
points = {points}
{extra}
"""


def write_config(tmp_path, name="run.ini", state="D", eta_in=0.96, points=200, extra=""):
    path = tmp_path / name
    path.write_text(BASE.format(state=state, eta_in=eta_in, points=points, extra=extra))
    return path


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


@pytest.fixture
def stable_time(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def simulate(tmp_path, state, name, **kw):
    cfg = write_config(tmp_path, f"{name}.ini", state=state, **kw)
    out = tmp_path / f"{name}.csv"
    assert main(["simulate", str(cfg), "-o", str(out)]) == 0
    return cfg, out


def test_simulate_h_input_dip(tmp_path, stable_time):
    _, out = simulate(tmp_path, "H", "h")
    ds = read_dataset(out)
    r_total = ds.intensities[:, :2].sum(axis=1) / ds.input_intensity
    assert r_total.min() == pytest.approx(0.04 + 0.96 * 0.06**2, abs=2e-3)
    assert (tmp_path / "h.csv.meta").exists()


def test_simulate_is_byte_identical(tmp_path, stable_time):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", str(cfg), "-o", str(a)]) == 0
    assert main(["simulate", str(cfg), "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    noisy = write_config(tmp_path, "noisy.ini", extra="seed = 4\n[noise]\nkind = gaussian-relative\nlevel = 0.01")
    assert main(["simulate", str(noisy), "-o", str(a)]) == 0
    assert main(["simulate", str(noisy), "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_single_point_grid(tmp_path):
    cfg = write_config(tmp_path, extra="", points=1).read_text().replace("omega_min_ueV = -300", "omega_min_ueV = 0")
    path = tmp_path / "one.ini"
    path.write_text(cfg)
    out = tmp_path / "one.csv"
    assert main(["simulate", str(path), "-o", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 2 and lines[1].startswith("0.0,")


def test_reconstruct_diagonal_scan(tmp_path, stable_time):
    _, data = simulate(tmp_path, "D", "d")
    out = tmp_path / "curves.csv"
    assert main(["reconstruct", str(data), "-o", str(out)]) == 0
    header, table = read_table(out)
    assert tuple(header) == CURVE_HEADER
    purity = table[:, 5]
    w = table[:, 0]
    assert purity[np.abs(w) < 30].min() < 0.9
    assert purity[0] > 0.999 and purity[-1] > 0.999
    header, traj = read_table(tmp_path / "d_poincare.csv")
    assert header == ["omega_ueV", "x", "y", "z", "purity"]
    np.testing.assert_allclose(np.linalg.norm(traj[:, 1:4], axis=1), traj[:, 4], atol=1e-12)
    assert "[manifest]" in (tmp_path / "curves.csv.meta").read_text()


def test_reconstruct_unpolarized_rows(tmp_path):
    path = tmp_path / "flat.csv"
    path.write_text(",".join(CSV_HEADER) + "\n0.0,1.0,0.25,0.25,0.25,0.25,0.25,0.25\n")
    assert main(["reconstruct", str(path), "-o", str(tmp_path / "c.csv")]) == 0
    _, table = read_table(tmp_path / "c.csv")
    assert table[0, 5] == 0.0 and table[0, 1] == 0.5


def test_reconstruct_malformed_row(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text(",".join(CSV_HEADER) + "\n0.0,1.0,0.5,0.5,0.5,0.5,0.5,0.5\n1.0,1.0,x,0.5,0.5,0.5,0.5,0.5\n")
    assert main(["reconstruct", str(path)]) == 3
    assert "row 3" in capsys.readouterr().err


def test_pipeline_closure(tmp_path, stable_time):
    cfg, data = simulate(tmp_path, "D", "d")
    out = tmp_path / "fit.ini"
    assert main(["fit", str(cfg), str(data), "--stage", "full", "-o", str(out)]) == 0
    res = read_fit_result(out)
    truth = {"delta_omega": 63, "kappa_h": 105, "kappa_v": 86, "eta_out": 0.53, "eta_in": 0.96}
    for name, value in truth.items():
        assert res.values[name] == pytest.approx(value, abs=1e-6)
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(tmp_path / "fit_branch.ini")
    assert cp["branch"]["chosen"] == "high"
    header, curves = read_table(tmp_path / "fit_curves.csv")
    assert tuple(header) == CURVE_HEADER and len(curves) == 200


def test_pipeline_with_distant_start(tmp_path):
    extra = "[fit]\ninit_eta_in = 0.6\ninit_eta_out = 0.35\ninit_kappa_h_ueV = 140\n"
    cfg = write_config(tmp_path, extra=extra)
    data = tmp_path / "d.csv"
    assert main(["simulate", str(cfg), "-o", str(data)]) == 0
    assert main(["fit", str(cfg), str(data), "-o", str(tmp_path / "fit.ini")]) == 0
    res = read_fit_result(tmp_path / "fit.ini")
    assert res.values["eta_in"] == pytest.approx(0.96, abs=1e-6)


def test_eigenmode_stage_writes_degeneracy(tmp_path, capsys):
    cfg, h = simulate(tmp_path, "H", "h")
    _, v = simulate(tmp_path, "V", "v")
    out = tmp_path / "eig.ini"
    assert main(["fit", str(cfg), str(h), str(v), "--stage", "eigenmode", "-o", str(out)]) == 0
    res = read_fit_result(out)
    assert res.values["kappa_h"] == pytest.approx(105, abs=1e-6)
    assert res.values["kappa_v"] == pytest.approx(86, abs=1e-6)
    header, table = read_table(tmp_path / "eig_degeneracy.csv")
    assert header == ["eta_in", "eta_out"]
    r_min = 0.04 + 0.96 * 0.06**2
    np.testing.assert_allclose((1 - table[:, 0]) + table[:, 0] * (1 - 2 * table[:, 1]) ** 2, r_min, atol=1e-9)
    assert (tmp_path / "eig_curves_H.csv").exists() and (tmp_path / "eig_curves_V.csv").exists()
    assert "eta_in in [" in capsys.readouterr().out


def test_staged_and_joint_stages(tmp_path):
    cfg, h = simulate(tmp_path, "H", "h")
    _, v = simulate(tmp_path, "V", "v")
    _, d = simulate(tmp_path, "D", "d")
    for stage in ("staged", "joint"):
        out = tmp_path / f"{stage}.ini"
        assert main(["fit", str(cfg), str(h), str(v), str(d), "--stage", stage, "-o", str(out)]) == 0
        assert read_fit_result(out).values["eta_in"] == pytest.approx(0.96, abs=1e-6)
    assert main(["fit", str(cfg), str(h), "--stage", "staged"]) == 2


def test_ambiguous_branch_exit_code(tmp_path):
    grid = np.linspace(-300, 300, 200)
    e_star, _ = coupling_of_min_purity(REFERENCE_CAVITY, D, grid)
    extra = "[fit]\nfree = eta_in\n"
    cfg = write_config(tmp_path, eta_in=repr(e_star), extra=extra)
    data = tmp_path / "d.csv"
    assert main(["simulate", str(cfg), "-o", str(data)]) == 0
    assert main(["fit", str(cfg), str(data), "-o", str(tmp_path / "fit.ini")]) == 5
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(tmp_path / "fit_branch.ini")
    assert cp["branch"]["status"] == "ambiguous"
    assert float(cp["branch"]["candidate_low"]) == pytest.approx(float(cp["branch"]["candidate_high"]), abs=1e-3)


def test_non_convergence_exit_code(tmp_path):
    cfg, d = simulate(tmp_path, "D", "d", extra="[fit]\nmax_iterations = 1\ninit_eta_in = 0.5\n")
    assert main(["fit", str(cfg), str(d), "-o", str(tmp_path / "fit.ini")]) == 4


def test_purity_map(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "map.csv"
    assert main(["purity-map", str(cfg), "--eta-points", "51", "-o", str(out)]) == 0
    header, table = read_table(out)
    assert header == ["eta_in", "min_purity"]
    assert tuple(table[0]) == (0.0, 1.0) and tuple(table[-1]) == (1.0, 1.0)
    assert main(["purity-map", str(cfg), "--eta-min", "0.96", "--eta-max", "0.96", "--eta-points", "1", "-o", str(out)]) == 0
    _, row = read_table(out)
    assert 0.72 <= row[0, 1] <= 0.85
    assert main(["purity-map", str(cfg), "--eta-max", "1.5"]) == 2


def test_environment_overrides(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, extra="seed = 1\n[noise]\nkind = gaussian-relative\nlevel = 0.01")
    monkeypatch.setenv("POLCAVITY_SEED", "42")
    monkeypatch.setenv("POLCAVITY_OUTPUT_DIR", str(tmp_path / "outdir"))
    assert main(["simulate", str(cfg)]) == 0
    ds = read_dataset(tmp_path / "outdir" / "scan.csv")
    assert ds.metadata["seed"] == "42"
    assert load_config(cfg).scan.seed == 42


@pytest.mark.parametrize(
    "extra, key",
    [
        ("[bogus]\nx = 1", "bogus"),
        ("[fit]\nkappa = 3", "fit.kappa"),
        ("[noise]\nkind = laplace", "noise"),
        ("[fit]\nfree = eta_in,kappa", "fit.free"),
        ("[fit]\nstage = quick", "fit.stage"),
    ],
)
def test_config_errors_exit_2(tmp_path, capsys, extra, key):
    cfg = write_config(tmp_path, extra=extra)
    assert main(["simulate", str(cfg), "-o", str(tmp_path / "x.csv")]) == 2
    assert key in capsys.readouterr().err


def test_config_value_errors_name_the_key():
    with pytest.raises(ConfigError, match="cavity.kappa_h_ueV"):
        load_config(text="[cavity]\nkappa_h_ueV = wide\n")
    with pytest.raises(ConfigError, match="coupling"):
        load_config(text="[coupling]\neta_in = 1.5\n")
    with pytest.raises(ConfigError, match="scan.points"):
        load_config(text="[scan]\npoints = 0\n")


def test_config_command_round_trips(capsys):
    assert main(["config"]) == 0
    cfg = load_config(text=capsys.readouterr().out)
    assert cfg.cavity == REFERENCE_CAVITY
    assert cfg.coupling.eta_in == 0.96


def test_unwritable_output_is_a_data_error(tmp_path):
    cfg = write_config(tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["simulate", str(cfg), "-o", str(blocker / "sub" / "x.csv")]) == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "polcavity", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()


def test_explicit_input_angles_override_dataset(tmp_path):
    cfg, d = simulate(tmp_path, "D", "d")
    pinned = write_config(tmp_path, "pinned.ini", extra="[fit]\ninit_theta_rad = 1.3\n")
    assert main(["fit", str(pinned), str(d), "-o", str(tmp_path / "p.ini")]) == 0
    assert read_fit_result(tmp_path / "p.ini").values["theta"] == 1.3
    assert main(["fit", str(cfg), str(d), "-o", str(tmp_path / "q.ini")]) == 0
    assert read_fit_result(tmp_path / "q.ini").values["theta"] == pytest.approx(np.pi / 2)
