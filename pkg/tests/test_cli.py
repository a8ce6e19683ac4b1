import json

import numpy as np
import pytest

from conftest import simulate_sample
from warpfield.cli import main
from warpfield.fit import fit
from warpfield.gplik import CovParams, SampleCov
from warpfield.modelio import dumps, load_model, model_to_dict, read_matrix, save_model
from warpfield.postfit import predict_dspace
from warpfield.warp import WarpSpec


def write_table(path, rows, header=None, comment=None):
    with open(path, "w") as f:
        if comment:
            f.write(f"# {comment}\n")
        if header:
            f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join("" if np.isnan(v) else "%.17g" % v for v in r) + "\n")


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    x = np.random.default_rng(40).uniform(size=(10, 2))
    _, Y = simulate_sample(x * [2.0, 0.7], 250, CovParams(1.0, 0.05, 1.0), seed=41)
    write_table(d / "sites.csv", x, ["lon", "lat"])
    write_table(d / "obs.csv", Y, [f"s{j}" for j in range(10)])
    return d, x, Y


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def aniso_file(files):
    d, _, _ = files
    out = d / "aniso.json"
    assert run("fit", "--model", "aniso", "--sites", d / "sites.csv", "--obs", d / "obs.csv",
               "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def deform_file(files):
    d, _, _ = files
    out = d / "deform.json"
    code = run("fit", "--model", "deform", "--k", "6,6", "--sites", d / "sites.csv",
               "--obs", d / "obs.csv", "--out", out)
    assert code in (0, 2)
    return out


class TestFit:
    def test_aniso_report(self, files, capsys):
        d, _, _ = files
        assert run("fit", "--model", "aniso", "--sites", d / "sites.csv", "--obs",
                   d / "obs.csv", "--out", d / "a2.json") == 0
        out = capsys.readouterr().out
        line = [ln for ln in out.splitlines() if ln.startswith("alpha:")][0]
        assert all(float(v) > 0 for v in line.split()[1:])
        assert "sigma2:" in out and "converged: yes" in out

    def test_model_file_schema(self, aniso_file):
        doc = json.loads(aniso_file.read_text())
        assert doc["format"] == "warpfield-model" and doc["version"] == 1
        assert doc["spec"]["kind"] == "aniso"
        assert doc["extra"]["source"]["center"] is True

    def test_cov_equals_obs(self, files, aniso_file):
        d, _, Y = files
        s = SampleCov.from_observations(Y)
        write_table(d / "cov.csv", s.V, comment=f"n={Y.shape[0]}")
        assert run("fit", "--model", "aniso", "--sites", d / "sites.csv", "--cov",
                   d / "cov.csv", "--out", d / "acov.json") == 0
        a, _ = load_model(aniso_file)
        b, _ = load_model(d / "acov.json")
        np.testing.assert_allclose(a.beta, b.beta, atol=1e-10)

    def test_expand_two_latent(self, files):
        d, _, _ = files
        out = d / "exp2.json"
        assert run("fit", "--model", "expand", "--k", "6,6", "--sites", d / "sites.csv",
                   "--obs", d / "obs.csv", "--out", out) in (0, 2)
        doc = json.loads(out.read_text())
        assert doc["spec"]["ranks"] == [6, 6] and len(doc["bases"]) == 2

    def test_rank_clamped(self, files, caplog):
        d, _, _ = files
        out = d / "exp12.json"
        assert run("fit", "--model", "expand", "--k", "12", "--sites", d / "sites.csv",
                   "--obs", d / "obs.csv", "--out", out) in (0, 2)
        assert json.loads(out.read_text())["spec"]["ranks"] == [10]
        assert "exceed" in caplog.text

    def test_malformed_sites(self, files, tmp_path, capsys):
        d, _, _ = files
        bad = tmp_path / "bad.csv"
        bad.write_text("lon,lat\n0,1\n0.5,x\n")
        assert run("fit", "--model", "aniso", "--sites", bad, "--obs", d / "obs.csv",
                   "--out", tmp_path / "m.json") == 1
        err = capsys.readouterr().err
        assert "row 3" in err and "column 2" in err

    def test_both_sources(self, files, tmp_path):
        d, _, _ = files
        assert run("fit", "--model", "aniso", "--sites", d / "sites.csv", "--obs", d / "obs.csv",
                   "--cov", d / "obs.csv", "--out", tmp_path / "m.json") == 1

    def test_bad_k(self, files, tmp_path):
        d, _, _ = files
        assert run("fit", "--model", "deform", "--k", "a,b", "--sites", d / "sites.csv",
                   "--obs", d / "obs.csv", "--out", tmp_path / "m.json") == 1


class TestModelFile:
    def test_byte_roundtrip(self, deform_file, tmp_path):
        model, extra = load_model(deform_file)
        save_model(model, tmp_path / "again.json", extra)
        assert (tmp_path / "again.json").read_bytes() == deform_file.read_bytes()

    def test_prediction_bitwise(self, files):
        d, x, Y = files
        model = fit(x, SampleCov.from_observations(Y), WarpSpec("deform", (6, 6)))
        before = predict_dspace(model, x * 0.9 + 0.05, with_se=True)
        save_model(model, d / "rt.json")
        after = predict_dspace(load_model(d / "rt.json")[0], x * 0.9 + 0.05, with_se=True)
        np.testing.assert_array_equal(before.fitted, after.fitted)
        np.testing.assert_array_equal(before.se, after.se)
        assert dumps(model_to_dict(model)) == (d / "rt.json").read_text()

    def test_version_checked(self, aniso_file, tmp_path, capsys):
        doc = json.loads(aniso_file.read_text())
        doc["version"] = 99
        p = tmp_path / "v.json"
        p.write_text(json.dumps(doc))
        assert run("predict", "--model-file", p) == 1
        assert "version" in capsys.readouterr().err

    def test_missing_model_file(self, tmp_path):
        assert run("predict", "--model-file", tmp_path / "nope.json") == 1


class TestPredict:
    def test_coords(self, deform_file, tmp_path):
        out = tmp_path / "p.csv"
        assert run("predict", "--model-file", deform_file, "--se", "--out", out) == 0
        header, P, _ = read_matrix(out)
        assert header == ["d1", "d2", "se_d1", "se_d2"] and P.shape == (10, 4)

    def test_vcov(self, deform_file, tmp_path):
        out = tmp_path / "v.csv"
        assert run("predict", "--model-file", deform_file, "--type", "vcov", "--out", out) == 0
        _, S, _ = read_matrix(out)
        model, _ = load_model(deform_file)
        np.testing.assert_array_equal(np.diag(S), model.cov_params.sigma2)

    def test_full_precision(self, deform_file, tmp_path):
        out = tmp_path / "p.csv"
        run("predict", "--model-file", deform_file, "--out", out)
        _, P, _ = read_matrix(out)
        model, _ = load_model(deform_file)
        np.testing.assert_array_equal(P, predict_dspace(model).fitted)


class TestSimulate:
    def test_reproducible(self, aniso_file, tmp_path):
        a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
        for p, seed in ((a, 5), (b, 5), (c, 6)):
            assert run("simulate", "--model-file", aniso_file, "--nsim", 3, "--seed", seed,
                       "--out", p) == 0
        assert a.read_bytes() == b.read_bytes() != c.read_bytes()
        assert read_matrix(a)[1].shape == read_matrix(c)[1].shape == (10, 3)

    def test_bad_nsim(self, aniso_file):
        assert run("simulate", "--model-file", aniso_file, "--nsim", 0) == 1


class TestVariogram:
    def test_outputs(self, files, deform_file, tmp_path):
        d, _, _ = files
        pts, curve = tmp_path / "pts.csv", tmp_path / "curve.csv"
        assert run("variogram", "--model-file", deform_file, "--obs", d / "obs.csv",
                   "--points", pts, "--curve", curve) == 0
        h, P, _ = read_matrix(pts)
        assert h == ["i", "j", "distance", "semivariance"] and P.shape[0] == 45
        _, C, _ = read_matrix(curve)
        assert C.shape == (200, 2) and np.all(C[:, 1] >= 0)


class TestWarpgrid:
    def test_grid_size(self, aniso_file, tmp_path):
        out = tmp_path / "g.csv"
        assert run("warpgrid", "--model-file", aniso_file, "--xp", "0:1.05:0.05",
                   "--yp", "0:0.4:0.05", "--out", out) == 0
        h, G, _ = read_matrix(out)
        assert G.shape == (198, 4) and h == ["x", "y", "d1", "d2"]
        model, _ = load_model(aniso_file)
        a = model.alpha_hat()
        np.testing.assert_allclose(G[:, 2:], G[:, :2] * a, rtol=1e-12)

    def test_expand_columns(self, files, tmp_path):
        d, _, _ = files
        m = tmp_path / "e.json"
        run("fit", "--model", "expand", "--k", "6", "--sites", d / "sites.csv", "--obs",
            d / "obs.csv", "--out", m)
        out = tmp_path / "g.csv"
        assert run("warpgrid", "--model-file", m, "--xp", "0:1:0.5", "--yp", "0:1:0.5",
                   "--out", out) == 0
        assert read_matrix(out)[1].shape == (9, 5)

    def test_empty_grid(self, aniso_file):
        assert run("warpgrid", "--model-file", aniso_file, "--xp", "1:0:0.1",
                   "--yp", "0:1:0.1") == 1


class TestCencov:
    def test_uncensored(self, files, tmp_path):
        d, _, Y = files
        assert run("cencov", "--obs", d / "obs.csv", "--left=-inf", "--outdir", tmp_path) == 0
        _, S, comments = read_matrix(tmp_path / "cov.csv")
        Yc = Y - Y.mean(axis=0)
        np.testing.assert_allclose(S, Yc.T @ Yc / Y.shape[0], atol=1e-8)
        assert comments == ["n=250"]
        _, R, _ = read_matrix(tmp_path / "corr.csv")
        np.testing.assert_array_equal(np.diag(R), 1.0)
        for name in ("mu.csv", "tau.csv"):
            assert (tmp_path / name).exists()

    def test_modes(self, files, tmp_path):
        d, _, _ = files
        assert run("cencov", "--obs", d / "obs.csv", "--left", "-0.5", "--mode", "cencor",
                   "--outdir", tmp_path) == 0
        assert (tmp_path / "corr.csv").exists() and not (tmp_path / "cov.csv").exists()

    def test_bounds_file(self, files, tmp_path):
        d, _, _ = files
        write_table(tmp_path / "left.csv", [np.full(10, -0.5)], [f"s{j}" for j in range(10)])
        assert run("cencov", "--obs", d / "obs.csv", "--left", tmp_path / "left.csv",
                   "--outdir", tmp_path / "o1") == 0
        assert run("cencov", "--obs", d / "obs.csv", "--left", "-0.5",
                   "--outdir", tmp_path / "o2") == 0
        assert ((tmp_path / "o1" / "cov.csv").read_bytes()
                == (tmp_path / "o2" / "cov.csv").read_bytes())

    def test_column_error_named(self, files, tmp_path, capsys):
        d, _, Y = files
        Z = Y.copy()
        Z[:, 3] = -10
        write_table(tmp_path / "z.csv", Z, [f"s{j}" for j in range(10)])
        assert run("cencov", "--obs", tmp_path / "z.csv", "--left", "-1",
                   "--outdir", tmp_path) == 1
        assert "s3" in capsys.readouterr().err
