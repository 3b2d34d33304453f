import json
import os

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from shapeflow.cli import audit_spray, cli, parse_vector, shape_from_spec
from shapeflow.engines.spray_engine.engine import build_spray, vitali_cover
from shapeflow.run_config import RunConfig
from shapeflow.errors import InvalidShape
from shapeflow.shape_utils import Ball, DiscreteMeasure, Ellipsoid, save_measure_csv, write_json


@pytest.fixture
def runner():
    return CliRunner()


def _invoke(runner, tmp_path, *args):
    return runner.invoke(cli, ["--reproducible", "--out-dir", str(tmp_path / "out"), *args])


# =======================
# Parsing
# =======================

def test_parse_vector():
    np.testing.assert_array_equal(parse_vector("1, 2.5;3"), [1.0, 2.5, 3.0])
    with pytest.raises(InvalidShape):
        parse_vector("")
    with pytest.raises(InvalidShape):
        parse_vector("1,x")


def test_shape_specs():
    disk = shape_from_spec("disk:r=0.5,cx=1", 2)
    assert isinstance(disk, Ball)
    np.testing.assert_array_equal(disk.center, [1.0, 0.0])
    ellipse = shape_from_spec("ellipse:a=2,b=0.5,angle=90", 2)
    assert isinstance(ellipse, Ellipsoid)
    np.testing.assert_allclose(ellipse.rotation, [[0.0, -1.0], [1.0, 0.0]], atol=1e-15)
    with pytest.raises(InvalidShape):
        shape_from_spec("hexagon:r=1", 2)
    with pytest.raises(InvalidShape):
        shape_from_spec("disk:r=1,q=2", 2)
    with pytest.raises(InvalidShape):
        shape_from_spec("ellipsoid:a=2,b=1", 3)


# =======================
# Commands
# =======================

def test_shape_make_writes_header(runner, tmp_path):
    out = tmp_path / "shapes" / "disk.json"
    result = _invoke(runner, tmp_path, "shape", "make", "disk:r=0.5", "--out", str(out))
    assert result.exit_code == 0, result.stderr
    payload = json.loads(result.stdout)
    assert payload["passed"] is True
    assert "created_at" not in payload
    assert payload["mass"] == pytest.approx(np.pi * 0.25, rel=2e-2)
    assert out.exists()
    assert (tmp_path / "shapes" / "disk.f64").exists()


def test_ot_dist_between_csv_measures(runner, tmp_path):
    points = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.5]])
    mu = DiscreteMeasure(points, np.full(5, 0.2))
    save_measure_csv(mu, str(tmp_path / "a.csv"))
    save_measure_csv(mu.translated(np.array([0.3, 0.4])), str(tmp_path / "b.csv"))
    result = _invoke(runner, tmp_path, "ot", "dist", "--a", str(tmp_path / "a.csv"), "--b", str(tmp_path / "b.csv"))
    assert result.exit_code == 0, result.stderr
    assert json.loads(result.stdout)["distance"] == pytest.approx(0.5, rel=1e-9)


def test_pretty_output_is_a_table(runner, tmp_path):
    mu = DiscreteMeasure([[0.0, 0.0], [1.0, 0.0]], [0.5, 0.5])
    save_measure_csv(mu, str(tmp_path / "a.csv"))
    result = runner.invoke(cli, ["--pretty", "--out-dir", str(tmp_path), "ot", "dist", "--p", "inf",
                                 "--a", str(tmp_path / "a.csv"), "--b", str(tmp_path / "a.csv")])
    assert result.exit_code == 0, result.stderr
    assert "field" in result.stdout
    assert "distance" in result.stdout
    with pytest.raises(json.JSONDecodeError):
        json.loads(result.stdout)


def test_tlp_dist_of_shifted_values(runner, tmp_path, rng):
    points = rng.random((12, 2))
    save_measure_csv(DiscreteMeasure(points, np.full(12, 1.0 / 12)), str(tmp_path / "points.csv"))
    values = rng.random(12)
    pd.DataFrame({"v": values}).to_csv(tmp_path / "f.csv", index=False)
    pd.DataFrame({"v": values + 0.5}).to_csv(tmp_path / "g.csv", index=False)
    a = f"{tmp_path / 'points.csv'}:{tmp_path / 'f.csv'}"
    b = f"{tmp_path / 'points.csv'}:{tmp_path / 'g.csv'}"
    result = _invoke(runner, tmp_path, "tlp", "dist", "--a", a, "--b", b)
    assert result.exit_code == 0, result.stderr
    assert json.loads(result.stdout)["distance"] == pytest.approx(0.5, rel=1e-9)


def test_droplet_bvp_writes_geodesic(runner, tmp_path):
    out = tmp_path / "geodesic.json"
    result = _invoke(runner, tmp_path, "droplet", "bvp", "--r", "1", "--end", "1.25,0.8", "--out", str(out))
    assert result.exit_code == 0, result.stderr
    payload = json.loads(result.stdout)
    assert payload["invariants"]["passed"] is True
    np.testing.assert_allclose(payload["end"], [1.25, 0.8], atol=1e-8)
    assert "planar_residuals" in payload
    assert out.exists()


# =======================
# Failures
# =======================

def test_invalid_shape_exits_with_input_code(runner, tmp_path):
    result = _invoke(runner, tmp_path, "ot", "dist", "--a", "hexagon:r=1", "--b", "disk:r=1")
    assert result.exit_code == 4
    error = json.loads(result.stderr)
    assert error["error"] == "InvalidShape"


def test_non_tangent_velocity_exits_with_input_code(runner, tmp_path):
    result = _invoke(runner, tmp_path, "droplet", "ivp", "--a0", "1,1", "--adot0", "1,1")
    assert result.exit_code == 4
    assert json.loads(result.stderr)["error"] == "TangencyViolated"


def test_missing_config_file_exits_with_input_code(runner, tmp_path):
    result = runner.invoke(cli, ["--config", str(tmp_path / "absent.ini"), "shape", "make", "disk:r=1",
                                 "--out", str(tmp_path / "d.json")])
    assert result.exit_code == 4
    assert json.loads(result.stderr)["error"] == "ConfigError"


def test_missing_tlp_values_file(runner, tmp_path):
    result = _invoke(runner, tmp_path, "tlp", "dist", "--a", "nope.csv:nada.csv", "--b", "nope.csv:nada.csv")
    assert result.exit_code == 4


def test_pipeline_with_unequal_masses_exits_with_input_code(runner, tmp_path):
    result = _invoke(runner, tmp_path, "pipeline", "--source", "disk:r=0.5", "--target", "disk:r=1")
    assert result.exit_code == 4
    assert json.loads(result.stderr)["error"] == "MassMismatch"
    assert not (tmp_path / "out" / "run" / "spray.json").exists()


def test_spray_without_droplets_fails_the_audit(runner, tmp_path, translation_field, small_disk):
    plan = vitali_cover(small_disk, translation_field, 0.1, 0.05, max_balls=0)
    spray = build_spray(plan)
    assert len(spray.droplets) == 0
    _, passed, checks = audit_spray(spray, translation_field, RunConfig())
    assert not passed
    assert checks[0] == ("Droplets", False, ["no droplets were placed"])

    write_json(str(tmp_path / "spray.json"), spray.to_dict())
    write_json(str(tmp_path / "field.json"), translation_field.to_dict())
    result = _invoke(runner, tmp_path, "spray", "audit", "--spray", str(tmp_path / "spray.json"))
    assert result.exit_code == 2
    payload = json.loads(result.stdout)
    assert payload["passed"] is False
    assert payload["coverage_fraction"] == 0.0


# =======================
# End-to-end Runs
# =======================

@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(
        "[grid]\ncell_size = 0.1\n\n"
        "[transport]\nmethod = exact\nn_samples = 300\n\n"
        "[spray]\nmax_balls = 12\n\n"
        "[verify]\nprobes = 3\nsubsample = 200\n"
    )
    return str(path)


def _run(runner, tmp_path, config, *args):
    return runner.invoke(cli, ["--config", config, "--reproducible", "--out-dir", str(tmp_path / "out"), *args])


@pytest.mark.slow
def test_pipeline_disk_to_ellipse_writes_a_bundle(runner, tmp_path, small_config):
    result = _run(runner, tmp_path, small_config, "pipeline", "--source", "disk:r=1",
                  "--target", "ellipse:a=2,b=0.5", "--epsilon", "0.25")
    assert result.exit_code in (0, 2), result.stderr
    payload = json.loads(result.stdout)
    assert payload["droplets"] > 0
    assert payload["wasserstein_sq"] > 0.0
    assert set(payload["audits"]) == {"plan", "injectivity", "action", "coverage"}
    for path in payload["files"].values():
        assert os.path.exists(path)

    audit = _run(runner, tmp_path, small_config, "spray", "audit", "--spray", payload["files"]["spray"],
                 "--field", payload["files"]["field"])
    assert audit.exit_code in (0, 2), audit.stderr
    assert json.loads(audit.stdout)["plan"]["balls"] == payload["droplets"]

    figure = tmp_path / "figure.svg"
    render = _run(runner, tmp_path, small_config, "render", "spray", "--spray", payload["files"]["spray"],
                  "--out", str(figure))
    assert render.exit_code == 0, render.stderr
    assert figure.read_text(encoding="utf-8").count('class="droplet-group"') == 3 * payload["droplets"]


@pytest.mark.slow
def test_spray_build_then_audit(runner, tmp_path, small_config):
    out = tmp_path / "spray" / "spray.json"
    build = _run(runner, tmp_path, small_config, "spray", "build", "--source", "disk:r=1",
                 "--target", "ellipse:a=2,b=0.5", "--epsilon", "0.25", "--out", str(out))
    assert build.exit_code == 0, build.stderr
    built = json.loads(build.stdout)
    assert built["droplets"] > 0
    assert (tmp_path / "spray" / "field.json").exists()
    audit = _run(runner, tmp_path, small_config, "spray", "audit", "--spray", str(out))
    assert audit.exit_code in (0, 2), audit.stderr
    payload = json.loads(audit.stdout)
    assert payload["coverage_fraction"] == pytest.approx(built["coverage_fraction"])
    assert "injectivity" in payload


@pytest.mark.slow
def test_droplet_verify_and_render(runner, tmp_path, small_config):
    geodesic = tmp_path / "geodesic.json"
    bvp = _run(runner, tmp_path, small_config, "droplet", "bvp", "--end", "2,0.5", "--out", str(geodesic))
    assert bvp.exit_code == 0, bvp.stderr
    verify = _run(runner, tmp_path, small_config, "verify", "weak-euler", "--geodesic", str(geodesic),
                  "--boost", "0.3,0", "--frames", "5")
    assert verify.exit_code in (0, 2), verify.stderr
    payload = json.loads(verify.stdout)
    assert payload["residuals"]["functions"] == 20
    assert payload["mean_velocity"]["droplets"] == 1
    figure = tmp_path / "droplet.svg"
    render = _run(runner, tmp_path, small_config, "render", "droplet", "--geodesic", str(geodesic),
                  "--out", str(figure))
    assert render.exit_code == 0, render.stderr
    assert figure.exists()


@pytest.mark.slow
def test_relaxed_audit_of_disk_to_ellipse(runner, tmp_path, small_config):
    state = tmp_path / "state.json"
    result = _run(runner, tmp_path, small_config, "relaxed", "audit", "--source", "disk:r=1",
                  "--target", "ellipse:a=2,b=0.5", "--out", str(state))
    assert result.exit_code in (0, 2), result.stderr
    payload = json.loads(result.stdout)
    assert payload["identity"]["half_transport_cost"] > 0.0
    assert payload["identity"]["tolerance"] == 1e-4
    assert payload["minimality"]["probes"] <= 3
    assert state.exists()
