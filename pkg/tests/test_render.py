import os
import re

import numpy as np
import pytest

from shapeflow.errors import InvalidShape
from shapeflow.shape_utils import Ellipsoid
from shapeflow.engines.droplet_engine.engine import BoostedDroplet, geodesic_ivp
from shapeflow.engines.render_engine.engine import (
    fmt,
    projected_ellipse,
    render_droplet_figure,
    render_spray_figure,
    shade,
    write_svg,
)
from shapeflow.engines.spray_engine.engine import (
    EulerSpray,
    build_spray,
    recenter_target,
    translate_density,
    vitali_cover,
)


DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def _skeleton(svg):
    """Element kind, class and id of every group, ellipse and polyline in document order."""
    found = re.findall(r'<(g|ellipse|polyline) class="([^"]*)"(?: id="([^"]*)")?', svg)
    return [f"{tag} {cls} {id_ or '-'}" for tag, cls, id_ in found]


def _golden(name):
    with open(os.path.join(DATA_DIR, name), encoding="utf-8") as f:
        return f.read().split("\n")[:-1]


@pytest.fixture
def spray(translation_field, small_disk):
    shift = recenter_target(translation_field)
    plan = vitali_cover(translate_density(small_disk, shift), translation_field.translated(shift), 0.1, 0.05, max_balls=4)
    return build_spray(plan)


@pytest.fixture
def geodesic():
    return geodesic_ivp(1.0, [1.0, 1.0], [0.5, -0.5])


# =======================
# Helpers
# =======================

def test_fmt_has_no_negative_zero():
    assert fmt(-0.00001) == "0.0000"
    assert fmt(1.23456) == "1.2346"
    assert fmt(-2) == "-2.0000"


def test_shade_is_stable_per_index():
    assert shade(3) == shade(3)
    assert shade(0) != shade(1)
    assert shade(2, 35).endswith("35%)")


def test_projected_ellipse_of_rotated_axes():
    rotation = np.array([[0.0, -1.0], [1.0, 0.0]])
    center, major, minor, angle = projected_ellipse(Ellipsoid([1.0, 2.0], [2.0, 0.5], rotation))
    np.testing.assert_allclose(center, [1.0, 2.0])
    assert major == pytest.approx(2.0)
    assert minor == pytest.approx(0.5)
    assert angle == pytest.approx(90.0)


# =======================
# Figures
# =======================

def test_spray_figure_is_deterministic(spray):
    first = render_spray_figure(spray)
    assert first == render_spray_figure(spray)
    assert first.startswith("<?xml")
    for k, label in enumerate(["t = 0.00", "t = 0.50", "t = 1.00"]):
        assert f'id="panel-{k}"' in first
        assert label in first
    assert first.count('class="droplet-group"') == 3 * len(spray.droplets)
    assert f'id="panel-2-droplet-{len(spray.droplets) - 1}"' in first


def test_spray_figure_outlines_only_after_start(spray):
    svg = render_spray_figure(spray, times=[0.0, 1.0])
    assert svg.count('class="wasserstein"') == len(spray.droplets)
    assert svg.count('class="droplet"') == 2 * len(spray.droplets)


def test_empty_spray_draws_axes_only(spray):
    empty = EulerSpray(spray.plan, (), np.zeros(0, dtype=int), 0.0)
    svg = render_spray_figure(empty, times=[0.5])
    assert "<ellipse" not in svg
    assert 'class="axes"' in svg
    with pytest.raises(InvalidShape):
        render_spray_figure(empty, times=[])


def test_droplet_figure_layout(geodesic):
    svg = render_droplet_figure(geodesic, boost=np.array([3.0, 0.0]))
    assert len(re.findall(r'id="snapshot-\d"', svg)) == 3
    assert 'id="tracks"' in svg
    assert 'id="panel-0"' in svg
    assert svg.count('class="center-track"') == 1
    assert svg.count('class="axis-track"') == 2
    assert "r = 1" in svg


def test_write_svg_creates_directories(tmp_path, geodesic):
    svg = render_droplet_figure(geodesic)
    path = write_svg(str(tmp_path / "figures" / "droplet.svg"), svg)
    with open(path, encoding="utf-8") as f:
        assert f.read() == svg


def test_droplet_figure_matches_golden_layout(geodesic):
    svg = render_droplet_figure(geodesic, boost=np.array([3.0, 0.0]))
    assert _skeleton(svg) == _golden("droplet_figure.skeleton")


def test_spray_figure_matches_golden_layout(spray, geodesic):
    droplets = (
        BoostedDroplet(geodesic, np.array([1.0, 0.0]), np.array([0.0, 0.0]), np.eye(2)),
        BoostedDroplet(geodesic, np.array([1.0, 0.0]), np.array([3.0, 0.0]), np.eye(2)),
    )
    two = EulerSpray(spray.plan, droplets, np.arange(2), 0.0)
    assert _skeleton(render_spray_figure(two)) == _golden("spray_figure.skeleton")
