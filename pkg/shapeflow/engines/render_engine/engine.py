import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape

from ..common import setup_engine_environment
from ..droplet_engine.engine import BoostedDroplet, DropletGeodesic
from ..spray_engine.engine import EulerSpray
from ...errors import InvalidShape
from ...shape_utils import Ellipsoid

# Setup environment and logging
logger = setup_engine_environment(__file__)

TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates")
FIGURE_TEMPLATE = "figure.svg.j2"

PANEL_PX = 240.0
MARGIN_PX = 20.0
LABEL_PX = 18.0
GAP_PX = 24.0
PAD_FRACTION = 0.08
DROPLET_FILL = "#a6cee3"
DROPLET_STROKE = "#1f78b4"
WASSERSTEIN_STROKE = "#333333"
TRACK_SAMPLES = 33

_ENV = Environment(
    loader=FileSystemLoader(TEMPLATE_DIR),
    autoescape=select_autoescape(enabled_extensions=("j2",), default_for_string=True),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)


# =======================
# Geometry Helpers
# =======================

def fmt(x: float) -> str:
    """Fixed four-decimal number without a negative zero."""
    v = round(float(x), 4)
    return f"{0.0 if v == 0 else v:.4f}"


def shade(index: int, lightness: int = 62) -> str:
    """Deterministic color per droplet index; the same index gets the same hue in every panel."""
    return f"hsl({(index * 137) % 360},55%,{lightness}%)"


def projected_ellipse(ellipsoid: Ellipsoid) -> Tuple[np.ndarray, float, float, float]:
    """
    Outline of the projection onto the first two coordinates.

    Returns:
        tuple: (center (2,), major semi-axis, minor semi-axis, angle of the major axis in degrees)
    """
    d = ellipsoid.dimension
    m = ellipsoid.matrix()
    if d == 1:
        a = float(m[0, 0])
        return np.array([ellipsoid.center[0], 0.0]), abs(a), 0.15 * abs(a), 0.0
    cov = (m @ m.T)[:2, :2]
    vals, vecs = np.linalg.eigh(cov)
    major = vecs[:, 1]
    if major[0] < 0 or (major[0] == 0 and major[1] < 0):
        major = -major
    angle = float(np.degrees(np.arctan2(major[1], major[0])))
    return ellipsoid.center[:2].copy(), float(np.sqrt(max(vals[1], 0.0))), float(np.sqrt(max(vals[0], 0.0))), angle


def _bounds(ellipses: Sequence[Ellipsoid], points: Sequence[np.ndarray] = ()) -> Tuple[np.ndarray, np.ndarray]:
    lo = np.full(2, np.inf)
    hi = np.full(2, -np.inf)
    for e in ellipses:
        center, major, _, _ = projected_ellipse(e)
        lo = np.minimum(lo, center - major)
        hi = np.maximum(hi, center + major)
    for p in points:
        pts = np.atleast_2d(p)[:, :2]
        if pts.shape[1] == 1:
            pts = np.column_stack([pts[:, 0], np.zeros(len(pts))])
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    if not np.all(np.isfinite(lo)):
        return np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    span = np.maximum(hi - lo, 1e-9)
    pad = PAD_FRACTION * float(span.max())
    return lo - pad, hi + pad


class _Viewport:
    """World window mapped into a pixel panel with the y axis pointing up."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, left: float, top: float):
        span = hi - lo
        self.scale = PANEL_PX / float(span.max())
        self.lo = lo
        self.hi = hi
        self.left = left
        self.top = top
        self.width = float(span[0]) * self.scale
        self.height = float(span[1]) * self.scale

    def point(self, p: np.ndarray) -> Tuple[float, float]:
        x = self.left + (p[0] - self.lo[0]) * self.scale
        y = self.top + (self.hi[1] - p[1]) * self.scale
        return x, y

    def ellipse(self, e: Ellipsoid, cls: str, fill: str, stroke: str, stroke_width: float = 1.0,
                dash: Optional[str] = None) -> Dict[str, str]:
        center, major, minor, angle = projected_ellipse(e)
        cx, cy = self.point(center)
        return {
            "cls": cls, "cx": fmt(cx), "cy": fmt(cy), "rx": fmt(major * self.scale), "ry": fmt(minor * self.scale),
            "angle": fmt(-angle), "fill": fill, "stroke": stroke, "stroke_width": fmt(stroke_width), "dash": dash,
        }

    def polyline(self, points: np.ndarray, cls: str, stroke: str, stroke_width: float = 0.75,
                 dash: Optional[str] = None) -> Dict[str, str]:
        pts = np.atleast_2d(points)
        if pts.shape[1] == 1:
            pts = np.column_stack([pts[:, 0], np.zeros(len(pts))])
        coords = " ".join(f"{fmt(x)},{fmt(y)}" for x, y in (self.point(p) for p in pts))
        return {"cls": cls, "points": coords, "stroke": stroke, "stroke_width": fmt(stroke_width), "dash": dash}

    def panel(self, panel_id: str, label: Optional[str], groups: List[Dict[str, Any]]) -> Dict[str, Any]:
        origin_inside_y = self.lo[1] <= 0.0 <= self.hi[1]
        origin_inside_x = self.lo[0] <= 0.0 <= self.hi[0]
        y0 = self.point(np.zeros(2))[1] if origin_inside_y else self.top + self.height
        x0 = self.point(np.zeros(2))[0] if origin_inside_x else self.left
        return {
            "id": panel_id,
            "frame": {"x": fmt(self.left), "y": fmt(self.top), "width": fmt(self.width), "height": fmt(self.height)},
            "xaxis": {"x1": fmt(self.left), "y1": fmt(y0), "x2": fmt(self.left + self.width), "y2": fmt(y0)},
            "yaxis": {"x1": fmt(x0), "y1": fmt(self.top), "x2": fmt(x0), "y2": fmt(self.top + self.height)},
            "label": None if label is None else {"x": fmt(self.left), "y": fmt(self.top - 6.0), "text": label},
            "groups": groups,
        }


def _render(title: str, panels: List[Dict[str, Any]], width: float, height: float) -> str:
    return _ENV.get_template(FIGURE_TEMPLATE).render(
        title=title, panels=panels, width=fmt(width), height=fmt(height),
    )


# =======================
# Figures
# =======================

def render_spray_figure(spray: EulerSpray, times: Sequence[float] = (0.0, 0.5, 1.0)) -> str:
    """
    Side-by-side snapshots of an Euler spray: the source decomposition into
    balls, intermediate droplets and expanded droplets with their nested
    Wasserstein outlines. A droplet keeps its shade in every panel.
    """
    times = [float(t) for t in times]
    if not times:
        raise InvalidShape("At least one snapshot time is required")
    snapshots = [[dr.ellipsoid(t) for dr in spray.droplets] for t in times]
    outlines = [[dr.wasserstein_ellipsoid(t) for dr in spray.droplets] if t > 0 else [] for t in times]
    lo, hi = _bounds([e for group in snapshots + outlines for e in group])

    panels = []
    left = MARGIN_PX
    top = MARGIN_PX + LABEL_PX
    height = 0.0
    for k, t in enumerate(times):
        view = _Viewport(lo, hi, left, top)
        groups = []
        for i, dr in enumerate(spray.droplets):
            ellipses = [view.ellipse(snapshots[k][i], "droplet", shade(i), shade(i, 35), 0.75)]
            if outlines[k]:
                ellipses.append(view.ellipse(outlines[k][i], "wasserstein", "none", shade(i, 25), 0.5, "2,1.5"))
            groups.append({"cls": "droplet-group", "id": f"panel-{k}-droplet-{i}", "ellipses": ellipses, "polylines": []})
        panels.append(view.panel(f"panel-{k}", f"t = {t:.2f}", groups))
        left += view.width + GAP_PX
        height = max(height, view.height)
    logger.info(f"Rendered spray figure: {len(spray.droplets)} droplets at {len(times)} times")
    return _render("Euler spray", panels, left - GAP_PX + MARGIN_PX, top + height + MARGIN_PX)


def render_droplet_figure(
    geodesic: DropletGeodesic,
    boost: Optional[np.ndarray] = None,
    times: Sequence[float] = (0.0, 0.5, 1.0),
) -> str:
    """
    One boosted droplet at several times on a common canvas, so the snapshots
    sit offset by b·t. Each snapshot nests the droplet inside the linearly
    interpolated ellipsoid; center and axis-endpoint tracks join them.
    Without a boost the snapshots are separated along the first axis.
    """
    d = geodesic.dimension
    if boost is None:
        extent = float(max(np.max(geodesic.a), np.max(geodesic.start), np.max(geodesic.end)))
        boost = np.zeros(d)
        boost[0] = 4.5 * extent
    droplet = BoostedDroplet(geodesic, np.asarray(boost, dtype=float), np.zeros(d), np.eye(d))
    times = [float(t) for t in times]
    track_times = np.linspace(0.0, 1.0, TRACK_SAMPLES)

    centers = np.array([droplet.center(t) for t in track_times])
    endpoints = []
    for j in range(d):
        track = []
        for t in track_times:
            a = droplet.ellipsoid(t).semi_axes
            track.append(droplet.center(t) + a[j] * droplet.rotation[:, j])
        endpoints.append(np.array(track))

    droplets = [droplet.ellipsoid(t) for t in times]
    outlines = [droplet.wasserstein_ellipsoid(t) for t in times]
    lo, hi = _bounds(droplets + outlines, [centers] + endpoints)
    view = _Viewport(lo, hi, MARGIN_PX, MARGIN_PX + LABEL_PX)

    groups = []
    for k, t in enumerate(times):
        groups.append({
            "cls": "snapshot",
            "id": f"snapshot-{k}",
            "ellipses": [
                view.ellipse(outlines[k], "wasserstein", "none", WASSERSTEIN_STROKE, 0.75, "3,2"),
                view.ellipse(droplets[k], "droplet", DROPLET_FILL, DROPLET_STROKE, 0.75),
            ],
            "polylines": [],
        })
    tracks = [view.polyline(centers, "center-track", "#666666", 0.5, "1,2")]
    tracks += [view.polyline(track, "axis-track", DROPLET_STROKE, 0.5, "1,2") for track in endpoints]
    groups.append({"cls": "tracks", "id": "tracks", "ellipses": [], "polylines": tracks})

    label = f"r = {geodesic.r:.3g}, |b| = {float(np.linalg.norm(droplet.boost)):.3g}"
    panel = view.panel("panel-0", label, groups)
    logger.info(f"Rendered droplet figure with {len(times)} snapshots")
    return _render("Euler droplet", [panel], view.width + 2 * MARGIN_PX, view.height + LABEL_PX + 2 * MARGIN_PX)


def write_svg(path: str, svg: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(svg)
    return path
