"""Scene data model: lanes, drivable raster, agent histories and scenarios."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .geometry import Polyline, point_segment_distance

T_OBS = 5
T_PRED = 10
DT = 0.5
RASTER_MARGIN = 10.0
DEFAULT_CELL_SIZE = 0.5


class SceneError(ValueError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


class TrackPoint(NamedTuple):
    x: float
    y: float
    t: float


@dataclass(frozen=True, eq=False)
class AgentHistory:
    """``T_OBS`` observed positions of one agent, oldest first."""

    agent_id: int
    xy: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        xy = _frozen(self.xy)
        t = _frozen(self.t)
        if xy.shape != (T_OBS, 2) or t.shape != (T_OBS,):
            raise SceneError(f"agent {self.agent_id}: history must hold {T_OBS} points")
        if not np.allclose(np.diff(t), DT):
            raise SceneError(f"agent {self.agent_id}: history spacing must be {DT} s")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "t", t)

    @property
    def points(self) -> list[TrackPoint]:
        return [TrackPoint(float(x), float(y), float(t)) for (x, y), t in zip(self.xy, self.t)]

    @property
    def last(self) -> np.ndarray:
        return self.xy[-1]

    def __eq__(self, other):
        if not isinstance(other, AgentHistory):
            return NotImplemented
        return (self.agent_id == other.agent_id and np.array_equal(self.xy, other.xy)
                and np.array_equal(self.t, other.t))


@dataclass(frozen=True, eq=False)
class Centerline:
    id: int
    polyline: np.ndarray
    width: np.ndarray
    successors: tuple = ()

    def __post_init__(self):
        line = Polyline(self.polyline)
        nseg = len(line.seg_lengths)
        w = np.broadcast_to(np.asarray(self.width, dtype=float), (nseg,)).copy()
        if np.any(w <= 0.0):
            raise SceneError(f"centerline {self.id}: width must be positive")
        object.__setattr__(self, "polyline", line.vertices)
        object.__setattr__(self, "width", _frozen(w))
        object.__setattr__(self, "successors", tuple(int(s) for s in self.successors))
        object.__setattr__(self, "_line", line)

    @property
    def line(self) -> Polyline:
        return self._line

    def __eq__(self, other):
        if not isinstance(other, Centerline):
            return NotImplemented
        return (self.id == other.id and np.array_equal(self.polyline, other.polyline)
                and np.array_equal(self.width, other.width) and self.successors == other.successors)


def rasterize_drivable(centerlines: Sequence[Centerline], cell_size: float = DEFAULT_CELL_SIZE,
                       margin: float = RASTER_MARGIN):
    """Boolean drivable grid from lane bands.

    A cell is drivable iff its center lies within half the segment width of
    some centerline segment. Returns ``(grid, origin)`` where ``grid[iy, ix]``
    covers the square with lower-left corner ``origin + cell_size * (ix, iy)``.
    """
    if cell_size <= 0:
        raise SceneError("cell_size must be positive")
    if not centerlines:
        raise SceneError("cannot rasterize an empty centerline list")
    verts = np.concatenate([c.polyline for c in centerlines])
    lo = verts.min(axis=0) - margin
    hi = verts.max(axis=0) + margin
    # the lattice moves with the map, so translating a scene leaves decisions unchanged
    origin = lo
    shape = np.ceil((hi - origin) / cell_size).astype(int) + 1
    nx, ny = int(shape[0]), int(shape[1])
    grid = np.zeros((ny, nx), dtype=bool)
    for c in centerlines:
        for (a, b), half in zip(zip(c.polyline[:-1], c.polyline[1:]), c.width / 2.0):
            blo = np.minimum(a, b) - half
            bhi = np.maximum(a, b) + half
            ix0 = max(int(math.floor((blo[0] - origin[0]) / cell_size)), 0)
            iy0 = max(int(math.floor((blo[1] - origin[1]) / cell_size)), 0)
            ix1 = min(int(math.ceil((bhi[0] - origin[0]) / cell_size)) + 1, nx)
            iy1 = min(int(math.ceil((bhi[1] - origin[1]) / cell_size)) + 1, ny)
            cx = origin[0] + (np.arange(ix0, ix1) + 0.5) * cell_size
            cy = origin[1] + (np.arange(iy0, iy1) + 0.5) * cell_size
            gx, gy = np.meshgrid(cx, cy)
            pts = np.stack([gx, gy], axis=-1)
            grid[iy0:iy1, ix0:ix1] |= point_segment_distance(pts, a, b) <= half
    return grid, origin


def compute_confinement_c(scene_map_or_lines) -> float:
    """Half of the narrowest lane segment width."""
    lines = getattr(scene_map_or_lines, "centerlines", scene_map_or_lines)
    if not lines:
        raise SceneError("need at least one centerline")
    return float(min(c.width.min() for c in lines)) / 2.0


@dataclass(frozen=True, eq=False)
class SceneMap:
    """Lane centerlines plus the drivable raster derived from them.

    ``confinement_c`` defaults to half the minimum lane width and may be
    overridden per scene.
    """

    scene_id: str
    centerlines: tuple
    cell_size: float = DEFAULT_CELL_SIZE
    confinement_c: Optional[float] = None
    category: str = ""
    raster: np.ndarray = field(default=None, repr=False)
    origin: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        lines = tuple(self.centerlines)
        if not lines:
            raise SceneError(f"scene {self.scene_id}: no centerlines")
        ids = [c.id for c in lines]
        if len(set(ids)) != len(ids):
            raise SceneError(f"scene {self.scene_id}: duplicate centerline ids")
        object.__setattr__(self, "centerlines", lines)
        c = compute_confinement_c(lines) if self.confinement_c is None else float(self.confinement_c)
        if c <= 0:
            raise SceneError("confinement_c must be positive")
        object.__setattr__(self, "confinement_c", c)
        grid, origin = rasterize_drivable(lines, self.cell_size)
        grid.flags.writeable = False
        object.__setattr__(self, "raster", grid)
        object.__setattr__(self, "origin", _frozen(origin))
        object.__setattr__(self, "_by_id", {cl.id: cl for cl in lines})

    def centerline(self, cid: int) -> Centerline:
        return self._by_id[cid]

    def is_drivable(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        idx = np.floor((p - self.origin) / self.cell_size).astype(int)
        ny, nx = self.raster.shape
        ix, iy = idx[..., 0], idx[..., 1]
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        out = np.zeros(p.shape[:-1], dtype=bool)
        out[inside] = self.raster[iy[inside], ix[inside]]
        return out

    def __eq__(self, other):
        if not isinstance(other, SceneMap):
            return NotImplemented
        return (self.scene_id == other.scene_id and self.centerlines == other.centerlines
                and self.cell_size == other.cell_size and self.confinement_c == other.confinement_c)

    def __hash__(self):
        return hash(self.scene_id)


def project_to_centerline(p, scene_map: SceneMap) -> tuple[int, float, float]:
    """Nearest centerline by |lateral offset|; exact ties go to the smaller id."""
    best = None
    for c in sorted(scene_map.centerlines, key=lambda c: c.id):
        s, d = c.line.project(p)
        if best is None or abs(d) < abs(best[2]) - 1e-12:
            best = (c.id, s, d)
    return best


def walk_centerline(scene_map: SceneMap, centerline_id: int, s0: float, ds: float) -> np.ndarray:
    if s0 < 0:
        raise SceneError("s0 must be non-negative")
    return scene_map.centerline(centerline_id).line.point_at(s0 + ds)


@dataclass(frozen=True, eq=False)
class ScenarioState:
    """Model input at one anchor time: ego history, other agents and the map."""

    ego: AgentHistory
    others: tuple
    map: SceneMap
    ground_truth: Optional[np.ndarray] = None
    anchor_time: float = 0.0

    def __post_init__(self):
        others = tuple(self.others)
        if any(o.agent_id == self.ego.agent_id for o in others):
            raise SceneError("ego must not appear among the other agents")
        object.__setattr__(self, "others", others)
        if self.ground_truth is not None:
            gt = _frozen(self.ground_truth)
            if gt.shape != (T_PRED, 2):
                raise SceneError(f"ground truth must hold {T_PRED} points")
            object.__setattr__(self, "ground_truth", gt)

    @property
    def category(self) -> str:
        return self.map.category or self.map.scene_id

    @property
    def key(self) -> str:
        return f"{self.map.scene_id}/{self.ego.agent_id}/{self.anchor_time:.1f}"

    def __eq__(self, other):
        if not isinstance(other, ScenarioState):
            return NotImplemented
        gt_eq = (self.ground_truth is None and other.ground_truth is None) or (
            self.ground_truth is not None and other.ground_truth is not None
            and np.array_equal(self.ground_truth, other.ground_truth))
        return (self.ego == other.ego and self.others == other.others and self.map == other.map
                and gt_eq and self.anchor_time == other.anchor_time)


def build_scenarios(scene_map: SceneMap, tracks: dict, times: np.ndarray) -> list[ScenarioState]:
    """Slide an anchor over a scene's frame grid.

    ``tracks`` maps agent id to an ``(n_frames, 2)`` array with NaN rows for
    frames where the agent is absent; ``times`` holds the frame timestamps.
    Every agent with ``T_OBS`` past and ``T_PRED`` future frames around an
    anchor becomes ego once for that anchor.
    """
    times = np.asarray(times, dtype=float)
    n = len(times)
    present = {aid: ~np.isnan(xy[:, 0]) for aid, xy in tracks.items()}
    out = []
    for a in range(T_OBS - 1, n - T_PRED):
        hist = slice(a - T_OBS + 1, a + 1)
        fut = slice(a + 1, a + 1 + T_PRED)
        observed = {aid: AgentHistory(aid, tracks[aid][hist], times[hist])
                    for aid in sorted(tracks) if present[aid][hist].all()}
        for aid in sorted(observed):
            if not present[aid][fut].all():
                continue
            others = tuple(h for oid, h in observed.items() if oid != aid)
            out.append(ScenarioState(observed[aid], others, scene_map,
                                     tracks[aid][fut], float(times[a])))
    return out
