"""Desk-scale synthetic traffic scenes.

Three road templates (``straight``, ``curve``, ``t_intersection``) are
populated with car-following agents: intelligent-driver longitudinal
control behind same-lane leaders, smoothly varying desired speeds, a
curvature speed limit, and a slowly drifting lateral offset from the lane
center. Frames are emitted at the 0.5 s model rate.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .geometry import Polyline
from .scene import DT, Centerline, SceneMap, ScenarioState, build_scenarios

TEMPLATES = ("straight", "curve", "t_intersection")
SIM_SUBSTEPS = 5
WARMUP_S = 2.5
VEHICLE_LENGTH = 4.5
LAT_ACCEL_MAX = 2.0
INITIAL_SPEED_SPREAD = 1.5  # start near the desired speed

# intelligent driver model
IDM_A = 1.5
IDM_B = 2.0
IDM_HEADWAY = 1.2
IDM_MIN_GAP = 2.0
DECEL_LIMIT = 5.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    template: str = "straight"
    road_width: float = 6.0
    n_agents: int = 3
    speed_range: tuple = (6.0, 14.0)
    n_frames: int = 20
    curve_radius: tuple = (25.0, 45.0)
    turn_radius: tuple = (10.0, 15.0)
    lateral_offset_max: float = 0.6
    same_direction_prob: float = 0.8

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ConfigError(f"template: unknown template {self.template!r}; expected one of {TEMPLATES}")
        if self.road_width <= 2 * self.lateral_offset_max:
            raise ConfigError("road_width must exceed twice lateral_offset_max")
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        object.__setattr__(self, "speed_range", tuple(float(v) for v in self.speed_range))
        object.__setattr__(self, "curve_radius", tuple(float(v) for v in self.curve_radius))
        object.__setattr__(self, "turn_radius", tuple(float(v) for v in self.turn_radius))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic spec key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class _PathBuilder:
    """Dense polyline from straight and circular pieces; tracks curvature."""

    def __init__(self, start=(0.0, 0.0), heading=0.0, step=1.0):
        self.points = [np.array(start, dtype=float)]
        self.heading = heading
        self.step = step
        self.s = 0.0
        self.arcs = []  # (s_start, s_end, radius)

    def straight(self, length):
        n = max(1, int(math.ceil(length / self.step)))
        d = np.array([math.cos(self.heading), math.sin(self.heading)])
        p0 = self.points[-1]
        for k in range(1, n + 1):
            self.points.append(p0 + d * length * k / n)
        self.s += length
        return self

    def arc(self, radius, angle):
        """Turn by ``angle`` radians (positive = left) on a circle of ``radius``."""
        sign = 1.0 if angle > 0 else -1.0
        n = max(2, int(math.ceil(abs(angle) / math.radians(2.0))))
        p0 = self.points[-1]
        center = p0 + sign * radius * np.array([-math.sin(self.heading), math.cos(self.heading)])
        a0 = self.heading - sign * math.pi / 2
        for k in range(1, n + 1):
            a = a0 + angle * k / n
            self.points.append(center + radius * np.array([math.cos(a), math.sin(a)]))
        self.heading += angle
        self.arcs.append((self.s, self.s + radius * abs(angle), radius))
        self.s += radius * abs(angle)
        return self

    def vertices(self):
        return np.array(self.points)


def _offset_reverse(vertices: np.ndarray, offset: float) -> np.ndarray:
    """Parallel lane shifted left by ``offset`` and traversed the other way."""
    seg = np.diff(vertices, axis=0)
    tang = seg / np.linalg.norm(seg, axis=1)[:, None]
    vt = np.vstack([tang[:1], tang[:-1] + tang[1:], tang[-1:]])
    vt /= np.linalg.norm(vt, axis=1)[:, None]
    normal = np.stack([-vt[:, 1], vt[:, 0]], axis=1)
    return (vertices + offset * normal)[::-1]


def _build_map(spec: SyntheticSpec, rng: np.random.Generator, scene_id: str):
    """Return (SceneMap, routes, arcs) where routes maps name -> lane id list."""
    w = spec.road_width
    arcs = {}
    if spec.template == "straight":
        east = _PathBuilder((-60.0, 0.0)).straight(460.0)
        lines = [Centerline(1, east.vertices(), w), Centerline(2, _offset_reverse(east.vertices(), w), w)]
        routes = {"main": [1], "oncoming": [2]}
    elif spec.template == "curve":
        radius = float(rng.uniform(*spec.curve_radius))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        path = _PathBuilder((-60.0, 0.0)).straight(140.0).arc(radius, sign * math.pi / 2).straight(320.0)
        lines = [Centerline(1, path.vertices(), w), Centerline(2, _offset_reverse(path.vertices(), w), w)]
        routes = {"main": [1], "oncoming": [2]}
        arcs[1] = path.arcs
    else:
        radius = float(rng.uniform(*spec.turn_radius))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        approach = _PathBuilder((-60.0, 0.0)).straight(140.0)
        jx = approach.vertices()[-1]
        through = _PathBuilder(jx).straight(320.0)
        turn = _PathBuilder(jx).arc(radius, -sign * math.pi / 2).straight(300.0)
        lines = [
            Centerline(1, approach.vertices(), w, (2, 3)),
            Centerline(2, through.vertices(), w),
            Centerline(3, turn.vertices(), w),
            Centerline(4, _offset_reverse(np.vstack([approach.vertices(), through.vertices()[1:]]), w), w),
        ]
        routes = {"main": [1, 2], "turn": [1, 3], "oncoming": [4]}
        arcs[3] = turn.arcs
    return SceneMap(scene_id, tuple(lines), category=spec.template), routes, arcs


class _Route:
    def __init__(self, scene_map: SceneMap, lane_ids, lane_arcs):
        self.lane_ids = list(lane_ids)
        verts = [scene_map.centerline(lane_ids[0]).polyline]
        self.lane_start = [0.0]
        self.arcs = []
        s = 0.0
        for k, lid in enumerate(lane_ids):
            line = scene_map.centerline(lid).line
            if k:
                verts.append(line.vertices[1:])
                self.lane_start.append(s)
            self.arcs += [(s + a, s + b, r) for a, b, r in lane_arcs.get(lid, [])]
            s += line.length
        self.lane_start.append(s)
        self.line = Polyline(np.vstack(verts))

    def lane_at(self, s: float) -> int:
        for k, lid in enumerate(self.lane_ids):
            if s < self.lane_start[k + 1]:
                return lid
        return self.lane_ids[-1]

    def speed_limit(self, s: float, lookahead: float) -> float:
        lim = math.inf
        for a, b, r in self.arcs:
            if b >= s and a <= s + lookahead:
                lim = min(lim, math.sqrt(LAT_ACCEL_MAX * r))
        return lim


def _simulate(spec: SyntheticSpec, rng: np.random.Generator, scene_map, routes, arcs):
    route_objs = {name: _Route(scene_map, ids, arcs) for name, ids in routes.items()}
    forward = [n for n in routes if n != "oncoming"]
    agents = []
    # fill each direction from the back so nobody starts before the lane does
    next_s = {"fwd": float(rng.uniform(5.0, 20.0)), "oncoming": float(rng.uniform(5.0, 20.0))}
    for _ in range(spec.n_agents):
        if rng.random() < spec.same_direction_prob:
            name = forward[int(rng.integers(len(forward)))]
            pool = "fwd"
        else:
            name, pool = "oncoming", "oncoming"
        s0 = next_s[pool]
        next_s[pool] = s0 + float(rng.uniform(14.0, 35.0))
        lo, hi = spec.speed_range
        v_base = float(rng.uniform(lo, hi))
        agents.append({
            "route": route_objs[name],
            "s": s0,
            "v": max(0.0, v_base + float(rng.uniform(-INITIAL_SPEED_SPREAD, INITIAL_SPEED_SPREAD))),
            "v_base": v_base,
            "v_amp": float(rng.uniform(0.0, 2.5)),
            "v_freq": float(rng.uniform(0.15, 0.5)),
            "v_phase": float(rng.uniform(0.0, 2 * math.pi)),
            "o_base": float(rng.uniform(-0.6, 0.6)) * spec.lateral_offset_max,
            "o_amp": float(rng.uniform(0.0, 0.4)) * spec.lateral_offset_max,
            "o_freq": float(rng.uniform(0.1, 0.4)),
            "o_phase": float(rng.uniform(0.0, 2 * math.pi)),
        })

    h = DT / SIM_SUBSTEPS
    n_warm = int(round(WARMUP_S / DT)) * SIM_SUBSTEPS
    n_total = n_warm + (spec.n_frames - 1) * SIM_SUBSTEPS
    out = np.zeros((len(agents), spec.n_frames, 2))
    for k in range(n_total + 1):
        t = (k - n_warm) * h
        if k >= n_warm and (k - n_warm) % SIM_SUBSTEPS == 0:
            f = (k - n_warm) // SIM_SUBSTEPS
            for i, a in enumerate(agents):
                off = a["o_base"] + a["o_amp"] * math.sin(a["o_freq"] * t + a["o_phase"])
                line = a["route"].line
                out[i, f] = line.point_at(a["s"]) + off * line.normal_at(a["s"])
        if k == n_total:
            break
        acc = []
        for i, a in enumerate(agents):
            route = a["route"]
            v0 = a["v_base"] + a["v_amp"] * math.sin(a["v_freq"] * t + a["v_phase"])
            v0 = max(1.0, min(v0, route.speed_limit(a["s"], 3.0 * a["v"] + 10.0)))
            accel = IDM_A * (1.0 - (a["v"] / v0) ** 4)
            gap, dv = math.inf, 0.0
            for j, b in enumerate(agents):
                if j == i or b["s"] <= a["s"]:
                    continue
                if b["route"].lane_at(b["s"]) not in route.lane_ids or b["route"].lane_ids[0] != route.lane_ids[0]:
                    continue
                g = b["s"] - a["s"] - VEHICLE_LENGTH
                if g < gap:
                    gap, dv = g, a["v"] - b["v"]
            if math.isfinite(gap):
                s_star = IDM_MIN_GAP + max(0.0, a["v"] * IDM_HEADWAY + a["v"] * dv / (2 * math.sqrt(IDM_A * IDM_B)))
                accel -= IDM_A * (s_star / max(gap, 0.5)) ** 2
            acc.append(max(accel, -DECEL_LIMIT))
        for a, acc_i in zip(agents, acc):
            v_new = max(0.0, a["v"] + acc_i * h)
            a["s"] += 0.5 * (a["v"] + v_new) * h
            a["v"] = v_new
    return out


def scene_seed(base_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{base_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def simulate_scene(spec: SyntheticSpec, seed: int):
    """Raw tracks for one synthetic scene: ``(SceneMap, tracks, times)``."""
    rng = np.random.default_rng(seed)
    scene_map, routes, arcs = _build_map(spec, rng, f"{spec.template}-{seed}")
    xy = _simulate(spec, rng, scene_map, routes, arcs)
    tracks = {i + 1: xy[i] for i in range(len(xy))}
    times = np.arange(spec.n_frames) * DT
    return scene_map, tracks, times


def generate_synthetic_scene(spec: SyntheticSpec, seed: int) -> tuple[SceneMap, list[ScenarioState]]:
    scene_map, tracks, times = simulate_scene(spec, seed)
    return scene_map, build_scenarios(scene_map, tracks, times)


@dataclass
class SyntheticSuite:
    """Several templates' worth of scenes, ready to be split."""

    scenes: list = field(default_factory=list)  # (SceneMap, tracks, times)

    def scenarios(self) -> list[ScenarioState]:
        out = []
        for m, tracks, times in self.scenes:
            out += build_scenarios(m, tracks, times)
        return out


def generate_suite(n_scenes: int, seed: int, templates=TEMPLATES, agents=(3, 6), **spec_kw) -> SyntheticSuite:
    """Round-robin over templates; scene ``i`` is seeded from ``(seed, i)``."""
    suite = SyntheticSuite()
    for i in range(n_scenes):
        s = scene_seed(seed, i)
        template = templates[i % len(templates)]
        n_agents = agents[0] + s % (agents[1] - agents[0] + 1)
        spec = SyntheticSpec(template=template, n_agents=n_agents, **spec_kw)
        suite.scenes.append(simulate_scene(spec, s))
    return suite


def spec_json(spec: SyntheticSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
