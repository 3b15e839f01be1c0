"""Track CSV and map document readers/writers.

Track CSV columns follow the Interaction dataset layout::

    track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width

Map documents are JSON::

    {"format": "rrb-map/1",
     "scenes": [{"scene_id": "...", "category": "...",
                 "centerlines": [{"id": 1, "width_m": 3.5,
                                  "vertices": [[x, y], ...],
                                  "successors": [2]}]}]}

``width_m`` may be a scalar or one value per segment.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .scene import DT, Centerline, SceneMap, ScenarioState, build_scenarios

log = logging.getLogger(__name__)

MAP_FORMAT = "rrb-map/1"
TRACK_COLUMNS = ["track_id", "frame_id", "timestamp_ms", "agent_type", "x", "y",
                 "vx", "vy", "psi_rad", "length", "width"]
REQUIRED_COLUMNS = ("track_id", "frame_id", "timestamp_ms", "x", "y")
FRAME_MS = int(round(DT * 1000))


class ParseError(ValueError):
    pass


def map_to_dict(scene_map: SceneMap) -> dict:
    return {
        "scene_id": scene_map.scene_id,
        "category": scene_map.category,
        "centerlines": [
            {
                "id": c.id,
                "width_m": float(c.width[0]) if np.all(c.width == c.width[0]) else c.width.tolist(),
                "vertices": c.polyline.tolist(),
                "successors": list(c.successors),
            }
            for c in scene_map.centerlines
        ],
    }


def map_from_dict(d: dict, cell_size: float = 0.5, confinement_c=None) -> SceneMap:
    try:
        lines = [Centerline(int(c["id"]), c["vertices"], c["width_m"], tuple(c.get("successors", ())))
                 for c in d["centerlines"]]
        return SceneMap(str(d["scene_id"]), tuple(lines), cell_size=cell_size,
                        confinement_c=confinement_c, category=str(d.get("category", "")))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed scene entry: {exc!r}") from exc


def write_map_document(path, maps) -> None:
    doc = {"format": MAP_FORMAT, "scenes": [map_to_dict(m) for m in maps]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_map_document(path, cell_size: float = 0.5) -> dict[str, SceneMap]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not a JSON map document ({exc})") from exc
    if doc.get("format") != MAP_FORMAT:
        raise ParseError(f"{path}: expected format {MAP_FORMAT!r}, got {doc.get('format')!r}")
    maps = {}
    for entry in doc.get("scenes", []):
        m = map_from_dict(entry, cell_size)
        maps[m.scene_id] = m
    return maps


def read_tracks(track_file):
    """Parse a track CSV and resample it onto the 0.5 s frame grid.

    Returns ``(tracks, times, n_skipped)`` suitable for
    :func:`rrbpred.scene.build_scenarios`. Tracks whose sampling is irregular
    or does not divide the frame interval are dropped and counted.
    """
    rows: dict[int, list[tuple[int, float, float]]] = {}
    with open(track_file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}, np.zeros(0), 0
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"{track_file}: row 1: missing columns {missing}")
        col = {c: header.index(c) for c in REQUIRED_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            try:
                tid = int(row[col["track_id"]])
                ts = int(round(float(row[col["timestamp_ms"]])))
                x = float(row[col["x"]])
                y = float(row[col["y"]])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{track_file}: row {lineno}: {exc}") from exc
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ParseError(f"{track_file}: row {lineno}: non-finite coordinate")
            rows.setdefault(tid, []).append((ts, x, y))
    if not rows:
        return {}, np.zeros(0), 0

    t0 = min(r[0] for recs in rows.values() for r in recs)
    kept: dict[int, dict[int, tuple[float, float]]] = {}
    skipped = 0
    for tid in sorted(rows):
        recs = sorted(rows[tid])
        ts = np.array([r[0] for r in recs])
        steps = np.diff(ts)
        if len(ts) > 1 and (np.any(steps != steps[0]) or steps[0] <= 0 or FRAME_MS % steps[0] != 0):
            skipped += 1
            log.warning("track %d: irregular timestamps, skipped", tid)
            continue
        frames = {}
        for t, x, y in recs:
            if (t - t0) % FRAME_MS == 0:
                frames[(t - t0) // FRAME_MS] = (x, y)
        if frames:
            kept[tid] = frames
    if not kept:
        return {}, np.zeros(0), skipped
    n = max(max(f) for f in kept.values()) + 1
    times = (t0 + FRAME_MS * np.arange(n)) / 1000.0
    tracks = {}
    for tid, frames in kept.items():
        xy = np.full((n, 2), np.nan)
        for k, p in frames.items():
            xy[k] = p
        tracks[tid] = xy
    return tracks, times, skipped


def load_interaction_csv(track_file, map_file, scene_id: str | None = None) -> list[ScenarioState]:
    """Load one recording as a list of scenarios, every agent taking a turn as ego.

    The scene is chosen by ``scene_id``, else by the track file stem, else the
    document's only scene.
    """
    maps = read_map_document(map_file)
    if scene_id is None:
        stem = Path(track_file).stem
        if stem in maps:
            scene_id = stem
        elif len(maps) == 1:
            scene_id = next(iter(maps))
        else:
            raise ParseError(f"{map_file}: cannot pick a scene for {track_file}; pass scene_id")
    if scene_id not in maps:
        raise ParseError(f"{map_file}: no scene {scene_id!r}")
    tracks, times, skipped = read_tracks(track_file)
    if skipped:
        log.warning("%s: %d track(s) skipped", track_file, skipped)
    if not tracks:
        return []
    return build_scenarios(maps[scene_id], tracks, times)


def write_tracks_csv(path, tracks: dict, times) -> None:
    """Write tracks (agent id -> (n, 2) positions, NaN = absent) as a track CSV."""
    times = np.asarray(times, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for tid in sorted(tracks):
            xy = tracks[tid]
            for k, (t, p) in enumerate(zip(times, xy)):
                if np.isnan(p[0]):
                    continue
                nxt = xy[min(k + 1, len(xy) - 1)]
                prv = xy[max(k - 1, 0)]
                v = (nxt - prv) / (DT * max(1, min(k + 1, len(xy) - 1) - max(k - 1, 0)))
                if np.any(np.isnan(v)):
                    v = np.zeros(2)
                psi = float(np.arctan2(v[1], v[0]))
                w.writerow([tid, k + 1, int(round(t * 1000)), "car", repr(float(p[0])), repr(float(p[1])),
                            repr(float(v[0])), repr(float(v[1])), repr(psi), 4.5, 1.8])


# ---------------------------------------------------------------------------
# scene records (JSON lines, one recorded scene per line)
# ---------------------------------------------------------------------------

SCENES_FILE = "scenes.jsonl"
MAP_FILE = "map.json"


def scene_record(scene_map: SceneMap, tracks: dict, times) -> dict:
    """One line of a scene file: frame times plus per-agent positions (``null`` = absent)."""
    return {
        "scene_id": scene_map.scene_id,
        "category": scene_map.category,
        "times": [float(t) for t in times],
        "tracks": {str(aid): [None if np.isnan(p[0]) else [float(p[0]), float(p[1])] for p in tracks[aid]]
                   for aid in sorted(tracks)},
    }


def write_dataset(directory, scenes) -> tuple[Path, Path]:
    """Write ``(SceneMap, tracks, times)`` triples as a scene file plus one map document."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scenes = list(scenes)
    scenes_path, map_path = directory / SCENES_FILE, directory / MAP_FILE
    with open(scenes_path, "w") as fh:
        for m, tracks, times in scenes:
            fh.write(json.dumps(scene_record(m, tracks, times), sort_keys=True) + "\n")
    write_map_document(map_path, [m for m, _, _ in scenes])
    return scenes_path, map_path


def read_scene_records(path, maps: dict[str, SceneMap]) -> list[tuple]:
    """Inverse of :func:`write_dataset` for the scene file; maps come from the map document."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                scene_map = maps[rec["scene_id"]]
                times = np.array(rec["times"], dtype=float)
                tracks = {}
                for aid, pts in rec["tracks"].items():
                    xy = np.array([[np.nan, np.nan] if p is None else p for p in pts], dtype=float)
                    if xy.shape != (len(times), 2):
                        raise ParseError(f"{path}: line {lineno}: track {aid} has {len(xy)} frames, "
                                         f"expected {len(times)}")
                    tracks[int(aid)] = xy
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            except KeyError as exc:
                raise ParseError(f"{path}: line {lineno}: unknown scene or missing field {exc}") from exc
            out.append((scene_map, tracks, times))
    return out


def load_dataset(directory) -> list[ScenarioState]:
    """All scenarios of a directory written by :func:`write_dataset`."""
    directory = Path(directory)
    maps = read_map_document(directory / MAP_FILE)
    out = []
    for m, tracks, times in read_scene_records(directory / SCENES_FILE, maps):
        out += build_scenarios(m, tracks, times)
    return out
