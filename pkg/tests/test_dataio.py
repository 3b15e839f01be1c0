import json

import numpy as np
import pytest

from rrbpred.dataio import (MAP_FILE, SCENES_FILE, ParseError, load_dataset, read_map_document,
                            read_scene_records, scene_record, write_dataset, write_map_document)
from rrbpred.scene import build_scenarios

from conftest import straight_map


def scenes_of(suite, n=4):
    return suite.scenes[:n]


class TestSceneRecords:
    def test_absent_frames_are_null(self):
        m = straight_map()
        xy = np.array([[0.0, 0.0], [np.nan, np.nan], [1.0, 0.5]])
        rec = scene_record(m, {7: xy}, [0.0, 0.5, 1.0])
        assert rec["tracks"] == {"7": [[0.0, 0.0], None, [1.0, 0.5]]}
        assert rec["category"] == "straight"

    def test_round_trip(self, small_suite, tmp_path):
        scenes = scenes_of(small_suite)
        write_dataset(tmp_path, scenes)
        maps = read_map_document(tmp_path / MAP_FILE)
        back = read_scene_records(tmp_path / SCENES_FILE, maps)
        assert len(back) == len(scenes)
        for (m, tr, t), (m2, tr2, t2) in zip(scenes, back):
            assert m2.scene_id == m.scene_id and m2.category == m.category
            np.testing.assert_array_equal(t, t2)
            assert sorted(tr) == sorted(tr2)
            for aid in tr:
                np.testing.assert_array_equal(tr[aid], tr2[aid])
            np.testing.assert_array_equal(m.raster, m2.raster)

    def test_load_dataset_matches_in_memory(self, small_suite, tmp_path):
        scenes = scenes_of(small_suite)
        write_dataset(tmp_path, scenes)
        expected = [s for m, tr, t in scenes for s in build_scenarios(m, tr, t)]
        got = load_dataset(tmp_path)
        assert [s.key for s in got] == [s.key for s in expected]
        for a, b in zip(got, expected):
            np.testing.assert_array_equal(a.ground_truth, b.ground_truth)

    def test_bytes_reproducible(self, small_suite, tmp_path):
        write_dataset(tmp_path / "a", scenes_of(small_suite))
        write_dataset(tmp_path / "b", scenes_of(small_suite))
        for name in (SCENES_FILE, MAP_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestParseErrors:
    def test_bad_json_line_number(self, small_suite, tmp_path):
        write_dataset(tmp_path, scenes_of(small_suite, 2))
        path = tmp_path / SCENES_FILE
        path.write_text(path.read_text() + "{not json\n")
        with pytest.raises(ParseError, match="line 3"):
            read_scene_records(path, read_map_document(tmp_path / MAP_FILE))

    def test_unknown_scene(self, tmp_path):
        path = tmp_path / SCENES_FILE
        path.write_text(json.dumps({"scene_id": "nowhere", "times": [], "tracks": {}}) + "\n")
        with pytest.raises(ParseError, match="line 1"):
            read_scene_records(path, {})

    def test_ragged_track(self, tmp_path):
        m = straight_map()
        path = tmp_path / SCENES_FILE
        path.write_text(json.dumps({"scene_id": m.scene_id, "times": [0.0, 0.5], "tracks": {"1": [[0, 0]]}}) + "\n")
        with pytest.raises(ParseError, match="track 1"):
            read_scene_records(path, {m.scene_id: m})

    def test_wrong_map_format(self, tmp_path):
        path = tmp_path / MAP_FILE
        path.write_text(json.dumps({"format": "other", "scenes": []}))
        with pytest.raises(ParseError, match="format"):
            read_map_document(path)

    def test_malformed_map_entry(self, tmp_path):
        path = tmp_path / MAP_FILE
        path.write_text(json.dumps({"format": "rrb-map/1", "scenes": [{"scene_id": "x"}]}))
        with pytest.raises(ParseError, match="malformed"):
            read_map_document(path)

    def test_map_document_round_trip(self, tmp_path):
        m = straight_map(width=5.0)
        write_map_document(tmp_path / MAP_FILE, [m])
        back = read_map_document(tmp_path / MAP_FILE)[m.scene_id]
        assert back.confinement_c == m.confinement_c == 2.5
        np.testing.assert_array_equal(back.centerlines[0].polyline, m.centerlines[0].polyline)
