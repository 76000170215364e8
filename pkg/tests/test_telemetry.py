import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from convmove.telemetry import (ProjectionMeta, TelemetrySet, aeqd_forward, aeqd_inverse,
                                geographic_mean, ingest, project_and_scale, unscale_positions,
                                unscale_times)


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_three_rows(tmp_path):
    ts = ingest(_write(tmp_path, "id,time,lon,lat\na,0,-100,50\na,1,-101,51\nb,0,-99,49\n"))
    assert len(ts) == 3
    assert ts.individuals == ["a", "b"]
    assert ts.report.rejected == [] and ts.report.warnings == []


def test_duplicate_rejected(tmp_path):
    ts = ingest(_write(tmp_path, "id,time,lon,lat\na,0,-100,50\na,0,-100.5,50\na,2,-101,51\n"))
    assert len(ts) == 2
    assert ts.report.rejected == [(3, "duplicate")]


def test_unsorted_sorted_with_warning(tmp_path):
    ts = ingest(_write(tmp_path, "id,time,lon,lat\nb,3,-99,49\na,2,-101,51\na,1,-100,50\n"))
    assert ts.ids.tolist() == ["a", "a", "b"]
    assert ts.time.tolist() == [1.0, 2.0, 3.0]
    assert any("sorted" in w for w in ts.report.warnings)


def test_empty_file(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        ingest(_write(tmp_path, ""))
    with pytest.raises(ValueError, match="no data"):
        ingest(_write(tmp_path, "id,time,lon,lat\n", "h.csv"))


def test_malformed_rows_listed(tmp_path):
    text = "id,time,lon,lat\na,0,-100,50\na,x,-100,50\n,2,-100,50\na,3,-100,95\na,4,nan,50\na,5,-1,5\n"
    ts = ingest(_write(tmp_path, text))
    assert len(ts) == 2
    assert [ln for ln, _ in ts.report.rejected] == [3, 4, 5, 6]
    assert all(r.startswith("malformed") for _, r in ts.report.rejected)


def test_missing_column(tmp_path):
    with pytest.raises(ValueError, match="lat"):
        ingest(_write(tmp_path, "id,time,lon\na,0,1\n"))


def test_km_input_and_iso_times(tmp_path):
    text = "id,time,x_km,y_km\na,2024-03-01T00:00:00,0,0\na,2024-03-01T06:00:00Z,10,5\n"
    ts = ingest(_write(tmp_path, text), xy_km=True)
    assert ts.coords == "km"
    assert ts.time[1] - ts.time[0] == pytest.approx(6.0)
    sc = project_and_scale(ts)
    assert sc.time.tolist() == [0.0, 1.0]
    assert unscale_times(sc.time, sc.meta) == pytest.approx(ts.time)


def test_center_maps_to_origin():
    x, y = aeqd_forward(-110.0, 51.0, -110.0, 51.0)
    assert x == 0.0 and y == 0.0


def test_aeqd_known_distance():
    # due north along a meridian the projected distance is the arc length
    x, y = aeqd_forward(0.0, 10.0, 0.0, 0.0)
    assert x == pytest.approx(0.0, abs=1e-9)
    assert y == pytest.approx(math.radians(10.0) * 6371.0088, rel=1e-12)


@given(st.floats(-179, 179), st.floats(-80, 80), st.floats(-15, 15), st.floats(-15, 15))
def test_round_trip(lon0, lat0, dlon, dlat):
    lon = (lon0 + dlon + 180) % 360 - 180
    lat = np.clip(lat0 + dlat, -89, 89)
    x, y = aeqd_forward(lon, lat, lon0, lat0)
    lon2, lat2 = aeqd_inverse(x, y, lon0, lat0)
    assert abs((lon2 - lon + 180) % 360 - 180) <= 1e-9
    assert abs(lat2 - lat) <= 1e-9


def test_symmetric_points_sum_to_zero():
    ts = TelemetrySet(["a", "a"], [0.0, 1.0], [(-100.0, 50.0), (-100.0, 50.0)])
    x, y = aeqd_forward(np.array([-101.0, -99.0]), np.array([50.0, 50.0]), -100.0, 50.0)
    assert x.sum() == pytest.approx(0.0, abs=1e-9)
    ts = TelemetrySet(["a", "a"], [0.0, 1.0], [(-101.0, 50.0), (-99.0, 50.0)])
    sc = project_and_scale(ts, center=(-100.0, 50.0))
    assert np.abs(sc.pos.sum(axis=0)).max() <= 1e-12


def test_scaling_and_inverse():
    rng = np.random.default_rng(1)
    pos = np.column_stack([rng.uniform(-112, -108, 30), rng.uniform(40, 55, 30)])
    ts = TelemetrySet(np.repeat(["a", "b"], 15), np.tile(np.arange(15.0), 2) * 6, pos)
    sc = project_and_scale(ts)
    assert sc.coords == "scaled"
    n = len(sc)
    assert math.sqrt(np.sum(sc.pos ** 2) / (2 * n - 2)) == pytest.approx(1.0, rel=1e-12)
    assert sc.time.min() == 0.0 and sc.time.max() == 1.0
    back = unscale_positions(sc.pos, sc.meta)
    assert np.max(np.abs(back - pos)) <= 1e-9
    meta = ProjectionMeta.from_dict(sc.meta.to_dict())
    assert meta == sc.meta


def test_geographic_mean_center():
    lon0, lat0 = geographic_mean(np.array([-101.0, -99.0]), np.array([50.0, 50.0]))
    assert lon0 == pytest.approx(-100.0, abs=1e-12)
    with pytest.raises(ValueError):
        geographic_mean(np.array([0.0, 180.0]), np.array([0.0, 0.0]))


def test_degenerate_spread():
    ts = TelemetrySet(["a", "a"], [0.0, 1.0], [(3.0, 4.0), (3.0, 4.0)], coords="km")
    with pytest.raises(ValueError, match="spread"):
        project_and_scale(ts)
    with pytest.raises(ValueError):
        project_and_scale(TelemetrySet(["a"], [0.0], [(1.0, 2.0)], coords="km"))


def test_csv_round_trip(tmp_path):
    ts = TelemetrySet(["a", "b"], [0.0, 1.5], [(1.25, -2.0), (3.0, 4.5)], coords="km")
    ts.to_csv(tmp_path / "o.csv")
    back = ingest(tmp_path / "o.csv", xy_km=True)
    assert np.array_equal(back.pos, ts.pos) and np.array_equal(back.time, ts.time)
