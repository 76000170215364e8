"""Telemetry ingestion, projection and scaling.

Positions are projected with a spherical azimuthal equidistant projection,
centered, and divided by the pooled standard deviation; times are mapped
affinely onto ``[0, 1]``.  Every constant needed to undo those steps lives
in :class:`ProjectionMeta`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "EARTH_RADIUS_KM",
    "IngestReport",
    "ProjectionMeta",
    "TelemetrySet",
    "ingest",
    "aeqd_forward",
    "aeqd_inverse",
    "geographic_mean",
    "project_and_scale",
    "unscale_positions",
    "unscale_times",
]

# mean earth radius (IUGG)
EARTH_RADIUS_KM = 6371.0088


@dataclass
class ProjectionMeta:
    """Constants linking scaled units back to km and calendar time.

    ``offset_km`` is the mean projected position subtracted before scaling;
    ``scale_km`` the pooled sd.  Times are hours since ``time_origin`` (an
    epoch value in hours for ISO timestamps) divided by ``time_span_hours``.
    """

    center_lon: float | None = None
    center_lat: float | None = None
    offset_km: tuple[float, float] = (0.0, 0.0)
    scale_km: float = 1.0
    time_origin: float = 0.0
    time_span_hours: float = 1.0
    radius_km: float = EARTH_RADIUS_KM
    projected: bool = False
    standardized: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["offset_km"] = list(self.offset_km)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionMeta":
        d = dict(d)
        d["offset_km"] = tuple(d.get("offset_km", (0.0, 0.0)))
        return cls(**d)


@dataclass
class IngestReport:
    n_rows: int = 0
    n_records: int = 0
    rejected: list = field(default_factory=list)   # (line number, reason)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"n_rows": self.n_rows, "n_records": self.n_records,
                "rejected": [{"line": ln, "reason": r} for ln, r in self.rejected],
                "warnings": list(self.warnings)}


@dataclass
class TelemetrySet:
    """Validated records sorted by ``(id, time)``.

    ``coords`` is ``"lonlat"`` for raw geographic input, ``"km"`` for planar
    input or projected output and ``"scaled"`` after standardization.
    """

    ids: np.ndarray
    time: np.ndarray
    pos: np.ndarray
    coords: str = "lonlat"
    meta: ProjectionMeta = field(default_factory=ProjectionMeta)
    report: IngestReport | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=str)
        self.time = np.asarray(self.time, dtype=float)
        self.pos = np.asarray(self.pos, dtype=float).reshape(-1, 2)
        if not (len(self.ids) == len(self.time) == len(self.pos)):
            raise ValueError("ids, times and positions must have equal length")

    def __len__(self) -> int:
        return len(self.time)

    @property
    def individuals(self) -> list[str]:
        # first-appearance order of the sorted records
        _, first = np.unique(self.ids, return_index=True)
        return [str(self.ids[i]) for i in np.sort(first)]

    def individual(self, ident: str) -> tuple[np.ndarray, np.ndarray]:
        sel = self.ids == ident
        if not sel.any():
            raise KeyError(f"no records for individual {ident!r}")
        return self.time[sel], self.pos[sel]

    def to_csv(self, path) -> None:
        cols = {"lonlat": ("lon", "lat"), "km": ("x_km", "y_km"), "scaled": ("x", "y")}[self.coords]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "time", *cols])
            for i in range(len(self)):
                w.writerow([self.ids[i], f"{self.time[i]:.12g}",
                            f"{self.pos[i, 0]:.12g}", f"{self.pos[i, 1]:.12g}"])


def _parse_time(text: str) -> tuple[float, bool]:
    """Numeric time (hours) or ISO-8601 timestamp (hours since the epoch)."""
    try:
        return float(text), False
    except ValueError:
        pass
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp() / 3600.0, True


def ingest(path, xy_km: bool = False) -> TelemetrySet:
    """Read a telemetry CSV with header ``id,time,lon,lat`` (or ``id,time,x_km,y_km``).

    Malformed rows and repeated ``(id, time)`` pairs are rejected and listed
    in the report with their line numbers; unsorted input is sorted with a
    warning.
    """
    cols = ("x_km", "y_km") if xy_km else ("lon", "lat")
    report = IngestReport()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in ("id", "time", *cols) if c not in header]
        if missing:
            raise ValueError(f"{path}: header lacks column(s) {', '.join(missing)}")
        reader.fieldnames = header
        rows, kinds = [], set()
        for row in reader:
            report.n_rows += 1
            line = reader.line_num
            try:
                ident = (row["id"] or "").strip()
                if not ident:
                    raise ValueError("missing id")
                t, iso = _parse_time(row["time"])
                a, b = float(row[cols[0]]), float(row[cols[1]])
            except (TypeError, ValueError) as exc:
                report.rejected.append((line, f"malformed: {exc}"))
                continue
            if not all(math.isfinite(v) for v in (t, a, b)):
                report.rejected.append((line, "malformed: non-finite value"))
                continue
            if not xy_km and not (-180.0 <= a <= 360.0 and -90.0 <= b <= 90.0):
                report.rejected.append((line, "malformed: coordinate out of range"))
                continue
            kinds.add(iso)
            rows.append((ident, t, a, b, line))
    if report.n_rows == 0:
        raise ValueError(f"{path}: no data rows")
    if len(kinds) > 1:
        raise ValueError(f"{path}: mixes numeric and ISO-8601 times")
    seen = set()
    kept = []
    for r in rows:
        key = (r[0], r[1])
        if key in seen:
            report.rejected.append((r[4], "duplicate"))
            continue
        seen.add(key)
        kept.append(r)
    if not kept:
        raise ValueError(f"{path}: every row was rejected")
    order = sorted(range(len(kept)), key=lambda i: (kept[i][0], kept[i][1]))
    if order != list(range(len(kept))):
        msg = "input not sorted by (id, time); records were sorted"
        report.warnings.append(msg)
        log.warning(msg)
    kept = [kept[i] for i in order]
    report.rejected.sort()
    report.n_records = len(kept)
    for ln, reason in report.rejected:
        log.warning("line %d rejected: %s", ln, reason)
    return TelemetrySet(
        ids=[r[0] for r in kept],
        time=[r[1] for r in kept],
        pos=[(r[2], r[3]) for r in kept],
        coords="km" if xy_km else "lonlat",
        report=report,
    )


def aeqd_forward(lon, lat, lon0: float, lat0: float, radius: float = EARTH_RADIUS_KM):
    """Spherical azimuthal equidistant projection, degrees in, km out."""
    lam = np.radians(np.asarray(lon, dtype=float) - lon0)
    phi = np.radians(np.asarray(lat, dtype=float))
    phi0 = math.radians(lat0)
    cos_c = np.sin(phi0) * np.sin(phi) + math.cos(phi0) * np.cos(phi) * np.cos(lam)
    c = np.arccos(np.clip(cos_c, -1.0, 1.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(c < 1e-12, 1.0, c / np.sin(c))
    x = radius * k * np.cos(phi) * np.sin(lam)
    y = radius * k * (math.cos(phi0) * np.sin(phi) - math.sin(phi0) * np.cos(phi) * np.cos(lam))
    return x, y


def aeqd_inverse(x, y, lon0: float, lat0: float, radius: float = EARTH_RADIUS_KM):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rho = np.hypot(x, y)
    c = rho / radius
    phi0 = math.radians(lat0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(rho > 0, y * np.sin(c) / np.where(rho > 0, rho, 1.0), 0.0)
    lat = np.arcsin(np.clip(np.cos(c) * math.sin(phi0) + ratio * math.cos(phi0), -1.0, 1.0))
    lon = lon0 + np.degrees(np.arctan2(x * np.sin(c),
                                       rho * math.cos(phi0) * np.cos(c) - y * math.sin(phi0) * np.sin(c)))
    lon = (lon + 180.0) % 360.0 - 180.0
    return lon, np.degrees(lat)


def geographic_mean(lon, lat) -> tuple[float, float]:
    """Center of mass of the unit vectors, projected back to the sphere."""
    lam = np.radians(lon)
    phi = np.radians(lat)
    v = np.stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)]).mean(axis=1)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise ValueError("geographic mean undefined for antipodally balanced points")
    return math.degrees(math.atan2(v[1], v[0])), math.degrees(math.asin(v[2] / norm))


def project_and_scale(ts: TelemetrySet, center: tuple[float, float] | None = None,
                      standardize: bool = True, rescale_time: bool = True) -> TelemetrySet:
    """Project (if geographic), center, scale by the pooled sd, map times onto [0, 1]."""
    if ts.coords == "scaled":
        raise ValueError("telemetry is already scaled")
    meta = ProjectionMeta()
    if ts.coords == "lonlat":
        lon0, lat0 = center if center is not None else geographic_mean(ts.pos[:, 0], ts.pos[:, 1])
        x, y = aeqd_forward(ts.pos[:, 0], ts.pos[:, 1], lon0, lat0)
        km = np.column_stack([x, y])
        meta = replace(meta, center_lon=float(lon0), center_lat=float(lat0), projected=True)
    else:
        km = ts.pos.copy()
    pos = km
    if standardize:
        n = len(km)
        if n < 2:
            raise ValueError("at least two records are needed to scale positions")
        offset = km.mean(axis=0)
        dev = km - offset
        sd = math.sqrt(float(np.sum(dev ** 2)) / (2 * n - 2))
        if not sd > 0:
            raise ValueError("positions have zero spread; cannot scale")
        pos = dev / sd
        meta = replace(meta, offset_km=(float(offset[0]), float(offset[1])), scale_km=sd,
                       standardized=True)
    time = ts.time
    if rescale_time:
        t0, t1 = float(ts.time.min()), float(ts.time.max())
        if not t1 > t0:
            raise ValueError("all records share one time; cannot rescale")
        time = (ts.time - t0) / (t1 - t0)
        meta = replace(meta, time_origin=t0, time_span_hours=t1 - t0)
    return TelemetrySet(ts.ids.copy(), time, pos, "scaled" if standardize else "km", meta, ts.report)


def unscale_positions(pos, meta: ProjectionMeta, to_lonlat: bool = True) -> np.ndarray:
    """Scaled positions back to km, and to lon/lat when the data were projected."""
    pos = np.asarray(pos, dtype=float)
    km = pos * meta.scale_km + np.asarray(meta.offset_km) if meta.standardized else pos.copy()
    if to_lonlat and meta.projected:
        lon, lat = aeqd_inverse(km[..., 0], km[..., 1], meta.center_lon, meta.center_lat,
                                meta.radius_km)
        return np.stack([lon, lat], axis=-1)
    return km


def unscale_times(t, meta: ProjectionMeta) -> np.ndarray:
    """Scaled times back to the input time units (hours)."""
    return meta.time_origin + np.asarray(t, dtype=float) * meta.time_span_hours
