"""Closed-track geometry: arc length, heading, curvature, projection, lap accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

TRACK_COLUMNS = ("x_m", "y_m", "w_tr_left_m", "w_tr_right_m")
# half width of a 1:43-class track at scale 1
BASE_HALF_WIDTH = 0.185
# relative tolerance under which squared projection distances count as tied
PROJECTION_TIE_TOL = 1e-9


class TrackError(ValueError):
    pass


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


class CurvilinearPose(NamedTuple):
    s: float
    e_y: float
    e_phi: float


@dataclass(frozen=True, eq=False)
class Track:
    """Closed polyline with per-point half widths.

    ``s[i]`` is the arc length at point ``i``; the wrap segment from the last
    point back to the first closes the loop, so ``length`` exceeds ``s[-1]``.
    """

    centerline: np.ndarray
    half_width_left: np.ndarray
    half_width_right: np.ndarray
    s: np.ndarray
    length: float
    heading: np.ndarray
    curvature: np.ndarray
    closed: bool = True

    @classmethod
    def from_points(cls, points, half_width_left, half_width_right) -> "Track":
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise TrackError("points must have shape (n, 2)")
        n = len(pts)
        wl = np.broadcast_to(np.asarray(half_width_left, dtype=float), (n,)).copy()
        wr = np.broadcast_to(np.asarray(half_width_right, dtype=float), (n,)).copy()
        if np.any(wl <= 0) or np.any(wr <= 0):
            raise TrackError("half widths must be positive")
        seg = np.roll(pts, -1, axis=0) - pts
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise TrackError("duplicate consecutive points")
        s = np.concatenate(([0.0], np.cumsum(seg_len[:-1])))
        length = float(np.sum(seg_len))
        heading, curvature = _heading_curvature(pts, seg_len)
        for arr in (pts, wl, wr, s, heading, curvature):
            arr.setflags(write=False)
        return cls(pts, wl, wr, s, length, heading, curvature, True)

    @property
    def n_points(self) -> int:
        return len(self.centerline)

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.diff(np.append(self.s, self.length))

    @property
    def normals(self) -> np.ndarray:
        """Left-pointing unit normals."""
        return np.column_stack((-np.sin(self.heading), np.cos(self.heading)))

    def half_widths_at(self, s):
        """Linearly interpolated (left, right) half widths at arc length ``s``."""
        s = np.mod(s, self.length)
        xp = np.append(self.s, self.length)
        left = np.interp(s, xp, np.append(self.half_width_left, self.half_width_left[0]))
        right = np.interp(s, xp, np.append(self.half_width_right, self.half_width_right[0]))
        return left, right

    def point_at(self, s):
        """Position and heading at arc length ``s`` (vectorized)."""
        s = np.mod(np.asarray(s, dtype=float), self.length)
        xp = np.append(self.s, self.length)
        x = np.interp(s, xp, np.append(self.centerline[:, 0], self.centerline[0, 0]))
        y = np.interp(s, xp, np.append(self.centerline[:, 1], self.centerline[0, 1]))
        h = np.unwrap(np.append(self.heading, self.heading[0]))
        phi = wrap_angle(np.interp(s, xp, h))
        return x, y, phi

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACK_COLUMNS)
            for (x, y), wl, wr in zip(self.centerline, self.half_width_left, self.half_width_right):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(wl)), repr(float(wr))])


def _heading_curvature(pts: np.ndarray, seg_len: np.ndarray):
    # central differences on the closed polyline
    fwd = np.roll(pts, -1, axis=0) - pts
    bwd = pts - np.roll(pts, 1, axis=0)
    tangent = fwd / seg_len[:, None] + bwd / np.roll(seg_len, 1)[:, None]
    heading = np.arctan2(tangent[:, 1], tangent[:, 0])
    unwrapped = np.unwrap(heading)
    # close the loop: heading after one lap differs by the total turning
    total_turn = np.round((unwrapped[-1] - unwrapped[0] + wrap_angle(unwrapped[0] - unwrapped[-1])) / (2 * np.pi))
    ext = np.concatenate(([unwrapped[-1] - 2 * np.pi * total_turn], unwrapped, [unwrapped[0] + 2 * np.pi * total_turn]))
    ds_prev = np.roll(seg_len, 1)
    curvature = (ext[2:] - ext[:-2]) / (seg_len + ds_prev)
    return heading, curvature


def total_turning(track: Track) -> float:
    """Accumulated heading change over one loop (rad)."""
    d = wrap_angle(np.diff(np.append(track.heading, track.heading[0])))
    return float(np.sum(d))


def load_track(path) -> Track:
    """Read a track CSV with columns ``x_m,y_m,w_tr_left_m,w_tr_right_m``.

    Lines starting with ``#`` are skipped, so files from the common race-track
    database (which prefix the header with ``#``) load unchanged.
    """
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        header_seen = False
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if not header_seen:
                cols = [c.strip().lstrip("#").strip() for c in line.split(",")]
                if tuple(cols) != TRACK_COLUMNS:
                    raise TrackError(f"{path}:{lineno}: expected header {','.join(TRACK_COLUMNS)}")
                header_seen = True
                continue
            if line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise TrackError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}: {line!r}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise TrackError(f"{path}:{lineno}: malformed row {line!r}") from None
            if not all(np.isfinite(vals)):
                raise TrackError(f"{path}:{lineno}: non-finite value in row {line!r}")
            if vals[2] <= 0 or vals[3] <= 0:
                raise TrackError(f"{path}:{lineno}: non-positive width in row {line!r}")
            rows.append(vals)
    if not header_seen:
        raise TrackError(f"{path}: empty file")
    if len(rows) < 10:
        raise TrackError(f"{path}: degenerate track ({len(rows)} points, need >= 10)")
    arr = np.array(rows)
    pts = arr[:, :2]
    # drop an explicit closing point
    if np.allclose(pts[0], pts[-1]):
        arr = arr[:-1]
    return Track.from_points(arr[:, :2], arr[:, 2], arr[:, 3])


def generate_synthetic_track(kind: str, scale: float = 1.0, n_points: int = 400) -> Track:
    """Build a closed desk-scale track.

    ``circle`` has radius ``scale``. ``oval`` joins two semicircles of radius
    ``scale`` with straights of length ``2 * scale``. ``chicane`` uses straights
    of length ``4 * scale`` and puts an S-bend in the middle of the top one.
    """
    if scale <= 0:
        raise TrackError("scale must be positive")
    if n_points < 50:
        raise TrackError("n_points must be >= 50")
    hw = BASE_HALF_WIDTH * scale
    if kind == "circle":
        ang = np.linspace(0.0, 2 * np.pi, n_points, endpoint=False)
        pts = scale * np.column_stack((np.cos(ang - np.pi / 2), np.sin(ang - np.pi / 2) + 1.0))
        return Track.from_points(pts, hw, hw)
    if kind == "oval":
        segments = _oval_segments(scale)
    elif kind == "chicane":
        segments = _chicane_segments(scale)
    else:
        raise TrackError(f"unsupported track kind {kind!r}")
    pts = _sample_segments(segments, n_points)
    return Track.from_points(pts, hw, hw)


# Segments are (length, curvature) pieces of a clothoid-free arc/line path
# starting at the origin heading +x; sampling integrates heading exactly.
def _oval_segments(r: float):
    straight = 2.0 * r
    return [
        (straight / 2, 0.0),
        (np.pi * r, 1.0 / r),
        (straight, 0.0),
        (np.pi * r, 1.0 / r),
        (straight / 2, 0.0),
    ]


def _chicane_segments(r: float):
    straight = 4.0 * r
    # S-bend: left arc, right arc, right arc, left arc; zero net heading change
    rc = 1.5 * r
    bend = np.pi / 8
    s_arc = rc * bend
    # the S-bend covers 4 * rc * sin(bend) of forward distance
    lead = (straight - 4 * rc * np.sin(bend)) / 2
    return [
        (straight / 2, 0.0),
        (np.pi * r, 1.0 / r),
        (lead, 0.0),
        (s_arc, 1.0 / rc),
        (s_arc, -1.0 / rc),
        (s_arc, -1.0 / rc),
        (s_arc, 1.0 / rc),
        (lead, 0.0),
        (np.pi * r, 1.0 / r),
        (straight / 2, 0.0),
    ]


def _sample_segments(segments, n_points: int) -> np.ndarray:
    lengths = np.array([seg[0] for seg in segments])
    total = float(lengths.sum())
    starts = np.concatenate(([0.0], np.cumsum(lengths)[:-1]))
    # pose at each segment start
    poses = []
    x = y = h = 0.0
    for length, k in segments:
        poses.append((x, y, h))
        x, y, h = _advance(x, y, h, k, length)
    s = np.linspace(0.0, total, n_points, endpoint=False)
    idx = np.searchsorted(starts, s, side="right") - 1
    out = np.empty((n_points, 2))
    for i, (si, j) in enumerate(zip(s, idx)):
        x0, y0, h0 = poses[j]
        px, py, _ = _advance(x0, y0, h0, segments[j][1], si - starts[j])
        out[i] = px, py
    if abs(x) > 1e-9 or abs(y) > 1e-9:
        raise TrackError("segment list does not close")
    return out


def _advance(x, y, h, k, ds):
    if abs(k) < 1e-15:
        return x + ds * np.cos(h), y + ds * np.sin(h), h
    h1 = h + k * ds
    return x + (np.sin(h1) - np.sin(h)) / k, y - (np.cos(h1) - np.cos(h)) / k, h1


def project(track: Track, point, hint_s: Optional[float] = None, heading: Optional[float] = None) -> CurvilinearPose:
    """Closest point on the centerline polyline.

    With ``hint_s`` only segments starting within 5% of the track length of the
    hint are searched. Ties go to the lowest arc length.
    """
    p = np.asarray(point, dtype=float)
    a = track.centerline
    seg = np.roll(a, -1, axis=0) - a
    seg_len = track.segment_lengths
    if hint_s is None:
        idx = np.arange(track.n_points)
    else:
        half = 0.5 * track.length
        d = np.abs(np.mod(track.s - hint_s + half, track.length) - half)
        idx = np.flatnonzero(d <= 0.05 * track.length + seg_len)
        if idx.size == 0:
            idx = np.arange(track.n_points)
    rel = p - a[idx]
    sg = seg[idx]
    sl2 = seg_len[idx] ** 2
    t = np.clip((rel[:, 0] * sg[:, 0] + rel[:, 1] * sg[:, 1]) / sl2, 0.0, 1.0)
    cx = a[idx, 0] + t * sg[:, 0]
    cy = a[idx, 1] + t * sg[:, 1]
    dist2 = (p[0] - cx) ** 2 + (p[1] - cy) ** 2
    s_all = track.s[idx] + t * seg_len[idx]
    s_all = np.where(s_all >= track.length, s_all - track.length, s_all)
    best = dist2.min()
    # near-equal distances count as ties so rounding cannot break the lowest-s rule
    cand = np.flatnonzero(dist2 <= best + PROJECTION_TIE_TOL * max(best, 1e-12))
    k = cand[np.argmin(s_all[cand])]
    i = idx[k]
    s = float(s_all[k])
    tx, ty = sg[k] / seg_len[i]
    e_y = float(tx * (p[1] - cy[k]) - ty * (p[0] - cx[k]))
    if heading is None:
        e_phi = 0.0
    else:
        e_phi = wrap_angle(heading - np.arctan2(ty, tx))
    return CurvilinearPose(s, e_y, e_phi)


def lap_counter(prev_s: float, new_s: float, length: float) -> int:
    """1 on a forward crossing of the start line, else 0."""
    return int(prev_s > 0.8 * length and new_s < 0.2 * length)
