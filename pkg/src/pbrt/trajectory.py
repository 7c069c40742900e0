"""Vehicle trajectory types, unit handling and file ingestion.

All internal quantities are SI: meters, seconds, m/s and m/s^2.  Positions
are 1-D coordinates along the lane centerline.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

FT = 0.3048
MPH = 0.44704
DEFAULT_DT = 0.1

# factor converting a declared unit to SI
UNIT_FACTORS = {
    "s": 1.0,
    "m": 1.0,
    "ft": FT,
    "m/s": 1.0,
    "ft/s": FT,
    "mph": MPH,
    "m/s2": 1.0,
    "ft/s2": FT,
}

TRACK_COLUMNS = ("vehicle_id", "driver_id", "lane_id", "t", "position", "speed", "acceleration")
SIGNAL_COLUMNS = ("signal_id", "lane_id", "position", "t_change", "from_phase", "to_phase")

# columns that carry a physical unit, with the units they accept
_UNIT_KINDS = {
    "t": {"s"},
    "position": {"m", "ft"},
    "speed": {"m/s", "ft/s", "mph"},
    "acceleration": {"m/s2", "ft/s2"},
    "t_change": {"s"},
}


class TrajectoryFormatError(ValueError):
    """Malformed trajectory or signal file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrajectoryValidationError(ValueError):
    """Track content violates an invariant (e.g. non-monotone time)."""


class OutOfRangeError(ValueError):
    """Query time lies outside a track's time span."""


class Phase(str, enum.Enum):
    GREEN = "green"
    YELLOW = "yellow"
    RED = "red"


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    position: float
    speed: float
    acceleration: float


@dataclass(frozen=True)
class VehicleTrack:
    """Time-ordered kinematic samples of one vehicle.

    ``turns_at`` holds the ids of signals at whose intersection this vehicle
    turns; it comes from annotation, never from kinematics.
    """

    vehicle_id: str
    driver_id: str
    lane_id: str
    samples: tuple
    turns_at: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.samples:
            raise TrajectoryValidationError(f"vehicle {self.vehicle_id}: empty track")
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "turns_at", frozenset(self.turns_at))
        ts = [s.t for s in self.samples]
        for a, b in zip(ts, ts[1:]):
            if not b > a:
                raise TrajectoryValidationError(
                    f"vehicle {self.vehicle_id}: timestamps not strictly increasing ({a} -> {b})"
                )

    @cached_property
    def t(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    @cached_property
    def position(self) -> np.ndarray:
        return np.array([s.position for s in self.samples])

    @cached_property
    def speed(self) -> np.ndarray:
        return np.array([s.speed for s in self.samples])

    @cached_property
    def acceleration(self) -> np.ndarray:
        return np.array([s.acceleration for s in self.samples])

    @property
    def t_start(self) -> float:
        return self.samples[0].t

    @property
    def t_end(self) -> float:
        return self.samples[-1].t

    @property
    def dt(self) -> float:
        if len(self.samples) < 2:
            return DEFAULT_DT
        return float(np.median(np.diff(self.t)))

    def covers(self, t: float, tol: float = 1e-9) -> bool:
        return self.t_start - tol <= t <= self.t_end + tol

    def state_at(self, t: float) -> TrajectorySample:
        """Linearly interpolated state at time ``t``."""
        if not self.covers(t):
            raise OutOfRangeError(
                f"t={t} outside track {self.vehicle_id} span [{self.t_start}, {self.t_end}]"
            )
        ts = self.t
        t = min(max(t, ts[0]), ts[-1])
        return TrajectorySample(
            t=t,
            position=float(np.interp(t, ts, self.position)),
            speed=float(np.interp(t, ts, self.speed)),
            acceleration=float(np.interp(t, ts, self.acceleration)),
        )

    def shifted(self, dt: float) -> "VehicleTrack":
        samples = [TrajectorySample(s.t + dt, s.position, s.speed, s.acceleration) for s in self.samples]
        return VehicleTrack(self.vehicle_id, self.driver_id, self.lane_id, samples, self.turns_at)


@dataclass(frozen=True)
class SignalPhaseEvent:
    signal_id: str
    lane_id: str
    position: float
    t_change: float
    from_phase: Phase
    to_phase: Phase

    def __post_init__(self):
        object.__setattr__(self, "from_phase", Phase(self.from_phase))
        object.__setattr__(self, "to_phase", Phase(self.to_phase))
        if self.from_phase == self.to_phase:
            raise TrajectoryValidationError(
                f"signal {self.signal_id}: from_phase equals to_phase ({self.from_phase.value})"
            )

    def shifted(self, dt: float) -> "SignalPhaseEvent":
        return SignalPhaseEvent(self.signal_id, self.lane_id, self.position,
                                self.t_change + dt, self.from_phase, self.to_phase)


@dataclass(frozen=True)
class PairGeometry:
    separation: float
    speed_diff: float
    time_headway: Optional[float]


def pair_geometry(leader: VehicleTrack, follower: VehicleTrack, t: float) -> PairGeometry:
    """Leader/follower separation, speed difference and time headway at ``t``."""
    lead = leader.state_at(t)
    fol = follower.state_at(t)
    separation = lead.position - fol.position
    headway = separation / fol.speed if fol.speed > 0 else None
    return PairGeometry(separation, fol.speed - lead.speed, headway)


# ---------------------------------------------------------------------------
# file formats


def _parse_header(cells, expected, line_no):
    names, factors = [], {}
    for cell in cells:
        cell = cell.strip()
        if "[" in cell:
            if not cell.endswith("]"):
                raise TrajectoryFormatError(f"bad header cell {cell!r}", line_no)
            name, unit = cell[:-1].split("[", 1)
            name, unit = name.strip(), unit.strip()
        else:
            name, unit = cell, None
        names.append(name)
        if name in _UNIT_KINDS:
            unit = unit or ("s" if name in ("t", "t_change") else None)
            if unit is None:
                raise TrajectoryFormatError(f"column {name!r} needs a unit tag", line_no)
            if unit not in _UNIT_KINDS[name]:
                raise TrajectoryFormatError(f"unit {unit!r} not valid for column {name!r}", line_no)
            factors[name] = UNIT_FACTORS[unit]
        elif unit is not None:
            raise TrajectoryFormatError(f"column {name!r} takes no unit", line_no)
    if tuple(names) != expected:
        raise TrajectoryFormatError(f"expected columns {', '.join(expected)}; got {', '.join(names)}", line_no)
    return factors


def _data_lines(text):
    """Yield (line_no, kind, payload) for directive and data lines."""
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            yield i, "directive", line[1:].strip()
        else:
            yield i, "row", raw


def _float(value, name, line_no):
    try:
        x = float(value)
    except ValueError:
        raise TrajectoryFormatError(f"column {name!r}: not a number: {value!r}", line_no) from None
    if not math.isfinite(x):
        raise TrajectoryFormatError(f"column {name!r}: non-finite value", line_no)
    return x


def parse_tracks(text: str) -> tuple[list[VehicleTrack], float]:
    """Parse trajectory-file text.  Returns the tracks and the declared sampling period."""
    dt = DEFAULT_DT
    turns: dict[str, set] = {}
    factors = None
    rows: dict[str, list] = {}
    ids: dict[str, tuple] = {}
    for line_no, kind, payload in _data_lines(text):
        if kind == "directive":
            key, _, value = payload.partition(":")
            key, value = key.strip().lower(), value.strip()
            if key == "dt":
                dt = _float(value, "dt", line_no)
                if dt <= 0:
                    raise TrajectoryFormatError("dt must be positive", line_no)
            elif key == "turn":
                parts = value.split()
                if len(parts) != 2:
                    raise TrajectoryFormatError("turn directive needs '<vehicle_id> <signal_id>'", line_no)
                turns.setdefault(parts[0], set()).add(parts[1])
            continue
        cells = next(csv.reader([payload]))
        if factors is None:
            factors = _parse_header(cells, TRACK_COLUMNS, line_no)
            continue
        if len(cells) != len(TRACK_COLUMNS):
            raise TrajectoryFormatError(f"expected {len(TRACK_COLUMNS)} fields, got {len(cells)}", line_no)
        vid, did, lane = (c.strip() for c in cells[:3])
        t, pos, spd, acc = (
            _float(cells[3 + k], name, line_no) * factors[name]
            for k, name in enumerate(("t", "position", "speed", "acceleration"))
        )
        if spd < 0:
            raise TrajectoryFormatError("speed must be non-negative", line_no)
        prev = ids.setdefault(vid, (did, lane))
        if prev != (did, lane):
            raise TrajectoryValidationError(f"vehicle {vid}: inconsistent driver/lane ids")
        rows.setdefault(vid, []).append(TrajectorySample(t, pos, spd, acc))
    if factors is None:
        raise TrajectoryFormatError("missing header line")
    tracks = []
    for vid, samples in rows.items():
        samples.sort(key=lambda s: s.t)
        did, lane = ids[vid]
        tracks.append(VehicleTrack(vid, did, lane, samples, frozenset(turns.get(vid, ()))))
    return tracks, dt


def load_tracks(source) -> list[VehicleTrack]:
    """Read a trajectory file into per-vehicle tracks (SI units, time-sorted)."""
    tracks, _ = parse_tracks(Path(source).read_text())
    return tracks


def format_tracks(tracks: Iterable[VehicleTrack], dt: float = DEFAULT_DT) -> str:
    buf = io.StringIO()
    buf.write(f"# dt: {dt!r}\n")
    tracks = list(tracks)
    for tr in tracks:
        for sig in sorted(tr.turns_at):
            buf.write(f"# turn: {tr.vehicle_id} {sig}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vehicle_id", "driver_id", "lane_id", "t[s]", "position[m]", "speed[m/s]", "acceleration[m/s2]"])
    for tr in tracks:
        for s in tr.samples:
            w.writerow([tr.vehicle_id, tr.driver_id, tr.lane_id, repr(s.t), repr(s.position),
                        repr(s.speed), repr(s.acceleration)])
    return buf.getvalue()


def save_tracks(tracks: Iterable[VehicleTrack], path, dt: float = DEFAULT_DT) -> None:
    Path(path).write_text(format_tracks(tracks, dt))


def parse_signals(text: str) -> list[SignalPhaseEvent]:
    factors = None
    events = []
    for line_no, kind, payload in _data_lines(text):
        if kind == "directive":
            continue
        cells = next(csv.reader([payload]))
        if factors is None:
            factors = _parse_header(cells, SIGNAL_COLUMNS, line_no)
            continue
        if len(cells) != len(SIGNAL_COLUMNS):
            raise TrajectoryFormatError(f"expected {len(SIGNAL_COLUMNS)} fields, got {len(cells)}", line_no)
        try:
            events.append(SignalPhaseEvent(
                signal_id=cells[0].strip(),
                lane_id=cells[1].strip(),
                position=_float(cells[2], "position", line_no) * factors["position"],
                t_change=_float(cells[3], "t_change", line_no) * factors["t_change"],
                from_phase=cells[4].strip().lower(),
                to_phase=cells[5].strip().lower(),
            ))
        except ValueError as exc:
            if isinstance(exc, TrajectoryFormatError):
                raise
            raise TrajectoryFormatError(str(exc), line_no) from None
    if factors is None:
        raise TrajectoryFormatError("missing header line")
    return events


def load_signals(source) -> list[SignalPhaseEvent]:
    return parse_signals(Path(source).read_text())


def format_signals(events: Sequence[SignalPhaseEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["signal_id", "lane_id", "position[m]", "t_change[s]", "from_phase", "to_phase"])
    for e in events:
        w.writerow([e.signal_id, e.lane_id, repr(e.position), repr(e.t_change),
                    e.from_phase.value, e.to_phase.value])
    return buf.getvalue()


def save_signals(events: Sequence[SignalPhaseEvent], path) -> None:
    Path(path).write_text(format_signals(events))
