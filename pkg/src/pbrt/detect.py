"""Brake response time extraction from trajectory and signal data.

Three stimulus settings are handled: a lead car braking after the pair has
been in steady state, a lead car braking while the follower is closing in,
and a traffic signal turning from green to yellow.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .trajectory import FT, MPH, Phase, SignalPhaseEvent, VehicleTrack


class StimulusType(str, enum.Enum):
    STEADY = "steady"
    NONSTEADY = "nonsteady"
    SIGNAL = "signal"

    @property
    def index(self) -> int:
        return _STIMULUS_ORDER.index(self)


_STIMULUS_ORDER = (StimulusType.STEADY, StimulusType.NONSTEADY, StimulusType.SIGNAL)
STIMULI = _STIMULUS_ORDER


class ObservationError(ValueError):
    pass


@dataclass(frozen=True)
class BrtObservation:
    driver_id: str
    stimulus: StimulusType
    t_stimulus: float
    brt: float
    time_headway: float

    def __post_init__(self):
        object.__setattr__(self, "stimulus", StimulusType(self.stimulus))
        if not (self.brt > 0 and math.isfinite(self.brt)):
            raise ObservationError(f"brt must be positive and finite, got {self.brt}")
        if not (self.time_headway > 0 and math.isfinite(self.time_headway)):
            raise ObservationError(f"time_headway must be positive and finite, got {self.time_headway}")


@dataclass(frozen=True)
class DetectorConfig:
    steady_max_separation: float = 250 * FT
    steady_speed_band: float = 1.52
    steady_duration: float = 4.0
    accel_threshold: float = 0.5 * FT
    headway_cutoff: float = 10.0
    min_speed: float = 20 * MPH
    sustain_window: float = 0.25
    # OLS slope of separation on time that counts as "starts to decrease"
    decrease_slope: float = 0.05
    response_cutoff_c: float = 0.3
    baseline_window: float = 1.0
    max_response_time: float = 10.0
    refractory_gap: float = 5.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise ValueError(f"DetectorConfig.{name} must be positive, got {value}")


# ---------------------------------------------------------------------------
# pair alignment


@dataclass
class _Pair:
    t: np.ndarray
    sep: np.ndarray
    v_f: np.ndarray
    v_l: np.ndarray
    a_f: np.ndarray
    a_l: np.ndarray
    dt: float

    @property
    def headway(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.v_f > 0, self.sep / self.v_f, np.inf)


def _align(leader: VehicleTrack, follower: VehicleTrack) -> Optional[_Pair]:
    """Resample the leader onto the follower's clock over their common span."""
    t_f = follower.t
    lo, hi = max(leader.t_start, follower.t_start), min(leader.t_end, follower.t_end)
    mask = (t_f >= lo - 1e-9) & (t_f <= hi + 1e-9)
    if mask.sum() < 2:
        return None
    t = t_f[mask]
    tl = leader.t
    return _Pair(
        t=t,
        sep=np.interp(t, tl, leader.position) - follower.position[mask],
        v_f=follower.speed[mask],
        v_l=np.interp(t, tl, leader.speed),
        a_f=follower.acceleration[mask],
        a_l=np.interp(t, tl, leader.acceleration),
        dt=follower.dt,
    )


def _n_samples(duration, dt):
    """Number of samples spanning ``duration`` seconds inclusive of both ends."""
    return int(math.floor(duration / dt + 1e-6)) + 1


def _steady_mask(p: _Pair, cfg: DetectorConfig) -> np.ndarray:
    return (
        (p.sep > 0)
        & (p.sep <= cfg.steady_max_separation)
        & (np.abs(p.v_f - p.v_l) <= cfg.steady_speed_band)
        & (np.abs(p.a_f) <= cfg.accel_threshold)
    )


def _run_lengths(mask):
    out = np.zeros(len(mask), dtype=int)
    run = 0
    for i, m in enumerate(mask):
        run = run + 1 if m else 0
        out[i] = run
    return out


def _ols_slope(t, y):
    tc = t - t.mean()
    return float(tc @ (y - y.mean()) / (tc @ tc))


# ---------------------------------------------------------------------------
# detectors


def detect_steady_state(leader: VehicleTrack, follower: VehicleTrack,
                        cfg: DetectorConfig = DetectorConfig()) -> list[BrtObservation]:
    """Lead-car braking after the pair held steady state for ``steady_duration``.

    Time A is the first instant the separation starts to decrease, judged by
    an OLS slope over ``sustain_window`` seconds; time B is the first later
    instant the follower decelerates harder than ``accel_threshold``.
    """
    p = _align(leader, follower)
    if p is None:
        return []
    n = len(p.t)
    need = _n_samples(cfg.steady_duration, p.dt)
    win = max(2, _n_samples(cfg.sustain_window, p.dt))
    steady = _steady_mask(p, cfg)
    out = []
    run = 0
    i = 0
    while i + win <= n:
        run = run + 1 if steady[i] else 0
        if run < need or abs(p.a_f[i]) > cfg.accel_threshold:
            i += 1
            continue
        sl = slice(i, i + win)
        if _ols_slope(p.t[sl], p.sep[sl]) >= -cfg.decrease_slope:
            i += 1
            continue
        # first sample in the window from which separation actually drops
        a = i
        for k in range(i, i + win - 1):
            if p.sep[k + 1] < p.sep[k]:
                a = k
                break
        b = None
        for j in range(a + 1, n):
            if p.t[j] - p.t[a] > cfg.max_response_time + 1e-9:
                break
            if p.a_f[j] < -cfg.accel_threshold:
                b = j
                break
        if b is not None and p.v_f[a] >= cfg.min_speed and p.sep[a] > 0:
            out.append(BrtObservation(
                driver_id=follower.driver_id,
                stimulus=StimulusType.STEADY,
                t_stimulus=float(p.t[a]),
                brt=float(p.t[b] - p.t[a]),
                time_headway=float(p.sep[a] / p.v_f[a]),
            ))
        # one observation per episode; the pair must re-qualify afterwards
        end = b if b is not None else int(np.searchsorted(p.t, p.t[a] + cfg.max_response_time))
        i = max(end, i) + 1
        run = 0
    return out


def detect_nonsteady(leader: VehicleTrack, follower: VehicleTrack,
                     cfg: DetectorConfig = DetectorConfig()) -> list[BrtObservation]:
    """Lead-car braking while the follower is faster and within the headway cutoff.

    The response is the first instant the follower's acceleration falls more
    than ``response_cutoff_c`` below its mean over the preceding
    ``baseline_window`` seconds.
    """
    p = _align(leader, follower)
    if p is None:
        return []
    n = len(p.t)
    thr = cfg.accel_threshold
    nb = max(1, int(round(cfg.baseline_window / p.dt)))
    headway = p.headway
    was_steady = _run_lengths(_steady_mask(p, cfg)) >= _n_samples(cfg.steady_duration, p.dt)
    qualifies = (
        (p.a_l <= -thr)
        & (p.v_f > p.v_l)
        & (p.sep > 0)
        & (headway < cfg.headway_cutoff)
        & (p.v_f >= cfg.min_speed)
    )
    out = []
    last_stimulus = -math.inf
    for i in range(nb, n):
        if not qualifies[i] or p.a_l[i - 1] <= -thr or was_steady[i - 1]:
            continue
        if p.t[i] - last_stimulus < cfg.refractory_gap - 1e-9:
            continue
        last_stimulus = p.t[i]
        baseline = float(p.a_f[i - nb:i].mean())
        for j in range(i + 1, n):
            if p.t[j] - p.t[i] > cfg.max_response_time + 1e-9:
                break
            if p.a_f[j] < baseline - cfg.response_cutoff_c:
                out.append(BrtObservation(
                    driver_id=follower.driver_id,
                    stimulus=StimulusType.NONSTEADY,
                    t_stimulus=float(p.t[i]),
                    brt=float(p.t[j] - p.t[i]),
                    time_headway=float(headway[i]),
                ))
                break
    return out


def _first_decel(track: VehicleTrack, t0: float, thr: float, horizon: float) -> Optional[float]:
    t, a = track.t, track.acceleration
    idx = np.nonzero((t > t0 + 1e-9) & (t <= t0 + horizon + 1e-9) & (a < -thr))[0]
    return float(t[idx[0]]) if len(idx) else None


def detect_signal(track: VehicleTrack, all_tracks: Sequence[VehicleTrack],
                  signals: Sequence[SignalPhaseEvent],
                  cfg: DetectorConfig = DetectorConfig()) -> list[BrtObservation]:
    """Response to the next signal ahead turning from green to yellow."""
    thr = cfg.accel_threshold
    lane_signals = [s for s in signals if s.lane_id == track.lane_id]
    out = []
    for ev in lane_signals:
        if ev.from_phase != Phase.GREEN or ev.to_phase != Phase.YELLOW:
            continue
        if not track.covers(ev.t_change):
            continue
        state = track.state_at(ev.t_change)
        ahead = [s.position for s in lane_signals if s.position > state.position]
        if ev.position <= state.position or ev.position != min(ahead):
            continue
        if state.speed < cfg.min_speed:
            continue
        headway = (ev.position - state.position) / state.speed
        if headway > cfg.headway_cutoff:
            continue
        if state.acceleration < -thr:
            continue
        t_brake = _first_decel(track, ev.t_change, thr, cfg.max_response_time)
        if t_brake is None:
            continue
        # nearest car between the driver and the light; if it slows first the
        # driver may be reacting to it rather than to the signal
        lead, lead_pos = None, math.inf
        for other in all_tracks:
            if other.vehicle_id == track.vehicle_id or other.lane_id != track.lane_id:
                continue
            if not other.covers(ev.t_change):
                continue
            pos = other.state_at(ev.t_change).position
            if state.position < pos < ev.position and pos < lead_pos:
                lead, lead_pos = other, pos
        if lead is not None:
            if lead.state_at(ev.t_change).acceleration < -thr:
                continue
            t_lead = _first_decel(lead, ev.t_change, thr, cfg.max_response_time)
            if t_lead is not None and t_lead <= t_brake:
                continue
        if ev.signal_id in track.turns_at:
            continue
        out.append(BrtObservation(
            driver_id=track.driver_id,
            stimulus=StimulusType.SIGNAL,
            t_stimulus=float(ev.t_change),
            brt=t_brake - ev.t_change,
            time_headway=float(headway),
        ))
    return out


def find_leader(follower: VehicleTrack, tracks: Iterable[VehicleTrack]) -> Optional[VehicleTrack]:
    """Nearest same-lane vehicle ahead at the start of the common time span."""
    best, best_sep = None, math.inf
    for other in tracks:
        if other.vehicle_id == follower.vehicle_id or other.lane_id != follower.lane_id:
            continue
        t0 = max(other.t_start, follower.t_start)
        if t0 > min(other.t_end, follower.t_end):
            continue
        sep = other.state_at(t0).position - follower.state_at(t0).position
        if 0 < sep < best_sep:
            best, best_sep = other, sep
    return best


def detect_all(tracks: Sequence[VehicleTrack], signals: Sequence[SignalPhaseEvent] = (),
               cfg: DetectorConfig = DetectorConfig()) -> list[BrtObservation]:
    """Run all three detectors over a corpus; output sorted by (driver, time)."""
    out = []
    for tr in tracks:
        leader = find_leader(tr, tracks)
        if leader is not None:
            out.extend(detect_steady_state(leader, tr, cfg))
            out.extend(detect_nonsteady(leader, tr, cfg))
        if signals:
            out.extend(detect_signal(tr, tracks, signals, cfg))
    out.sort(key=lambda o: (o.driver_id, o.t_stimulus, o.stimulus.index))
    return out


# ---------------------------------------------------------------------------
# response cutoff calibration


def cutoff_loss(labeled, c: float, cfg: DetectorConfig = DetectorConfig(), penalty=None) -> float:
    """Sum of squared differences between detected and manual response times.

    ``labeled`` holds ``(leader, follower, manual_brt)`` triples.  An episode
    with no detection under ``c`` costs ``penalty(leader, follower)``, by
    default the squared duration of the follower's track.
    """
    cfg_c = replace(cfg, response_cutoff_c=c)
    loss = 0.0
    for leader, follower, manual in labeled:
        found = detect_nonsteady(leader, follower, cfg_c)
        if found:
            loss += (found[0].brt - manual) ** 2
        elif penalty is None:
            loss += (follower.t_end - follower.t_start) ** 2
        else:
            loss += penalty(leader, follower)
    return loss


def calibrate_cutoff(labeled, candidates: Sequence[float], cfg: DetectorConfig = DetectorConfig(),
                     penalty=None) -> float:
    """Grid search for the response cutoff; ties go to the smaller value."""
    candidates = list(candidates)
    if len(candidates) < 2:
        raise ValueError("calibrate_cutoff needs at least two candidate cutoffs")
    if not labeled:
        raise ValueError("calibrate_cutoff needs at least one labeled episode")
    best_c, best_loss = None, math.inf
    for c in sorted(candidates):
        loss = cutoff_loss(labeled, c, cfg, penalty)
        if loss < best_loss:
            best_c, best_loss = c, loss
    return best_c


# ---------------------------------------------------------------------------
# observation file


OBS_COLUMNS = ("driver_id", "stimulus", "t_stimulus", "time_headway", "brt")


def format_observations(obs: Iterable[BrtObservation], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(OBS_COLUMNS)
    for o in obs:
        w.writerow([o.driver_id, o.stimulus.value, repr(o.t_stimulus), repr(o.time_headway), repr(o.brt)])
    return buf.getvalue()


def parse_observations(text: str) -> list[BrtObservation]:
    out = []
    seen_header = False
    for line_no, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or (row[0].startswith("#")):
            continue
        if not seen_header and tuple(c.strip() for c in row) == OBS_COLUMNS:
            seen_header = True
            continue
        if len(row) != len(OBS_COLUMNS):
            raise ObservationError(f"line {line_no}: expected {len(OBS_COLUMNS)} fields, got {len(row)}")
        try:
            out.append(BrtObservation(
                driver_id=row[0].strip(),
                stimulus=StimulusType(row[1].strip()),
                t_stimulus=float(row[2]),
                time_headway=float(row[3]),
                brt=float(row[4]),
            ))
        except ValueError as exc:
            raise ObservationError(f"line {line_no}: {exc}") from None
    return out


def load_observations(path) -> list[BrtObservation]:
    return parse_observations(Path(path).read_text())


def save_observations(obs: Iterable[BrtObservation], path) -> None:
    Path(path).write_text(format_observations(obs))
