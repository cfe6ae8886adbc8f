"""Raw table parsing, stop matching, OD inference and flow aggregation."""

from __future__ import annotations

import bisect
import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import IngestError

log = logging.getLogger(__name__)

RIDE_HEADER = ["bus_no", "card_no", "cardType", "riding_time", "routeId"]
EVENT_HEADER = ["bus_no", "enterTime", "leaveTime", "stopId", "routeId", "directId", "stayTime"]
REGISTRY_HEADER = ["stopId", "routeId", "seq", "lon", "lat"]
TIME_FORMAT = "%Y-%m-%d %H:%M:%S"

DAY_START = time(5, 0)
DAY_END = time(23, 0)
DAY_MINUTES = 18 * 60
STEP_CHOICES = (5, 15, 30)
MAX_MALFORMED_FRACTION = 0.10


@dataclass(frozen=True)
class RideRecord:
    bus_no: str
    card_no: str
    card_type: int
    riding_time: datetime
    route_id: str


@dataclass(frozen=True)
class StopEvent:
    bus_no: str
    enter_time: datetime
    leave_time: datetime
    stop_id: str
    route_id: str
    direct_id: int
    stay_time: int


class Boarding(NamedTuple):
    time: datetime
    stop_id: str
    route_id: str


@dataclass
class PassengerStopProfile:
    """Matched boardings per passenger, each list sorted by time."""

    boardings: dict
    matched: int = 0
    unmatched: int = 0

    @property
    def passengers(self):
        return sorted(self.boardings)

    def __len__(self):
        return len(self.boardings)

    def stop_counts(self, card_no):
        counts = defaultdict(int)
        for b in self.boardings[card_no]:
            counts[b.stop_id] += 1
        return dict(counts)

    def date_range(self):
        days = [b.time.date() for bs in self.boardings.values() for b in bs]
        if not days:
            return None
        return min(days), max(days)

    def subset(self, cards):
        keep = set(cards)
        return PassengerStopProfile({k: v for k, v in self.boardings.items() if k in keep})

    def to_json(self, path):
        payload = {
            "matched": self.matched,
            "unmatched": self.unmatched,
            "boardings": {
                card: [[b.time.strftime(TIME_FORMAT), b.stop_id, b.route_id] for b in bs]
                for card, bs in sorted(self.boardings.items())
            },
        }
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def from_json(cls, path):
        payload = json.loads(Path(path).read_text())
        boardings = {
            card: [Boarding(datetime.strptime(t, TIME_FORMAT), s, r) for t, s, r in rows]
            for card, rows in payload["boardings"].items()
        }
        return cls(boardings, payload.get("matched", 0), payload.get("unmatched", 0))


@dataclass
class ODMatrix:
    stops: list
    counts: np.ndarray

    def __post_init__(self):
        self.index = {s: i for i, s in enumerate(self.stops)}

    def __getitem__(self, key):
        a, b = key
        return int(self.counts[self.index[a], self.index[b]])

    def demands(self):
        """Ordered ``(origin, destination, count)`` triples with positive count."""
        rows, cols = np.nonzero(self.counts)
        return [(self.stops[i], self.stops[j], int(self.counts[i, j])) for i, j in zip(rows, cols)]

    def to_json(self, path):
        Path(path).write_text(json.dumps({"stops": self.stops, "counts": self.counts.tolist()}))

    @classmethod
    def from_json(cls, path):
        payload = json.loads(Path(path).read_text())
        return cls(list(payload["stops"]), np.asarray(payload["counts"], dtype=np.int64))


@dataclass
class FlowTensor:
    """Boarding counts, rows are time slots and columns are stops.

    Slots cover 05:00-23:00 of each day in ``days`` back to back.
    """

    values: np.ndarray
    step_minutes: int
    days: list
    stops: list
    start_time: datetime = field(init=False)

    def __post_init__(self):
        if self.step_minutes not in STEP_CHOICES:
            raise IngestError(f"step_minutes must be one of {STEP_CHOICES}, got {self.step_minutes}")
        expected = (len(self.days) * self.slots_per_day, len(self.stops))
        if self.values.shape != expected:
            raise IngestError(f"flow values have shape {self.values.shape}, expected {expected}")
        self.start_time = datetime.combine(self.days[0], DAY_START) if self.days else None

    @property
    def slots_per_day(self):
        return DAY_MINUTES // self.step_minutes

    def slot_times(self):
        step = timedelta(minutes=self.step_minutes)
        return [
            datetime.combine(d, DAY_START) + k * step
            for d in self.days
            for k in range(self.slots_per_day)
        ]

    def day_slice(self, day_index):
        n = self.slots_per_day
        return slice(day_index * n, (day_index + 1) * n)

    def with_values(self, values):
        return FlowTensor(np.asarray(values, dtype=np.float64), self.step_minutes, list(self.days), list(self.stops))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp"] + list(self.stops))
            for ts, row in zip(self.slot_times(), self.values):
                w.writerow([ts.strftime(TIME_FORMAT)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, step_minutes):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        stops = rows[0][1:]
        stamps = [datetime.strptime(r[0], TIME_FORMAT) for r in rows[1:]]
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
        days = sorted({ts.date() for ts in stamps})
        return cls(values.reshape(len(stamps), len(stops)), step_minutes, days, stops)


class ParseResult(NamedTuple):
    rides: list
    events: list
    malformed: dict


@dataclass
class StopRegistry:
    """Stop coordinates and route sequences.

    ``sequences`` maps ``(route_id, direct_id)`` to the ordered stop list.
    """

    coords: dict
    sequences: dict

    def route_stops(self):
        """Route id -> ordered stops (direction 0 first, then unseen stops of other directions)."""
        out = {}
        for (route, _direction), stops in sorted(self.sequences.items()):
            seen = out.setdefault(route, [])
            seen.extend(s for s in stops if s not in seen)
        return out

    @property
    def stops(self):
        return sorted(self.coords)


def _read_csv(path, header):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            found = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file, expected header {','.join(header)}") from None
        if [h.strip() for h in found] != header:
            raise IngestError(f"{path}: header {found} does not match {header}")
        return list(reader)


def _parse_rows(rows, parser, label):
    good, bad = [], 0
    for row in rows:
        try:
            good.append(parser(row))
        except (ValueError, IndexError):
            bad += 1
    if rows and bad / len(rows) > MAX_MALFORMED_FRACTION:
        raise IngestError(f"{label}: {bad} of {len(rows)} rows malformed (over 10%)")
    if bad:
        log.warning("%s: skipped %d malformed rows", label, bad)
    return good, bad


def _parse_ride(row):
    if len(row) != 5:
        raise ValueError("wrong field count")
    bus, card, ctype, ts, route = (c.strip() for c in row)
    if not bus or not card or not route:
        raise ValueError("empty id")
    return RideRecord(bus, card, int(ctype), datetime.strptime(ts, TIME_FORMAT), route)


def _parse_event(row):
    if len(row) != 7:
        raise ValueError("wrong field count")
    bus, enter, leave, stop, route, direct, stay = (c.strip() for c in row)
    if not bus or not stop or not route:
        raise ValueError("empty id")
    enter_t = datetime.strptime(enter, TIME_FORMAT)
    leave_t = datetime.strptime(leave, TIME_FORMAT)
    if leave_t < enter_t:
        raise ValueError("leave before enter")
    direction = int(direct)
    if direction not in (0, 1):
        raise ValueError("directId must be 0 or 1")
    actual = int((leave_t - enter_t).total_seconds())
    if int(float(stay)) != actual:
        log.warning("stayTime %s disagrees with leave-enter %ds at bus %s stop %s; using %d",
                    stay, actual, bus, stop, actual)
    return StopEvent(bus, enter_t, leave_t, stop, route, direction, actual)


def parse_tables(ride_path, stop_path):
    """Parse the ride-record and stop arriving/leaving CSV files.

    Malformed rows are skipped and counted; more than 10% malformed rows in
    either file raises :class:`IngestError`.
    """
    rides, bad_rides = _parse_rows(_read_csv(ride_path, RIDE_HEADER), _parse_ride, str(ride_path))
    events, bad_events = _parse_rows(_read_csv(stop_path, EVENT_HEADER), _parse_event, str(stop_path))
    return ParseResult(rides, events, {"rides": bad_rides, "events": bad_events})


def parse_registry(path):
    """Read ``stopId,routeId,seq,lon,lat`` (optional trailing ``directId``)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header[:5] != REGISTRY_HEADER or header[5:] not in ([], ["directId"]):
            raise IngestError(f"{path}: registry header {header} does not match {REGISTRY_HEADER}")
        coords, seqs = {}, defaultdict(list)
        for row in reader:
            stop, route, seq = row[0].strip(), row[1].strip(), int(row[2])
            direction = int(row[5]) if len(row) > 5 and row[5].strip() else 0
            lon, lat = row[3].strip(), row[4].strip()
            if lon and lat:
                coords.setdefault(stop, (float(lon), float(lat)))
            seqs[(route, direction)].append((seq, stop))
    sequences = {}
    for key, items in seqs.items():
        items.sort()
        sequences[key] = [s for _, s in items]
        positions = [q for q, _ in items]
        if positions != list(range(positions[0], positions[0] + len(positions))):
            raise IngestError(f"route {key[0]} direction {key[1]}: sequence positions not consecutive")
    return StopRegistry(coords, sequences)


def write_registry(registry, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REGISTRY_HEADER + ["directId"])
        for (route, direction), stops in sorted(registry.sequences.items()):
            for seq, stop in enumerate(stops):
                lon, lat = registry.coords[stop]
                w.writerow([stop, route, seq, repr(lon), repr(lat), direction])


def match_stops(rides, events, tau=20, registry=None):
    """Assign each ride to the stop event its timestamp falls into.

    A ride matches an event of the same bus and calendar date when
    ``enter - tau <= riding_time <= leave + tau``. Events are scanned in
    enter-time order and the first match wins. The boarding's route comes
    from the ride row.
    """
    if tau < 0:
        raise IngestError("tau must be non-negative")
    slack = timedelta(seconds=tau)
    groups = defaultdict(list)
    for e in events:
        groups[(e.bus_no, e.enter_time.date())].append(e)
    index = {}
    for key, evs in groups.items():
        evs.sort(key=lambda e: (e.enter_time, e.leave_time, e.stop_id))
        longest = max(e.leave_time - e.enter_time for e in evs)
        index[key] = (evs, [e.enter_time for e in evs], longest)

    known = set(registry.coords) if registry is not None else None
    boardings = defaultdict(list)
    matched = unmatched = 0
    for r in rides:
        entry = index.get((r.bus_no, r.riding_time.date()))
        hit = None
        if entry is not None:
            evs, enters, longest = entry
            t = r.riding_time
            lo = bisect.bisect_left(enters, t - slack - longest)
            hi = bisect.bisect_right(enters, t + slack)
            for e in evs[lo:hi]:
                if e.enter_time - slack <= t <= e.leave_time + slack:
                    hit = e
                    break
        if hit is None:
            unmatched += 1
            continue
        if known is not None and hit.stop_id not in known:
            raise IngestError(f"stop {hit.stop_id} is not in the stop registry")
        matched += 1
        boardings[r.card_no].append(Boarding(r.riding_time, hit.stop_id, r.route_id))
    for bs in boardings.values():
        bs.sort()
    if unmatched:
        log.info("match_stops: %d matched, %d unmatched rides", matched, unmatched)
    return PassengerStopProfile(dict(boardings), matched, unmatched)


def infer_od(profile, route_stops, stops=None):
    """Symmetric OD counts from same-route boarding pairs.

    Every unordered pair of a passenger's boarding events that carry the
    same route id, at two different stops of that route, adds one trip in
    each direction.
    """
    if stops is None:
        stops = sorted({s for seq in route_stops.values() for s in seq})
    idx = {s: i for i, s in enumerate(stops)}
    members = {r: set(seq) for r, seq in route_stops.items()}
    counts = np.zeros((len(stops), len(stops)), dtype=np.int64)
    for card in sorted(profile.boardings):
        by_route = defaultdict(list)
        for b in profile.boardings[card]:
            if b.route_id not in members:
                raise IngestError(f"route {b.route_id} of passenger {card} is not in the route registry")
            if b.stop_id in members[b.route_id]:
                by_route[b.route_id].append(idx[b.stop_id])
        for seq in by_route.values():
            for a in range(len(seq)):
                for c in range(a + 1, len(seq)):
                    i, j = seq[a], seq[c]
                    if i != j:
                        counts[i, j] += 1
                        counts[j, i] += 1
    return ODMatrix(list(stops), counts)


def _slot_of(ts, day_index, step_minutes, slots_per_day):
    minutes = (ts.hour - DAY_START.hour) * 60 + ts.minute
    if ts.time() < DAY_START or ts.time() >= DAY_END:
        return None
    return day_index * slots_per_day + minutes // step_minutes


def aggregate_flow(profile, step_minutes, passenger_subset=None, days=None, stops=None):
    """Count boardings per (time slot, stop) over the 05:00-23:00 window of each day."""
    if step_minutes not in STEP_CHOICES:
        raise IngestError(f"step_minutes must be one of {STEP_CHOICES}, got {step_minutes}")
    cards = profile.boardings if passenger_subset is None else {
        c: profile.boardings[c] for c in passenger_subset if c in profile.boardings
    }
    if days is None:
        rng = profile.date_range()
        days = [] if rng is None else [rng[0] + timedelta(d) for d in range((rng[1] - rng[0]).days + 1)]
    if stops is None:
        stops = sorted({b.stop_id for bs in profile.boardings.values() for b in bs})
    day_idx = {d: i for i, d in enumerate(days)}
    stop_idx = {s: i for i, s in enumerate(stops)}
    spd = DAY_MINUTES // step_minutes
    values = np.zeros((len(days) * spd, len(stops)))
    for bs in cards.values():
        for b in bs:
            di = day_idx.get(b.time.date())
            si = stop_idx.get(b.stop_id)
            if di is None or si is None:
                continue
            slot = _slot_of(b.time, di, step_minutes, spd)
            if slot is not None:
                values[slot, si] += 1
    return FlowTensor(values, step_minutes, list(days), list(stops))


def detect_gaps(rides, events, flow, route_stops):
    """Mask slots whose counts are unreliable because stop events are missing.

    A (bus, day) with ride records but no stop events marks the stops of
    the routes it served, over the slots spanned by its rides that day.
    """
    with_events = {(e.bus_no, e.enter_time.date()) for e in events}
    spans = {}
    for r in rides:
        key = (r.bus_no, r.riding_time.date())
        if key in with_events:
            continue
        lo, hi, routes = spans.get(key, (r.riding_time, r.riding_time, set()))
        routes.add(r.route_id)
        spans[key] = (min(lo, r.riding_time), max(hi, r.riding_time), routes)
    mask = np.zeros(flow.values.shape, dtype=bool)
    day_idx = {d: i for i, d in enumerate(flow.days)}
    stop_idx = {s: i for i, s in enumerate(flow.stops)}
    spd = flow.slots_per_day
    for (bus, day), (lo, hi, routes) in sorted(spans.items()):
        di = day_idx.get(day)
        if di is None:
            continue
        first = _slot_of(max(lo, datetime.combine(day, DAY_START)), di, flow.step_minutes, spd)
        last = _slot_of(min(hi, datetime.combine(day, DAY_END) - timedelta(seconds=1)), di, flow.step_minutes, spd)
        if first is None or last is None:
            continue
        cols = [stop_idx[s] for r in routes for s in route_stops.get(r, []) if s in stop_idx]
        if cols:
            mask[first:last + 1, cols] = True
    return mask


def interpolate_gaps(flow, gap_mask):
    """Fill masked entries by linear interpolation along time, per stop.

    Leading and trailing gaps take the nearest observed value. Unmasked
    entries are returned unchanged.
    """
    gap_mask = np.asarray(gap_mask, dtype=bool)
    values = np.array(flow.values, dtype=np.float64)
    if gap_mask.shape != values.shape:
        raise IngestError(f"gap mask shape {gap_mask.shape} differs from flow shape {values.shape}")
    t = np.arange(values.shape[0])
    for s in range(values.shape[1]):
        gaps = gap_mask[:, s]
        if not gaps.any():
            continue
        if gaps.all():
            raise IngestError(f"stop {flow.stops[s]} has no observed slots to interpolate from")
        known = ~gaps
        values[gaps, s] = np.interp(t[gaps], t[known], values[known, s])
    return flow.with_values(values)


def filter_passengers(profile, min_records, min_active_span_days, end_date=None):
    """Keep passengers with enough boardings whose first boarding is early enough.

    ``end_date`` defaults to the last boarding date in the profile.
    """
    if min_records < 0 or min_active_span_days < 0:
        raise IngestError("filter thresholds must be non-negative")
    if end_date is None:
        rng = profile.date_range()
        end_date = rng[1] if rng else date.min
    kept = {
        card: bs
        for card, bs in profile.boardings.items()
        if len(bs) >= min_records and (end_date - bs[0].time.date()).days >= min_active_span_days
    }
    return PassengerStopProfile(kept, profile.matched, profile.unmatched)
