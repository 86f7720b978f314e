"""Shared radio medium modelled by airtime accounting.

There is no MAC: transmissions may overlap, every receiver inside sensing
range gets every message, and channel occupancy is measured as the union of
busy intervals (heard and own) inside a trailing window.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ChannelParams:
    data_rate: float = 6_000_000.0
    per_message_overhead: float = 40e-6
    header_bytes: int = 60
    sensing_range: float = 700.0
    cbr_window: float = 0.2

    def __post_init__(self) -> None:
        if self.data_rate <= 0:
            raise ValueError("data_rate must be > 0")
        if self.cbr_window <= 0:
            raise ValueError("cbr_window must be > 0")
        if self.per_message_overhead < 0 or self.header_bytes < 0:
            raise ValueError("overheads must be >= 0")


def airtime_of(size: float, params: ChannelParams) -> float:
    """Seconds on air for a ``size``-byte payload, header and preamble included."""
    return params.per_message_overhead + 8.0 * (size + params.header_bytes) / params.data_rate


@dataclass(frozen=True)
class Transmission:
    source_id: int
    start: float
    airtime: float
    size: int
    priority: int
    position_at_tx: tuple[float, float] = (0.0, 0.0)

    @property
    def end(self) -> float:
        return self.start + self.airtime


class CbrWindow:
    """Busy-time ledger of one vehicle.

    Heard intervals are merged on insertion so overlapping receptions count
    once. Own transmissions are kept apart: the radio is half-duplex, so
    time spent transmitting is not sensed and busy time is the heard time
    outside own transmissions plus the own airtime. Inserts must arrive in
    non-decreasing start order, which the event loop guarantees.
    """

    def __init__(self, window: float = 0.2):
        self.window = window
        self._starts: list[float] = []
        self._ends: list[float] = []
        self._own: list[tuple[float, float]] = []

    def add(self, start: float, end: float, own: bool = False) -> None:
        if own:
            self._own.append((start, end))
        elif self._ends and start <= self._ends[-1]:
            if end > self._ends[-1]:
                self._ends[-1] = end
        else:
            self._starts.append(start)
            self._ends.append(end)

    def extend(self, starts: np.ndarray, ends: np.ndarray) -> None:
        """Bulk insert heard intervals sorted by start (vectorised merge)."""
        if len(starts) == 0:
            return
        reach = np.maximum.accumulate(ends)
        new_group = np.empty(len(starts), dtype=bool)
        new_group[0] = True
        new_group[1:] = starts[1:] > reach[:-1]
        first = np.flatnonzero(new_group)
        last = np.append(first[1:] - 1, len(starts) - 1)
        g_starts, g_ends = starts[first].tolist(), reach[last].tolist()
        if self._ends and g_starts[0] <= self._ends[-1]:
            self._ends[-1] = max(self._ends[-1], g_ends[0])
            g_starts, g_ends = g_starts[1:], g_ends[1:]
        self._starts.extend(g_starts)
        self._ends.extend(g_ends)

    def prune(self, now: float) -> None:
        cutoff = now - self.window
        k = 0
        while k < len(self._ends) and self._ends[k] <= cutoff:
            k += 1
        if k:
            del self._starts[:k], self._ends[:k]
        self._own = [iv for iv in self._own if iv[1] > cutoff]

    def heard_time(self, now: float) -> float:
        """Sensed-busy time: heard intervals minus the time spent transmitting."""
        if not self._starts:
            return 0.0
        lo = now - self.window
        s = np.clip(np.asarray(self._starts), lo, now)
        e = np.clip(np.asarray(self._ends), lo, now)
        heard = float(np.sum(e - s))
        if not self._own:
            return heard
        own = [(max(a, lo), min(b, now)) for a, b in self._own if b > lo and a < now]
        both = union_length(list(zip(s.tolist(), e.tolist())) + own)
        return both - union_length(own)

    def own_time(self, now: float) -> float:
        lo = now - self.window
        return sum(max(min(e, now) - max(s, lo), 0.0) for s, e in self._own)

    def busy_time(self, now: float) -> float:
        return self.heard_time(now) + self.own_time(now)

    def intervals(self) -> list[tuple[float, float]]:
        """Merged heard intervals."""
        return list(zip(self._starts, self._ends))


def measure_cbr(ledger: CbrWindow, now: float) -> float:
    ledger.prune(now)
    return min(max(ledger.busy_time(now) / ledger.window, 0.0), 1.0)


def union_length(intervals: Iterable[tuple[float, float]]) -> float:
    """Total length covered by a set of intervals (reference implementation)."""
    total, cur_s, cur_e = 0.0, None, None
    for s, e in sorted(intervals):
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total


class Channel:
    """The medium: a log of every transmission plus who could hear it.

    Receive state is derived from the log on demand; :meth:`ledger` builds a
    vehicle's :class:`CbrWindow` and :meth:`heard_priorities` what its
    priority monitor would have recorded. ``neighbours`` is a boolean
    (source, receiver) matrix refreshed by :meth:`set_positions`; ``None``
    means everybody hears everybody.
    """

    _FIELDS = (("start", float), ("end", float), ("src", np.int64), ("prio", np.int64))

    def __init__(self, params: ChannelParams, n_vehicles: int, history: float = 1.0):
        self.params = params
        self.n_vehicles = n_vehicles
        self.history = max(history, params.cbr_window)
        self.neighbours: Optional[np.ndarray] = None
        self.tx_count = 0
        self._n = 0
        self._buf = {name: np.zeros(4096, dtype=dt) for name, dt in self._FIELDS}
        # row i marks who heard transmission i (the sender included)
        self._heard = np.zeros((4096, n_vehicles), dtype=bool)
        self._everyone = np.ones(n_vehicles, dtype=bool)
        self._max_airtime = 0.0

    def set_positions(self, positions: np.ndarray, ring_length: Optional[float] = None) -> None:
        self.neighbours = neighbour_matrix(positions, self.params.sensing_range, ring_length)

    def receivers_of(self, source: int) -> np.ndarray:
        """Ids of the vehicles that currently hear ``source``."""
        if self.neighbours is None:
            ids = np.arange(self.n_vehicles)
            return ids[ids != source]
        return np.flatnonzero(self.neighbours[source])

    def broadcast(self, tx: Transmission) -> None:
        """Put ``tx`` on the air."""
        if self._n == len(self._buf["start"]):
            self._grow(tx.start)
        i, b = self._n, self._buf
        b["start"][i] = tx.start
        b["end"][i] = tx.end
        b["src"][i] = tx.source_id
        b["prio"][i] = tx.priority
        row = self._heard[i]
        if self.neighbours is None:
            row[:] = True
        else:
            row[:] = self.neighbours[tx.source_id]
            row[tx.source_id] = True
        self._n += 1
        if tx.airtime > self._max_airtime:
            self._max_airtime = tx.airtime
        self.tx_count += 1

    def _grow(self, now: float) -> None:
        # drop history nobody can query any more, then double if still full
        cut = int(np.searchsorted(self._buf["start"][: self._n], now - self.history - self._max_airtime - 1.0))
        keep = self._n - cut
        size = len(self._buf["start"])
        new_size = size * 2 if keep > size // 2 else size
        for name, dt in self._FIELDS:
            fresh = np.zeros(new_size, dtype=dt)
            fresh[:keep] = self._buf[name][cut: self._n]
            self._buf[name] = fresh
        heard = np.zeros((new_size, self.n_vehicles), dtype=bool)
        heard[:keep] = self._heard[cut: self._n]
        self._heard = heard
        self._n = keep

    def _slice(self, vehicle: int, since: float, now: float):
        starts = self._buf["start"][: self._n]
        lo = int(np.searchsorted(starts, since - self._max_airtime, side="left"))
        hi = int(np.searchsorted(starts, now, side="right"))
        return lo, hi, self._heard[lo:hi, vehicle]

    def ledger(self, vehicle: int, now: float) -> "CbrWindow":
        """Busy-time ledger of ``vehicle`` covering the trailing CBR window."""
        window = self.params.cbr_window
        lo, hi, heard = self._slice(vehicle, now - window, now)
        start, end = self._buf["start"][lo:hi], self._buf["end"][lo:hi]
        own = self._buf["src"][lo:hi] == vehicle
        live = end > now - window
        ledger = CbrWindow(window)
        keep = heard & live & ~own
        ledger.extend(start[keep], end[keep])
        ledger._own = list(zip(start[own & live].tolist(), end[own & live].tolist()))
        return ledger

    def heard_priorities(self, vehicle: int, now: float, window: float) -> dict[int, float]:
        """Latest reception time per priority from neighbours in the window."""
        lo, hi, heard = self._slice(vehicle, now - window, now)
        start = self._buf["start"][lo:hi]
        prio = self._buf["prio"][lo:hi]
        mask = heard & (self._buf["src"][lo:hi] != vehicle) & (start >= now - window)
        out: dict[int, float] = {}
        for p in np.unique(prio[mask]).tolist():
            out[int(p)] = float(start[mask & (prio == p)].max())
        return out


def ring_distance(a: np.ndarray, b: np.ndarray, ring_length: Optional[float]) -> np.ndarray:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if ring_length is not None:
        dx = np.abs(d[..., 0]) % ring_length
        dx = np.minimum(dx, ring_length - dx)
        return np.hypot(dx, d[..., 1])
    return np.hypot(d[..., 0], d[..., 1])


def neighbour_matrix(positions: Sequence, sensing_range: float, ring_length: Optional[float] = None) -> np.ndarray:
    pos = np.asarray(positions, dtype=float)
    dist = ring_distance(pos[:, None, :], pos[None, :, :], ring_length)
    nb = dist <= sensing_range
    np.fill_diagonal(nb, False)
    return nb
