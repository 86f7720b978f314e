"""Traffic generators and their congestion-driven adaptation.

Every service runs two generators side by side: a *shadow* that always
produces the unconstrained traffic and feeds the demand estimate, and the
*real* one whose interval/size/content is throttled by the allocation. Shadow
and real generators are seeded identically, so with no throttling they emit
the same messages.
"""
from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

S1_SIZES = (300, 190, 190, 190, 190)
S1_INTERVAL = 0.1
S2_INTERVAL = 0.01
S2_SIZES = (1200, 800)
S2_PROBS = (0.2, 0.8)
S3_FIXED_INTERVAL = 0.05
S3_EXP_MEAN = 0.05
S3_SIZES = tuple(range(200, 2001, 200))
CAM_SIZE = 250
CAM_CHECK_INTERVAL = 0.1
CAM_MAX_INTERVAL = 1.0
CPM_INTERVAL = 0.1
CPM_HEADER = 35
CPM_OBJECT_SIZE = 60
CPM_VOI_THRESHOLD = 0.3


class ServiceKind(str, Enum):
    GENERIC_1 = "generic_1"
    GENERIC_2 = "generic_2"
    GENERIC_3 = "generic_3"
    CAS = "cas"
    CPS = "cps"


class Adaptation(str, Enum):
    INTERVAL = "interval"
    SIZE = "size"
    BOTH = "both"
    RULE_CHECK_INTERVAL = "rule_check_interval"
    CONTENT_VOI = "content_voi"


ADAPTATION_OF = {
    ServiceKind.GENERIC_1: Adaptation.INTERVAL,
    ServiceKind.GENERIC_2: Adaptation.SIZE,
    ServiceKind.GENERIC_3: Adaptation.BOTH,
    ServiceKind.CAS: Adaptation.RULE_CHECK_INTERVAL,
    ServiceKind.CPS: Adaptation.CONTENT_VOI,
}

SERVICE_LABEL = {
    ServiceKind.GENERIC_1: "S1",
    ServiceKind.GENERIC_2: "S2",
    ServiceKind.GENERIC_3: "S3",
    ServiceKind.CAS: "CAS",
    ServiceKind.CPS: "CPS",
}


@dataclass(frozen=True)
class ServiceProfile:
    service_id: str
    priority: int
    kind: ServiceKind

    @property
    def adaptation(self) -> Adaptation:
        return ADAPTATION_OF[self.kind]


@dataclass
class GeneratorState:
    next_emit_time: float = 0.0
    sequence_index: int = 0
    rng: random.Random = field(default_factory=random.Random)
    current_interval: float = S1_INTERVAL
    current_size_scale: float = 1.0
    interval_scale: float = 1.0
    min_size: int = 100


# --- generic services -----------------------------------------------------

def s1_next(state: GeneratorState) -> tuple[int, float]:
    size = S1_SIZES[state.sequence_index % len(S1_SIZES)]
    state.sequence_index = (state.sequence_index + 1) % len(S1_SIZES)
    return size, state.current_interval


def s2_next(state: GeneratorState) -> tuple[int, float]:
    """Draw one Service 2 message.

    When scaling would push the size under ``min_size`` the message is sent
    at the floor and the following gap is stretched, so the payload rate
    still matches the scaled target.
    """
    raw = S2_SIZES[0] if state.rng.random() < S2_PROBS[0] else S2_SIZES[1]
    scaled = raw * state.current_size_scale
    if scaled >= state.min_size:
        return int(round(scaled)), S2_INTERVAL
    return state.min_size, S2_INTERVAL * state.min_size / scaled


def s3_next(state: GeneratorState) -> tuple[int, float]:
    base_interval = S3_FIXED_INTERVAL + state.rng.expovariate(1.0 / S3_EXP_MEAN)
    raw = S3_SIZES[state.rng.randrange(len(S3_SIZES))]
    size = max(1, int(round(raw * state.current_size_scale)))
    return size, base_interval * state.interval_scale


def adapt_to_allocation(
    profile: ServiceProfile, state: GeneratorState, granted_rate: float, demand: float
) -> GeneratorState:
    """Apply a grant to a generic generator; returns the same (mutated) state.

    CAS and CPS keep their own throttle knobs, see their classes.
    """
    f = min(granted_rate / demand, 1.0) if demand > 0 else 1.0
    f = max(f, 0.0)
    mode = profile.adaptation
    if f <= 0.0:
        return state
    if mode is Adaptation.INTERVAL:
        state.current_interval = S1_INTERVAL / f
    elif mode is Adaptation.SIZE:
        state.current_size_scale = f
    elif mode is Adaptation.BOTH:
        root = math.sqrt(f)
        state.current_size_scale = root
        state.interval_scale = 1.0 / root
    return state


# --- demand estimation ----------------------------------------------------

@dataclass
class DemandSnapshot:
    rate: float  # bits/s with per-message headers
    payload_rate: float
    messages_per_second: float
    mean_size: float


MIN_ESTIMATION_SPAN = 0.2


class DemandEstimator:
    """Trailing-window log of the messages the unconstrained generator produced."""

    def __init__(self, window: float = 1.0, header_bytes: int = 0, start_time: float = 0.0,
                 min_span: float = MIN_ESTIMATION_SPAN):
        self.window = window
        self.min_span = min(min_span, window)
        self.header_bytes = header_bytes
        self.start_time = start_time
        self.shadow_log: deque[tuple[float, int]] = deque()
        self._bytes = 0

    def log(self, time: float, size: int) -> None:
        self.shadow_log.append((time, size))
        self._bytes += size

    def _prune(self, now: float) -> None:
        cutoff = now - self.window
        log = self.shadow_log
        while log and log[0][0] <= cutoff:
            self._bytes -= log.popleft()[1]

    def snapshot(self, now: float) -> DemandSnapshot:
        self._prune(now)
        # before a full window has elapsed the rate is scaled by elapsed time,
        # but never by less than min_span: one early message over a few
        # milliseconds would otherwise read as a huge demand
        span = min(self.window, max(now - self.start_time, self.min_span))
        if now <= self.start_time or not self.shadow_log:
            return DemandSnapshot(0.0, 0.0, 0.0, 0.0)
        n = len(self.shadow_log)
        payload = 8.0 * self._bytes / span
        return DemandSnapshot(
            rate=payload + 8.0 * self.header_bytes * n / span,
            payload_rate=payload,
            messages_per_second=n / span,
            mean_size=self._bytes / n,
        )


def estimate_demand(est: DemandEstimator, now: float) -> float:
    return est.snapshot(now).rate


# --- CAM generation rules -------------------------------------------------

@dataclass
class Kinematics:
    position: tuple[float, float] = (0.0, 0.0)
    speed: float = 0.0
    heading: float = 0.0

    def __post_init__(self) -> None:
        if self.speed < 0:
            raise ValueError("speed must be >= 0")
        self.heading = self.heading % 360.0


@dataclass(frozen=True)
class CamThresholds:
    position: float = 4.0
    speed: float = 0.5
    heading: float = 4.0
    max_interval: float = CAM_MAX_INTERVAL


def _heading_change(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def cam_check(
    kin: Kinematics, last_cam: Optional[Kinematics], last_time: float, now: float,
    thresholds: CamThresholds = CamThresholds(),
) -> bool:
    if last_cam is None or now - last_time >= thresholds.max_interval - 1e-9:
        return True
    dx = kin.position[0] - last_cam.position[0]
    dy = kin.position[1] - last_cam.position[1]
    return (
        math.hypot(dx, dy) > thresholds.position
        or abs(kin.speed - last_cam.speed) > thresholds.speed
        or _heading_change(kin.heading, last_cam.heading) > thresholds.heading
    )


# --- collective perception ------------------------------------------------

@dataclass(frozen=True)
class SensorProfile:
    quality: str
    d_max: float

    @classmethod
    def low(cls) -> "SensorProfile":
        return cls("low", 50.0)

    @classmethod
    def high(cls) -> "SensorProfile":
        return cls("high", 150.0)


@dataclass(slots=True)
class DetectedObject:
    object_id: int
    distance: float
    voi: float


def voi(distance: float, d_max: float) -> float:
    if d_max <= 0:
        raise ValueError("d_max must be > 0")
    return max(1.0 - distance / d_max, 0.0)


def detect_objects(
    ego: int, positions: np.ndarray, sensor: SensorProfile, ring_length: Optional[float] = None
) -> list[DetectedObject]:
    """Unit-disc detection of every other vehicle closer than ``d_max``."""
    pos = np.asarray(positions, dtype=float)
    if len(pos) <= 1:
        return []
    dx = np.abs(pos[:, 0] - pos[ego, 0])
    if ring_length is not None:
        dx = np.minimum(dx % ring_length, ring_length - dx % ring_length)
    dist = np.hypot(dx, pos[:, 1] - pos[ego, 1])
    dist[ego] = np.inf
    idx = np.flatnonzero(dist < sensor.d_max)
    near = dist[idx].tolist()
    values = np.maximum(1.0 - dist[idx] / sensor.d_max, 0.0).tolist()
    return [DetectedObject(i, d, v) for i, d, v in zip(idx.tolist(), near, values)]


def build_cpm(objects: Sequence[DetectedObject], granted_bits_per_message: Optional[float] = None) -> tuple[int, int]:
    """Size in bytes and object count of the CPM; (0, 0) means no message.

    ``None`` for the budget builds the unconstrained message.
    """
    eligible = sorted((o for o in objects if o.voi > CPM_VOI_THRESHOLD), key=lambda o: (-o.voi, o.object_id))
    if not eligible:
        return 0, 0
    n = len(eligible)
    if granted_bits_per_message is not None:
        fit = int((granted_bits_per_message / 8.0 - CPM_HEADER) // CPM_OBJECT_SIZE)
        n = max(min(n, fit), 0)
    if n == 0:
        return 0, 0
    return CPM_HEADER + CPM_OBJECT_SIZE * n, n


# --- service instances used by the engine ---------------------------------

class ServiceInstance:
    """One service on one vehicle.

    The engine calls :meth:`fire` at ``next_time`` (real traffic) and, for
    services that need it, :meth:`fire_shadow` at ``shadow_time``.
    Cumulative ``emitted_bits``/``demand_bits`` count payload bits.
    """

    shadow_time: Optional[float] = None

    def __init__(self, profile: ServiceProfile, header_bytes: int, start_time: float):
        self.profile = profile
        self.estimator = DemandEstimator(1.0, header_bytes, start_time=0.0)
        self.fraction = 1.0
        self.next_time: Optional[float] = start_time
        self.emitted_bits = 0.0
        self.demand_bits = 0.0
        self.emitted_messages = 0
        self.demand_messages = 0

    @property
    def service_id(self) -> str:
        return self.profile.service_id

    @property
    def priority(self) -> int:
        return self.profile.priority

    def _log_shadow(self, time: float, size: int) -> None:
        self.estimator.log(time, size)
        self.demand_bits += 8.0 * size
        self.demand_messages += 1

    def _account(self, size: int) -> int:
        self.emitted_bits += 8.0 * size
        self.emitted_messages += 1
        return size

    def advance_shadow(self, now: float) -> None:
        pass

    def fire_shadow(self, now: float) -> None:
        pass

    def demand(self, now: float) -> DemandSnapshot:
        self.advance_shadow(now)
        return self.estimator.snapshot(now)

    def fire(self, now: float) -> Optional[int]:
        raise NotImplementedError

    def adapt(self, fraction: float, now: float) -> None:
        raise NotImplementedError


_NEXT = {
    ServiceKind.GENERIC_1: s1_next,
    ServiceKind.GENERIC_2: s2_next,
    ServiceKind.GENERIC_3: s3_next,
}


class GenericService(ServiceInstance):
    def __init__(self, profile: ServiceProfile, seed: int, header_bytes: int, start_time: float):
        super().__init__(profile, header_bytes, start_time)
        self._next = _NEXT[profile.kind]
        self.real = GeneratorState(next_emit_time=start_time, rng=random.Random(seed))
        self.shadow = GeneratorState(next_emit_time=start_time, rng=random.Random(seed))
        self._last_emit: Optional[float] = None
        self._pending_base: float = 0.0  # unscaled gap drawn at the last emission

    def advance_shadow(self, now: float) -> None:
        sh = self.shadow
        while sh.next_emit_time <= now:
            size, interval = self._next(sh)
            self._log_shadow(sh.next_emit_time, size)
            sh.next_emit_time += interval

    def fire(self, now: float) -> Optional[int]:
        self.advance_shadow(now)
        if self.fraction <= 0.0:
            self.next_time = None
            return None
        size, interval = self._next(self.real)
        self._last_emit = now
        self._pending_base = interval / self._interval_multiplier()
        self.next_time = now + interval
        self.real.next_emit_time = self.next_time
        return self._account(size)

    def _interval_multiplier(self) -> float:
        kind = self.profile.kind
        if kind is ServiceKind.GENERIC_1:
            return self.real.current_interval / S1_INTERVAL
        if kind is ServiceKind.GENERIC_3:
            return self.real.interval_scale
        return 1.0

    def adapt(self, fraction: float, now: float) -> None:
        self.fraction = min(max(fraction, 0.0), 1.0)
        if self.fraction <= 0.0:
            self.next_time = None
            return
        adapt_to_allocation(self.profile, self.real, self.fraction, 1.0)
        if self._last_emit is None:
            if self.next_time is None:
                self.next_time = now
        else:
            # re-time the pending gap with the new interval scaling
            self.next_time = max(now, self._last_emit + self._pending_base * self._interval_multiplier())
        self.real.next_emit_time = self.next_time


class CooperativeAwareness(ServiceInstance):
    """CAM generation: rule checks at a (possibly slowed) cadence."""

    def __init__(
        self, profile: ServiceProfile, kinematics: Callable[[], Kinematics], header_bytes: int,
        start_time: float, thresholds: CamThresholds = CamThresholds(),
    ):
        super().__init__(profile, header_bytes, start_time)
        self.kinematics = kinematics
        self.thresholds = thresholds
        self.check_interval = CAM_CHECK_INTERVAL
        self.shadow_time = start_time
        self._last = {"real": (None, -math.inf), "shadow": (None, -math.inf)}

    def _check(self, which: str, now: float) -> bool:
        kin = self.kinematics()
        last_kin, last_t = self._last[which]
        if cam_check(kin, last_kin, last_t, now, self.thresholds):
            self._last[which] = (Kinematics(kin.position, kin.speed, kin.heading), now)
            return True
        return False

    def fire_shadow(self, now: float) -> None:
        if self._check("shadow", now):
            self._log_shadow(now, CAM_SIZE)
        self.shadow_time = now + CAM_CHECK_INTERVAL

    def fire(self, now: float) -> Optional[int]:
        if self.fraction <= 0.0:
            self.next_time = None
            return None
        self.next_time = now + self.check_interval
        if self._check("real", now):
            return self._account(CAM_SIZE)
        return None

    def adapt(self, fraction: float, now: float) -> None:
        fraction = min(max(fraction, 0.0), 1.0)
        was_paused = self.fraction <= 0.0
        self.fraction = fraction
        if fraction <= 0.0:
            self.next_time = None
            return
        old = self.check_interval
        self.check_interval = min(CAM_CHECK_INTERVAL / fraction, self.thresholds.max_interval)
        if was_paused or self.next_time is None:
            self.next_time = now
        else:
            self.next_time = max(now, self.next_time - old + self.check_interval)


class CollectivePerception(ServiceInstance):
    """CPM every 100 ms; throttled by dropping the lowest-VoI objects.

    Whole objects rarely fill the per-message budget exactly, so the unused
    part is credited to the next CPM (at most one message's worth). Without
    it, rounding down would waste up to one object per message, which hurts
    vehicles with small CPMs the most.
    """

    def __init__(
        self, profile: ServiceProfile, detect: Callable[[], list[DetectedObject]],
        header_bytes: int, start_time: float,
    ):
        super().__init__(profile, header_bytes, start_time)
        self.detect = detect
        self.bits_per_message: Optional[float] = None
        self.credit = 0.0

    def fire(self, now: float) -> Optional[int]:
        self.next_time = now + CPM_INTERVAL
        objects = self.detect()
        full_size, _ = build_cpm(objects)
        if full_size:
            self._log_shadow(now, full_size)
        if self.fraction <= 0.0 or not full_size:
            return None
        if self.bits_per_message is None:
            return self._account(full_size)
        available = self.bits_per_message + self.credit
        size, _ = build_cpm(objects, available)
        self.credit = min(available - 8.0 * size, self.bits_per_message)
        return self._account(size) if size else None

    def adapt(self, fraction: float, now: float) -> None:
        self.fraction = min(max(fraction, 0.0), 1.0)
        if self.fraction >= 1.0:
            self.bits_per_message = None
            self.credit = 0.0
        else:
            payload_rate = self.estimator.snapshot(now).payload_rate
            self.bits_per_message = self.fraction * payload_rate * CPM_INTERVAL
