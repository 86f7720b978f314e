"""Discrete-event simulation of vehicles, services, channel and controllers."""
from __future__ import annotations

import heapq
import itertools
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .channel import Channel, ChannelParams, Transmission, airtime_of, measure_cbr
from .config import ScenarioConfig
from .control import (
    BetaPolicy,
    ControllerMode,
    ControllerState,
    Demand,
    DemandSet,
    PriorityObservation,
    airtime_budget,
    allocate_tiered,
    apply_priority_override,
    compute_beta,
    limeric_update,
    lowest_active_priority,
)
from .metrics import MetricsStore
from .services import (
    S1_SIZES,
    CamThresholds,
    CollectivePerception,
    CooperativeAwareness,
    GenericService,
    Kinematics,
    SensorProfile,
    ServiceInstance,
    ServiceKind,
    ServiceProfile,
    detect_objects,
)

log = logging.getLogger(__name__)

TICK, TX, SHADOW, MOBILITY = range(4)


class EventQueue:
    """Time-ordered queue; equal times pop in insertion order."""

    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()
        self.last_time = -math.inf

    def push(self, time: float, *event) -> None:
        heapq.heappush(self._heap, (time, next(self._seq), event))

    def pop(self) -> tuple[float, tuple]:
        time, _seq, event = heapq.heappop(self._heap)
        if time < self.last_time:
            raise RuntimeError(f"event at {time} scheduled before {self.last_time}")
        self.last_time = time
        return time, event

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class Vehicle:
    vehicle_id: int
    vehicle_type: str
    kinematics: Kinematics
    controller: ControllerState
    observations: PriorityObservation
    sensor: Optional[SensorProfile] = None
    services: list[ServiceInstance] = field(default_factory=list)
    served: dict[str, bool] = field(default_factory=dict)
    phase: float = 0.0
    lane: int = 0
    target_speed: float = 0.0
    odometer: float = 0.0
    last_lane_change: float = -math.inf
    ticks: int = 0
    tokens: dict[int, int] = field(default_factory=dict)
    marks: dict[str, tuple] = field(default_factory=dict)  # service counters at the last tick


@dataclass
class World:
    config: ScenarioConfig
    vehicles: list[Vehicle]
    channel: Channel
    ring_length: Optional[float] = None

    def positions(self) -> np.ndarray:
        """Positions as the channel sees them (ring-wrapped x)."""
        pos = np.array([v.kinematics.position for v in self.vehicles], dtype=float)
        if self.ring_length is not None and len(pos):
            pos[:, 0] = np.mod(pos[:, 0], self.ring_length)
        return pos


def _seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in ss.spawn(n)]


def _controller(config: ScenarioConfig) -> ControllerState:
    c = config.controller
    dpa = config.mode == ControllerMode.DPA
    # fixed delta bounds would cut into the demand-proportional operating
    # points, so under DPA they only apply when asked for
    bounded = not dpa or c.bounds_under_dpa
    return ControllerState(
        alpha=c.alpha, beta=c.beta_base, cbr_target=c.cbr_target,
        delta_min=c.delta_min if bounded else None,
        delta_max=c.delta_max if bounded else None,
        gain_up_max=c.gain_up_max, gain_down_max=c.gain_down_max, mode=config.mode,
        clamp_reference_beta=c.beta_base if c.scale_clamps_with_beta and dpa else None,
    )


def _channel_params(config: ScenarioConfig) -> ChannelParams:
    return ChannelParams(**config.channel.model_dump())


SINGLE_HOP_SERVICES = {
    "type1": (ServiceKind.GENERIC_1,),
    "type2": (ServiceKind.GENERIC_1, ServiceKind.GENERIC_2),
    "type3": (ServiceKind.GENERIC_1, ServiceKind.GENERIC_2, ServiceKind.GENERIC_3),
}
_LABEL = {ServiceKind.GENERIC_1: "S1", ServiceKind.GENERIC_2: "S2", ServiceKind.GENERIC_3: "S3",
          ServiceKind.CAS: "CAS", ServiceKind.CPS: "CPS"}
_BASE_PERIOD = {ServiceKind.GENERIC_1: 0.1, ServiceKind.GENERIC_2: 0.01, ServiceKind.GENERIC_3: 0.1,
                ServiceKind.CAS: 0.1, ServiceKind.CPS: 0.1}


def build_single_hop(config: ScenarioConfig) -> World:
    if config.scenario != "single_hop":
        raise ValueError("build_single_hop needs scenario=single_hop")
    sh = config.single_hop
    n = sh.total
    params = _channel_params(config)
    seeds = iter(_seeds(config.seed, 4 * n + 1))
    layout = random.Random(next(seeds))
    prio = config.priority_map()
    types = ["type1"] * sh.type1 + ["type2"] * sh.type2 + ["type3"] * sh.type3
    # all vehicles sit in a small cluster, well inside sensing range
    side = math.ceil(math.sqrt(n))
    vehicles = []
    for vid, vtype in enumerate(types):
        pos = ((vid % side) * sh.spacing, (vid // side) * sh.spacing)
        veh = Vehicle(vid, vtype, Kinematics(pos), _controller(config),
                      PriorityObservation(config.controller.observation_window))
        veh.phase = 0.0 if config.synchronized else layout.uniform(0.0, config.control_epoch)
        for kind in SINGLE_HOP_SERVICES[vtype]:
            label = _LABEL[kind]
            start = layout.uniform(0.0, _BASE_PERIOD[kind])
            profile = ServiceProfile(label, prio[label], kind)
            svc = GenericService(profile, next(seeds), params.header_bytes, start)
            svc.real.min_size = config.services.s2_min_size
            svc.shadow.min_size = config.services.s2_min_size
            if kind is ServiceKind.GENERIC_1:
                # vehicles enter the size cycle at independent points
                svc.real.sequence_index = svc.shadow.sequence_index = layout.randrange(len(S1_SIZES))
            veh.services.append(svc)
        vehicles.append(veh)
    channel = Channel(params, n, history=config.controller.observation_window)
    positions = np.array([v.kinematics.position for v in vehicles], dtype=float)
    if n > 1 and np.max(np.hypot(*(positions[:, None, :] - positions[None, :, :]).transpose(2, 0, 1))) > params.sensing_range:
        raise ValueError("single-hop layout exceeds sensing range")
    return World(config, vehicles, channel)


def build_highway(config: ScenarioConfig) -> World:
    if config.scenario != "highway":
        raise ValueError("build_highway needs scenario=highway")
    hw = config.highway
    n, length = hw.vehicles, hw.length
    params = _channel_params(config)
    seeds = iter(_seeds(config.seed, 2 * n + 2))
    layout = random.Random(next(seeds))
    prio = config.priority_map()
    thresholds = CamThresholds(config.services.cam_position_threshold, config.services.cam_speed_threshold,
                               config.services.cam_heading_threshold)
    n_low = int(round(hw.low_sensor_fraction * n))
    sensors = [SensorProfile.low()] * n_low + [SensorProfile.high()] * (n - n_low)
    layout.shuffle(sensors)
    world = World(config, [], None, ring_length=length)  # type: ignore[arg-type]
    per_lane = [list(range(i, n, hw.lanes)) for i in range(hw.lanes)]
    lane_of = {}
    x_of = {}
    for lane, members in enumerate(per_lane):
        spacing = length / max(len(members), 1)
        offset = layout.uniform(0.0, spacing)
        for k, vid in enumerate(members):
            jitter = layout.uniform(-0.25, 0.25) * spacing
            x_of[vid] = (offset + k * spacing + jitter) % length
            lane_of[vid] = lane
    for vid in range(n):
        sensor = sensors[vid]
        speed = layout.uniform(hw.speed_min_kmh, hw.speed_max_kmh) / 3.6
        kin = Kinematics((x_of[vid], (lane_of[vid] + 0.5) * hw.lane_width), speed, 0.0)
        veh = Vehicle(vid, f"cas_cps_{sensor.quality}", kin, _controller(config),
                      PriorityObservation(config.controller.observation_window), sensor=sensor)
        veh.lane, veh.target_speed, veh.odometer = lane_of[vid], speed, x_of[vid]
        veh.phase = 0.0 if config.synchronized else layout.uniform(0.0, config.control_epoch)
        cas = CooperativeAwareness(ServiceProfile("CAS", prio["CAS"], ServiceKind.CAS),
                                   _kinematics_getter(veh), params.header_bytes,
                                   layout.uniform(0.0, 0.1), thresholds)
        cps = CollectivePerception(ServiceProfile("CPS", prio["CPS"], ServiceKind.CPS),
                                   _detector(world, vid, sensor), params.header_bytes,
                                   layout.uniform(0.0, 0.1))
        veh.services = [cas, cps]
        world.vehicles.append(veh)
    world.channel = Channel(params, n, history=config.controller.observation_window)
    world.channel.set_positions(world.positions(), length)
    world._positions_cache = world.positions()  # type: ignore[attr-defined]
    return world


def _kinematics_getter(veh: Vehicle) -> Callable[[], Kinematics]:
    return lambda: veh.kinematics


def _detector(world: World, vid: int, sensor: SensorProfile):
    return lambda: detect_objects(vid, world._positions_cache, sensor, world.ring_length)  # type: ignore[attr-defined]


def mobility_step(world: World, dt: float, now: float = 0.0) -> None:
    """Advance highway kinematics by ``dt``.

    Vehicles cruise at their own target speed. Closing in on a slower
    leader within the headway, a vehicle moves to an adjacent lane with room
    (left first), otherwise it matches the leader's speed. The road is a ring.
    """
    hw = world.config.highway
    length = world.ring_length
    vehicles = world.vehicles
    x = np.array([v.odometer % length for v in vehicles])
    lanes = np.array([v.lane for v in vehicles])
    speeds = np.array([v.kinematics.speed for v in vehicles])

    def gaps_in_lane(lane: int, x0: float, exclude: int) -> tuple[float, float, Optional[int]]:
        """(gap ahead, gap behind, leader id) around position x0 in ``lane``."""
        idx = np.flatnonzero(lanes == lane)
        idx = idx[idx != exclude]
        if idx.size == 0:
            return math.inf, math.inf, None
        ahead = np.mod(x[idx] - x0, length)
        behind = np.mod(x0 - x[idx], length)
        i = int(np.argmin(ahead))
        return float(ahead[i]), float(behind.min()), int(idx[i])

    new_speed = speeds.copy()
    new_lane = lanes.copy()
    for v in vehicles:
        i = v.vehicle_id
        headway = max(hw.min_gap, v.target_speed * hw.headway_time)
        gap, _, leader = gaps_in_lane(lanes[i], x[i], i)
        if leader is None or gap > headway or speeds[leader] >= v.target_speed:
            new_speed[i] = v.target_speed
            continue
        moved = False
        if now - v.last_lane_change >= hw.lane_change_cooldown:
            for cand in (lanes[i] + 1, lanes[i] - 1):
                if not 0 <= cand < hw.lanes:
                    continue
                ahead, behind, _ = gaps_in_lane(cand, x[i], i)
                if ahead > headway and behind > hw.min_gap:
                    new_lane[i] = cand
                    lanes[i] = cand  # later vehicles see the move this step
                    v.last_lane_change = now
                    new_speed[i] = v.target_speed
                    moved = True
                    break
        if not moved:
            new_speed[i] = min(v.target_speed, speeds[leader])
    for v in vehicles:
        i = v.vehicle_id
        v.lane = int(new_lane[i])
        v.odometer += float(new_speed[i]) * dt
        v.kinematics = Kinematics((v.odometer, (v.lane + 0.5) * hw.lane_width), float(new_speed[i]), 0.0)


class Simulation:
    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.world = build_single_hop(config) if config.scenario == "single_hop" else build_highway(config)
        self.params = self.world.channel.params
        self.policy = BetaPolicy(config.controller.beta_base, config.controller.r_base,
                                 config.controller.zero_demand_ratio)
        self.queue = EventQueue()
        self.metrics = MetricsStore(control_epoch=config.control_epoch, warmup=config.warmup,
                                    channel=self.params)
        self.metrics.meta = {"seed": config.seed, "priorities": config.priority_map()}
        self.now = 0.0

    # -- scheduling ---------------------------------------------------------
    def _schedule_tx(self, veh: Vehicle, sidx: int) -> None:
        svc = veh.services[sidx]
        token = veh.tokens.get(sidx, 0) + 1
        veh.tokens[sidx] = token
        if svc.next_time is not None and svc.next_time <= self.config.duration:
            self.queue.push(svc.next_time, TX, veh.vehicle_id, sidx, token)

    def _start(self) -> None:
        cfg = self.config
        n_ticks = int(math.floor(cfg.duration / cfg.control_epoch + 1e-9))
        for veh in self.world.vehicles:
            veh.served = {s.service_id: True for s in veh.services}
            for sidx, svc in enumerate(veh.services):
                self._schedule_tx(veh, sidx)
                if svc.shadow_time is not None:
                    self.queue.push(svc.shadow_time, SHADOW, veh.vehicle_id, sidx, 0)
            if n_ticks:
                self.queue.push(cfg.control_epoch - veh.phase, TICK, veh.vehicle_id, 1, 0)
        self._n_ticks = n_ticks
        if cfg.scenario == "highway":
            self.queue.push(cfg.highway.mobility_step, MOBILITY, -1, 0, 0)

    def run(self) -> MetricsStore:
        self._start()
        duration = self.config.duration
        queue = self.queue
        while len(queue) and queue.peek_time() <= duration + 1e-12:
            t, (kind, vid, arg, token) = queue.pop()
            self.now = t
            if kind == TX:
                self._on_tx(vid, arg, token)
            elif kind == TICK:
                self._on_tick(vid, arg)
            elif kind == SHADOW:
                self._on_shadow(vid, arg)
            else:
                self._on_mobility()
        self.metrics.meta["transmissions"] = self.world.channel.tx_count
        return self.metrics

    # -- handlers -----------------------------------------------------------
    def _on_tx(self, vid: int, sidx: int, token: int) -> None:
        veh = self.world.vehicles[vid]
        if veh.tokens.get(sidx) != token:
            return  # superseded by a reschedule
        svc = veh.services[sidx]
        size = svc.fire(self.now)
        if size:
            tx = Transmission(vid, self.now, airtime_of(size, self.params), size, svc.priority,
                              veh.kinematics.position)
            self.world.channel.broadcast(tx)
        self._schedule_tx(veh, sidx)

    def _on_shadow(self, vid: int, sidx: int) -> None:
        svc = self.world.vehicles[vid].services[sidx]
        svc.fire_shadow(self.now)
        if svc.shadow_time is not None and svc.shadow_time <= self.config.duration:
            self.queue.push(svc.shadow_time, SHADOW, vid, sidx, 0)

    def _on_mobility(self) -> None:
        step = self.config.highway.mobility_step
        mobility_step(self.world, step, self.now)
        self.world._positions_cache = self.world.positions()  # type: ignore[attr-defined]
        self.world.channel.set_positions(self.world._positions_cache, self.world.ring_length)  # type: ignore[attr-defined]
        if self.now + step <= self.config.duration + 1e-12:
            self.queue.push(self.now + step, MOBILITY, -1, 0, 0)

    def _on_tick(self, vid: int, k: int) -> None:
        veh = self.world.vehicles[vid]
        control_epoch_tick(self, veh, self.now)
        if k < self._n_ticks:
            self.queue.push((k + 1) * self.config.control_epoch - veh.phase, TICK, vid, k + 1, 0)


def control_epoch_tick(sim: Simulation, veh: Vehicle, now: float):
    """One congestion-control execution for ``veh``; returns the allocation."""
    ctl = veh.controller
    dpa = ctl.mode is ControllerMode.DPA
    channel = sim.world.channel
    cbr = measure_cbr(channel.ledger(veh.vehicle_id, now), now)
    observed_lowest = None
    if dpa:
        obs = veh.observations
        obs.last_heard = channel.heard_priorities(veh.vehicle_id, now, obs.window_length)
        observed_lowest = lowest_active_priority(obs, now)

    demands = DemandSet()
    traffic = {}
    # the fixed per-message overhead is charged as bits at the channel rate,
    # so the demand that sets beta weighs services the way airtime does
    overhead_bits = sim.params.per_message_overhead * sim.params.data_rate
    for svc in veh.services:
        snap = svc.demand(now)
        rate = snap.rate + snap.messages_per_second * overhead_bits
        demands.append(Demand(svc.service_id, svc.priority, rate, 0.0, veh.served.get(svc.service_id, True)))
        traffic[svc.service_id] = (snap.messages_per_second, snap.mean_size)

    if dpa:
        ctl.beta = compute_beta(demands, sim.policy)
    limeric_update(ctl, cbr)
    budget, _ = airtime_budget(ctl.delta, demands, traffic, sim.params)
    alloc = allocate_tiered(demands, budget)
    if dpa:
        alloc = apply_priority_override(alloc, demands, observed_lowest)
        if alloc.override_applied:
            sim.metrics.override_count += 1

    for sidx, (svc, d) in enumerate(zip(veh.services, demands)):
        grant = alloc.per_service[d.service_id]
        fraction = alloc.fraction(d) if d.required_rate > 0 else 1.0
        before = svc.next_time
        svc.adapt(fraction, now)
        if svc.next_time != before:
            sim._schedule_tx(veh, sidx)
        # a zero grant only drops the service from R_tot once its priority
        # has also gone quiet among the neighbours
        network_active = observed_lowest is not None and observed_lowest >= d.priority
        veh.served[d.service_id] = grant.granted_rate > 0 or network_active

    veh.ticks += 1
    m = sim.metrics
    m.record_cbr(now, veh.vehicle_id, cbr)
    m.record_delta(now, veh.vehicle_id, veh.vehicle_type, ctl.delta, ctl.beta)
    for svc in veh.services:
        sid = svc.service_id
        now_counts = (svc.demand_bits, svc.emitted_bits, svc.demand_messages, svc.emitted_messages)
        before = veh.marks.get(sid, (0.0, 0.0, 0, 0))
        veh.marks[sid] = now_counts
        d_bits, e_bits, d_msgs, e_msgs = (a - b for a, b in zip(now_counts, before))
        m.record_service(now, veh.vehicle_id, veh.vehicle_type, sid, svc.priority, d_bits, e_bits, d_msgs, e_msgs)
    return alloc


def run(config: ScenarioConfig) -> MetricsStore:
    return Simulation(config).run()
