"""Deterministic discrete-event simulator for the two-cell NEMO handoff scenario.

Topology (every hop is a directed FIFO edge)::

    CN --- R --- HA
           |\\
           | AR2 ~~~ MR:IF-2   (~~~ radio edge)
           AR1 ~~~~~ MR:IF-1

Downstream CBR packets travel CN -> R -> HA, are tunnelled by the HA to the
active CoA, then HA -> R -> ARk -> MR.  A radio hop is usable only while the
MR's MIH monitor for that interface reports the link Up or GoingDown.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field

from . import nemo
from .hpd import (
    AcquireAndRegister,
    ArmTimer,
    CancelTimer,
    Condition,
    ConfigureThreshold,
    ConnectFailed,
    Deregister,
    Disconnect,
    HandoffPolicy,
    HpdConfig,
    HpdState,
    LinkConnect,
    MihSwitch,
    Phase,
    RegistrationResult,
    ReRegister,
    Scan,
    Scheme,
    SpeedUpdate,
    SwitchResult,
    SwitchTunnel,
    TimerFired,
)
from .mih import (
    AlreadyAssociated,
    DetectionTable,
    EventKind,
    LinkId,
    LinkMonitorState,
    LinkPhase,
    MihEvent,
    TargetLost,
    ThresholdConfig,
    complete_connect,
    configure_link_threshold,
    detach,
    detect_link,
    disassociate,
    end_epoch,
    ingest_sample,
    link_connect,
)
from .radio import RadioModel, RssSample, SmoothingConfig, shadowed_rss, smooth, windowed_speed
from .scenario import CellConfig, ScenarioConfig
from .timing import confidence_level

MR_IID = 0x0200_00FF_FE00_0001
MNP_HOST_IID = 0x10
CN_ADDRESS = nemo.Address.parse("2001:db8:5::1", nemo.AddressRole.CN).value
BU_SIZE = 96
BA_SIZE = 80
SCHEMES = (Scheme.PROPOSED, Scheme.FMIPV6_FIXED_ALPHA, Scheme.MIPV6_REACTIVE)
GAP_TOLERANCE = 1e-9


class SimEventKind(str, enum.Enum):
    PACKET_DELIVERY = "PacketDelivery"
    BEACON_SAMPLE = "BeaconSample"
    TIMER_EXPIRY = "TimerExpiry"
    TRAFFIC_EMIT = "TrafficEmit"
    MOBILITY_STEP = "MobilityStep"


# Same-instant order: packets, then beacons (MIH events), then NEMO/L2 timers, then HPD deadlines.
PRIO_PACKET, PRIO_BEACON, PRIO_TIMER, PRIO_DEADLINE = 0, 1, 2, 3


@dataclass(frozen=True, order=True)
class SimEvent:
    time: float
    priority: int
    seq: int
    kind: SimEventKind = field(compare=False)
    payload: object = field(compare=False, default=None)


class EventQueue:
    def __init__(self) -> None:
        self._heap: list[SimEvent] = []
        self._seq = 0

    def push(self, time: float, kind: SimEventKind, payload=None, priority: int = PRIO_TIMER) -> SimEvent:
        ev = SimEvent(time, priority, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class Edge:
    src: str
    dst: str
    bandwidth: float
    delay: float
    radio: bool = False
    busy_until: float = 0.0

    def transmit(self, now: float, size_bytes: int) -> float:
        """Arrival time at ``dst``; the edge serializes packets FIFO."""
        start = max(now, self.busy_until)
        self.busy_until = start + size_bytes * 8.0 / self.bandwidth
        return self.busy_until + self.delay


def build_edges(cfg: ScenarioConfig) -> dict[tuple[str, str], Edge]:
    tp = cfg.topology
    edges: dict[tuple[str, str], Edge] = {}

    def wire(a: str, b: str, radio: bool = False) -> None:
        bw, delay = (tp.radio_bandwidth, tp.radio_delay) if radio else (tp.wired_bandwidth, tp.wired_delay)
        edges[(a, b)] = Edge(a, b, bw, delay, radio)
        edges[(b, a)] = Edge(b, a, bw, delay, radio)

    wire("CN", "R")
    wire("R", "HA")
    for cell in cfg.cells:
        wire("R", cell.name)
        wire(cell.name, "MR", radio=True)
    return edges


@dataclass
class Flight:
    packet: nemo.Packet
    path: tuple[str, ...]
    hop: int = 0


@dataclass
class PacketRecord:
    seq: int
    emit_time: float
    deliver_time: float | None = None
    status: str = "in_flight"
    via: str = ""
    reason: str = ""


def cell_model(cfg: ScenarioConfig, cell: CellConfig) -> RadioModel:
    r = cfg.radio
    sigma = r.sigma if cell.sigma is None else cell.sigma
    return RadioModel.from_coverage(cell.coverage, beta=r.beta, d0=r.d0, p_th=r.p_th,
                                    sigma=sigma, noise_seed=cfg.seed)


@dataclass
class RunMetrics:
    scheme: Scheme
    seed: int
    interval: float
    packet_size: int
    duration: float
    packets: list[PacketRecord] = field(default_factory=list)
    mih_events: list[MihEvent] = field(default_factory=list)
    decisions: list[dict] = field(default_factory=list)
    drop_reasons: Counter = field(default_factory=Counter)
    switches: int = 0
    teardowns: int = 0
    ha_mutations: int = 0
    binding_log: list[dict] = field(default_factory=list)
    rss_trace: list[tuple[float, str, float, float]] = field(default_factory=list)
    initial_link: LinkId | None = None

    @property
    def emitted(self) -> int:
        return len(self.packets)

    @property
    def delivered(self) -> int:
        return sum(p.status == "delivered" for p in self.packets)

    @property
    def lost(self) -> int:
        return sum(p.status == "dropped" for p in self.packets)

    def delivery_times(self) -> list[float]:
        return sorted(p.deliver_time for p in self.packets if p.deliver_time is not None)

    @property
    def max_gap(self) -> float:
        times = self.delivery_times()
        return max((b - a for a, b in zip(times, times[1:])), default=0.0)

    @property
    def handoff_latency(self) -> float:
        """Longest delivery gap beyond one CBR interval (0 when no gap exceeds it)."""
        excess = self.max_gap - self.interval
        return excess if excess > GAP_TOLERANCE else 0.0

    def throughput(self, bin_width: float = 1.0) -> list[tuple[float, float]]:
        """``(bin start, bits/s)`` over delivered payload bits."""
        times = self.delivery_times()
        horizon = max([self.duration] + times) if times or self.duration > 0 else 0.0
        n = int(math.ceil(horizon / bin_width - 1e-12)) if horizon > 0 else 0
        if times and n * bin_width <= times[-1]:
            n += 1
        bins = [0.0] * n
        for t in times:
            bins[min(int(t // bin_width), n - 1)] += self.packet_size * 8
        return [(i * bin_width, b / bin_width) for i, b in enumerate(bins)]

    def trigger_times(self) -> dict[str, float | None]:
        """First LD on the initial link and the last LGD/LSI preceding it."""
        out: dict[str, float | None] = {"LinkGoingDown": None, "LinkSwitchImminent": None, "LinkDown": None}
        for ev in self.mih_events:
            if ev.link != self.initial_link:
                continue
            if ev.kind is EventKind.LINK_DOWN:
                out["LinkDown"] = ev.time
                break
            if ev.kind is EventKind.LINK_GOING_DOWN:
                out["LinkGoingDown"] = ev.time
                out["LinkSwitchImminent"] = None
            elif ev.kind is EventKind.LINK_SWITCH_IMMINENT:
                out["LinkSwitchImminent"] = ev.time
            elif ev.kind is EventKind.LINK_EVENT_ROLLBACK:
                out["LinkGoingDown"] = out["LinkSwitchImminent"] = None
        return out

    def summary(self) -> dict:
        trig = self.trigger_times()
        return {
            "scheme": self.scheme.value,
            "seed": self.seed,
            "emitted": self.emitted,
            "delivered": self.delivered,
            "lost": self.lost,
            "max_gap_s": self.max_gap,
            "handoff_latency_s": self.handoff_latency,
            "switches": self.switches,
            "teardowns": self.teardowns,
            "t_lgd": trig["LinkGoingDown"],
            "t_lsi": trig["LinkSwitchImminent"],
            "t_ld": trig["LinkDown"],
        }

    # -------------------------------------------------------- serialisation
    def packet_csv(self) -> str:
        lines = ["seq,emit_time,deliver_time,status,via,reason"]
        for p in self.packets:
            dt = "" if p.deliver_time is None else f"{p.deliver_time:.9f}"
            lines.append(f"{p.seq},{p.emit_time:.9f},{dt},{p.status},{p.via},{p.reason}")
        return "\n".join(lines) + "\n"

    def throughput_csv(self) -> str:
        lines = ["time_s,throughput_bps"]
        lines += [f"{t:.3f},{v:.3f}" for t, v in self.throughput()]
        return "\n".join(lines) + "\n"

    def rss_csv(self) -> str:
        lines = ["time_s,cell,raw_dbm,smoothed_dbm"]
        lines += [f"{t:.3f},{c},{r:.6f},{s:.6f}" for t, c, r, s in self.rss_trace]
        return "\n".join(lines) + "\n"

    def triggers_jsonl(self) -> str:
        return "".join(json.dumps(ev.to_record(), sort_keys=True) + "\n" for ev in self.mih_events)

    def decisions_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.decisions)

    def bindings_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.binding_log)


class Simulation:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.q = EventQueue()
        self.edges = build_edges(cfg)
        self.now = 0.0
        self.smoothing = SmoothingConfig(cfg.delta)
        self.models = {c.name: cell_model(cfg, c) for c in cfg.cells}
        self.cell_by_mac = {c.poa_mac: c for c in cfg.cells}
        self.cell_by_prefix = {c.prefix: c for c in cfg.cells}
        self.iface_by_type = {lt: 0x020000000000 | (k + 1) for k, lt in enumerate(cfg.interfaces)}
        self.ifaces = tuple(self.iface_by_type[lt] for lt in cfg.interfaces)
        self.smoothed: dict[str, float | None] = {c.name: None for c in cfg.cells}
        self.history: dict[str, deque[RssSample]] = {
            c.name: deque(maxlen=int(round((cfg.hpd.speed_window + cfg.hpd.speed_spacing) / cfg.poll)) + 2)
            for c in cfg.cells}
        self.table = DetectionTable()
        self.monitors: dict[int, LinkMonitorState] = {}
        self.iface_coa: dict[int, int] = {}
        self.scan_until = -math.inf
        self.speed: float | None = None
        self._confidence_cache: dict[tuple, float] = {}
        self.pending_regs: dict[int, tuple[LinkId, int, int, bool]] = {}
        self.pending_switch: set[int] = set()
        self.cancelled_timers: set[int] = set()
        self._inputs: deque = deque()
        self._dispatching = False

        hoa = nemo.Address.from_prefix(cfg.home_prefix, 1, nemo.AddressRole.HOA).value
        self.mnp_host = nemo.Address.from_prefix(cfg.home_prefix, MNP_HOST_IID).value
        self.hoa = hoa
        self.ha = nemo.HomeAgent(cfg.ha_address)
        self.mr = nemo.MobileRouterAgent(hoa, cfg.ha_address, t_sa=cfg.t_sa, lifetime=cfg.binding_lifetime)

        init = cfg.cell(cfg.initial_cell)
        self.initial_link = self.link_for(init)
        self.metrics = RunMetrics(cfg.scheme, cfg.seed, cfg.traffic.interval, cfg.traffic.packet_size,
                                  cfg.duration, initial_link=self.initial_link)
        models_by_mac = {c.poa_mac: self.models[c.name] for c in cfg.cells}
        hpd_cfg = HpdConfig(
            scheme=cfg.scheme,
            radio_models=models_by_mac,
            profiles=dict(cfg.profiles),
            margins=cfg.margins,
            poll=cfg.poll,
            hysteresis_db=cfg.hpd.hysteresis_db,
            noise_guard_z=cfg.hpd.noise_guard_z,
            smoothing_delta=cfg.delta,
            lsi_poll_guard=cfg.hpd.lsi_poll_guard,
            fixed_alpha=cfg.hpd.fixed_alpha,
            speed_floor=cfg.hpd.speed_floor,
            link_preference=cfg.hpd.link_preference,
            cache_lifetime=cfg.hpd.cache_lifetime,
            path_lifetime=cfg.binding_lifetime,
            interfaces=self.ifaces,
        )
        coa = nemo.Address.from_prefix(init.prefix, MR_IID).value
        self.policy = HandoffPolicy(hpd_cfg, HpdState(active_link=self.initial_link, active_bid=1, active_coa=coa))
        self.uplink_iface = self.initial_link.interface_mac

    # ------------------------------------------------------------ helpers
    def link_for(self, cell: CellConfig) -> LinkId:
        return LinkId(self.iface_by_type[cell.link_type], cell.poa_mac, cell.link_type)

    def profile(self, link: LinkId):
        return self.cfg.profile_for(link.link_type)

    def default_thresholds(self) -> ThresholdConfig:
        p_th = self.cfg.radio.p_th
        return ThresholdConfig.from_levels(p_th + 3.0, None, p_th, hysteresis_db=self.cfg.hpd.hysteresis_db)

    def link_usable(self, iface: int, cell_name: str) -> bool:
        mon = self.monitors.get(iface)
        if mon is None or self.cell_by_mac[mon.link.poa_mac].name != cell_name:
            return False
        return mon.phase in (LinkPhase.UP, LinkPhase.GOING_DOWN)

    def confidence(self, kind: EventKind, rss: float, interval: float) -> float:
        model = self.models[self.cell_by_mac[self.policy.state.active_link.poa_mac].name]
        v = max(self.speed or 0.0, self.cfg.hpd.speed_floor)
        key = (model.p_rx_d0, round(rss, 2), round(interval, 4), round(v, 2))
        if key not in self._confidence_cache:
            self._confidence_cache[key] = confidence_level(
                model, v, rss, interval, self.cfg.hpd.confidence_trials,
                poll=self.cfg.poll, smoothing=self.smoothing, seed=self.cfg.seed)
        return self._confidence_cache[key]

    def _ha_mutated(self) -> None:
        self.metrics.binding_log.append({"time": round(self.now, 9), "bindings": self.ha.dump()})

    # ------------------------------------------------------------ HPD plumbing
    def feed(self, item) -> None:
        if isinstance(item, MihEvent):
            self.metrics.mih_events.append(item)
        self._inputs.append(item)
        if self._dispatching:
            return
        self._dispatching = True
        try:
            while self._inputs:
                for cmd in self.policy.handle(self._inputs.popleft()):
                    self.execute(cmd)
        finally:
            self._dispatching = False

    def execute(self, cmd) -> None:
        now = self.now
        if isinstance(cmd, ConfigureThreshold):
            mon = self.monitors.get(cmd.link.interface_mac)
            if mon is not None and mon.link == cmd.link:
                configure_link_threshold(mon, cmd.config)
        elif isinstance(cmd, LinkConnect):
            self.start_connect(cmd.target, cmd.force_scan)
        elif isinstance(cmd, AcquireAndRegister):
            cell = self.cell_by_mac[cmd.link.poa_mac]
            coa = nemo.Address.from_prefix(cell.prefix, MR_IID).value
            self.iface_coa[cmd.link.interface_mac] = coa
            prof = self.profile(cmd.link)
            ready = now + prof.rtt_mr_ar + prof.t_dad + self.mr.sa_delay(coa)
            self.q.push(ready, SimEventKind.TIMER_EXPIRY, ("send_bu", cmd.link, cmd.bid, coa, cmd.active))
        elif isinstance(cmd, ReRegister):
            coa = self.iface_coa.get(cmd.link.interface_mac)
            if coa is None:
                self.feed(RegistrationResult(now, cmd.link, cmd.bid, 0, ok=False))
            else:
                self.send_bu(cmd.link, cmd.bid, coa, cmd.active)
        elif isinstance(cmd, MihSwitch):
            self.uplink_iface = cmd.new.interface_mac
        elif isinstance(cmd, SwitchTunnel):
            self.send_switch(cmd.bid_active, cmd.bid_target)
        elif isinstance(cmd, Deregister):
            self.send_deregistration(cmd.bid)
        elif isinstance(cmd, Disconnect):
            self.disconnect(cmd.link)
        elif isinstance(cmd, ArmTimer):
            self.q.push(cmd.deadline, SimEventKind.TIMER_EXPIRY, ("hpd_timer", cmd.token), PRIO_DEADLINE)
        elif isinstance(cmd, CancelTimer):
            self.cancelled_timers.add(cmd.token)
        elif isinstance(cmd, Scan):
            t_scan = max(self.cfg.profile_for(lt).t_scan for lt in self.cfg.interfaces)
            self.scan_until = now + t_scan
            for cell in self.cfg.cells:
                link = self.link_for(cell)
                if link.interface_mac in cmd.interfaces:
                    end_epoch(self.table, link)
        elif isinstance(cmd, Condition):
            pass
        else:  # pragma: no cover - exhaustive over Command
            raise TypeError(f"unknown command {cmd!r}")

    # ------------------------------------------------------------ link layer
    def start_connect(self, target: LinkId, force_scan: bool) -> None:
        prof = self.profile(target)
        current = self.table.associated.get(target.interface_mac)
        if current is not None and current != target.poa_mac:
            self.disconnect(self.monitors[target.interface_mac].link)
        try:
            pending = link_connect(self.table, target, prof, self.now, allow_scan=True)
        except AlreadyAssociated:
            self.feed(MihEvent(EventKind.LINK_UP, target, self.now))
            return
        done = pending.complete_at
        if force_scan and self.table.is_detected(target):
            done += prof.t_scan
        self.q.push(done, SimEventKind.TIMER_EXPIRY, ("connect_done", pending))

    def finish_connect(self, pending) -> None:
        cell = self.cell_by_mac[pending.target.poa_mac]
        rss = self.smoothed[cell.name]
        rss = -math.inf if rss is None else rss
        try:
            mon, ev = complete_connect(self.table, pending, rss, self.cfg.radio.p_th, self.default_thresholds())
        except TargetLost:
            self.feed(ConnectFailed(self.now, pending.target))
            return
        mon.confidence_fn = self.confidence
        self.monitors[pending.target.interface_mac] = mon
        self.feed(MihEvent(EventKind.LINK_UP, ev.link, self.now, rss_dbm=ev.rss_dbm))

    def disconnect(self, link: LinkId) -> None:
        if self.table.associated.get(link.interface_mac) != link.poa_mac:
            return
        disassociate(self.table, link)
        self.iface_coa.pop(link.interface_mac, None)
        mon = self.monitors.pop(link.interface_mac, None)
        ev = detach(mon, self.now) if mon is not None else None
        if ev is not None:
            self.feed(ev)

    # ------------------------------------------------------------ NEMO signalling
    def send_control(self, iface: int, size: int, kind: str, payload) -> bool:
        mon = self.monitors.get(iface)
        if mon is None or not self.link_usable(iface, self.cell_by_mac[mon.link.poa_mac].name):
            return False
        cell = self.cell_by_mac[mon.link.poa_mac]
        coa = self.iface_coa.get(iface, self.hoa)
        pkt = nemo.Packet(src=coa, dst=self.cfg.ha_address, size=size, kind=kind, emit_time=self.now, payload=payload)
        self.forward(Flight(pkt, ("MR", cell.name, "R", "HA")))
        return True

    def send_to_coa(self, coa: int, size: int, kind: str, payload) -> None:
        cell = self.cell_by_prefix.get(coa >> 64)
        if cell is None:
            return
        pkt = nemo.Packet(src=self.cfg.ha_address, dst=coa, size=size, kind=kind, emit_time=self.now, payload=payload)
        self.forward(Flight(pkt, ("HA", "R", cell.name, "MR")))

    def send_bu(self, link: LinkId, bid: int, coa: int, active: bool, notify: bool = True) -> None:
        status = nemo.TunnelStatus.ACTIVE if active else nemo.TunnelStatus.STANDBY
        if not self.link_usable(link.interface_mac, self.cell_by_mac[link.poa_mac].name):
            if notify:
                self.feed(RegistrationResult(self.now, link, bid, coa, ok=False))
            return
        bu = self.mr.binding_update(bid, coa, status)
        self.pending_regs[bu.sequence] = (link, bid, coa, notify)
        self.send_control(link.interface_mac, BU_SIZE, "bu", bu)
        self.q.push(self.now + self.cfg.registration_timeout, SimEventKind.TIMER_EXPIRY, ("reg_timeout", bu.sequence))

    def send_deregistration(self, bid: int) -> None:
        entry = self.mr.bindings.pop(bid, None)
        if entry is None:
            return
        bu = self.mr.binding_update(bid, entry[0], entry[1], deregister=True)
        self.send_control(self.uplink_iface, BU_SIZE, "bu", bu)

    def send_switch(self, bid_active: int, bid_target: int) -> None:
        if bid_active not in self.mr.bindings or bid_target not in self.mr.bindings:
            self.feed(SwitchResult(self.now, int(nemo.ReplyCode.UNKNOWN_BINDING)))
            return
        req = self.mr.switch_request(bid_active, bid_target, int(self.now * 10))
        data = nemo.encode_mh(req)
        target_coa = self.mr.bindings[bid_target][0]
        iface = next((i for i, c in self.iface_coa.items() if c == target_coa), self.uplink_iface)
        self.pending_switch.add(req.sequence_id)
        sent = self.send_control(iface, nemo.IPV6_HEADER_LEN + len(data), "ts_req", data)
        if not sent:
            self.pending_switch.discard(req.sequence_id)
            self.feed(SwitchResult(self.now, -1))
            return
        self.q.push(self.now + self.cfg.registration_timeout, SimEventKind.TIMER_EXPIRY,
                    ("switch_timeout", req.sequence_id))

    def refresh_binding(self) -> None:
        s = self.policy.state
        if s.phase is Phase.STABLE and not s.alternative and s.hard_handoff is None and not self.pending_regs:
            coa = self.iface_coa.get(s.active_link.interface_mac)
            if coa is not None and s.active_bid in self.mr.bindings:
                self.send_bu(s.active_link, s.active_bid, coa, True, notify=False)
        nxt = self.now + self.cfg.binding_lifetime / 2.0
        if nxt <= self.cfg.duration:
            self.q.push(nxt, SimEventKind.TIMER_EXPIRY, ("refresh",))

    # ------------------------------------------------------------ forwarding
    def forward(self, flight: Flight) -> None:
        edge = self.edges[(flight.path[flight.hop], flight.path[flight.hop + 1])]
        arrival = edge.transmit(self.now, flight.packet.size)
        self.q.push(arrival, SimEventKind.PACKET_DELIVERY, flight, PRIO_PACKET)

    def drop(self, pkt: nemo.Packet, reason: str) -> None:
        if pkt.kind == "data":
            rec = self.metrics.packets[pkt.seq]
            rec.status, rec.reason = "dropped", reason
            self.metrics.drop_reasons[reason] += 1

    def on_delivery(self, flight: Flight) -> None:
        flight.hop += 1
        here = flight.path[flight.hop]
        prev = flight.path[flight.hop - 1]
        pkt = flight.packet
        radio_cell = prev if here == "MR" else (here if prev == "MR" else None)
        if radio_cell is not None:
            iface = self.iface_by_type[next(c.link_type for c in self.cfg.cells if c.name == radio_cell)]
            if not self.link_usable(iface, radio_cell):
                self.drop(pkt.inner or pkt, "radio")
                return
        if flight.hop < len(flight.path) - 1:
            self.forward(flight)
            return
        if here == "HA":
            self.at_home_agent(pkt)
        elif here == "MR":
            self.at_mobile_router(pkt, prev)

    def at_home_agent(self, pkt: nemo.Packet) -> None:
        before = self.ha.mutation_count
        try:
            self.ha.purge(self.now)
            if pkt.kind == "data":
                entry = self.ha.active(self.hoa)
                if entry is None:
                    self.drop(pkt, "no_route")
                    return
                cell = self.cell_by_prefix.get(entry.coa >> 64)
                if cell is None:
                    self.drop(pkt, "no_route")
                    return
                outer = nemo.encapsulate(pkt, nemo.Tunnel(self.cfg.ha_address, entry.coa))
                self.forward(Flight(outer, ("HA", "R", cell.name, "MR")))
            elif pkt.kind == "bu":
                bu: nemo.BindingUpdate = pkt.payload
                ack = self.ha.handle_binding_update(bu, self.now)
                if not bu.deregister:
                    self.send_to_coa(bu.coa, BA_SIZE, "ba", ack)
            elif pkt.kind == "ts_req":
                try:
                    req = nemo.decode_mh(pkt.payload)
                except nemo.MhDecodeError:
                    return
                reply = self.ha.handle_switch_request(req)
                data = nemo.encode_mh(reply)
                self.send_to_coa(req.coa_target, nemo.IPV6_HEADER_LEN + len(data), "ts_rep", data)
        finally:
            if self.ha.mutation_count != before:
                self._ha_mutated()

    def at_mobile_router(self, pkt: nemo.Packet, cell_name: str) -> None:
        if pkt.kind == "data" or pkt.inner is not None:
            accepted = frozenset(self.iface_coa.values()) | {self.hoa}
            try:
                inner = nemo.decapsulate(pkt, accepted)
            except nemo.TunnelError:
                self.drop(pkt.inner or pkt, "tunnel")
                return
            rec = self.metrics.packets[inner.seq]
            rec.status, rec.deliver_time, rec.via = "delivered", self.now, cell_name
        elif pkt.kind == "ba":
            ack: nemo.BindingAck = pkt.payload
            pending = self.pending_regs.pop(ack.sequence, None)
            if pending is None:
                return
            link, bid, coa, notify = pending
            entry = self.ha.cache.get((self.hoa, bid))
            status = entry.tunnel_status if entry else nemo.TunnelStatus.STANDBY
            self.mr.bindings[bid] = (coa, status)
            if notify:
                self.feed(RegistrationResult(self.now, link, bid, coa, ok=ack.accepted))
        elif pkt.kind == "ts_rep":
            try:
                reply = nemo.decode_mh(pkt.payload)
            except nemo.MhDecodeError:
                return
            if reply.sequence_id not in self.pending_switch:
                return
            self.pending_switch.discard(reply.sequence_id)
            if reply.replay_code == nemo.ReplyCode.ACCEPTED:
                for bid, (coa, _) in list(self.mr.bindings.items()):
                    entry = self.ha.cache.get((self.hoa, bid))
                    if entry is not None:
                        self.mr.bindings[bid] = (coa, entry.tunnel_status)
            self.feed(SwitchResult(self.now, int(reply.replay_code)))

    # ------------------------------------------------------------ timers
    def on_timer(self, payload) -> None:
        tag = payload[0]
        if tag == "hpd_timer":
            token = payload[1]
            if token not in self.cancelled_timers:
                self.feed(TimerFired(self.now, token))
        elif tag == "connect_done":
            self.finish_connect(payload[1])
        elif tag == "send_bu":
            _, link, bid, coa, active = payload
            self.send_bu(link, bid, coa, active)
        elif tag == "reg_timeout":
            pending = self.pending_regs.pop(payload[1], None)
            if pending is not None and pending[3]:
                link, bid, coa, _ = pending
                self.feed(RegistrationResult(self.now, link, bid, coa, ok=False))
        elif tag == "switch_timeout":
            if payload[1] in self.pending_switch:
                self.pending_switch.discard(payload[1])
                self.feed(SwitchResult(self.now, -1))
        elif tag == "refresh":
            self.refresh_binding()

    # ------------------------------------------------------------ radio
    def on_beacon(self, k: int) -> None:
        cfg = self.cfg
        t = self.now
        x, y = cfg.mobility.position(t)
        events: list[MihEvent] = []
        for idx, cell in enumerate(cfg.cells):
            model = self.models[cell.name]
            d = max(math.hypot(x - cell.center[0], y - cell.center[1]), 1e-9)
            raw = shadowed_rss(model, d, k, link_id=idx + 1)
            prev = self.smoothed[cell.name]
            value = raw if prev is None else smooth(self.smoothing, prev, raw)
            self.smoothed[cell.name] = value
            sample = RssSample(t, raw, value)
            self.metrics.rss_trace.append((t, cell.name, raw, value))
            self.history[cell.name].append(sample)
            link = self.link_for(cell)
            mon = self.monitors.get(link.interface_mac)
            if mon is not None and mon.link == link:
                _, evs = ingest_sample(mon, sample)
                events.extend(evs)
            elif t >= self.scan_until:
                if value >= cfg.radio.p_th:
                    ev = detect_link(self.table, link, value, cell.mih_capable, t)
                    if ev is not None:
                        events.append(ev)
                elif self.table.is_detected(link):
                    end_epoch(self.table, link)
        for ev in events:
            self.feed(ev)
        active_cell = self.cell_by_mac[self.policy.state.active_link.poa_mac]
        try:
            v = windowed_speed(self.models[active_cell.name], list(self.history[active_cell.name]),
                               spacing=cfg.hpd.speed_spacing, window=cfg.hpd.speed_window)
        except ValueError:
            v = None
        if v is not None:
            self.speed = v
            self.feed(SpeedUpdate(t, v))
        nxt = (k + 1) * cfg.poll
        if nxt <= cfg.duration + 1e-9:
            self.q.push(nxt, SimEventKind.BEACON_SAMPLE, k + 1, PRIO_BEACON)

    def on_emit(self, k: int) -> None:
        tr = self.cfg.traffic
        pkt = nemo.Packet(src=CN_ADDRESS, dst=self.mnp_host, size=tr.packet_size, seq=k, emit_time=self.now)
        self.metrics.packets.append(PacketRecord(k, self.now))
        self.forward(Flight(pkt, ("CN", "R", "HA")))
        nxt = tr.start + (k + 1) * tr.interval
        if nxt < self.cfg.duration - 1e-12:
            self.q.push(nxt, SimEventKind.TRAFFIC_EMIT, k + 1, PRIO_PACKET)

    # ------------------------------------------------------------ main loop
    def setup(self) -> None:
        cfg = self.cfg
        link = self.initial_link
        init = self.cell_by_mac[link.poa_mac]
        coa = self.policy.state.active_coa
        self.table.associated[link.interface_mac] = link.poa_mac
        mon = LinkMonitorState(link=link, config=self.default_thresholds())
        mon.confidence_fn = self.confidence
        self.monitors[link.interface_mac] = mon
        self.iface_coa[link.interface_mac] = coa
        self.ha.register(self.hoa, 1, coa, nemo.TunnelStatus.ACTIVE, cfg.binding_lifetime)
        self._ha_mutated()
        self.mr.bindings[1] = (coa, nemo.TunnelStatus.ACTIVE)
        self.mr.secured_coas.add(coa)
        assert init.name == cfg.initial_cell
        for cmd in self.policy.start(0.0):
            self.execute(cmd)
        self.q.push(0.0, SimEventKind.BEACON_SAMPLE, 0, PRIO_BEACON)
        if cfg.traffic.start < cfg.duration:
            self.q.push(cfg.traffic.start, SimEventKind.TRAFFIC_EMIT, 0, PRIO_PACKET)
        if cfg.binding_lifetime / 2.0 <= cfg.duration:
            self.q.push(cfg.binding_lifetime / 2.0, SimEventKind.TIMER_EXPIRY, ("refresh",))

    def run(self) -> RunMetrics:
        if self.cfg.duration <= 0:
            return self.metrics
        self.setup()
        while self.q:
            ev = self.q.pop()
            self.now = ev.time
            if ev.kind is SimEventKind.PACKET_DELIVERY:
                self.on_delivery(ev.payload)
            elif ev.kind is SimEventKind.BEACON_SAMPLE:
                self.on_beacon(ev.payload)
            elif ev.kind is SimEventKind.TRAFFIC_EMIT:
                self.on_emit(ev.payload)
            elif ev.kind is SimEventKind.TIMER_EXPIRY:
                self.on_timer(ev.payload)
        for rec in self.metrics.packets:
            if rec.status == "in_flight":  # pragma: no cover - the queue drains completely
                rec.status, rec.reason = "dropped", "in_flight"
        m = self.metrics
        m.decisions = self.policy.decision_log
        m.switches = self.policy.state.switches
        m.teardowns = self.policy.state.teardowns
        m.ha_mutations = self.ha.mutation_count
        return m


def run(config: ScenarioConfig) -> RunMetrics:
    return Simulation(config).run()


def compare_schemes(config: ScenarioConfig) -> dict[Scheme, RunMetrics]:
    """Paired runs sharing seed, topology and traffic, differing only in scheme."""
    return {s: run(config.with_(scheme=s)) for s in SCHEMES}
