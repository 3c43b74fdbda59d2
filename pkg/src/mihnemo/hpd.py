"""Handoff policy decision engine.

A pure state machine: every input (MIH event, NEMO completion, timer, speed
estimate) goes through :meth:`HandoffPolicy.handle` and yields a list of
commands for the node to execute.  Feeding the same input log to a fresh
instance reproduces the same command log.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

from .mih import EventKind, LinkId, LinkType, MihEvent, ThresholdConfig, format_mac
from .radio import RadioModel
from .timing import (
    CellEdgeUnreachable,
    LatencyProfile,
    MarginConfig,
    TimingBudget,
    alpha_to_db,
    anticipation_times,
    thresholds,
    time_for_alpha,
)


class Scheme(str, enum.Enum):
    PROPOSED = "proposed"
    FMIPV6_FIXED_ALPHA = "fmipv6_fixed_alpha"
    MIPV6_REACTIVE = "mipv6_reactive"


class Phase(str, enum.Enum):
    STABLE = "Stable"
    PREPARING = "Preparing"
    PREPARED = "Prepared"
    SWITCHING = "Switching"


class HandoffType(str, enum.Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"


class PathStatus(str, enum.Enum):
    CONNECTING = "connecting"
    PREPARING = "preparing"
    READY = "ready"


# ---------------------------------------------------------------- inputs


@dataclass(frozen=True)
class RegistrationResult:
    time: float
    link: LinkId
    bid: int
    coa: int
    ok: bool


@dataclass(frozen=True)
class SwitchResult:
    time: float
    code: int


@dataclass(frozen=True)
class ConnectFailed:
    time: float
    link: LinkId


@dataclass(frozen=True)
class TimerFired:
    time: float
    token: int


@dataclass(frozen=True)
class SpeedUpdate:
    time: float
    speed: float


HpdInput = MihEvent | RegistrationResult | SwitchResult | ConnectFailed | TimerFired | SpeedUpdate

# ---------------------------------------------------------------- commands


@dataclass(frozen=True)
class ConfigureThreshold:
    link: LinkId
    config: ThresholdConfig


@dataclass(frozen=True)
class LinkConnect:
    target: LinkId
    force_scan: bool = False


@dataclass(frozen=True)
class AcquireAndRegister:
    """Configure a CoA on ``link`` (router discovery + DAD) and bind it at the HA."""

    link: LinkId
    bid: int
    active: bool


@dataclass(frozen=True)
class ReRegister:
    link: LinkId
    bid: int
    active: bool


@dataclass(frozen=True)
class MihSwitch:
    old: LinkId
    new: LinkId


@dataclass(frozen=True)
class SwitchTunnel:
    bid_active: int
    bid_target: int


@dataclass(frozen=True)
class Deregister:
    bid: int


@dataclass(frozen=True)
class Disconnect:
    link: LinkId


@dataclass(frozen=True)
class ArmTimer:
    deadline: float
    token: int


@dataclass(frozen=True)
class CancelTimer:
    token: int


@dataclass(frozen=True)
class Scan:
    interfaces: tuple[int, ...]


@dataclass(frozen=True)
class Condition:
    """A logged decision condition (no action)."""

    name: str
    detail: str = ""


Command = (ConfigureThreshold | LinkConnect | AcquireAndRegister | ReRegister | MihSwitch | SwitchTunnel
           | Deregister | Disconnect | ArmTimer | CancelTimer | Scan | Condition)


def _jsonable(value):
    if isinstance(value, LinkId):
        return str(value)
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, float):
        return round(value, 9)
    if isinstance(value, ThresholdConfig):
        return {k: (None if v is None else round(v, 6)) for k, v in value.__dict__.items()}
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def command_record(cmd: Command) -> dict:
    rec = {"command": type(cmd).__name__}
    rec.update({k: _jsonable(v) for k, v in cmd.__dict__.items()})
    return rec


def input_record(item: HpdInput) -> dict:
    if isinstance(item, MihEvent):
        return item.to_record()
    rec = {"input": type(item).__name__}
    rec.update({k: _jsonable(v) for k, v in item.__dict__.items()})
    return rec


# ---------------------------------------------------------------- caches


@dataclass
class AvailableLinkEntry:
    link: LinkId
    mih_capable: bool
    rss_dbm: float
    detected_at: float
    expire_time: float

    @property
    def interface_mac(self) -> int:
        return self.link.interface_mac

    @property
    def poa_mac(self) -> int:
        return self.link.poa_mac

    @property
    def link_type(self) -> LinkType:
        return self.link.link_type


@dataclass
class AlternativePathEntry:
    link_id: LinkId
    handoff_type: HandoffType
    status: PathStatus
    expire_time: float
    bid: int | None = None
    coa: int | None = None

    @property
    def interface(self) -> int:
        return self.link_id.interface_mac

    def to_record(self) -> dict:
        return {
            "link_id": str(self.link_id),
            "interface": format_mac(self.interface),
            "handoff_type": self.handoff_type.value,
            "coa": None if self.coa is None else f"{self.coa:#x}",
            "status": self.status.value,
            "expire_time": round(self.expire_time, 9),
        }


# ---------------------------------------------------------------- policy


@dataclass
class HpdConfig:
    scheme: Scheme
    radio_models: dict[int, RadioModel]
    profiles: dict[LinkType, LatencyProfile]
    margins: MarginConfig = field(default_factory=MarginConfig)
    poll: float = 0.1
    hysteresis_db: float = 1.0
    noise_guard_z: float = 0.0
    smoothing_delta: float = 0.1
    lsi_poll_guard: bool = True
    fixed_alpha: float = 1.05
    speed_floor: float = 0.1
    link_preference: tuple[LinkType, ...] = (LinkType.WLAN80211, LinkType.WMAN80216, LinkType.CELLULAR)
    cache_lifetime: float = 120.0
    path_lifetime: float = 30.0
    interfaces: tuple[int, ...] = ()
    reconfigure_step_db: float = 0.05

    def profile_for(self, link_type: LinkType) -> LatencyProfile:
        return self.profiles.get(link_type) or next(iter(self.profiles.values()))


@dataclass
class HpdState:
    active_link: LinkId
    active_bid: int
    active_coa: int
    phase: Phase = Phase.STABLE
    lgd_deadline_timer: float | None = None
    timer_token: int = 0
    available: dict[tuple[int, int], AvailableLinkEntry] = field(default_factory=dict)
    alternative: dict[int, AlternativePathEntry] = field(default_factory=dict)
    speed: float | None = None
    current_config: ThresholdConfig | None = None
    pending_switch: bool = False
    switch_retries: int = 0
    next_bid: int = 2
    hard_handoff: LinkId | None = None
    scanning: bool = False
    lgd_time: float | None = None
    switches: int = 0
    teardowns: int = 0


class HandoffPolicy:
    def __init__(self, config: HpdConfig, state: HpdState):
        self.config = config
        self.state = state
        self.decision_log: list[dict] = []
        self.input_log: list[HpdInput] = []

    # ------------------------------------------------------------ helpers
    @property
    def phase(self) -> Phase:
        return self.state.phase

    def _path(self) -> AlternativePathEntry | None:
        paths = sorted(self.state.alternative.values(), key=lambda p: p.link_id.interface_mac)
        return paths[0] if paths else None

    def _ready_path(self) -> AlternativePathEntry | None:
        p = self._path()
        return p if p is not None and p.status is PathStatus.READY else None

    def _budget(self) -> TimingBudget:
        cand = self.select_candidate()
        link_type = cand.link_type if cand else self.state.active_link.link_type
        return anticipation_times(self.config.profile_for(link_type), self.config.margins)

    def _model(self) -> RadioModel:
        return self.config.radio_models[self.state.active_link.poa_mac]

    def select_candidate(self) -> AvailableLinkEntry | None:
        """Rank by MIH capability, configured link-type preference, RSS, then detection recency."""
        pref = {t: i for i, t in enumerate(self.config.link_preference)}
        cands = [e for e in self.state.available.values()
                 if e.interface_mac != self.state.active_link.interface_mac]
        if not cands:
            return None
        return min(cands, key=lambda e: (not e.mih_capable, pref.get(e.link_type, len(pref)),
                                         -e.rss_dbm, -e.detected_at, e.interface_mac, e.poa_mac))

    def noise_guard_db(self, model: RadioModel) -> float:
        """``z`` standard deviations of the smoothed shadowing on ``model``."""
        d = self.config.smoothing_delta
        return self.config.noise_guard_z * model.sigma * math.sqrt(d / (2.0 - d))

    def compute_thresholds(self) -> tuple[ThresholdConfig, list[Command]]:
        cfg = self.config
        model = self._model()
        notes: list[Command] = []
        if cfg.scheme is not Scheme.PROPOSED:
            v = max(self.state.speed or 0.0, cfg.speed_floor)
            lgd = model.p_th + alpha_to_db(cfg.fixed_alpha)
            interval = max(time_for_alpha(model, v, cfg.fixed_alpha), 1e-6)
            return ThresholdConfig.from_levels(lgd, None, model.p_th, hysteresis_db=cfg.hysteresis_db,
                                               lgd_interval=interval, lsi_interval=interval), notes
        budget = self._budget()
        guarded = budget
        if cfg.lsi_poll_guard:
            guarded = replace(budget, t_lsi=budget.t_lsi + cfg.poll)
            if guarded.t_lsi >= guarded.t_lgd:
                guarded = replace(guarded, t_lgd=guarded.t_lsi + cfg.poll)
        v = max(self.state.speed or 0.0, cfg.speed_floor)
        try:
            th = thresholds(model, v, guarded)
            lgd, lsi = th.lgd_level_dbm, th.lsi_level_dbm
        except CellEdgeUnreachable as exc:
            notes.append(Condition("CellEdgeUnreachable", str(exc)))
            # fire as soon as possible: nothing can be anticipated at this speed
            lgd, lsi = model.p_rx_d0, (model.p_rx_d0 + model.p_th) / 2.0
        guard = self.noise_guard_db(model)
        lgd += guard
        lsi += guard
        return ThresholdConfig.from_levels(lgd, lsi, model.p_th, hysteresis_db=cfg.hysteresis_db,
                                           lgd_interval=budget.t_lgd, lsi_interval=budget.t_lsi), notes

    def _reconfigure(self, force: bool = False) -> list[Command]:
        config, notes = self.compute_thresholds()
        old = self.state.current_config
        if not force and old is not None:
            moved = max(abs(config.lgd_level_dbm - old.lgd_level_dbm),
                        abs((config.lsi_level_dbm or 0.0) - (old.lsi_level_dbm or 0.0)))
            if moved < self.config.reconfigure_step_db:
                return notes
        self.state.current_config = config
        return notes + [ConfigureThreshold(self.state.active_link, config)]

    def _arm_timer(self, now: float, budget: TimingBudget) -> list[Command]:
        cmds: list[Command] = []
        if self.state.lgd_deadline_timer is not None:
            cmds.append(CancelTimer(self.state.timer_token))
        self.state.timer_token += 1
        self.state.lgd_deadline_timer = now + 2.0 * budget.t_lgd
        cmds.append(ArmTimer(self.state.lgd_deadline_timer, self.state.timer_token))
        return cmds

    def _clear_timer(self) -> list[Command]:
        if self.state.lgd_deadline_timer is None:
            return []
        self.state.lgd_deadline_timer = None
        return [CancelTimer(self.state.timer_token)]

    def _new_bid(self) -> int:
        bid = self.state.next_bid
        self.state.next_bid += 1
        return bid

    def _start_switch(self, path: AlternativePathEntry) -> list[Command]:
        s = self.state
        s.phase = Phase.SWITCHING
        s.pending_switch = False
        cmds: list[Command] = [MihSwitch(s.active_link, path.link_id)]
        if path.coa != s.active_coa:
            cmds.append(SwitchTunnel(s.active_bid, path.bid))
        else:
            cmds += self._finish_switch(path)
        return cmds

    def _finish_switch(self, path: AlternativePathEntry) -> list[Command]:
        s = self.state
        old_bid, old_coa = s.active_bid, s.active_coa
        s.active_link = path.link_id
        s.active_bid = path.bid
        s.active_coa = path.coa
        s.alternative.pop(path.interface, None)
        s.available.pop((path.link_id.interface_mac, path.link_id.poa_mac), None)
        s.phase = Phase.STABLE
        s.switches += 1
        s.switch_retries = 0
        s.lgd_time = None
        s.current_config = None
        cmds = self._clear_timer()
        if old_coa != path.coa and old_bid != path.bid:
            cmds.append(Deregister(old_bid))
        return cmds + self._reconfigure(force=True)

    def start(self, time: float) -> list[Command]:
        """Initial threshold configuration for the active link."""
        cmds = self._reconfigure(force=True)
        self.decision_log.append({
            "time": round(time, 9),
            "input": {"input": "Start"},
            "phase_before": self.state.phase.value,
            "phase_after": self.state.phase.value,
            "commands": [command_record(c) for c in cmds],
        })
        return cmds

    def purge(self, now: float) -> None:
        s = self.state
        for key in [k for k, e in s.available.items() if e.expire_time < now]:
            del s.available[key]

    # ------------------------------------------------------------ dispatch
    def handle(self, item: HpdInput) -> list[Command]:
        before = self.state.phase
        self.input_log.append(item)
        self.purge(item.time)
        if isinstance(item, MihEvent):
            handler = {
                EventKind.LINK_DETECTED: self.on_link_detected,
                EventKind.LINK_GOING_DOWN: self.on_link_going_down,
                EventKind.LINK_UP: self.on_link_up,
                EventKind.LINK_SWITCH_IMMINENT: self.on_link_switch_imminent,
                EventKind.LINK_EVENT_ROLLBACK: self.on_rollback,
                EventKind.LINK_DOWN: self.on_link_down,
            }[item.kind]
            cmds = handler(item)
            t = item.time
        elif isinstance(item, RegistrationResult):
            cmds, t = self.on_registration(item), item.time
        elif isinstance(item, SwitchResult):
            cmds, t = self.on_switch_result(item), item.time
        elif isinstance(item, ConnectFailed):
            cmds, t = self.on_connect_failed(item), item.time
        elif isinstance(item, TimerFired):
            cmds, t = self.on_timer_expiry(item), item.time
        elif isinstance(item, SpeedUpdate):
            cmds, t = self.on_speed_update(item), item.time
        else:
            raise TypeError(f"unsupported input {item!r}")
        if cmds or before is not self.state.phase:
            self.decision_log.append({
                "time": round(t, 9),
                "input": input_record(item),
                "phase_before": before.value,
                "phase_after": self.state.phase.value,
                "commands": [command_record(c) for c in cmds],
            })
        return cmds

    def decision_lines(self) -> list[str]:
        return [json.dumps(rec, sort_keys=True) for rec in self.decision_log]

    # ------------------------------------------------------------ handlers
    def on_speed_update(self, item: SpeedUpdate) -> list[Command]:
        self.state.speed = item.speed
        if self.state.phase is not Phase.STABLE or self.state.lgd_time is not None:
            return []
        if self.state.hard_handoff is not None:
            return []
        return self._reconfigure()

    def on_link_detected(self, ev: MihEvent) -> list[Command]:
        s = self.state
        key = (ev.link.interface_mac, ev.link.poa_mac)
        known = key in s.available
        entry = AvailableLinkEntry(ev.link, bool(ev.mih_capable), ev.rss_dbm if ev.rss_dbm is not None else -math.inf,
                                   ev.time, ev.time + self.config.cache_lifetime)
        if known:
            s.available[key].expire_time = entry.expire_time
        else:
            s.available[key] = entry
        cmds: list[Command] = []
        if s.hard_handoff is None and s.phase is Phase.SWITCHING and s.scanning:
            # a scan found something: connect right away
            s.scanning = False
            s.hard_handoff = ev.link
            return [LinkConnect(ev.link)]
        if known or s.phase is not Phase.STABLE or self.config.scheme is Scheme.MIPV6_REACTIVE:
            return cmds
        if s.lgd_time is not None:
            return cmds
        return cmds + self._reconfigure(force=True)

    def on_link_going_down(self, ev: MihEvent) -> list[Command]:
        s = self.state
        if ev.link != s.active_link or self.config.scheme is Scheme.MIPV6_REACTIVE:
            return []
        if s.phase is not Phase.STABLE:
            return []
        s.lgd_time = ev.time
        budget = self._budget()
        path = self._path()
        if path is not None:
            # preparation survived an earlier rollback: reuse it
            s.phase = Phase.PREPARED if path.status is PathStatus.READY else Phase.PREPARING
            return self._arm_timer(ev.time, budget) if self.config.scheme is Scheme.PROPOSED else []
        cand = self.select_candidate()
        if cand is None:
            s.lgd_time = None
            return [Condition("NoCandidate", "available link cache is empty")]
        htype = HandoffType.HORIZONTAL if cand.link_type is s.active_link.link_type else HandoffType.VERTICAL
        s.alternative[cand.interface_mac] = AlternativePathEntry(
            cand.link, htype, PathStatus.CONNECTING, ev.time + self.config.path_lifetime)
        s.phase = Phase.PREPARING
        cmds: list[Command] = [LinkConnect(cand.link)]
        if self.config.scheme is Scheme.PROPOSED:
            cmds += self._arm_timer(ev.time, budget)
        return cmds

    def on_link_up(self, ev: MihEvent) -> list[Command]:
        s = self.state
        if s.hard_handoff is not None and ev.link == s.hard_handoff:
            return [AcquireAndRegister(ev.link, self._new_bid(), active=True)]
        path = s.alternative.get(ev.link.interface_mac)
        if path is None or path.link_id != ev.link or path.status is not PathStatus.CONNECTING:
            return []
        path.status = PathStatus.PREPARING
        path.bid = self._new_bid()
        active = self.config.scheme is not Scheme.PROPOSED
        return [AcquireAndRegister(ev.link, path.bid, active=active)]

    def on_registration(self, res: RegistrationResult) -> list[Command]:
        s = self.state
        if s.hard_handoff is not None and res.link == s.hard_handoff:
            s.hard_handoff = None
            if not res.ok:
                s.phase = Phase.STABLE
                return [Condition("RegistrationTimeout", str(res.link)), Disconnect(res.link)]
            path = AlternativePathEntry(res.link, HandoffType.VERTICAL, PathStatus.READY,
                                        res.time + self.config.path_lifetime, res.bid, res.coa)
            s.alternative[res.link.interface_mac] = path
            return self._finish_switch(path)
        path = s.alternative.get(res.link.interface_mac)
        if path is None or path.bid != res.bid:
            return []
        if not res.ok:
            s.alternative.pop(res.link.interface_mac, None)
            s.phase = Phase.STABLE
            s.lgd_time = None
            s.pending_switch = False
            return [Condition("RegistrationTimeout", str(res.link)), Disconnect(res.link)] + self._clear_timer()
        path.coa = res.coa
        path.status = PathStatus.READY
        if s.phase is Phase.SWITCHING:
            # re-registration after a rejected switch made the path active
            return self._finish_switch(path)
        if self.config.scheme is not Scheme.PROPOSED:
            # registered straight as the active binding
            return [MihSwitch(s.active_link, path.link_id)] + self._finish_switch(path)
        if s.pending_switch:
            return self._start_switch(path)
        if s.phase is Phase.PREPARING:
            s.phase = Phase.PREPARED
        return []

    def on_link_switch_imminent(self, ev: MihEvent) -> list[Command]:
        s = self.state
        if ev.link != s.active_link or self.config.scheme is not Scheme.PROPOSED:
            return []
        if s.phase is Phase.PREPARED:
            path = self._ready_path()
            if path is not None:
                return self._start_switch(path)
        if s.phase is Phase.PREPARING:
            s.pending_switch = True
            return [Condition("SwitchDeferred", "alternative path still being prepared")]
        if s.phase is Phase.STABLE:
            return self._link_down_cascade(ev.time)
        return []

    def on_switch_result(self, res: SwitchResult) -> list[Command]:
        s = self.state
        if s.phase is not Phase.SWITCHING:
            return []
        path = self._ready_path()
        if path is None:
            return []
        if res.code == 0:
            return self._finish_switch(path)
        if s.switch_retries == 0:
            s.switch_retries += 1
            return [Condition("SwitchRejected", f"code {res.code}, retrying"), SwitchTunnel(s.active_bid, path.bid)]
        s.switch_retries = 0
        return [Condition("SwitchRejected", f"code {res.code}, re-registering as active"),
                ReRegister(path.link_id, path.bid, active=True)]

    def on_rollback(self, ev: MihEvent) -> list[Command]:
        s = self.state
        if ev.link != s.active_link or s.phase not in (Phase.PREPARING, Phase.PREPARED):
            return []
        s.phase = Phase.STABLE
        s.lgd_time = None
        s.pending_switch = False
        return []

    def on_timer_expiry(self, item: TimerFired) -> list[Command]:
        s = self.state
        if item.token != s.timer_token or s.lgd_deadline_timer is None:
            return []
        s.lgd_deadline_timer = None
        if s.phase is Phase.SWITCHING:
            return []
        path = self._path()
        s.phase = Phase.STABLE
        s.lgd_time = None
        s.pending_switch = False
        if path is None:
            return []
        s.alternative.pop(path.interface, None)
        s.teardowns += 1
        cmds: list[Command] = [Disconnect(path.link_id)]
        if path.bid is not None:
            cmds.append(Deregister(path.bid))
        return cmds

    def on_connect_failed(self, item: ConnectFailed) -> list[Command]:
        s = self.state
        if s.hard_handoff == item.link:
            s.hard_handoff = None
            s.phase = Phase.STABLE
            return [Condition("TargetLost", str(item.link))] + self._link_down_cascade(item.time)
        path = s.alternative.get(item.link.interface_mac)
        if path is not None and path.link_id == item.link:
            s.alternative.pop(item.link.interface_mac)
            s.available.pop((item.link.interface_mac, item.link.poa_mac), None)
            if s.phase in (Phase.PREPARING, Phase.PREPARED):
                s.phase = Phase.STABLE
                s.lgd_time = None
            return [Condition("TargetLost", str(item.link))] + self._clear_timer()
        return []

    def on_link_down(self, ev: MihEvent) -> list[Command]:
        s = self.state
        if ev.link != s.active_link:
            path = s.alternative.get(ev.link.interface_mac)
            s.available.pop((ev.link.interface_mac, ev.link.poa_mac), None)
            if path is not None and path.link_id == ev.link:
                s.alternative.pop(ev.link.interface_mac)
                cmds: list[Command] = [Condition("AlternativeLost", str(ev.link))]
                if path.bid is not None and path.status is PathStatus.READY:
                    cmds.append(Deregister(path.bid))
                if s.phase in (Phase.PREPARING, Phase.PREPARED):
                    s.phase = Phase.STABLE
                    s.lgd_time = None
                    cmds += self._clear_timer()
                return cmds
            return []
        return self._link_down_cascade(ev.time)

    def _link_down_cascade(self, now: float) -> list[Command]:
        s = self.state
        if s.phase is Phase.SWITCHING:
            return []
        path = self._ready_path()
        if path is not None:
            return [Condition("LinkDownFallback", "switching to ready alternative path")] + self._start_switch(path)
        path = self._path()
        if path is not None:
            s.pending_switch = True
            s.phase = Phase.PREPARING
            return [Condition("LinkDownFallback", "waiting for alternative path preparation")]
        s.phase = Phase.SWITCHING
        s.lgd_time = None
        cmds = self._clear_timer()
        cand = self.select_candidate()
        if cand is not None:
            s.hard_handoff = cand.link
            force_scan = self.config.scheme is Scheme.MIPV6_REACTIVE
            return cmds + [Condition("LinkDownFallback", "hard handoff to available link"),
                           LinkConnect(cand.link, force_scan=force_scan)]
        s.scanning = True
        idle = tuple(i for i in self.config.interfaces if i != s.active_link.interface_mac)
        return cmds + [Condition("LinkDownFallback", "no alternative, scanning"), Scan(idle)]


def replay(config: HpdConfig, initial: HpdState, inputs: list[HpdInput]) -> list[list[Command]]:
    """Run ``inputs`` through a fresh policy built from copies of ``config``/``initial``."""
    import copy

    policy = HandoffPolicy(copy.deepcopy(config), copy.deepcopy(initial))
    return [policy.handle(item) for item in inputs]
