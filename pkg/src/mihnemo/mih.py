"""Per-interface MIH function: threshold monitoring, link detection and connection.

Primitives are in-process calls.  Link monitors evaluate the *smoothed* RSS of
each sample against the configured levels and emit events in level order
(going down, switch imminent, down) within a single sample.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable

from .radio import RssSample
from .timing import LatencyProfile


class LinkType(str, enum.Enum):
    WLAN80211 = "wlan80211"
    WMAN80216 = "wman80216"
    CELLULAR = "cellular"


class EventKind(str, enum.Enum):
    LINK_DETECTED = "LinkDetected"
    LINK_UP = "LinkUp"
    LINK_DOWN = "LinkDown"
    LINK_GOING_DOWN = "LinkGoingDown"
    LINK_SWITCH_IMMINENT = "LinkSwitchImminent"
    LINK_EVENT_ROLLBACK = "LinkEventRollback"


class ReasonCode(enum.IntEnum):
    SIGNAL_LOST = 1
    EXPLICIT_DISCONNECT = 2


class LinkPhase(str, enum.Enum):
    UP = "Up"
    GOING_DOWN = "GoingDown"
    DOWN = "Down"
    DETACHED = "Detached"


class MihError(Exception):
    pass


class TargetNotDetected(MihError):
    pass


class AlreadyAssociated(MihError):
    pass


class TargetLost(MihError):
    pass


MAC_MAX = (1 << 48) - 1


def format_mac(mac: int) -> str:
    return ":".join(f"{(mac >> s) & 0xFF:02x}" for s in range(40, -8, -8))


@dataclass(frozen=True)
class LinkId:
    interface_mac: int
    poa_mac: int
    link_type: LinkType

    def __post_init__(self) -> None:
        for name in ("interface_mac", "poa_mac"):
            value = getattr(self, name)
            if not 0 <= value <= MAC_MAX:
                raise ValueError(f"{name} must be a 48-bit value")

    def __str__(self) -> str:
        return f"{format_mac(self.interface_mac)}/{format_mac(self.poa_mac)}/{self.link_type.value}"


@dataclass(frozen=True)
class MihEvent:
    kind: EventKind
    link: LinkId
    time: float
    time_interval: float | None = None
    confidence: float | None = None
    reason: ReasonCode | None = None
    event_id: int | None = None
    rss_dbm: float | None = None
    mih_capable: bool | None = None

    def to_record(self) -> dict:
        rec = {
            "time": round(self.time, 9),
            "kind": self.kind.value,
            "interface": format_mac(self.link.interface_mac),
            "poa": format_mac(self.link.poa_mac),
            "link_type": self.link.link_type.value,
        }
        if self.time_interval is not None:
            rec["time_interval"] = round(self.time_interval, 9)
        if self.confidence is not None:
            rec["confidence"] = round(self.confidence, 6)
        if self.reason is not None:
            rec["reason"] = int(self.reason)
        if self.event_id is not None:
            rec["event_id"] = self.event_id
        if self.rss_dbm is not None:
            rec["rss_dbm"] = round(self.rss_dbm, 6)
        if self.mih_capable is not None:
            rec["mih_capable"] = self.mih_capable
        return rec


def event_log_lines(events: list[MihEvent]) -> list[str]:
    return [json.dumps(ev.to_record(), sort_keys=True) for ev in events]


@dataclass(frozen=True)
class ThresholdConfig:
    """Trigger levels in dBm.

    ``lsi_level_dbm`` may be None to disable the switch-imminent trigger.
    ``lgd_interval`` and ``lsi_interval`` are the anticipation times reported
    in the corresponding events.
    """

    lgd_level_dbm: float
    lsi_level_dbm: float | None
    ld_level_dbm: float
    rollback_level_dbm: float
    lgd_interval: float = 1.0
    lsi_interval: float = 0.1

    def __post_init__(self) -> None:
        lower = self.ld_level_dbm if self.lsi_level_dbm is None else self.lsi_level_dbm
        if not self.lgd_level_dbm > lower:
            raise ValueError("link-going-down level must exceed the switch-imminent level")
        if self.lsi_level_dbm is not None and not self.lsi_level_dbm > self.ld_level_dbm:
            raise ValueError("switch-imminent level must exceed the link-down level")
        if self.rollback_level_dbm < self.lgd_level_dbm:
            raise ValueError("rollback level must not be below the link-going-down level")
        if not self.lgd_interval > 0 or not self.lsi_interval > 0:
            raise ValueError("trigger intervals must be > 0")

    @classmethod
    def from_levels(
        cls,
        lgd: float,
        lsi: float | None,
        ld: float,
        *,
        hysteresis_db: float = 1.0,
        lgd_interval: float = 1.0,
        lsi_interval: float = 0.1,
    ) -> "ThresholdConfig":
        return cls(lgd, lsi, ld, lgd + hysteresis_db, lgd_interval, lsi_interval)


ConfidenceFn = Callable[[EventKind, float, float], float]


def _certain(kind: EventKind, rss: float, interval: float) -> float:
    return 1.0


@dataclass
class LinkMonitorState:
    link: LinkId
    config: ThresholdConfig
    smoothed_rss: float | None = None
    phase: LinkPhase = LinkPhase.UP
    last_lgd_event_id: int | None = None
    lsi_emitted: bool = False
    last_time: float | None = None
    next_event_id: int = 1
    confidence_fn: ConfidenceFn = field(default=_certain, repr=False, compare=False)

    def _new_id(self) -> int:
        eid = self.next_event_id
        self.next_event_id += 1
        return eid


def configure_link_threshold(state: LinkMonitorState, config: ThresholdConfig) -> LinkMonitorState:
    """Install new trigger levels; they apply from the next sample on."""
    if not isinstance(config, ThresholdConfig):
        raise TypeError("config must be a ThresholdConfig")
    state.config = config
    return state


def ingest_sample(state: LinkMonitorState, sample: RssSample) -> tuple[LinkMonitorState, list[MihEvent]]:
    if state.last_time is not None and not sample.time > state.last_time:
        raise ValueError("samples must arrive in strictly increasing time order")
    state.last_time = sample.time
    rss = sample.smoothed_dbm
    state.smoothed_rss = rss
    events: list[MihEvent] = []
    if state.phase in (LinkPhase.DOWN, LinkPhase.DETACHED):
        return state, events

    cfg = state.config
    t = sample.time
    was_going_down = state.phase is LinkPhase.GOING_DOWN

    if was_going_down and rss > cfg.rollback_level_dbm:
        events.append(MihEvent(EventKind.LINK_EVENT_ROLLBACK, state.link, t,
                               event_id=state.last_lgd_event_id, rss_dbm=rss))
        state.phase = LinkPhase.UP
        state.last_lgd_event_id = None
        state.lsi_emitted = False
        return state, events

    if state.phase is LinkPhase.UP and rss < cfg.lgd_level_dbm:
        eid = state._new_id()
        conf = state.confidence_fn(EventKind.LINK_GOING_DOWN, rss, cfg.lgd_interval)
        events.append(MihEvent(EventKind.LINK_GOING_DOWN, state.link, t,
                               time_interval=cfg.lgd_interval, confidence=conf,
                               event_id=eid, rss_dbm=rss))
        state.phase = LinkPhase.GOING_DOWN
        state.last_lgd_event_id = eid
        state.lsi_emitted = False

    if (state.phase is LinkPhase.GOING_DOWN and cfg.lsi_level_dbm is not None
            and not state.lsi_emitted and rss < cfg.lsi_level_dbm):
        conf = state.confidence_fn(EventKind.LINK_SWITCH_IMMINENT, rss, cfg.lsi_interval)
        events.append(MihEvent(EventKind.LINK_SWITCH_IMMINENT, state.link, t,
                               time_interval=cfg.lsi_interval, confidence=conf,
                               event_id=state._new_id(), rss_dbm=rss))
        state.lsi_emitted = True

    if state.phase is LinkPhase.GOING_DOWN and rss < cfg.ld_level_dbm:
        events.append(MihEvent(EventKind.LINK_DOWN, state.link, t,
                               reason=ReasonCode.SIGNAL_LOST, rss_dbm=rss))
        state.phase = LinkPhase.DOWN
    return state, events


def detach(state: LinkMonitorState, time: float) -> MihEvent | None:
    """Administrative disconnect; emits a LinkDown only if the link was still up."""
    was_up = state.phase in (LinkPhase.UP, LinkPhase.GOING_DOWN)
    state.phase = LinkPhase.DETACHED
    if was_up:
        return MihEvent(EventKind.LINK_DOWN, state.link, time, reason=ReasonCode.EXPLICIT_DISCONNECT)
    return None


@dataclass
class DetectionTable:
    """Tracks which (interface, PoA) pairs were reported in the current epoch."""

    associated: dict[int, int] = field(default_factory=dict)
    reported: set[tuple[int, int]] = field(default_factory=set)
    link_types: dict[tuple[int, int], LinkType] = field(default_factory=dict)

    def is_detected(self, link: LinkId) -> bool:
        return (link.interface_mac, link.poa_mac) in self.reported


def detect_link(
    table: DetectionTable,
    link: LinkId,
    rss_dbm: float,
    mih_capable: bool,
    time: float,
) -> MihEvent | None:
    """Report a newly heard PoA once per epoch; duplicates and the associated PoA are suppressed."""
    key = (link.interface_mac, link.poa_mac)
    if table.associated.get(link.interface_mac) == link.poa_mac:
        return None
    if key in table.reported:
        return None
    table.reported.add(key)
    table.link_types[key] = link.link_type
    return MihEvent(EventKind.LINK_DETECTED, link, time, rss_dbm=rss_dbm, mih_capable=mih_capable)


def end_epoch(table: DetectionTable, link: LinkId) -> None:
    """Forget a PoA (beacon lost or association ended) so a later beacon is reported again."""
    table.reported.discard((link.interface_mac, link.poa_mac))


@dataclass(frozen=True)
class PendingConnect:
    target: LinkId
    started: float
    complete_at: float


def connect_delay(profile: LatencyProfile, detected: bool) -> float:
    """L2 association time; scanning is skipped for an already detected PoA."""
    return (0.0 if detected else profile.t_scan) + profile.t_auth + profile.t_ass


def link_connect(
    table: DetectionTable,
    target: LinkId,
    profile: LatencyProfile,
    now: float,
    *,
    allow_scan: bool = False,
) -> PendingConnect:
    if table.associated.get(target.interface_mac) == target.poa_mac:
        raise AlreadyAssociated(f"{target} is already associated")
    detected = table.is_detected(target)
    if not detected and not allow_scan:
        raise TargetNotDetected(f"{target} has not been detected")
    return PendingConnect(target, now, now + connect_delay(profile, detected))


def complete_connect(
    table: DetectionTable,
    pending: PendingConnect,
    target_rss_dbm: float,
    p_th: float,
    config: ThresholdConfig,
) -> tuple[LinkMonitorState, MihEvent]:
    """Finish an association: raises TargetLost if the target faded below ``p_th``."""
    if target_rss_dbm < p_th:
        raise TargetLost(f"{pending.target} fell below threshold during association")
    link = pending.target
    table.associated[link.interface_mac] = link.poa_mac
    end_epoch(table, link)
    state = LinkMonitorState(link=link, config=config, smoothed_rss=target_rss_dbm)
    return state, MihEvent(EventKind.LINK_UP, link, pending.complete_at, rss_dbm=target_rss_dbm)


def disassociate(table: DetectionTable, link: LinkId) -> None:
    if table.associated.get(link.interface_mac) == link.poa_mac:
        del table.associated[link.interface_mac]
    end_epoch(table, link)

