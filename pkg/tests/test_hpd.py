import copy

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mihnemo.hpd import (
    AcquireAndRegister,
    ArmTimer,
    Condition,
    ConfigureThreshold,
    Deregister,
    Disconnect,
    HandoffPolicy,
    HandoffType,
    HpdConfig,
    HpdState,
    LinkConnect,
    MihSwitch,
    PathStatus,
    Phase,
    RegistrationResult,
    Scan,
    Scheme,
    SpeedUpdate,
    SwitchResult,
    SwitchTunnel,
    TimerFired,
    replay,
)
from mihnemo.mih import EventKind, LinkId, LinkType, MihEvent
from mihnemo.radio import RadioModel
from mihnemo.timing import LatencyProfile, MarginConfig, anticipation_times

IF1, IF2, IF3 = 0x020000000001, 0x020000000002, 0x020000000003
AR1, AR2, AR3 = 0x0A0000000001, 0x0A0000000002, 0x0A0000000003
LINK1 = LinkId(IF1, AR1, LinkType.WLAN80211)
LINK2 = LinkId(IF2, AR2, LinkType.WMAN80216)
LINK3 = LinkId(IF3, AR3, LinkType.WLAN80211)
COA1, COA2, COA3 = 0x100, 0x200, 0x300
PROFILE = LatencyProfile(t_scan=0.2, t_auth=0.03, t_ass=0.05, t_dad=0.25, rtt_mr_ar=0.02, rtt_ar_ha=0.04)
MODEL = RadioModel.from_coverage(100.0, beta=3.0, p_th=-75.0)
BUDGET = anticipation_times(PROFILE, MarginConfig())


def policy(scheme=Scheme.PROPOSED, **kw):
    cfg = HpdConfig(scheme=scheme, radio_models={AR1: MODEL, AR2: MODEL, AR3: MODEL},
                    profiles={LinkType.WLAN80211: PROFILE, LinkType.WMAN80216: PROFILE},
                    interfaces=(IF1, IF2, IF3), **kw)
    return HandoffPolicy(cfg, HpdState(active_link=LINK1, active_bid=1, active_coa=COA1))


def ev(kind, link, t, **kw):
    return MihEvent(kind, link, t, **kw)


def detected(link, t=0.0, rss=-60.0, mih=True):
    return ev(EventKind.LINK_DETECTED, link, t, rss_dbm=rss, mih_capable=mih)


def kinds(cmds):
    return [type(c) for c in cmds]


def prepared(p, t=1.0):
    p.handle(detected(LINK2))
    p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, t, event_id=1))
    p.handle(ev(EventKind.LINK_UP, LINK2, t + 0.08))
    p.handle(RegistrationResult(t + 0.6, LINK2, 2, COA2, ok=True))
    return p


def test_detection_caches_and_reconfigures_active_link():
    p = policy()
    cmds = p.handle(detected(LINK2))
    assert (IF2, AR2) in p.state.available
    assert kinds(cmds) == [ConfigureThreshold]
    assert cmds[0].link == LINK1
    cfg = cmds[0].config
    assert cfg.lgd_level_dbm > cfg.lsi_level_dbm > cfg.ld_level_dbm == MODEL.p_th
    assert cfg.rollback_level_dbm == pytest.approx(cfg.lgd_level_dbm + 1.0)


def test_repeat_detection_refreshes_only():
    p = policy()
    p.handle(detected(LINK2, t=0.0))
    assert p.handle(detected(LINK2, t=5.0)) == []
    assert p.state.available[(IF2, AR2)].expire_time == pytest.approx(5.0 + p.config.cache_lifetime)


def test_detection_while_switching_does_not_reconfigure():
    p = prepared(policy())
    p.handle(ev(EventKind.LINK_SWITCH_IMMINENT, LINK1, 2.0, event_id=2))
    assert p.phase is Phase.SWITCHING
    assert p.handle(detected(LINK3, t=2.01)) == []
    assert (IF3, AR3) in p.state.available


def test_expired_entries_are_purged():
    p = policy(cache_lifetime=1.0)
    p.handle(detected(LINK2, t=0.0))
    p.handle(SpeedUpdate(1.5, 10.0))
    assert p.state.available == {}


def test_faster_speed_raises_lgd_level():
    p = policy()
    p.handle(detected(LINK2))
    slow = p.state.current_config.lgd_level_dbm
    cmds = p.handle(SpeedUpdate(0.1, 30.0))
    assert kinds(cmds) == [ConfigureThreshold]
    assert cmds[0].config.lgd_level_dbm > slow


def test_small_speed_changes_do_not_reconfigure():
    p = policy()
    p.handle(SpeedUpdate(0.1, 20.0))
    assert p.handle(SpeedUpdate(0.2, 20.0001)) == []


def test_unreachable_speed_is_reported():
    p = policy()
    cmds = p.handle(SpeedUpdate(0.1, 5000.0))
    assert any(isinstance(c, Condition) and c.name == "CellEdgeUnreachable" for c in cmds)
    assert isinstance(cmds[-1], ConfigureThreshold)


def test_lgd_connects_and_arms_timer():
    p = policy()
    p.handle(detected(LINK2))
    cmds = p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 3.0, event_id=1))
    assert kinds(cmds) == [LinkConnect, ArmTimer]
    assert cmds[0].target == LINK2
    assert cmds[1].deadline == pytest.approx(3.0 + 2 * BUDGET.t_lgd)
    assert p.phase is Phase.PREPARING
    assert p.state.alternative[IF2].handoff_type is HandoffType.VERTICAL


def test_lgd_with_empty_cache_is_no_candidate():
    p = policy()
    cmds = p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 3.0, event_id=1))
    assert [c.name for c in cmds] == ["NoCandidate"]
    assert p.phase is Phase.STABLE
    assert p.state.lgd_deadline_timer is None


def test_mih_capable_candidate_preferred():
    p = policy()
    p.handle(detected(LINK2, rss=-50.0, mih=False))
    p.handle(detected(LINK3, rss=-70.0, mih=True))
    cmds = p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 3.0, event_id=1))
    assert cmds[0].target == LINK3


def test_same_type_target_is_horizontal():
    p = policy()
    p.handle(detected(LINK3))
    p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 3.0, event_id=1))
    assert p.state.alternative[IF3].handoff_type is HandoffType.HORIZONTAL


def test_link_up_registers_standby_then_prepared():
    p = policy()
    p.handle(detected(LINK2))
    p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 1.0, event_id=1))
    cmds = p.handle(ev(EventKind.LINK_UP, LINK2, 1.08))
    assert cmds == [AcquireAndRegister(LINK2, 2, active=False)]
    p.handle(RegistrationResult(1.6, LINK2, 2, COA2, ok=True))
    assert p.phase is Phase.PREPARED
    row = p.state.alternative[IF2].to_record()
    assert row["handoff_type"] == "vertical" and row["status"] == "ready" and row["coa"] == "0x200"


def test_registration_failure_drops_path():
    p = policy()
    p.handle(detected(LINK2))
    p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 1.0, event_id=1))
    p.handle(ev(EventKind.LINK_UP, LINK2, 1.08))
    cmds = p.handle(RegistrationResult(1.6, LINK2, 2, COA2, ok=False))
    assert p.phase is Phase.STABLE
    assert p.state.alternative == {}
    assert Disconnect(LINK2) in cmds
    assert any(isinstance(c, Condition) and c.name == "RegistrationTimeout" for c in cmds)


def test_lsi_switches_link_and_tunnel():
    p = prepared(policy())
    cmds = p.handle(ev(EventKind.LINK_SWITCH_IMMINENT, LINK1, 2.0, event_id=2))
    assert cmds == [MihSwitch(LINK1, LINK2), SwitchTunnel(1, 2)]
    cmds = p.handle(SwitchResult(2.06, 0))
    assert p.phase is Phase.STABLE
    assert p.state.active_link == LINK2 and p.state.active_bid == 2
    assert p.state.lgd_deadline_timer is None
    assert Deregister(1) in cmds
    assert p.state.switches == 1


def test_shared_coa_path_switches_link_only():
    p = policy()
    p.handle(detected(LINK3))
    p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 1.0, event_id=1))
    p.handle(ev(EventKind.LINK_UP, LINK3, 1.08))
    p.handle(RegistrationResult(1.6, LINK3, 2, COA1, ok=True))
    cmds = p.handle(ev(EventKind.LINK_SWITCH_IMMINENT, LINK1, 2.0, event_id=2))
    assert MihSwitch(LINK1, LINK3) in cmds
    assert not any(isinstance(c, SwitchTunnel) for c in cmds)
    assert p.phase is Phase.STABLE and p.state.active_link == LINK3


def test_lsi_while_preparing_waits_then_switches():
    p = policy()
    p.handle(detected(LINK2))
    p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 1.0, event_id=1))
    p.handle(ev(EventKind.LINK_UP, LINK2, 1.08))
    cmds = p.handle(ev(EventKind.LINK_SWITCH_IMMINENT, LINK1, 1.3, event_id=2))
    assert [c.name for c in cmds] == ["SwitchDeferred"]
    assert p.phase is Phase.PREPARING
    cmds = p.handle(RegistrationResult(1.6, LINK2, 2, COA2, ok=True))
    assert cmds == [MihSwitch(LINK1, LINK2), SwitchTunnel(1, 2)]


def test_switch_rejected_retries_once_then_reregisters():
    p = prepared(policy())
    p.handle(ev(EventKind.LINK_SWITCH_IMMINENT, LINK1, 2.0, event_id=2))
    assert SwitchTunnel(1, 2) in p.handle(SwitchResult(2.06, 1))
    cmds = p.handle(SwitchResult(2.12, 1))
    assert any(type(c).__name__ == "ReRegister" for c in cmds)


def test_rollback_keeps_path_until_timer():
    p = prepared(policy())
    p.handle(ev(EventKind.LINK_EVENT_ROLLBACK, LINK1, 1.9, event_id=1))
    assert p.phase is Phase.STABLE
    assert p.state.alternative[IF2].status is PathStatus.READY
    assert p.state.lgd_deadline_timer == pytest.approx(1.0 + 2 * BUDGET.t_lgd)
    cmds = p.handle(TimerFired(p.state.lgd_deadline_timer, p.state.timer_token))
    assert cmds == [Disconnect(LINK2), Deregister(2)]
    assert p.state.alternative == {} and p.state.teardowns == 1


def test_rollback_then_lgd_reuses_path():
    p = prepared(policy())
    p.handle(ev(EventKind.LINK_EVENT_ROLLBACK, LINK1, 1.5, event_id=1))
    cmds = p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 1.7, event_id=3))
    assert not any(isinstance(c, (LinkConnect, AcquireAndRegister)) for c in cmds)
    assert p.phase is Phase.PREPARED
    assert p.state.lgd_deadline_timer == pytest.approx(1.7 + 2 * BUDGET.t_lgd)


def test_rollback_in_stable_ignored():
    p = policy()
    assert p.handle(ev(EventKind.LINK_EVENT_ROLLBACK, LINK1, 1.0, event_id=1)) == []
    assert p.phase is Phase.STABLE


def test_stale_timer_token_ignored():
    p = prepared(policy())
    token = p.state.timer_token
    p.handle(ev(EventKind.LINK_EVENT_ROLLBACK, LINK1, 1.5, event_id=1))
    p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 1.7, event_id=3))
    assert p.handle(TimerFired(1.0 + 2 * BUDGET.t_lgd, token)) == []


def test_timer_without_path_is_noop_cleanup():
    p = policy()
    p.handle(detected(LINK2))
    p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 1.0, event_id=1))
    p.handle(ev(EventKind.LINK_UP, LINK2, 1.08))
    p.handle(RegistrationResult(1.6, LINK2, 2, COA2, ok=False))
    assert p.handle(TimerFired(1.0 + 2 * BUDGET.t_lgd, p.state.timer_token)) == []


def test_link_down_with_ready_path_switches():
    p = prepared(policy())
    cmds = p.handle(ev(EventKind.LINK_DOWN, LINK1, 2.0, reason=1))
    assert MihSwitch(LINK1, LINK2) in cmds and SwitchTunnel(1, 2) in cmds


def test_link_down_with_detected_link_hard_handoff():
    p = policy()
    p.handle(detected(LINK2))
    cmds = p.handle(ev(EventKind.LINK_DOWN, LINK1, 2.0, reason=1))
    assert LinkConnect(LINK2) in cmds
    assert p.handle(ev(EventKind.LINK_UP, LINK2, 2.08)) == [AcquireAndRegister(LINK2, 2, active=True)]
    p.handle(RegistrationResult(2.6, LINK2, 2, COA2, ok=True))
    assert p.state.active_link == LINK2 and p.phase is Phase.STABLE


def test_link_down_with_empty_caches_scans():
    p = policy()
    cmds = p.handle(ev(EventKind.LINK_DOWN, LINK1, 2.0, reason=1))
    assert Scan((IF2, IF3)) in cmds
    assert p.handle(detected(LINK2, t=3.0)) == [LinkConnect(LINK2)]


def test_mipv6_ignores_lgd_and_scans_on_down():
    p = policy(Scheme.MIPV6_REACTIVE)
    p.handle(detected(LINK2))
    assert p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 1.0, event_id=1)) == []
    cmds = p.handle(ev(EventKind.LINK_DOWN, LINK1, 2.0, reason=1))
    assert LinkConnect(LINK2, force_scan=True) in cmds


def test_fixed_alpha_registers_active_without_timer():
    p = policy(Scheme.FMIPV6_FIXED_ALPHA)
    cmds = p.handle(detected(LINK2))
    assert cmds[0].config.lsi_level_dbm is None
    cmds = p.handle(ev(EventKind.LINK_GOING_DOWN, LINK1, 1.0, event_id=1))
    assert kinds(cmds) == [LinkConnect]
    assert p.handle(ev(EventKind.LINK_UP, LINK2, 1.08)) == [AcquireAndRegister(LINK2, 2, active=True)]
    cmds = p.handle(RegistrationResult(1.6, LINK2, 2, COA2, ok=True))
    assert cmds[0] == MihSwitch(LINK1, LINK2)
    assert p.state.active_link == LINK2


def test_prepared_implies_ready_path():
    p = prepared(policy())
    assert p.phase is Phase.PREPARED
    assert p.state.alternative[IF2].status is PathStatus.READY


INPUTS = st.lists(st.sampled_from([
    "detect2", "detect3", "lgd", "up2", "up3", "reg_ok", "reg_fail", "lsi", "rollback",
    "down", "reply0", "reply1", "timer", "speed",
]), max_size=30)


def build(names):
    items, t = [], 0.0
    for i, name in enumerate(names):
        t += 0.05
        items.append({
            "detect2": detected(LINK2, t), "detect3": detected(LINK3, t),
            "lgd": ev(EventKind.LINK_GOING_DOWN, LINK1, t, event_id=i),
            "up2": ev(EventKind.LINK_UP, LINK2, t), "up3": ev(EventKind.LINK_UP, LINK3, t),
            "reg_ok": RegistrationResult(t, LINK2, 2, COA2, ok=True),
            "reg_fail": RegistrationResult(t, LINK2, 2, COA2, ok=False),
            "lsi": ev(EventKind.LINK_SWITCH_IMMINENT, LINK1, t, event_id=i),
            "rollback": ev(EventKind.LINK_EVENT_ROLLBACK, LINK1, t, event_id=i),
            "down": ev(EventKind.LINK_DOWN, LINK1, t, reason=1),
            "reply0": SwitchResult(t, 0), "reply1": SwitchResult(t, 1),
            "timer": TimerFired(t, 1), "speed": SpeedUpdate(t, 5.0 + i),
        }[name])
    return items


@settings(max_examples=200, deadline=None)
@given(INPUTS)
def test_replay_reproduces_command_log(names):
    items = build(names)
    p = policy()
    initial = copy.deepcopy(p.state)
    first = [p.handle(x) for x in items]
    assert replay(p.config, initial, items) == first
    assert p.state.phase is not Phase.PREPARED or any(
        e.status is PathStatus.READY for e in p.state.alternative.values())
    assert len([e for e in p.state.alternative.values() if e.status is PathStatus.READY]) <= 1


def test_decision_log_lines_are_json():
    import json

    p = prepared(policy())
    lines = p.decision_lines()
    assert lines
    recs = [json.loads(x) for x in lines]
    assert {"time", "input", "phase_before", "phase_after", "commands"} <= set(recs[0])
