"""Scenario files: INI text with a versioned, documented schema.

Parse errors (missing file, bad syntax, non-numeric values) raise
:class:`ScenarioParseError`; well-formed files with impossible values raise
:class:`ScenarioValidationError`.  The CLI maps the two to distinct exit codes.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .hpd import Scheme
from .mih import LinkType
from .nemo import Address, AddressRole
from .timing import LatencyProfile, MarginConfig

SCHEMA_VERSION = 1
DEFAULT_SCENARIO = "baseline"


class ScenarioError(Exception):
    pass


class ScenarioParseError(ScenarioError):
    pass


class ScenarioValidationError(ScenarioError):
    pass


@dataclass(frozen=True)
class CellConfig:
    name: str
    link_type: LinkType
    center: tuple[float, float]
    coverage: float
    prefix: int
    poa_mac: int
    mih_capable: bool = True
    sigma: float | None = None


@dataclass(frozen=True)
class Mobility:
    """Piecewise-linear trajectory through ``(time, x, y)`` waypoints, constant after the last one."""

    waypoints: tuple[tuple[float, float, float], ...]

    @classmethod
    def linear(cls, start: tuple[float, float], velocity: tuple[float, float], duration: float) -> "Mobility":
        end = (start[0] + velocity[0] * duration, start[1] + velocity[1] * duration)
        return cls(((0.0, *start), (duration, *end)))

    def position(self, t: float) -> tuple[float, float]:
        pts = self.waypoints
        if t <= pts[0][0]:
            return pts[0][1], pts[0][2]
        for (t0, x0, y0), (t1, x1, y1) in zip(pts, pts[1:]):
            if t <= t1:
                f = (t - t0) / (t1 - t0)
                return x0 + f * (x1 - x0), y0 + f * (y1 - y0)
        return pts[-1][1], pts[-1][2]


@dataclass(frozen=True)
class TrafficConfig:
    packet_size: int = 768
    interval: float = 0.016
    start: float = 0.0


@dataclass(frozen=True)
class RadioConfig:
    sigma: float = 4.0
    beta: float = 3.0
    d0: float = 1.0
    tx_power_dbm: float = 14.0
    p_th: float = -75.0


@dataclass(frozen=True)
class TopologyConfig:
    wired_bandwidth: float = 100e6
    wired_delay: float = 0.010
    radio_bandwidth: float = 100e6
    radio_delay: float = 0.010


@dataclass(frozen=True)
class HpdSettings:
    hysteresis_db: float = 1.0
    noise_guard_z: float = 1.0
    lsi_poll_guard: bool = True
    fixed_alpha: float = 1.05
    speed_floor: float = 0.1
    speed_spacing: float = 1.0
    speed_window: float = 10.0
    cache_lifetime: float = 120.0
    link_preference: tuple[LinkType, ...] = (LinkType.WLAN80211, LinkType.WMAN80216, LinkType.CELLULAR)
    confidence_trials: int = 1000


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    scheme: Scheme
    seed: int
    duration: float
    poll: float
    delta: float
    mobility: Mobility
    traffic: TrafficConfig
    radio: RadioConfig
    profiles: dict[LinkType, LatencyProfile]
    margins: MarginConfig
    hpd: HpdSettings
    topology: TopologyConfig
    cells: tuple[CellConfig, ...]
    interfaces: tuple[LinkType, ...]
    initial_cell: str
    home_prefix: int
    ha_address: int
    t_sa: float = 0.12
    binding_lifetime: float = 30.0
    registration_timeout: float = 1.0
    version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        validate(self)

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def profile_for(self, link_type: LinkType) -> LatencyProfile:
        return self.profiles.get(link_type) or self.profiles[LinkType.WLAN80211]

    def cell(self, name: str) -> CellConfig:
        for c in self.cells:
            if c.name == name:
                return c
        raise KeyError(name)


def validate(cfg: ScenarioConfig) -> None:
    def need(cond: bool, msg: str) -> None:
        if not cond:
            raise ScenarioValidationError(msg)

    need(cfg.version == SCHEMA_VERSION, f"unsupported scenario version {cfg.version}")
    need(cfg.duration >= 0 and math.isfinite(cfg.duration), "duration must be >= 0")
    need(cfg.poll > 0, "poll must be > 0")
    need(0 < cfg.delta <= 1, "delta must be in (0, 1]")
    need(cfg.traffic.packet_size > 0 and cfg.traffic.interval > 0, "traffic size and interval must be > 0")
    need(cfg.radio.sigma >= 0 and cfg.radio.beta > 0 and cfg.radio.d0 > 0, "invalid radio parameters")
    need(cfg.topology.wired_bandwidth > 0 and cfg.topology.radio_bandwidth > 0, "bandwidths must be > 0")
    need(cfg.topology.wired_delay >= 0 and cfg.topology.radio_delay >= 0, "delays must be >= 0")
    need(cfg.t_sa >= 0 and cfg.binding_lifetime > 0 and cfg.registration_timeout > 0, "invalid NEMO timers")
    need(len(cfg.cells) >= 1, "at least one cell is required")
    need(len({c.name for c in cfg.cells}) == len(cfg.cells), "cell names must be unique")
    need(len({c.poa_mac for c in cfg.cells}) == len(cfg.cells), "cell MACs must be unique")
    for c in cfg.cells:
        need(c.coverage > cfg.radio.d0, f"cell {c.name}: coverage must exceed d0")
        need(c.sigma is None or c.sigma >= 0, f"cell {c.name}: sigma must be >= 0")
    need(len(cfg.interfaces) >= 2, "the multihomed MR needs at least two interfaces")
    need(cfg.initial_cell in {c.name for c in cfg.cells}, f"unknown initial cell {cfg.initial_cell!r}")
    need(cfg.cell(cfg.initial_cell).link_type in cfg.interfaces, "no MR interface matches the initial cell")
    times = [w[0] for w in cfg.mobility.waypoints]
    need(len(times) >= 1 and all(b > a for a, b in zip(times, times[1:])), "waypoint times must increase")
    need(1.0 <= cfg.hpd.fixed_alpha, "fixed_alpha must be >= 1")
    need(cfg.hpd.confidence_trials >= 1, "confidence_trials must be >= 1")


# ---------------------------------------------------------------- parsing


def _floats(text: str, n: int | None = None) -> tuple[float, ...]:
    vals = tuple(float(x) for x in text.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _mac(text: str) -> int:
    parts = text.split(":")
    if len(parts) != 6:
        raise ValueError(f"bad MAC {text!r}")
    return int("".join(parts), 16)


def _prefix(text: str) -> int:
    return Address.parse(text.split("/")[0], AddressRole.COA).value >> 64


def _link_types(text: str) -> tuple[LinkType, ...]:
    return tuple(LinkType(x.strip()) for x in text.split(",") if x.strip())


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
        return _build(cp)
    except ScenarioValidationError:
        raise
    except (configparser.Error, KeyError, ValueError) as exc:
        raise ScenarioParseError(f"{source}: {exc}") from exc


def load_scenario(path: str | Path | None = None) -> ScenarioConfig:
    """Load a scenario file; ``None`` or a bare name loads a bundled scenario."""
    if path is None or (isinstance(path, str) and "/" not in path and not path.endswith(".ini")):
        name = path or DEFAULT_SCENARIO
        try:
            text = resources.files("mihnemo.data").joinpath(f"{name}.ini").read_text()
        except FileNotFoundError as exc:
            raise ScenarioParseError(f"no bundled scenario named {name!r}") from exc
        return parse_scenario(text, f"{name}.ini")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario {p}: {exc}") from exc
    return parse_scenario(text, str(p))


def _domain(ctor, *args, **kwargs):
    try:
        return ctor(*args, **kwargs)
    except ValueError as exc:
        raise ScenarioValidationError(str(exc)) from exc


def _build(cp: configparser.ConfigParser) -> ScenarioConfig:
    sc = cp["scenario"]
    version = sc.getint("version")
    if version != SCHEMA_VERSION:
        raise ScenarioValidationError(f"unsupported scenario version {version}")
    duration = sc.getfloat("duration")

    mob = cp["mobility"]
    if "waypoints" in mob:
        pts = []
        for item in mob["waypoints"].split(";"):
            if item.strip():
                pts.append(_floats(item, 3))
        mobility = Mobility(tuple(pts))
    else:
        mobility = Mobility.linear(_floats(mob["start"], 2), _floats(mob["velocity"], 2), max(duration, 1.0))

    tr = cp["traffic"]
    traffic = TrafficConfig(tr.getint("packet_size"), tr.getfloat("interval"), tr.getfloat("start", 0.0))
    ra = cp["radio"]
    radio = RadioConfig(ra.getfloat("sigma"), ra.getfloat("beta"), ra.getfloat("d0", 1.0),
                        ra.getfloat("tx_power_dbm", 14.0), ra.getfloat("p_th"))

    lat = cp["latency"]
    keys = ("t_scan", "t_auth", "t_ass", "t_dad", "rtt_mr_ar", "rtt_ar_ha")
    base = _domain(LatencyProfile, **{k: lat.getfloat(k) for k in keys})
    profiles = {LinkType.WLAN80211: base}
    for section in cp.sections():
        if section.startswith("latency."):
            lt = LinkType(section.split(".", 1)[1])
            sec = cp[section]
            profiles[lt] = _domain(LatencyProfile, **{k: sec.getfloat(k, getattr(base, k)) for k in keys})
    for lt in LinkType:
        profiles.setdefault(lt, base)

    mg = cp["margins"]
    margins = _domain(MarginConfig, mg.getfloat("gamma1"), mg.getfloat("gamma2"))

    hs = cp["hpd"] if cp.has_section("hpd") else {}
    d = HpdSettings()
    get = (lambda k, conv, default: conv(hs[k]) if k in hs else default)
    hpd = HpdSettings(
        hysteresis_db=get("hysteresis_db", float, d.hysteresis_db),
        noise_guard_z=get("noise_guard_z", float, d.noise_guard_z),
        lsi_poll_guard=get("lsi_poll_guard", lambda s: cp.BOOLEAN_STATES[s.lower()], d.lsi_poll_guard),
        fixed_alpha=get("fixed_alpha", float, d.fixed_alpha),
        speed_floor=get("speed_floor", float, d.speed_floor),
        speed_spacing=get("speed_spacing", float, d.speed_spacing),
        speed_window=get("speed_window", float, d.speed_window),
        cache_lifetime=get("cache_lifetime", float, d.cache_lifetime),
        link_preference=get("link_preference", _link_types, d.link_preference),
        confidence_trials=get("confidence_trials", int, d.confidence_trials),
    )

    tp = cp["topology"]
    topology = TopologyConfig(tp.getfloat("wired_bandwidth"), tp.getfloat("wired_delay"),
                              tp.getfloat("radio_bandwidth"), tp.getfloat("radio_delay"))

    cells = []
    for section in cp.sections():
        if section.startswith("cell."):
            c = cp[section]
            cells.append(CellConfig(
                name=section.split(".", 1)[1],
                link_type=LinkType(c["link_type"]),
                center=_floats(c["center"], 2),
                coverage=c.getfloat("coverage"),
                prefix=_prefix(c["prefix"]),
                poa_mac=_mac(c["mac"]),
                mih_capable=c.getboolean("mih_capable", True),
                sigma=c.getfloat("sigma") if "sigma" in c else None,
            ))

    mr = cp["mr"]
    nemo = cp["nemo"]
    return ScenarioConfig(
        name=sc.get("name", "unnamed"),
        scheme=Scheme(sc["scheme"]),
        seed=sc.getint("seed"),
        duration=duration,
        poll=sc.getfloat("poll"),
        delta=sc.getfloat("delta"),
        mobility=mobility,
        traffic=traffic,
        radio=radio,
        profiles=profiles,
        margins=margins,
        hpd=hpd,
        topology=topology,
        cells=tuple(cells),
        interfaces=_link_types(mr["interfaces"]),
        initial_cell=mr["initial_cell"],
        home_prefix=_prefix(mr["home_prefix"]),
        ha_address=Address.parse(nemo["ha_address"]).value,
        t_sa=nemo.getfloat("t_sa"),
        binding_lifetime=nemo.getfloat("binding_lifetime"),
        registration_timeout=nemo.getfloat("registration_timeout"),
        version=version,
    )


def apply_overrides(cfg: ScenarioConfig, overrides: dict[str, object]) -> ScenarioConfig:
    """Apply flat ``key=value`` overrides (``sigma``, ``seed``, ``scheme``, ``delta``, ...)."""
    top = {"seed": int, "duration": float, "poll": float, "delta": float}
    radio_keys = {"sigma", "beta", "p_th", "d0", "tx_power_dbm"}
    try:
        for key, value in overrides.items():
            if key in top:
                cfg = replace(cfg, **{key: top[key](value)})
            elif key == "scheme":
                cfg = replace(cfg, scheme=Scheme(value))
            elif key == "sigma":
                # a global sigma override applies to every shadowed cell
                cells = tuple(replace(c, sigma=None) if c.sigma else c for c in cfg.cells)
                cfg = replace(cfg, radio=replace(cfg.radio, sigma=float(value)), cells=cells)
            elif key in radio_keys:
                cfg = replace(cfg, radio=replace(cfg.radio, **{key: float(value)}))
            elif key in ("gamma1", "gamma2"):
                cfg = replace(cfg, margins=replace(cfg.margins, **{key: float(value)}))
            elif key in ("t_sa", "binding_lifetime", "registration_timeout"):
                cfg = replace(cfg, **{key: float(value)})
            elif key in HpdSettings.__dataclass_fields__:
                cfg = replace(cfg, hpd=replace(cfg.hpd, **{key: type(getattr(cfg.hpd, key))(value)}))
            else:
                raise ScenarioValidationError(f"unknown override {key!r}")
    except ValueError as exc:
        raise ScenarioValidationError(str(exc)) from exc
    return cfg
