"""Handoff latency budgets, anticipation times and trigger threshold coefficients."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .radio import RadioModel, SmoothingConfig, path_loss_rss

# published range of link-layer handoff latency, seconds
L2_BOUNDS = (0.050, 0.400)

# Philox key word reserved for confidence-level trials
_CONFIDENCE_STREAM = 0xC0F1DE


class CellEdgeUnreachable(ValueError):
    """The mobile reaches the cell edge before the required time elapses."""


class L2BoundsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LatencyProfile:
    """Latency components in seconds."""

    t_scan: float = 0.0
    t_auth: float = 0.0
    t_ass: float = 0.0
    t_dad: float = 0.0
    rtt_mr_ar: float = 0.0
    rtt_ar_ha: float = 0.0

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    @property
    def t_l2(self) -> float:
        return self.t_scan + self.t_auth + self.t_ass

    @property
    def rtt_mr_ha(self) -> float:
        return self.rtt_mr_ar + self.rtt_ar_ha


@dataclass(frozen=True)
class MarginConfig:
    """Security margins, in percent."""

    gamma1: float = 10.0
    gamma2: float = 10.0

    def __post_init__(self) -> None:
        for name in ("gamma1", "gamma2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 20.0:
                raise ValueError(f"{name} must lie in [0, 20], got {value}")


@dataclass(frozen=True)
class TimingBudget:
    t_l2: float = 0.0
    t_l3: float = 0.0
    t_ho: float = 0.0
    t_ts: float = 0.0
    delta_t_ho: float = 0.0
    delta_t_ts: float = 0.0
    t_lgd: float = 0.0
    t_lsi: float = 0.0


@dataclass(frozen=True)
class TriggerThresholds:
    alpha_lgd: float
    alpha_lsi: float
    lgd_level_dbm: float
    lsi_level_dbm: float


def l3_latency(profile: LatencyProfile) -> float:
    return 4.0 * profile.rtt_mr_ar + profile.t_dad + 3.0 * profile.rtt_ar_ha


def total_handoff_time(profile: LatencyProfile) -> TimingBudget:
    t_l2 = profile.t_l2
    if not L2_BOUNDS[0] <= t_l2 <= L2_BOUNDS[1]:
        warnings.warn(
            f"L2 handoff latency {t_l2 * 1e3:.1f} ms outside published range "
            f"[{L2_BOUNDS[0] * 1e3:.0f}, {L2_BOUNDS[1] * 1e3:.0f}] ms",
            L2BoundsWarning,
            stacklevel=2,
        )
    t_l3 = l3_latency(profile)
    return TimingBudget(t_l2=t_l2, t_l3=t_l3, t_ho=t_l2 + t_l3)


def anticipation_times(profile: LatencyProfile, margins: MarginConfig) -> TimingBudget:
    """Complete budget: handoff time, tunnel-switch time and both anticipation times.

    The tunnel switch takes one MR-HA round trip.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", L2BoundsWarning)
        budget = total_handoff_time(profile)
    t_ts = profile.rtt_mr_ha
    delta_t_ho = margins.gamma1 / 100.0 * budget.t_ho
    delta_t_ts = margins.gamma2 / 100.0 * t_ts
    t_lsi = t_ts + delta_t_ts
    t_lgd = budget.t_ho + delta_t_ho + t_lsi
    return replace(
        budget,
        t_ts=t_ts,
        delta_t_ho=delta_t_ho,
        delta_t_ts=delta_t_ts,
        t_lgd=t_lgd,
        t_lsi=t_lsi,
    )


def alpha_coefficient(model: RadioModel, v: float, t: float) -> float:
    """Linear power multiplier over ``p_th`` that leaves ``t`` seconds before the edge at speed ``v``."""
    if v < 0:
        raise ValueError(f"speed must be >= 0, got {v}")
    if not t > 0:
        raise ValueError(f"time must be > 0, got {t}")
    d_th = model.threshold_distance
    travel = v * t
    if travel >= d_th:
        raise CellEdgeUnreachable(
            f"mobile covers {travel:.1f} m in {t:.3f} s, beyond the {d_th:.1f} m threshold distance"
        )
    return (d_th / (d_th - travel)) ** model.beta


def alpha_coefficient_closed_form(model: RadioModel, v: float, t: float) -> float:
    """Same coefficient written with the power ratio instead of the threshold distance."""
    ratio = 10.0 ** ((model.p_th - model.p_rx_d0) / 10.0)
    bracket = 1.0 - (v * t / model.d0) * ratio ** (1.0 / model.beta)
    if bracket <= 0:
        raise CellEdgeUnreachable("mobile crosses the cell edge within the required time")
    return (1.0 / bracket) ** model.beta


def time_for_alpha(model: RadioModel, v: float, alpha: float) -> float:
    """Inverse of :func:`alpha_coefficient` in ``t``."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if v <= 0:
        return math.inf if alpha > 1 else 0.0
    return model.threshold_distance * (1.0 - alpha ** (-1.0 / model.beta)) / v


def alpha_to_db(alpha: float) -> float:
    return 10.0 * math.log10(alpha)


def thresholds(model: RadioModel, v: float, budget: TimingBudget) -> TriggerThresholds:
    a_lgd = alpha_coefficient(model, v, budget.t_lgd)
    a_lsi = alpha_coefficient(model, v, budget.t_lsi)
    if v > 0 and not a_lgd > a_lsi > 1.0:
        raise ValueError("budget must satisfy t_lgd > t_lsi > 0")
    return TriggerThresholds(
        alpha_lgd=a_lgd,
        alpha_lsi=a_lsi,
        lgd_level_dbm=model.p_th + alpha_to_db(a_lgd),
        lsi_level_dbm=model.p_th + alpha_to_db(a_lsi),
    )


def confidence_level(
    model: RadioModel,
    v: float,
    start_rss: float,
    time_interval: float,
    trials: int = 1000,
    *,
    poll: float = 0.1,
    smoothing: SmoothingConfig = SmoothingConfig(0.1),
    seed: int | None = None,
) -> float:
    """Probability that the smoothed RSS falls below ``p_th`` within ``time_interval``.

    Each trial starts at the distance whose deterministic RSS is ``start_rss``,
    moves away at ``v`` and is sampled every ``poll`` seconds.  Trial ``k`` draws
    its shadowing from its own Philox counter, so the estimate does not depend
    on the order in which trials are evaluated.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n_steps = int(math.floor(time_interval / poll + 1e-9))
    if n_steps <= 0:
        return 0.0
    d_start = model.distance_for_rss(start_rss)
    times = poll * np.arange(1, n_steps + 1)
    mean = np.array([path_loss_rss(model, max(d_start + v * t, 1e-9)) for t in times])
    if model.sigma == 0:
        raw = np.broadcast_to(mean, (trials, n_steps))
    else:
        key_seed = model.noise_seed if seed is None else seed
        noise = np.empty((trials, n_steps))
        for k in range(trials):
            bitgen = np.random.Philox(key=[key_seed, _CONFIDENCE_STREAM], counter=[k, 0, 0, 0])
            noise[k] = np.random.Generator(bitgen).standard_normal(n_steps)
        raw = mean + model.sigma * noise
    delta = smoothing.delta
    smoothed = np.full(trials, float(start_rss))
    down = np.zeros(trials, dtype=bool)
    for j in range(n_steps):
        smoothed = delta * raw[:, j] + (1.0 - delta) * smoothed
        down |= smoothed < model.p_th
    return float(down.mean())


def beta_error_impact(
    model: RadioModel,
    beta_assumed: float,
    v: float,
    profile: LatencyProfile,
    margins: MarginConfig,
) -> float:
    """Achieved minus required LGD anticipation (s) when thresholds assume ``beta_assumed``.

    The level is placed using the assumed exponent; the world then follows
    ``model.beta``.  Both models share ``d0``, ``p_rx_d0`` and ``p_th``.
    """
    if not beta_assumed > 0:
        raise ValueError("beta_assumed must be > 0")
    if v <= 0:
        raise ValueError("speed must be > 0")
    budget = anticipation_times(profile, margins)
    assumed = replace(model, beta=beta_assumed)
    level_db = alpha_to_db(alpha_coefficient(assumed, v, budget.t_lgd))
    d_th = model.threshold_distance
    # distance at which the real RSS sits level_db above p_th
    d_level = d_th * 10.0 ** (-level_db / (10.0 * model.beta))
    achieved = (d_th - d_level) / v
    return achieved - budget.t_lgd
