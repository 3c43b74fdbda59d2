"""Log-distance path loss, log-normal shadowing, RSS smoothing and speed estimation.

Levels and path loss are handled in dBm; the power ratios feeding the speed
estimator are taken in the linear domain.  Shadowing draws are counter-based
(Philox keyed by seed and link id, counter = draw index) so any sample can be
regenerated in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def mw_to_dbm(mw: float) -> float:
    return 10.0 * math.log10(mw)


@dataclass(frozen=True)
class RadioModel:
    """Path-loss parameters of one cell.

    ``p_rx_d0`` is the received power (dBm) at the reference distance ``d0``;
    ``p_th`` is the power below which the link is down.
    """

    beta: float = 3.0
    d0: float = 1.0
    p_rx_d0: float = -15.0
    p_th: float = -75.0
    sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.d0 > 0:
            raise ValueError(f"d0 must be > 0, got {self.d0}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not self.p_rx_d0 > self.p_th:
            raise ValueError("p_rx_d0 must exceed p_th")

    @classmethod
    def from_coverage(
        cls,
        coverage: float,
        *,
        beta: float = 3.0,
        d0: float = 1.0,
        p_th: float = -75.0,
        sigma: float = 0.0,
        noise_seed: int = 0,
    ) -> "RadioModel":
        """Model whose deterministic RSS reaches ``p_th`` exactly at ``coverage`` metres."""
        p_rx_d0 = p_th + 10.0 * beta * math.log10(coverage / d0)
        return cls(beta=beta, d0=d0, p_rx_d0=p_rx_d0, p_th=p_th, sigma=sigma, noise_seed=noise_seed)

    @property
    def threshold_distance(self) -> float:
        """Distance at which the deterministic RSS equals ``p_th``."""
        ratio = dbm_to_mw(self.p_rx_d0 - self.p_th)
        return self.d0 * ratio ** (1.0 / self.beta)

    def distance_for_rss(self, rss_dbm: float) -> float:
        """Invert the deterministic law (no clamping below ``d0``)."""
        return self.d0 * 10.0 ** ((self.p_rx_d0 - rss_dbm) / (10.0 * self.beta))


@dataclass(frozen=True)
class SmoothingConfig:
    delta: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class RssSample:
    time: float
    raw_dbm: float
    smoothed_dbm: float


def path_loss_rss(model: RadioModel, d: float) -> float:
    """Deterministic received power (dBm) at distance ``d``; ``d < d0`` is clamped to ``d0``."""
    if d <= 0:
        raise ValueError(f"distance must be > 0, got {d}")
    d = max(d, model.d0)
    return model.p_rx_d0 - 10.0 * model.beta * math.log10(d / model.d0)


def gaussian_draw(seed: int, link_id: int, draw_index: int) -> float:
    """Standard normal variate that depends only on (seed, link_id, draw_index)."""
    bitgen = np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, link_id & 0xFFFFFFFFFFFFFFFF],
                              counter=[draw_index, 0, 0, 0])
    return float(np.random.Generator(bitgen).standard_normal())


def shadowed_rss(model: RadioModel, d: float, draw_index: int, link_id: int = 0) -> float:
    """Path-loss RSS plus a zero-mean Gaussian term of std ``model.sigma`` (dB)."""
    base = path_loss_rss(model, d)
    if model.sigma == 0:
        return base
    return base + model.sigma * gaussian_draw(model.noise_seed, link_id, draw_index)


def smooth(config: SmoothingConfig, prev_smoothed: float, raw: float) -> float:
    """One step of the recursive estimator, in dB."""
    if config.delta == 1.0:
        return raw
    return config.delta * raw + (1.0 - config.delta) * prev_smoothed


def smooth_stream(config: SmoothingConfig, raw: np.ndarray, initial: float | None = None) -> np.ndarray:
    """Apply :func:`smooth` along ``raw``; the first output equals the first input unless ``initial`` is given."""
    raw = np.asarray(raw, dtype=float)
    out = np.empty_like(raw)
    prev = initial
    for i, x in enumerate(raw):
        prev = x if prev is None else smooth(config, prev, x)
        out[i] = prev
    return out


def estimate_speed(model: RadioModel, s1: RssSample, s2: RssSample) -> float:
    """Radial speed (m/s) from two smoothed samples; positive when moving away."""
    dt = s2.time - s1.time
    if not dt > 0:
        raise ValueError("samples must have strictly increasing timestamps")
    for s in (s1, s2):
        if s.smoothed_dbm > model.p_rx_d0:
            raise ValueError(f"sample power {s.smoothed_dbm} dBm exceeds p_rx_d0={model.p_rx_d0} dBm")
    inv_beta = 1.0 / model.beta
    r1 = dbm_to_mw(model.p_rx_d0) / dbm_to_mw(s1.smoothed_dbm)
    r2 = dbm_to_mw(model.p_rx_d0) / dbm_to_mw(s2.smoothed_dbm)
    return model.d0 / dt * (r2 ** inv_beta - r1 ** inv_beta)


def windowed_speed(
    model: RadioModel,
    samples: list[RssSample],
    spacing: float = 1.0,
    window: float = 10.0,
) -> float | None:
    """Mean of :func:`estimate_speed` over sample pairs ``spacing`` apart in the last ``window`` seconds.

    Returns None until at least one such pair exists.  Samples must be on a
    regular grid; pairs are matched by index offset.
    """
    if len(samples) < 2:
        return None
    step = samples[1].time - samples[0].time
    if step <= 0:
        raise ValueError("samples must have strictly increasing timestamps")
    lag = max(1, int(round(spacing / step)))
    t_end = samples[-1].time
    first = 0
    while samples[first].time < t_end - window - 1e-9:
        first += 1
    estimates = [
        estimate_speed(model, samples[i - lag], samples[i])
        for i in range(first + lag, len(samples))
    ]
    if not estimates:
        return None
    return float(np.mean(estimates))
