# detection_chain.py - Channel losses, background, beamsplitter and dead time
import logging
from dataclasses import dataclass

import numpy as np

from model_core import ConfigError, DetectionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelModel:
    """One detection channel: loss, Poisson background, 50/50 split onto two APDs"""

    efficiency: float
    background: float = 0.0
    split_ratio: float = 0.5
    dead_time: float = 0.0
    afterpulsing: bool = False

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.efficiency <= 1.0:
            problems.append(f"efficiency: must be in [0, 1], got {self.efficiency}")
        if not self.background >= 0.0:
            problems.append(f"background: must be >= 0, got {self.background}")
        if self.split_ratio != 0.5:
            problems.append(f"split_ratio: must be exactly 0.5, got {self.split_ratio}")
        if not self.dead_time >= 0.0:
            problems.append(f"dead_time: must be >= 0, got {self.dead_time}")
        if problems:
            raise ConfigError(problems)
        if self.afterpulsing:
            logger.warning("afterpulsing flag is set but has no model; counts are unaffected")

    @classmethod
    def stokes(cls, config):
        return cls(
            efficiency=config.stokes_efficiency,
            background=config.stokes_background,
            dead_time=config.dead_time,
            afterpulsing=config.afterpulsing,
        )

    @classmethod
    def antistokes(cls, config):
        return cls(
            efficiency=config.antistokes_efficiency,
            background=config.antistokes_background,
            dead_time=config.dead_time,
            afterpulsing=config.afterpulsing,
        )


def _arrival_times(rng, count, pulse):
    """Arrival times drawn from the pulse shape; uniform over the window when the pulse carries no photons"""
    if pulse.total <= 0:
        return np.sort(pulse.t0 + rng.random(count) * pulse.duration)
    weights = pulse.flux / pulse.flux.sum()
    bins = rng.choice(len(weights), size=count, p=weights)
    return np.sort(pulse.t0 + (bins + rng.random(count)) * pulse.dt)


def _registered(times, dead_time):
    """Non-paralyzable detector: a count is lost if it falls within dead_time of the last registered one"""
    kept = 0
    last = -np.inf
    for t in times:
        if t - last >= dead_time:
            kept += 1
            last = t
    return kept


def detect(n_true, channel: ChannelModel, pulse=None, rng=None):
    """
    Turn a true photon number into counts on the channel's two detectors.

    Each photon survives with probability alpha (one uniform per photon, so
    runs sharing an rng are coupled), Poisson background is added, and the
    total is split binomially 50/50. With dead time, arrival times are drawn
    from the pulse shape (uniform over its window if it carries no signal,
    so only background arrives) and counts inside a detector's dead time
    are dropped. With no counts there is nothing to censor.

    Args:
        n_true: photons reaching the channel
        channel: ChannelModel
        pulse: PulseProfile of nonzero length, needed when dead_time > 0 and
            there are counts
        rng: numpy Generator

    Returns:
        (d1, d2) detector counts
    """
    if n_true < 0:
        raise ValueError("n_true must be nonnegative")
    rng = np.random.default_rng() if rng is None else rng
    survivors = int(np.count_nonzero(rng.random(int(n_true)) < channel.efficiency))
    background = int(rng.poisson(channel.background))
    total = survivors + background
    d1 = int(rng.binomial(total, channel.split_ratio))
    d2 = total - d1
    if channel.dead_time > 0 and total > 0:
        if pulse is None or pulse.duration <= 0:
            raise DetectionError("dead-time censoring needs a pulse of nonzero length")
        d1 = _registered(_arrival_times(rng, d1, pulse), channel.dead_time)
        d2 = _registered(_arrival_times(rng, d2, pulse), channel.dead_time)
    return d1, d2


def detect_counts(n_true, channel: ChannelModel, rng):
    """Vectorized detect for an array of photon numbers (dead_time must be 0)"""
    if channel.dead_time > 0:
        raise DetectionError("vectorized detection has no dead-time model; use detect per trial")
    n_true = np.asarray(n_true, dtype=np.int64)
    survivors = rng.binomial(n_true, channel.efficiency)
    total = survivors + rng.poisson(channel.background, size=n_true.shape)
    d1 = rng.binomial(total, channel.split_ratio)
    return d1, total - d1


def zeta(n_bg, alpha, n_s):
    """
    Fock-purity figure n_bg (1 - alpha) / (n_s alpha); high-quality
    conditional states need it well below 1.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if not n_s > 0:
        raise ValueError(f"n_s must be > 0, got {n_s}")
    return n_bg * (1.0 - alpha) / (n_s * alpha)
