# exact_oracle.py - Exact joint count distributions on a truncated lattice
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import toeplitz
from scipy.signal import convolve2d
from scipy.stats import binom, poisson

from eit_retrieval import retrieval_efficiency
from model_core import Estimate, OracleError, StatsSummary
from write_dynamics import mode_mean

logger = logging.getLogger(__name__)

DEFAULT_N_MAX = 30
MAX_TAIL_MASS = 1e-6
# Oracle-check acceptance
MAX_TOTAL_VARIATION = 1e-2
MAX_ABS_Z = 3.0


@dataclass(frozen=True)
class JointDistribution:
    """P(n_S detected, n_AS detected) on {0..n_max}^2; whatever fell off the lattice is tail_mass"""

    n_max: int
    probabilities: np.ndarray
    tail_mass: float
    stokes_efficiency: Optional[float] = None
    stokes_background: Optional[float] = None

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape != (self.n_max + 1, self.n_max + 1):
            raise ValueError("probabilities must have shape (n_max + 1, n_max + 1)")
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        object.__setattr__(self, "probabilities", p)

    @property
    def stokes_marginal(self):
        return self.probabilities.sum(axis=1)

    @property
    def antistokes_marginal(self):
        return self.probabilities.sum(axis=0)


def thinning_matrix(n_max, efficiency):
    """T[k, n] = P(k survive | n), binomial loss on {0..n_max}"""
    n = np.arange(n_max + 1)
    return binom.pmf(n[:, None], n[None, :], efficiency)


def background_matrix(n_max, mean):
    """B[k, n] = P(k counts | n signal) after adding Poisson(mean) background; mass above n_max is dropped"""
    column = poisson.pmf(np.arange(n_max + 1), mean)
    return toeplitz(column, np.zeros(n_max + 1))


def apply_channel(joint, matrix, axis):
    """Push one axis of a joint distribution through a transition matrix"""
    if axis == 0:
        return matrix @ joint
    return joint @ matrix.T


def convolve_joint(a, b, n_max):
    """Distribution of the sum of two independent joint count pairs, truncated"""
    return convolve2d(a, b)[: n_max + 1, : n_max + 1]


def convolution_power(single, count, n_max):
    """`count`-fold self-convolution by repeated squaring; truncating early is exact since counts only add"""
    result = None
    power = single
    while count:
        if count & 1:
            result = power if result is None else convolve_joint(result, power, n_max)
        count >>= 1
        if count:
            power = convolve_joint(power, power, n_max)
    return result


def pair_distribution(per_mode_mean, n_max):
    """One mode's perfectly correlated thermal pairs: P(n, n) = m^n / (1 + m)^(n+1)"""
    n = np.arange(n_max + 1)
    m = per_mode_mean
    weights = (1.0 / (1.0 + m)) * (m / (1.0 + m)) ** n if m > 0 else (n == 0).astype(float)
    return np.diag(weights)


def exact_joint(config, n_max=DEFAULT_N_MAX, thin_before_convolution=False):
    """
    Exact detected-count joint distribution for a configuration.

    The single-mode pair distribution is raised to the N-th convolution
    power, the spin axis is thinned by storage decay and retrieval
    efficiency, both axes by their detection efficiency, and Poisson
    background is added per channel.

    Args:
        config: ValidatedConfig
        n_max: lattice truncation
        thin_before_convolution: apply storage thinning per mode before the
            mode convolution instead of after it (same result)

    Returns:
        JointDistribution

    Raises:
        OracleError if the truncated tail mass reaches MAX_TAIL_MASS
    """
    if config.dead_time > 0:
        raise OracleError("the exact oracle has no dead-time model")
    storage = thinning_matrix(n_max, math.exp(-config.decoherence_rate * config.delay))
    single = pair_distribution(mode_mean(config.xi, config.write_duration), n_max)

    if thin_before_convolution:
        single = apply_channel(single, storage, axis=1)
    joint = convolution_power(single, config.mode_count, n_max)
    if not thin_before_convolution:
        joint = apply_channel(joint, storage, axis=1)

    joint = apply_channel(joint, thinning_matrix(n_max, retrieval_efficiency(config)), axis=1)
    joint = apply_channel(joint, thinning_matrix(n_max, config.stokes_efficiency), axis=0)
    joint = apply_channel(joint, thinning_matrix(n_max, config.antistokes_efficiency), axis=1)
    joint = apply_channel(joint, background_matrix(n_max, config.stokes_background), axis=0)
    joint = apply_channel(joint, background_matrix(n_max, config.antistokes_background), axis=1)

    joint = np.clip(joint, 0.0, None)
    tail = max(0.0, 1.0 - float(joint.sum()))
    if tail >= MAX_TAIL_MASS:
        raise OracleError(f"tail mass {tail:.3g} at n_max={n_max} exceeds {MAX_TAIL_MASS}; raise n_max or lower the mean")
    logger.debug("exact joint: n_max=%d, tail mass %.3g", n_max, tail)
    return JointDistribution(
        n_max=n_max,
        probabilities=joint,
        tail_mass=tail,
        stokes_efficiency=config.stokes_efficiency,
        stokes_background=config.stokes_background,
    )


def _exact(value):
    return Estimate(value=float(value), stderr=0.0)


def exact_stats(dist: JointDistribution, max_ns=4):
    """
    Every estimator in closed form from the lattice.

    A 50/50 split of n photons gives <D1 D2> = <n(n-1)>/4 and
    <D1> = <D2> = <n>/2, so g2 = <n(n-1)>/<n>^2 and
    var(D1 - D2) = <n>, which makes PSN_meas equal PSN_th.
    """
    p = dist.probabilities
    n = np.arange(dist.n_max + 1, dtype=float)
    total = p.sum()
    ps = p.sum(axis=1) / total
    pa = p.sum(axis=0) / total
    mean_s = float(n @ ps)
    mean_as = float(n @ pa)

    # distribution of the difference n_AS - n_S
    diff = (n[None, :] - n[:, None]).ravel()
    weights = (p / total).ravel()
    diff_mean = diff @ weights
    var_diff = float(((diff - diff_mean) ** 2) @ weights)
    psn = mean_s + mean_as

    g2_by_ns, mean_by_ns, q_by_ns = {}, {}, {}
    for n_s in range(min(max_ns, dist.n_max) + 1):
        weight = p[n_s].sum()
        if weight <= 1e-300:
            continue
        row = p[n_s] / weight
        m1 = float(n @ row)
        mean_by_ns[n_s] = _exact(m1)
        if m1 <= 0:
            continue
        factorial2 = float((n * (n - 1.0)) @ row)
        g2 = factorial2 / (m1 * m1)
        g2_by_ns[n_s] = _exact(g2)
        q_by_ns[n_s] = _exact(m1 * (g2 - 1.0))

    zeta_value = None
    if dist.stokes_efficiency and mean_s > 0 and dist.stokes_background is not None:
        zeta_value = dist.stokes_background * (1.0 - dist.stokes_efficiency) / (mean_s * dist.stokes_efficiency)
    return StatsSummary(
        mean_s=mean_s,
        mean_as=mean_as,
        psn_meas=psn,
        psn_th=mean_s + mean_as,
        v_norm=var_diff / psn if psn > 0 else 0.0,
        v_stderr=0.0,
        g2_by_ns=g2_by_ns,
        mean_as_by_ns=mean_by_ns,
        q_by_ns=q_by_ns,
        zeta=zeta_value,
    )


def empirical_joint(batch, n_max):
    """Empirical counterpart of exact_joint from a batch; counts beyond n_max go to the tail"""
    s = batch.stokes
    a = batch.antistokes
    inside = (s <= n_max) & (a <= n_max)
    hist = np.zeros((n_max + 1, n_max + 1))
    np.add.at(hist, (s[inside], a[inside]), 1.0)
    trials = len(batch)
    return JointDistribution(n_max=n_max, probabilities=hist / trials, tail_mass=1.0 - inside.sum() / trials)


def total_variation(a: JointDistribution, b: JointDistribution):
    if a.n_max != b.n_max:
        raise ValueError("distributions live on different lattices")
    return 0.5 * (float(np.abs(a.probabilities - b.probabilities).sum()) + abs(a.tail_mass - b.tail_mass))


@dataclass
class OracleReport:
    total_variation: float
    z_scores: dict = field(default_factory=dict)
    trials: int = 0

    @property
    def passed(self):
        return self.total_variation < MAX_TOTAL_VARIATION and all(
            abs(z) < MAX_ABS_Z for z in self.z_scores.values()
        )


def _z(simulated: Estimate, exact: float):
    if not simulated.stderr > 0 or not math.isfinite(simulated.stderr):
        return None
    return (simulated.value - exact) / simulated.stderr


def oracle_check(config, trials, seed=None, workers=1, n_max=DEFAULT_N_MAX, max_ns=2):
    """
    Compare a Monte Carlo batch against the exact distribution.

    Returns:
        OracleReport with the total variation distance of the joint count
        distributions and a z-score per estimator
    """
    # local imports keep the oracle usable without the sampler loaded
    from count_statistics import summarize
    from trial_sampler import run_batch

    dist = exact_joint(config, n_max=n_max)
    exact = exact_stats(dist, max_ns=max_ns)
    batch = run_batch(config, trials, workers=workers, seed=seed)
    simulated = summarize(batch, config=config, max_ns=max_ns)

    report = OracleReport(total_variation=total_variation(dist, empirical_joint(batch, n_max)), trials=trials)
    pairs = [
        ("mean_s", Estimate(value=simulated.mean_s, stderr=simulated.mean_s_stderr), exact.mean_s),
        ("mean_as", Estimate(value=simulated.mean_as, stderr=simulated.mean_as_stderr), exact.mean_as),
        ("psn_meas", Estimate(value=simulated.psn_meas, stderr=simulated.psn_meas_stderr), exact.psn_meas),
        ("V", Estimate(value=simulated.v_norm, stderr=simulated.v_stderr), exact.v_norm),
    ]
    for label, table, reference in (
        ("g2", simulated.g2_by_ns, exact.g2_by_ns),
        ("mean_as", simulated.mean_as_by_ns, exact.mean_as_by_ns),
        ("Q", simulated.q_by_ns, exact.q_by_ns),
    ):
        for n_s, estimate in table.items():
            if n_s in reference and not estimate.low_statistics:
                pairs.append((f"{label}[n_s={n_s}]", estimate, reference[n_s].value))
    for name, estimate, reference in pairs:
        z = _z(estimate, reference)
        if z is not None:
            report.z_scores[name] = z
    logger.info(
        "oracle check: TV %.3g over %d trials, max |z| %.2f",
        report.total_variation, trials, max((abs(z) for z in report.z_scores.values()), default=0.0),
    )
    return report
