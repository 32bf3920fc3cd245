# count_statistics.py - Photon-count estimators with jackknife errors
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve
from scipy.optimize import curve_fit
from scipy.stats import poisson

from detection_chain import zeta
from eit_retrieval import antistokes_transmission
from exact_oracle import background_matrix, thinning_matrix
from model_core import DeconvolutionError, Estimate, InsufficientDataError, StatsSummary

logger = logging.getLogger(__name__)

# Conditioned subsamples smaller than this are flagged, not rejected
LOW_STATISTICS_TRIALS = 100
MAX_CONDITION_NUMBER = 1e8
# Poisson tail mass left above the deconvolution lattice
DECONVOLUTION_TAIL_MASS = 1e-4


def jackknife(columns, statistic):
    """
    Leave-one-out jackknife for a smooth function of sample means.

    Args:
        columns: array (k, n) of per-trial quantities
        statistic: f(means, n) -> value; `means` is (k,) or (k, n) with one
            leave-one-out mean vector per column, `n` the sample size used

    Returns:
        (value, stderr); stderr is nan if any leave-one-out value is undefined
    """
    columns = np.atleast_2d(np.asarray(columns, dtype=float))
    n = columns.shape[1]
    sums = columns.sum(axis=1)
    value = float(statistic(sums / n, n))
    if n < 3:
        return value, math.nan
    with np.errstate(divide="ignore", invalid="ignore"):
        loo = statistic((sums[:, None] - columns) / (n - 1), n - 1)
    if not np.all(np.isfinite(loo)):
        return value, math.nan
    variance = (n - 1) / n * np.sum((loo - loo.mean()) ** 2)
    return value, float(math.sqrt(variance))


def _variance(mean, mean_sq, n):
    """Unbiased sample variance from the first two sample moments"""
    return (mean_sq - mean * mean) * n / (n - 1)


def _require_trials(batch, minimum):
    if len(batch) < minimum:
        raise InsufficientDataError(f"need at least {minimum} trials, got {len(batch)}")


def _estimate(value, stderr, trials):
    low = trials < LOW_STATISTICS_TRIALS
    return Estimate(value=value, stderr=stderr, trials=trials, low_statistics=low)


def psn_meas(batch):
    """Measured photon shot noise var(AS1 - AS2) + var(S1 - S2)"""
    _require_trials(batch, 2)
    x = (batch.as1 - batch.as2).astype(float)
    y = (batch.s1 - batch.s2).astype(float)
    value = float(np.var(x, ddof=1) + np.var(y, ddof=1))

    def statistic(m, n):
        return _variance(m[0], m[1], n) + _variance(m[2], m[3], n)

    _, stderr = jackknife([x, x * x, y, y * y], statistic)
    return _estimate(value, stderr, len(batch))


def normalized_variance(batch):
    """V = var(n_AS - n_S) / PSN_meas; 1 for classical correlations, 0 for perfect ones"""
    _require_trials(batch, 2)
    d = (batch.antistokes - batch.stokes).astype(float)
    x = (batch.as1 - batch.as2).astype(float)
    y = (batch.s1 - batch.s2).astype(float)
    psn = np.var(x, ddof=1) + np.var(y, ddof=1)
    if psn <= 0:
        raise InsufficientDataError("PSN_meas is zero; normalized variance undefined")
    value = float(np.var(d, ddof=1) / psn)

    def statistic(m, n):
        return _variance(m[0], m[1], n) / (_variance(m[2], m[3], n) + _variance(m[4], m[5], n))

    _, stderr = jackknife([d, d * d, x, x * x, y, y * y], statistic)
    return _estimate(value, stderr, len(batch))


def _subsample(batch, n_s):
    subset = batch.subset(batch.stokes == n_s)
    if len(subset) == 0:
        raise InsufficientDataError(f"no trials with n_S = {n_s}")
    if len(subset) < LOW_STATISTICS_TRIALS:
        logger.warning("only %d trials with n_S = %d; estimate flagged low-statistics", len(subset), n_s)
    return subset


def _g2_statistic(m, n):
    return m[0] / (m[1] * m[2])


def _q_statistic(m, n):
    return (m[1] + m[2]) * (m[0] / (m[1] * m[2]) - 1.0)


def _cross_moments(d1, d2):
    d1 = d1.astype(float)
    d2 = d2.astype(float)
    return [d1 * d2, d1, d2]


def cross_g2(d1, d2):
    """<D1 D2> / (<D1><D2>) for one channel's two detectors"""
    if len(d1) == 0:
        raise InsufficientDataError("no trials")
    columns = _cross_moments(d1, d2)
    if columns[1].sum() == 0 or columns[2].sum() == 0:
        raise InsufficientDataError("a detector registered no counts; g2 undefined")
    value, stderr = jackknife(columns, _g2_statistic)
    return _estimate(value, stderr, len(d1))


def unconditional_g2(batch, channel="stokes"):
    """Cross-detector g2 of a whole channel (1 + 1/N for N thermal modes)"""
    if channel == "stokes":
        return cross_g2(batch.s1, batch.s2)
    if channel == "antistokes":
        return cross_g2(batch.as1, batch.as2)
    raise ValueError(f"unknown channel {channel!r}")


def conditional_g2(batch, n_s):
    """Anti-Stokes g2 = <AS1 AS2>/(<AS1><AS2>) over trials with s1 + s2 = n_s"""
    subset = _subsample(batch, n_s)
    return cross_g2(subset.as1, subset.as2)


def conditional_mean(batch, n_s):
    """Mean anti-Stokes count over trials with s1 + s2 = n_s"""
    subset = _subsample(batch, n_s)
    counts = subset.antistokes.astype(float)
    value, stderr = jackknife([counts], lambda m, n: m[0])
    return _estimate(value, stderr, len(subset))


def mandel_q(batch, n_s):
    """Conditional Mandel Q = mean_AS (g2 - 1), jackknifed as one product"""
    subset = _subsample(batch, n_s)
    columns = _cross_moments(subset.as1, subset.as2)
    if columns[1].sum() == 0 or columns[2].sum() == 0:
        raise InsufficientDataError(f"no anti-Stokes counts on both detectors at n_S = {n_s}")
    value, stderr = jackknife(columns, _q_statistic)
    return _estimate(value, stderr, len(subset))


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    slope_stderr: float
    intercept: float
    intercept_stderr: float
    n_values: tuple


def conditional_mean_slope(batch, n_values=range(5)):
    """
    Straight-line fit of the conditional anti-Stokes mean against n_S.

    Points are weighted by their jackknife errors when every error is
    positive; otherwise the fit is unweighted.
    """
    xs, ys, errs = [], [], []
    for n_s in n_values:
        try:
            estimate = conditional_mean(batch, n_s)
        except InsufficientDataError:
            continue
        xs.append(n_s)
        ys.append(estimate.value)
        errs.append(estimate.stderr)
    if len(xs) < 2:
        raise InsufficientDataError("need conditional means at two or more n_S values for a slope")
    xs = np.array(xs, dtype=float)
    ys = np.array(ys)
    errs = np.array(errs)

    if np.all(np.isfinite(errs)) and np.all(errs > 0):
        coeffs, cov = np.polyfit(xs, ys, 1, w=1.0 / errs, cov="unscaled")
        errors = np.sqrt(np.diag(cov))
    elif len(xs) > 3:
        coeffs, cov = np.polyfit(xs, ys, 1, cov=True)
        errors = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    else:
        coeffs = np.polyfit(xs, ys, 1)
        errors = np.array([math.nan, math.nan])
    return SlopeFit(
        slope=float(coeffs[0]),
        slope_stderr=float(errors[0]),
        intercept=float(coeffs[1]),
        intercept_stderr=float(errors[1]),
        n_values=tuple(int(x) for x in xs),
    )


def loss_background_matrix(n_max, alpha, background):
    """Transition matrix from true to observed photon number: binomial loss then Poisson background"""
    return background_matrix(n_max, background) @ thinning_matrix(n_max, alpha)


def deconvolve_counts(p_obs, alpha, background):
    """
    Undo binomial loss and Poisson background on a count distribution.

    Solves M p_true = p_obs with M the loss-then-background transition
    matrix on {0..n_max}. Negative probabilities from noise are clipped and
    the rest renormalized.

    Args:
        p_obs: observed distribution on {0..n_max}
        alpha: channel efficiency in (0, 1]
        background: mean Poisson background

    Returns:
        (p_true, clipped_mass, condition_number)

    Raises:
        DeconvolutionError when the matrix condition number exceeds 1e8
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    p_obs = np.asarray(p_obs, dtype=float)
    matrix = loss_background_matrix(len(p_obs) - 1, alpha, background)
    condition = float(np.linalg.cond(matrix))
    if not condition <= MAX_CONDITION_NUMBER:
        raise DeconvolutionError(f"loss/background matrix condition number {condition:.3g} exceeds {MAX_CONDITION_NUMBER:g}")
    p_true = solve(matrix, p_obs)
    clipped = float(-p_true[p_true < 0].sum())
    p_true = np.clip(p_true, 0.0, None)
    if p_true.sum() <= 0:
        raise DeconvolutionError("deconvolved distribution has no positive mass")
    p_true = p_true / p_true.sum()
    if clipped > 0:
        logger.warning("deconvolution clipped %.3g of negative probability", clipped)
    return p_true, clipped, condition


@dataclass(frozen=True)
class CorrectedEstimate:
    mean: float
    mean_stderr: float
    q: float
    q_stderr: float
    n_max: int
    condition_number: float
    clipped_mass: float = math.nan
    # deconvolved P(n) on {0..n_max}; None when the inversion is ill-conditioned
    distribution: Optional[np.ndarray] = None


def _corrected_statistics(alpha, background):
    """Mean and Q of the true number from the observed first two factorial moments"""
    def mean(m, n):
        return (m[0] - background) / alpha

    def q(m, n):
        first = (m[0] - background) / alpha
        second = (m[1] - 2.0 * background * m[0] + background ** 2) / alpha ** 2
        return second / first - first

    return mean, q


def corrected_estimates(batch, alpha_as, bg_as, n_s=2):
    """
    Conditional anti-Stokes mean and Mandel Q corrected for retrieval-channel
    loss and background.

    Binomial loss scales the k-th factorial moment by alpha^k and Poisson
    background adds to it in closed form, so the mean and Q of the true
    number follow from the observed first two factorial moments. This is the
    linear inverse of the loss-then-background matrix on an unbounded
    lattice, with jackknife errors and nothing clipped.

    The distribution itself is deconvolved on {0..n_max}, with n_max set so
    a Poisson law at the corrected mean leaves less than
    DECONVOLUTION_TAIL_MASS above it. When that matrix is ill-conditioned
    the distribution is left out and a warning names the condition number.

    Args:
        batch: TrialBatch
        alpha_as: total anti-Stokes channel efficiency in (0, 1]
        bg_as: mean anti-Stokes background counts
        n_s: Stokes count to condition on

    Returns:
        CorrectedEstimate
    """
    if not 0.0 < alpha_as <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha_as}")
    subset = _subsample(batch, n_s)
    counts = subset.antistokes
    a = counts.astype(float)
    mean_stat, q_stat = _corrected_statistics(alpha_as, bg_as)
    mean, mean_err = jackknife([a, a * (a - 1.0)], mean_stat)
    with np.errstate(divide="ignore", invalid="ignore"):
        q, q_err = jackknife([a, a * (a - 1.0)], q_stat)

    n_max = int(counts.max())
    if mean > 0:
        n_max = max(n_max, int(poisson.isf(DECONVOLUTION_TAIL_MASS, mean)) + 1)
    condition = float(np.linalg.cond(loss_background_matrix(n_max, alpha_as, bg_as)))
    distribution, clipped = None, math.nan
    if condition <= MAX_CONDITION_NUMBER:
        p_obs = np.bincount(counts, minlength=n_max + 1) / len(subset)
        distribution, clipped, _ = deconvolve_counts(p_obs, alpha_as, bg_as)
    else:
        logger.warning(
            "loss/background matrix on {0..%d} has condition number %.3g; corrected distribution not reported",
            n_max, condition,
        )
    logger.info("corrected estimates at n_S=%d: mean %.3f +/- %.2g, Q %.3f +/- %.2g", n_s, mean, mean_err, q, q_err)
    return CorrectedEstimate(
        mean=mean,
        mean_stderr=mean_err,
        q=q,
        q_stderr=q_err,
        n_max=n_max,
        condition_number=condition,
        clipped_mass=clipped,
        distribution=distribution,
    )


def _mean_estimate(values):
    values = values.astype(float)
    return jackknife([values], lambda m, n: m[0])


def _slope_estimate(batch, max_ns):
    try:
        fit = conditional_mean_slope(batch, range(max_ns + 1))
    except InsufficientDataError as exc:
        logger.debug("no conditional-mean slope: %s", exc)
        return None
    return Estimate(value=fit.slope, stderr=fit.slope_stderr, trials=len(batch))


def _corrected_at_two(batch, config):
    transmission = antistokes_transmission(config)
    if not 0.0 < transmission <= 1.0:
        return None, None
    try:
        corrected = corrected_estimates(batch, transmission, config.antistokes_background, n_s=2)
    except InsufficientDataError as exc:
        logger.debug("no corrected estimates: %s", exc)
        return None, None
    trials = int(np.count_nonzero(batch.stokes == 2))
    return (
        _estimate(corrected.mean, corrected.mean_stderr, trials),
        _estimate(corrected.q, corrected.q_stderr, trials),
    )


def summarize(batch, config=None, max_ns=4):
    """
    Every reported estimator for one batch, as a StatsSummary.

    With a config, zeta and the loss- and background-corrected n_S = 2
    estimates are filled in as well.
    """
    _require_trials(batch, 2)
    mean_s, mean_s_err = _mean_estimate(batch.stokes)
    mean_as, mean_as_err = _mean_estimate(batch.antistokes)
    psn = psn_meas(batch)
    v = normalized_variance(batch)

    g2_by_ns, mean_by_ns, q_by_ns = {}, {}, {}
    for n_s in range(max_ns + 1):
        if not np.any(batch.stokes == n_s):
            logger.debug("no trials at n_S = %d", n_s)
            continue
        mean_by_ns[n_s] = conditional_mean(batch, n_s)
        try:
            g2_by_ns[n_s] = conditional_g2(batch, n_s)
            q_by_ns[n_s] = mandel_q(batch, n_s)
        except InsufficientDataError as exc:
            logger.debug("skipping g2/Q at n_S = %d: %s", n_s, exc)

    zeta_value = None
    corrected_mean, corrected_q = None, None
    if config is not None:
        if config.stokes_efficiency > 0 and mean_s > 0:
            zeta_value = zeta(config.stokes_background, config.stokes_efficiency, mean_s)
        corrected_mean, corrected_q = _corrected_at_two(batch, config)
    return StatsSummary(
        mean_s=mean_s,
        mean_as=mean_as,
        mean_s_stderr=mean_s_err,
        mean_as_stderr=mean_as_err,
        psn_meas=psn.value,
        psn_meas_stderr=psn.stderr,
        psn_th=mean_s + mean_as,
        v_norm=v.value,
        v_stderr=v.stderr,
        g2_by_ns=g2_by_ns,
        mean_as_by_ns=mean_by_ns,
        q_by_ns=q_by_ns,
        mean_as_slope=_slope_estimate(batch, max_ns),
        corrected_mean_as=corrected_mean,
        corrected_q=corrected_q,
        zeta=zeta_value,
        trials=len(batch),
    )


@dataclass(frozen=True)
class DecayFit:
    amplitude: float
    amplitude_stderr: float
    decay_time: float
    decay_time_stderr: float


def _decay(t, amplitude, decay_time):
    return amplitude * np.exp(-t / decay_time)


def fit_decay_time(taus, values, errors=None):
    """Least-squares fit of values = A exp(-tau / tau_c); returns DecayFit"""
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=float)
    if taus.size < 3:
        raise InsufficientDataError("need three or more delays to fit a decay time")
    guess = (float(values[0]), float(max(taus.max() - taus.min(), 1.0)))
    sigma = None if errors is None else np.asarray(errors, dtype=float)
    params, cov = curve_fit(
        _decay, taus, values, p0=guess, sigma=sigma,
        absolute_sigma=sigma is not None, bounds=([0.0, 1e-9], [np.inf, np.inf]),
    )
    errs = np.sqrt(np.diag(cov))
    logger.info("decay fit: tau_c = %.4g +/- %.2g us", params[1], errs[1])
    return DecayFit(
        amplitude=float(params[0]),
        amplitude_stderr=float(errs[0]),
        decay_time=float(params[1]),
        decay_time_stderr=float(errs[1]),
    )
