# calibration.py - Fit unpublished instrument parameters to target observables
import logging
import math
from dataclasses import dataclass
from itertools import product

from scipy.optimize import brentq

from eit_retrieval import retrieval_efficiency
from exact_oracle import exact_joint, exact_stats
from model_core import CalibrationError, ConfigError, OracleError, StatsSummary, ValidatedConfig
from write_dynamics import MAX_GAIN

logger = logging.getLogger(__name__)

# Relative tolerance on the calibrated means
MEAN_TOLERANCE = 0.02
V_TOLERANCE = 0.02
Q_TOLERANCE = 0.05
TARGET_KEYS = ("ns", "nas", "V", "zeta", "tau_nc", "Q2")

# Free choices searched when the targets ask for more than the four fitted parameters give
MODE_LADDER = (1, 2, 4, 8, 16, 32, 64, 128, 256)
STOKES_EFFICIENCY_GRID = (0.2, 0.3, 0.45, 0.6, 0.7)
# tau_nc asks for exact V <= 1 - NONCLASSICAL_MARGIN at that delay
NONCLASSICAL_MARGIN = 0.015


@dataclass(frozen=True)
class CalibrationResult:
    config: ValidatedConfig
    achieved: StatsSummary


def parse_targets(text):
    """'ns=1.06,nas=0.36,V=0.942[,zeta=0.3][,tau_nc=3][,Q2=-0.09]' -> dict"""
    targets = {}
    problems = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in TARGET_KEYS:
            problems.append(f"targets: unknown or malformed entry {item!r}")
            continue
        try:
            targets[key] = float(value)
        except ValueError:
            problems.append(f"targets: {key} is not a number ({value!r})")
    for key in ("ns", "nas", "V"):
        if key not in targets:
            problems.append(f"targets: {key} is required")
    if problems:
        raise ConfigError(problems)
    return targets



def variance_at_delay(config, delay):
    """Exact normalized variance after `delay` us of storage"""
    return exact_stats(exact_joint(config.replace(delay=delay))).v_norm


def _search_space(config, targets):
    if "Q2" in targets:
        return list(product(STOKES_EFFICIENCY_GRID, MODE_LADDER))
    ladder = sorted({config.mode_count} | {n for n in MODE_LADDER if n > config.mode_count})
    return [(config.stokes_efficiency, n) for n in ladder]


def calibrate(config, targets):
    """
    Solve for (single_atom_rate, stokes_background, antistokes_efficiency,
    antistokes_background) so the exact model hits the targets.

    ns, nas and V (and zeta) are met by `solve_targets` at the configured
    alpha_S and mode count. Two optional targets free those as well:
      - tau_nc: walk the mode count up MODE_LADDER until V at that delay is
        at least NONCLASSICAL_MARGIN below 1, the smallest such count wins;
      - Q2: search alpha_S x mode count for the exact Q at n_S = 2 closest
        to the target, within Q_TOLERANCE or the closest is reported.

    Args:
        config: ValidatedConfig supplying everything not calibrated
        targets: dict with ns, nas, V and optionally zeta, tau_nc, Q2

    Returns:
        CalibrationResult

    Raises:
        CalibrationError if a target cannot be reached; `best` carries the
        closest achieved summary when there is one
    """
    if "tau_nc" not in targets and "Q2" not in targets:
        return solve_targets(config, targets)

    accepted = []
    for alpha_s, modes in _search_space(config, targets):
        try:
            result = solve_targets(config.replace(stokes_efficiency=alpha_s, mode_count=modes), targets)
            if "tau_nc" in targets:
                late = variance_at_delay(result.config, targets["tau_nc"])
                if late > 1.0 - NONCLASSICAL_MARGIN:
                    logger.debug("alpha_S %.2f, N %d: V(%.3g us) = %.4f", alpha_s, modes, targets["tau_nc"], late)
                    continue
        except (CalibrationError, OracleError) as exc:
            logger.debug("alpha_S %.2f, N %d skipped: %s", alpha_s, modes, exc)
            continue
        if "Q2" not in targets:
            logger.info("V stays below 1 - %.3g out to %.3g us with %d modes", NONCLASSICAL_MARGIN, targets["tau_nc"], modes)
            return result
        accepted.append(result)

    if not accepted:
        raise CalibrationError(f"no alpha_S and mode count in the search meet the targets {targets}")
    best = min(accepted, key=lambda r: abs(_q_at_two(r.achieved) - targets["Q2"]))
    q = _q_at_two(best.achieved)
    if abs(q - targets["Q2"]) > Q_TOLERANCE:
        raise CalibrationError(
            f"Q(n_S=2) = {targets['Q2']} not reachable; closest is {q:.4f} at alpha_S "
            f"{best.config.stokes_efficiency}, N {best.config.mode_count}",
            best=best.achieved,
        )
    return best


def _q_at_two(summary):
    estimate = summary.q_by_ns.get(2)
    return math.nan if estimate is None else estimate.value


def solve_targets(config, targets):
    """
    Meet ns, nas, V (and zeta) at the configured alpha_S and mode count.

    With alpha_S held fixed:
      - zeta fixes the Stokes background,
      - the Stokes mean then fixes the collective rate,
      - the anti-Stokes mean ties the background to the efficiency and a
        root finder picks the efficiency that gives the requested V.
    """
    ns, nas, v_target = targets["ns"], targets["nas"], targets["V"]
    alpha_s = config.stokes_efficiency
    if not 0.0 < alpha_s < 1.0:
        raise CalibrationError("stokes_efficiency must be strictly between 0 and 1 to calibrate")
    if "zeta" in targets:
        bg_s = targets["zeta"] * ns * alpha_s / (1.0 - alpha_s)
    else:
        bg_s = config.stokes_background
    pairs = (ns - bg_s) / alpha_s
    if pairs <= 0:
        raise CalibrationError(f"Stokes background {bg_s:.4g} leaves no signal for n_S = {ns}")

    xi = math.log1p(pairs / config.mode_count) / config.write_duration
    if xi * config.write_duration > MAX_GAIN:
        raise CalibrationError("required write gain is outside the spontaneous regime")
    candidate = config.replace(single_atom_rate=xi / config.optical_depth, stokes_background=bg_s)
    transfer = math.exp(-candidate.decoherence_rate * candidate.delay) * retrieval_efficiency(candidate)
    upper = min(nas / pairs, transfer)
    if upper <= 0:
        raise CalibrationError("no anti-Stokes signal can be retrieved with this configuration")

    def trial_config(t):
        return candidate.replace(antistokes_efficiency=min(t / transfer, 1.0), antistokes_background=max(nas - t * pairs, 0.0))

    def v_miss(t):
        return exact_stats(exact_joint(trial_config(t))).v_norm - v_target

    low = upper * 1e-6
    f_low, f_high = v_miss(low), v_miss(upper)
    if f_low * f_high > 0:
        raise CalibrationError(
            f"V = {v_target} not reachable: V ranges over [{f_high + v_target:.4f}, {f_low + v_target:.4f}]"
        )
    t = brentq(v_miss, low, upper, xtol=1e-10)
    calibrated = trial_config(t)
    achieved = exact_stats(exact_joint(calibrated))

    residuals = {
        "ns": abs(achieved.mean_s - ns) / ns,
        "nas": abs(achieved.mean_as - nas) / nas,
        "V": abs(achieved.v_norm - v_target),
    }
    if residuals["ns"] > MEAN_TOLERANCE or residuals["nas"] > MEAN_TOLERANCE or residuals["V"] > V_TOLERANCE:
        raise CalibrationError(f"calibration residuals out of tolerance: {residuals}")
    logger.info(
        "calibrated: rate %.5g/us, alpha_AS %.4f, bg_S %.4f, bg_AS %.4f -> n_S %.4f, n_AS %.4f, V %.4f",
        calibrated.single_atom_rate, calibrated.antistokes_efficiency, calibrated.stokes_background,
        calibrated.antistokes_background, achieved.mean_s, achieved.mean_as, achieved.v_norm,
    )
    return CalibrationResult(config=calibrated, achieved=achieved)
