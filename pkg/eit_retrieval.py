# eit_retrieval.py - Storage decay and EIT retrieval of the stored spin wave
import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import brentq

from model_core import (
    CalibrationError,
    PulseProfile,
    RetrievalError,
    SolverError,
    SpinWaveProfile,
    validate,
)
from write_dynamics import spin_profile

logger = logging.getLogger(__name__)

COURANT_LIMIT = 0.5
RETRIEVAL_FRACTION = 0.9
# Solve stops once the excitation left in the medium drops below this fraction
REMAINING_TOLERANCE = 1e-7
# Control rise time in units of the absorption-line response time 1/(gamma sqrt(d))
SWITCH_ON_WIDTHS = 10.0
RESULT_CACHE_SIZE = 32

# Config fields that determine the written profile and its retrieval
RETRIEVAL_FIELDS = (
    "retrieval_model",
    "optical_depth",
    "single_atom_rate",
    "write_duration",
    "mode_count",
    "decoherence_rate",
    "retrieve_coupling",
    "excited_state_decay",
    "spatial_points",
    "retrieve_duration",
)


@dataclass(frozen=True)
class RetrievalResult:
    antistokes_flux: PulseProfile
    efficiency: float
    fwhm: float
    retrieval_time: float
    stored: float
    absorbed: float = 0.0
    spin_decayed: float = 0.0
    remaining: float = 0.0

    @property
    def retrieved(self):
        return self.antistokes_flux.total


def apply_storage_decay(profile: SpinWaveProfile, gamma_c, tau_d):
    """
    Decay of the stored excitation number during the delay.

    Args:
        profile: spin-wave profile at the end of writing
        gamma_c: decoherence rate (1/us)
        tau_d: storage time (us)

    Returns:
        Profile scaled uniformly by exp(-gamma_c * tau_d)
    """
    if gamma_c < 0 or tau_d < 0:
        raise ValueError("gamma_c and tau_d must be nonnegative")
    if gamma_c == 0 or tau_d == 0:
        return profile
    return profile.scaled(math.exp(-gamma_c * tau_d))


def _coupling_steps(coupling):
    if isinstance(coupling, (int, float)):
        return ((0.0, float(coupling)),)
    return tuple((float(s), float(k)) for s, k in coupling)


def _distance(times, starts, velocities):
    """Cell lengths travelled by the polariton by each time"""
    times = np.asarray(times, dtype=float)
    ends = np.append(starts[1:], np.inf)
    spans = np.clip(times[..., None] - starts, 0.0, ends - starts)
    return spans @ velocities


def _exit_time(starts, velocities):
    ends = np.append(starts[1:], np.inf)
    travelled = 0.0
    for start, end, v in zip(starts, ends, velocities):
        reach = travelled + v * (end - start)
        if v > 0 and reach >= 1.0:
            return start + (1.0 - travelled) / v
        travelled = reach
    raise RetrievalError("retrieve coupling is zero; the spin wave is never released")


def retrieve_ideal(profile: SpinWaveProfile, coupling, reference_velocity=1.0):
    """
    Perfect-EIT, infinite-depth retrieval.

    The spin excitation at position z leaves the cell once the polariton
    has travelled 1 - z, so the pulse is the spatial profile read backwards
    from the exit end at the group velocity v_g = coupling * reference.

    Args:
        profile: stored spin-wave profile
        coupling: constant |Omega_R|^2 multiplier or ((t_start, multiplier), ...)
        reference_velocity: group velocity (cells/us) at coupling 1

    Returns:
        RetrievalResult with efficiency 1
    """
    steps = _coupling_steps(coupling)
    starts = np.array([s for s, _ in steps])
    velocities = np.array([k for _, k in steps]) * reference_velocity
    if velocities.max() <= 0:
        raise RetrievalError("retrieve coupling is zero; the spin wave is never released")
    exit_time = _exit_time(starts, velocities)

    dz = profile.z[1] - profile.z[0]
    dt = dz / velocities.max()
    bins = max(1, int(math.ceil(exit_time / dt - 1e-9)))
    edges = np.arange(bins + 1) * dt
    travelled = np.minimum(_distance(edges, starts, velocities), 1.0)

    cumulative = cumulative_trapezoid(profile.density, profile.z, initial=0.0)
    released = cumulative[-1] - np.interp(1.0 - travelled, profile.z, cumulative)
    flux = np.clip(np.diff(released) / dt, 0.0, None)
    pulse = PulseProfile(t0=0.0, dt=dt, flux=flux)
    return RetrievalResult(
        antistokes_flux=pulse,
        efficiency=1.0,
        fwhm=pulse.fwhm(),
        retrieval_time=pulse.time_to_fraction(RETRIEVAL_FRACTION),
        stored=profile.total,
    )


def _cell_amplitudes(profile):
    """Spin amplitude per cell with sum(S^2) dz = 1 (unit-normalized shape)"""
    cumulative = cumulative_trapezoid(profile.density, profile.z, initial=0.0)
    mass = np.diff(cumulative)
    if cumulative[-1] <= 0:
        mass = np.ones(len(profile.z) - 1)
    dz = profile.z[1] - profile.z[0]
    mass = np.clip(mass, 0.0, None) / mass.sum()
    return np.sqrt(mass / dz), dz


def _eased(start, target, elapsed, rise_time):
    if elapsed >= rise_time:
        return target
    return start + (target - start) * math.sin(0.5 * math.pi * elapsed / rise_time) ** 2


def control_amplitude(starts, omegas, rise_time):
    """
    Omega(t) for piecewise coupling, each step eased in over rise_time.

    A step that arrives before the previous ramp has finished starts from
    the level reached so far, so Omega(t) stays continuous.
    """
    entry = np.zeros(len(omegas))
    for i in range(1, len(omegas)):
        entry[i] = _eased(entry[i - 1], omegas[i - 1], starts[i] - starts[i - 1], rise_time)

    def omega_at(t):
        i = max(int(np.searchsorted(starts, t, side="right")) - 1, 0)
        return _eased(entry[i], omegas[i], t - starts[i], rise_time)

    return omega_at


def retrieve_finite_depth(profile: SpinWaveProfile, config, dt=None):
    """
    Retrieve the spin wave by integrating the linear three-field EIT equations.

    Co-moving frame, cell-centred upwind accumulation of the anti-Stokes field
    along z (E = 0 at the entrance face), classical RK4 in time. Real-valued
    amplitudes after absorbing the phases:

        dE/dz = -sqrt(d) p
        dp/dt = -gamma p + gamma sqrt(d) E + Omega(t) S
        dS/dt = -(gamma_c / 2) S - Omega(t) p

    with Omega^2 = v_g d gamma so the dark-state polariton moves at v_g.
    Output flux is gamma * E(1)^2. The equations are linear, so the solve is
    done on the unit-normalized shape and rescaled by the stored total.

    The stored state (p = E = 0) is the dark state of the dark control. The
    control is switched on with a sin^2 ramp over
    SWITCH_ON_WIDTHS / (gamma sqrt(d)), slow against the medium's optical
    response, so the state follows the dark state instead of ringing out a
    burst at the exit face. Later coupling steps are eased the same way.

    Args:
        profile: spin-wave profile at the start of retrieval
        config: ValidatedConfig (optical depth, decay rates, coupling, window)
        dt: fixed time step (us); chosen from the Courant limit if omitted

    Returns:
        RetrievalResult including loss channels and remaining excitation

    Raises:
        SolverError if dt violates the Courant limit or the solve blows up
    """
    depth = config.optical_depth
    gamma = config.excited_state_decay
    gamma_s = 0.5 * config.decoherence_rate
    sqrt_d = math.sqrt(depth)

    steps = config.coupling_steps()
    starts = np.array([s for s, _ in steps])
    velocities = np.array([k for _, k in steps]) * config.reference_group_velocity
    if velocities.max() <= 0:
        raise RetrievalError("retrieve coupling is zero; the spin wave is never released")
    omegas = np.sqrt(velocities * depth * gamma)

    rate_bound = gamma * (1.0 + depth) + omegas.max() + gamma_s
    dt_limit = COURANT_LIMIT / rate_bound
    if dt is None:
        dt = 0.9 * dt_limit
    elif dt * rate_bound > COURANT_LIMIT:
        raise SolverError(f"Courant number {dt * rate_bound:.3f} exceeds {COURANT_LIMIT}", suggested_dt=dt_limit)

    amplitude, dz = _cell_amplitudes(profile)
    cells = amplitude.size
    stride = max(1, int(round(dz / velocities.max() / dt)))
    dt_out = stride * dt
    max_bins = int(math.ceil(config.retrieve_duration / dt_out))

    # state: p (cells), S (cells), retrieved, absorbed, spin_decayed
    y = np.zeros(2 * cells + 3)
    y[cells:2 * cells] = amplitude

    omega_at = control_amplitude(starts, omegas, SWITCH_ON_WIDTHS / (gamma * sqrt_d))

    def rhs(t, state):
        p = state[:cells]
        s = state[cells:2 * cells]
        om = omega_at(t)
        field = -sqrt_d * dz * (np.cumsum(p) - 0.5 * p)
        e_out = -sqrt_d * dz * p.sum()
        out = np.empty_like(state)
        out[:cells] = -gamma * p + gamma * sqrt_d * field + om * s
        out[cells:2 * cells] = -gamma_s * s - om * p
        out[-3] = gamma * e_out * e_out
        out[-2] = 2.0 * gamma * dz * (p @ p)
        out[-1] = 2.0 * gamma_s * dz * (s @ s)
        return out

    logger.debug(
        "finite-depth retrieval: d=%.4g, %d cells, dt=%.3e us, stride %d, up to %d bins",
        depth, cells, dt, stride, max_bins,
    )
    emitted = []
    t = 0.0
    previous = 0.0
    for _ in range(max_bins):
        for _ in range(stride):
            k1 = rhs(t, y)
            k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
            k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
            k4 = rhs(t + dt, y + dt * k3)
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += dt
        if not np.all(np.isfinite(y)):
            raise SolverError("retrieval solve diverged", suggested_dt=0.5 * dt)
        emitted.append(y[-3] - previous)
        previous = y[-3]
        remaining = dz * (y[:2 * cells] @ y[:2 * cells])
        if remaining < REMAINING_TOLERANCE:
            break

    stored = profile.total
    flux = np.clip(np.array(emitted), 0.0, None) * (stored / dt_out)
    pulse = PulseProfile(t0=0.0, dt=dt_out, flux=flux)
    efficiency = float(min(max(y[-3], 0.0), 1.0))
    return RetrievalResult(
        antistokes_flux=pulse,
        efficiency=efficiency,
        fwhm=pulse.fwhm(),
        retrieval_time=pulse.time_to_fraction(RETRIEVAL_FRACTION),
        stored=stored,
        absorbed=float(y[-2]) * stored,
        spin_decayed=float(y[-1]) * stored,
        remaining=float(remaining) * stored,
    )


def _retrieval_key(config):
    return tuple((name, getattr(config, name)) for name in RETRIEVAL_FIELDS)


@lru_cache(maxsize=RESULT_CACHE_SIZE)
def _solve_retrieval(key):
    config = validate(dict(key))
    profile = spin_profile(config)
    if config.retrieval_model == "ideal":
        result = retrieve_ideal(profile, config.retrieve_coupling, config.reference_group_velocity)
    else:
        result = retrieve_finite_depth(profile, config)
    logger.info(
        "%s retrieval: efficiency %.4f, FWHM %.3g us, tau_r %.3g us",
        config.retrieval_model, result.efficiency, result.fwhm, result.retrieval_time,
    )
    return result


def retrieval_result(config):
    """Retrieval of the written spin wave for a config, cached per retrieval parameters"""
    return _solve_retrieval(_retrieval_key(config))


def retrieval_efficiency(config):
    """Scalar retrieved/stored ratio used by the sampler and the exact oracle"""
    if config.retrieval_model == "ideal":
        return 1.0
    return retrieval_result(config).efficiency


def antistokes_transmission(config):
    """Probability that one written spin excitation ends up as an anti-Stokes count"""
    storage = math.exp(-config.decoherence_rate * config.delay)
    return storage * retrieval_efficiency(config) * config.antistokes_efficiency


def calibrate_coupling(config, target_efficiency=0.30, bracket=(0.01, 10.0), xtol=1e-4):
    """
    Constant retrieve coupling giving the requested finite-depth efficiency.

    Efficiency rises with coupling (faster release, less decay), so a
    bracketing root finder is enough.
    """
    def miss(coupling):
        trial = config.replace(retrieve_coupling=coupling, retrieval_model="finite_depth")
        return retrieve_finite_depth(spin_profile(trial), trial).efficiency - target_efficiency

    low, high = bracket
    f_low, f_high = miss(low), miss(high)
    if f_low * f_high > 0:
        raise CalibrationError(
            f"efficiency {target_efficiency} not reachable for coupling in [{low}, {high}]"
        )
    coupling = brentq(miss, low, high, xtol=xtol)
    logger.info("coupling %.5g gives retrieval efficiency %.3f", coupling, target_efficiency)
    return coupling
