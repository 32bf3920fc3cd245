# trial_sampler.py - Monte Carlo trials: write -> store -> retrieve -> detect
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from tqdm import tqdm

from detection_chain import ChannelModel, detect, detect_counts
from eit_retrieval import retrieval_result
from model_core import COUNT_FIELDS, ConfigError, CountRecord, PulseProfile, ValidatedConfig
from write_dynamics import mode_mean, stokes_flux

logger = logging.getLogger(__name__)

# Trials per RNG stream; fixed so results do not depend on the worker count
BLOCK_SIZE = 8192

_COLUMN = {name: i for i, name in enumerate(COUNT_FIELDS)}


@dataclass(frozen=True)
class ProtocolPlan:
    """Everything a worker needs to sample trials for one configuration"""

    config: ValidatedConfig
    per_mode_mean: float
    storage_factor: float
    retrieval_efficiency: float
    stokes_pulse: PulseProfile
    antistokes_pulse: PulseProfile


@dataclass(frozen=True)
class TrialBatch:
    """Columnar trial records, columns ordered as COUNT_FIELDS"""

    counts: np.ndarray
    config: Optional[ValidatedConfig] = None
    seed: Optional[int] = None
    has_latent: bool = True

    def __len__(self):
        return self.counts.shape[0]

    def column(self, name):
        return self.counts[:, _COLUMN[name]]

    @property
    def s1(self):
        return self.column("s1")

    @property
    def s2(self):
        return self.column("s2")

    @property
    def as1(self):
        return self.column("as1")

    @property
    def as2(self):
        return self.column("as2")

    @property
    def stokes(self):
        return self.s1 + self.s2

    @property
    def antistokes(self):
        return self.as1 + self.as2

    @property
    def records(self):
        return [CountRecord(*(int(v) for v in row)) for row in self.counts]

    def subset(self, mask):
        return TrialBatch(counts=self.counts[mask], config=self.config, seed=self.seed, has_latent=self.has_latent)

    @classmethod
    def from_detector_counts(cls, s1, s2, as1, as2, latent=None):
        """Build a batch from detector columns, e.g. loaded from a counts file"""
        s1 = np.asarray(s1, dtype=np.int64)
        counts = np.zeros((s1.size, len(COUNT_FIELDS)), dtype=np.int64)
        for name, values in (("s1", s1), ("s2", s2), ("as1", as1), ("as2", as2)):
            counts[:, _COLUMN[name]] = values
        if latent is not None:
            for name, values in latent.items():
                counts[:, _COLUMN[name]] = values
        return cls(counts=counts, has_latent=latent is not None)


def stream(seed, index):
    """Counter-based RNG stream: (seed, index) always gives the same Philox generator"""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(sequence))


def plan_protocol(config):
    """Precompute the deterministic stages (write means, retrieval) for sampling"""
    retrieval = retrieval_result(config)
    return ProtocolPlan(
        config=config,
        per_mode_mean=mode_mean(config.xi, config.write_duration),
        storage_factor=math.exp(-config.decoherence_rate * config.delay),
        retrieval_efficiency=1.0 if config.retrieval_model == "ideal" else retrieval.efficiency,
        stokes_pulse=stokes_flux(config),
        antistokes_pulse=retrieval.antistokes_flux,
    )


def sample_block(plan: ProtocolPlan, rng, size):
    """
    Sample `size` complete trials.

    Each of the N modes holds n Stokes photons and n spin quanta with
    P(n) = m^n / (1 + m)^(n+1), so the pair total over the modes is negative
    binomial with N successes at p = 1 / (1 + m). Spins then survive storage
    and retrieval by binomial thinning and both channels go through the
    detection chain.

    Returns:
        int64 array of shape (size, 7) in COUNT_FIELDS order
    """
    config = plan.config
    m = plan.per_mode_mean
    pairs = rng.negative_binomial(config.mode_count, 1.0 / (1.0 + m), size=size).astype(np.int64)
    survivors = rng.binomial(pairs, plan.storage_factor)
    retrieved = rng.binomial(survivors, plan.retrieval_efficiency)

    stokes_channel = ChannelModel.stokes(config)
    antistokes_channel = ChannelModel.antistokes(config)
    if config.dead_time == 0:
        s1, s2 = detect_counts(pairs, stokes_channel, rng)
        as1, as2 = detect_counts(retrieved, antistokes_channel, rng)
    else:
        s1 = np.empty(size, dtype=np.int64)
        s2 = np.empty_like(s1)
        as1 = np.empty_like(s1)
        as2 = np.empty_like(s1)
        for i in range(size):
            s1[i], s2[i] = detect(pairs[i], stokes_channel, plan.stokes_pulse, rng)
            as1[i], as2[i] = detect(retrieved[i], antistokes_channel, plan.antistokes_pulse, rng)
    return np.column_stack([pairs, pairs, retrieved, s1, s2, as1, as2]).astype(np.int64)


def sample_trial(config, rng):
    """One protocol trial as a CountRecord"""
    row = sample_block(plan_protocol(config), rng, 1)[0]
    return CountRecord(*(int(v) for v in row))


def _sample_job(args):
    plan, seed, index, size = args
    return sample_block(plan, stream(seed, index), size)


def run_batch(config, trials, workers=1, seed=None, progress=False):
    """
    Sample a reproducible batch of trials.

    Trials are cut into fixed blocks of BLOCK_SIZE, block i drawing from
    stream(seed, i), so the batch is identical for any worker count.

    Args:
        config: ValidatedConfig
        trials: number of trials (>= 1)
        workers: worker processes (1 runs in-process)
        seed: overrides config.rng_seed
        progress: show a tqdm progress bar

    Returns:
        TrialBatch
    """
    if trials < 1:
        raise ConfigError([f"trials: must be >= 1, got {trials}"])
    seed = config.rng_seed if seed is None else int(seed)
    plan = plan_protocol(config)
    sizes = [min(BLOCK_SIZE, trials - start) for start in range(0, trials, BLOCK_SIZE)]
    jobs = [(plan, seed, index, size) for index, size in enumerate(sizes)]
    logger.info("sampling %d trials in %d blocks with %d worker(s), seed %d", trials, len(jobs), workers, seed)

    bar = dict(total=len(jobs), desc="trials", unit="block", disable=not progress)
    if workers <= 1 or len(jobs) == 1:
        blocks = [_sample_job(job) for job in tqdm(jobs, **bar)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            blocks = list(tqdm(pool.map(_sample_job, jobs), **bar))
    return TrialBatch(counts=np.concatenate(blocks, axis=0), config=config, seed=seed)
