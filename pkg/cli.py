# cli.py - Scenario runner: simulate, analyze, per-figure sweeps, oracle check, calibration
import csv
import io
import logging
import os
import sys
import tempfile
from pathlib import Path

import click
import numpy as np

import check_setup
from calibration import calibrate, parse_targets
from count_statistics import (
    fit_decay_time,
    normalized_variance,
    summarize,
)
from eit_retrieval import retrieval_result
from exact_oracle import DEFAULT_N_MAX, oracle_check
from model_core import (
    COUNT_FIELDS,
    ConfigError,
    ExperimentConfig,
    InsufficientDataError,
    OracleError,
    SimulationError,
    load_config,
    validate,
)
from trial_sampler import TrialBatch, run_batch
from write_dynamics import stokes_flux

log = logging.getLogger("spinwave")

# exit codes
EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2

DETECTOR_COLUMNS = ("s1", "s2", "as1", "as2")
LATENT_COLUMNS = ("true_stokes", "true_spin", "retrieved")


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".10g")
    return str(value)


def atomic_write(path, text):
    """Write text to path via a temp file in the same directory and a rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    log.info("wrote %s", path)


def write_csv(path, header, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write(path, buffer.getvalue())


def read_counts(path):
    """Load a simulate-style counts CSV into a TrialBatch"""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = [name for name in DETECTOR_COLUMNS if name not in fields]
        if missing:
            raise ConfigError([f"{path}: missing columns {', '.join(missing)}"])
        rows = list(reader)
    if not rows:
        raise InsufficientDataError(f"{path}: no trials")
    try:
        columns = {name: np.array([int(r[name]) for r in rows], dtype=np.int64) for name in fields if name in COUNT_FIELDS}
    except ValueError as exc:
        raise ConfigError([f"{path}: non-integer count ({exc})"]) from None
    latent = {name: columns[name] for name in LATENT_COLUMNS if name in columns}
    return TrialBatch.from_detector_counts(
        columns["s1"], columns["s2"], columns["as1"], columns["as2"],
        latent=latent if len(latent) == len(LATENT_COLUMNS) else None,
    )


def _float_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}")


def _resolve_config(path, **overrides):
    config = load_config(path) if path else validate(ExperimentConfig())
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        config = config.replace(**overrides)
    click.echo(config.experiment_config().to_json(), err=True)
    return config


config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Flat JSON config; defaults apply to missing keys",
)
seed_option = click.option("--seed", type=click.IntRange(min=0), default=None, help="Overrides rng_seed")
workers_option = click.option(
    "--workers", type=click.IntRange(min=1), default=1, envvar="SPINWAVE_WORKERS", show_default=True,
    help="Worker processes for batch sampling",
)
progress_option = click.option("--progress/--no-progress", default=False, help="Show a progress bar")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose):
    """Atomic-ensemble quantum memory simulator."""
    level = "DEBUG" if verbose else os.environ.get("SPINWAVE_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger().setLevel(getattr(logging, level, logging.INFO))


@cli.command()
@config_option
@click.option("--trials", type=int, required=True)
@seed_option
@workers_option
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--debug-latent", is_flag=True, help="Also write latent photon numbers")
@progress_option
def simulate(config_path, trials, seed, workers, out, debug_latent, progress):
    """Sample protocol trials and write detector counts as CSV."""
    config = _resolve_config(config_path, rng_seed=seed)
    batch = run_batch(config, trials, workers=workers, progress=progress)
    names = ["trial", *DETECTOR_COLUMNS] + (list(LATENT_COLUMNS) if debug_latent else [])
    columns = [batch.column(name) for name in names[1:]]
    rows = ([i, *(int(c[i]) for c in columns)] for i in range(len(batch)))
    write_csv(out, names, rows)


@cli.command()
@click.argument("counts", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@config_option
@click.option("--max-ns", type=click.IntRange(min=0), default=4, show_default=True)
def analyze(counts, out, config_path, max_ns):
    """Compute every estimator from a counts CSV and write stats JSON."""
    config = _resolve_config(config_path) if config_path else None
    batch = read_counts(counts)
    summary = summarize(batch, config=config, max_ns=max_ns)
    atomic_write(out, summary.model_dump_json(indent=2) + "\n")


@cli.command()
@config_option
@click.option("--rates", callback=_float_list, help="single_atom_rate values (1/us); default: the config's")
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), required=True)
def figure2a(config_path, rates, out_dir):
    """Stokes flux during the write pulse, one CSV per rate."""
    config = _resolve_config(config_path)
    for rate in rates or [config.single_atom_rate]:
        point = config.replace(single_atom_rate=rate)
        pulse = stokes_flux(point)
        log.info("rate %.4g/us: total Stokes mean %.4g", rate, pulse.total)
        write_csv(out_dir / f"figure2a_rate_{rate:g}.csv", ["t_us", "flux_per_us"], zip(pulse.times(), pulse.flux))


def _retrievals(config, couplings):
    for coupling in couplings:
        yield coupling, retrieval_result(config.replace(retrieve_coupling=coupling))


@cli.command()
@config_option
@click.option("--couplings", callback=_float_list, default="0.5,1,2", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def figure2b(config_path, couplings, out):
    """Retrieved anti-Stokes pulse shapes for several coupling strengths."""
    config = _resolve_config(config_path)
    rows = []
    for coupling, result in _retrievals(config, couplings):
        pulse = result.antistokes_flux
        rows.extend((coupling, t, f) for t, f in zip(pulse.times(), pulse.flux))
    write_csv(out, ["coupling", "t_us", "flux_per_us"], rows)


@cli.command()
@config_option
@click.option("--couplings", callback=_float_list, default="0.25,0.5,1,2,4", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def figure2c(config_path, couplings, out):
    """Retrieved pulse width and photon number against coupling strength."""
    config = _resolve_config(config_path)
    rows = [(c, r.fwhm, r.antistokes_flux.total) for c, r in _retrievals(config, couplings)]
    write_csv(out, ["coupling", "fwhm_us", "total_photons"], rows)


@cli.command()
@config_option
@click.option("--taus", callback=_float_list, default="0,1,2,4,6", show_default=True)
@click.option("--trials", type=int, default=200_000, show_default=True)
@seed_option
@workers_option
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@progress_option
def figure3(config_path, taus, trials, seed, workers, out, progress):
    """Normalized variance and anti-Stokes mean against storage time."""
    config = _resolve_config(config_path, rng_seed=seed)
    rows, errors = [], []
    for tau in taus:
        batch = run_batch(config.replace(delay=tau), trials, workers=workers, progress=progress)
        v = normalized_variance(batch)
        counts = batch.antistokes.astype(float)
        rows.append((tau, v.value, v.stderr, float(counts.mean())))
        errors.append(float(counts.std() / np.sqrt(counts.size)))
        log.info("tau_d %.3g us: V = %.4f +/- %.4f", tau, v.value, v.stderr)
    if len(rows) >= 3:
        try:
            # background counts do not decay with the delay
            signal = [r[3] - config.antistokes_background for r in rows]
            fit = fit_decay_time([r[0] for r in rows], signal, errors)
            log.info("memory time %.3g +/- %.2g us", fit.decay_time, fit.decay_time_stderr)
        except RuntimeError as exc:
            log.warning("decay fit did not converge: %s", exc)
    write_csv(out, ["tau_d_us", "V", "V_err", "mean_as"], rows)


@cli.command()
@config_option
@click.option("--trials", type=int, default=1_000_000, show_default=True)
@seed_option
@workers_option
@click.option("--max-ns", type=click.IntRange(min=0), default=4, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@progress_option
def figure4(config_path, trials, seed, workers, max_ns, out, progress):
    """Conditional g2, anti-Stokes mean and Mandel Q against Stokes count."""
    config = _resolve_config(config_path, rng_seed=seed)
    batch = run_batch(config, trials, workers=workers, progress=progress)
    summary = summarize(batch, config=config, max_ns=max_ns)
    rows = []
    for n_s, g2 in sorted(summary.g2_by_ns.items()):
        rows.append((n_s, g2.value, g2.stderr, summary.mean_as_by_ns[n_s].value, summary.q_by_ns[n_s].value))
    if summary.mean_as_slope is not None:
        log.info("conditional mean slope %.4f +/- %.4f", summary.mean_as_slope.value, summary.mean_as_slope.stderr)
    if summary.corrected_mean_as is not None:
        log.info("corrected at n_S=2: mean %.3f, Q %.3f", summary.corrected_mean_as.value, summary.corrected_q.value)
    write_csv(out, ["n_s", "g2", "g2_err", "mean_as", "Q"], rows)
    atomic_write(out.with_suffix(".json"), summary.model_dump_json(indent=2) + "\n")


@cli.command("oracle-check")
@config_option
@click.option("--trials", type=int, default=1_000_000, show_default=True)
@seed_option
@workers_option
@click.option("--n-max", type=click.IntRange(min=1), default=DEFAULT_N_MAX, show_default=True)
def oracle_check_command(config_path, trials, seed, workers, n_max):
    """Compare Monte Carlo estimates with the exact distribution."""
    config = _resolve_config(config_path)
    report = oracle_check(config, trials, seed=seed, workers=workers, n_max=n_max)
    click.echo(f"TV {_fmt(report.total_variation)}")
    for name, z in report.z_scores.items():
        click.echo(f"z {name} {_fmt(z)}")
    if not report.passed:
        raise OracleError(f"oracle check failed (TV {report.total_variation:.3g})")


@cli.command("calibrate")
@config_option
@click.option("--targets", required=True, help="ns=..,nas=..,V=..[,zeta=..][,tau_nc=..][,Q2=..]")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
def calibrate_command(config_path, targets, out):
    """Fit rate, backgrounds and anti-Stokes efficiency to target observables.

    tau_nc also picks the smallest mode count that keeps V below one out to
    that delay; Q2 searches mode count and Stokes efficiency for the
    conditional Mandel Q at n_S = 2.
    """
    config = _resolve_config(config_path)
    result = calibrate(config, parse_targets(targets))
    text = result.config.experiment_config().to_json() + "\n"
    if out is None:
        click.echo(text, nl=False)
    else:
        atomic_write(out, text)


@cli.command("check-setup")
def check_setup_command():
    """Report which dependencies and project modules import."""
    if not check_setup.main(echo=click.echo):
        raise click.ClickException("setup incomplete")


def main(argv=None):
    """Run the CLI and map failures onto exit codes (1 invalid input, 2 solver/oracle failure)."""
    try:
        result = cli.main(args=argv, prog_name="spinwave", standalone_mode=False)
    except click.ClickException as exc:
        log.error("%s", exc.format_message())
        exc.show()
        return EXIT_INVALID
    except click.Abort:
        log.error("aborted")
        return EXIT_INVALID
    except (ConfigError, InsufficientDataError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except SimulationError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILED
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
