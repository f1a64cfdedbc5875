import logging
import os
from dataclasses import replace

import click
import numpy as np

from .cliutils import (
    GradientCheckError,
    LikelihoodCheckError,
    exits,
    open_run,
)
from .config import load_config, with_overrides
from .evaluation import (
    IdMismatchError,
    ablate as run_ablation,
    evaluate,
    transforms_from_fields,
    transforms_from_velocities,
)
from .model import verify_marginal_likelihood
from .optim import VARIANTS, check_gradients, fit as run_fit, register as run_register
from .sphere_grid import area_weights, parse_grid
from .storage import (
    RunStorage,
    load_atlas,
    load_fields,
    load_subject,
    load_velocities,
    read_json,
    require_path,
    save_atlas,
    save_fields,
    save_velocities,
    write_container,
    write_csv,
    write_json,
    write_pgm,
)
from .synth import make_cohort

logger = logging.getLogger("josa.cli")

CORRELATION_HEADER = ["subject", "modality", "before", "after", "improvement"]

config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    default=None,
    help="YAML or JSON run configuration.",
)
threads_option = click.option(
    "--threads",
    type=int,
    default=None,
    envvar="JOSA_THREADS",
    help="Worker threads (default: number of cores).",
)


@click.command()
@config_option
@click.option("--out", required=True, type=click.Path(file_okay=False))
@threads_option
@exits
def synth(config_path, out, threads):
    """Generate a synthetic cohort with known atlas and deformations."""
    cfg = load_config(config_path, threads)
    storage = open_run(out, cfg, "synth")
    cohort = make_cohort(cfg.synth, cfg.threads)
    storage.save_cohort(cohort, cfg.synth.to_dict(), cfg.threads)
    click.echo(f"Wrote {len(cohort.subjects)} subjects to {out}")


@click.command()
@click.option("--cohort", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@threads_option
@click.option("--variant", type=click.Choice(VARIANTS), default=None)
@click.option("--epochs", type=int, default=None)
@exits
def fit(cohort, out, config_path, threads, variant, epochs):
    """Estimate the atlas and every subject's velocities."""
    require_path(cohort, "cohort directory")
    cfg = with_overrides(load_config(config_path, threads), variant=variant, epochs=epochs)
    subjects = RunStorage(cohort).load_subjects(cfg.threads)
    storage = open_run(out, cfg, "fit")

    def checkpoint(epoch, atlas, records):
        save_atlas(storage.path("checkpoint_atlas.josa"), atlas)
        save_velocities(
            storage.path("checkpoint_velocities.josa"),
            {r.id: (r.v_j, r.v_g, r.v_f) for r in records},
        )
        logger.info("Checkpoint at epoch %d", epoch)

    # The cohort decides the grid.
    result = run_fit(subjects, replace(cfg.fit, grid=None), checkpoint)
    save_atlas(storage.path("atlas.josa"), result.atlas)
    save_velocities(storage.path("velocities.josa"), result.velocities)
    write_json(storage.path("report.json"), result.report.to_dict())
    click.echo(
        f"{result.report.variant}: loss {result.report.initial_loss:.6g} -> "
        f"{result.report.final_loss:.6g} over {len(result.report.epochs)} epochs"
    )


@click.command()
@click.option("--subject", required=True, type=click.Path(dir_okay=False))
@click.option("--atlas", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@threads_option
@exits
def register(subject, atlas, out, config_path, threads):
    """Register one subject to a fitted atlas from geometry alone."""
    require_path(subject, "subject container")
    require_path(atlas, "atlas container")
    cfg = load_config(config_path, threads)
    subject_id = os.path.splitext(os.path.basename(subject))[0]
    record = load_subject(subject, subject_id, geom_only=True)
    target = load_atlas(atlas)
    storage = open_run(out, cfg, "register")

    result = run_register(record.geom, target, cfg.register, subject_id)
    save_fields(
        storage.path("fields.josa"),
        {subject_id: {"j": result.phi_j.u, "g": result.phi_g.u, "f": result.phi_f.u}},
    )
    write_json(storage.path("diagnostics.json"), result.diagnostics)
    click.echo(
        f"{subject_id}: loss {result.diagnostics['initial_loss']:.6g} -> "
        f"{result.diagnostics['final_loss']:.6g}"
    )


def _write_eval(storage: RunStorage, report):
    write_json(storage.path("report.json"), report.to_dict())
    write_csv(storage.path("correlations.csv"), CORRELATION_HEADER, report.rows())
    means = {}
    for name in ("geom", "func"):
        scores = getattr(report, name)
        if scores is None:
            continue
        for when, image in (("before", scores.mean_before), ("after", scores.mean_after)):
            write_pgm(storage.path(f"{name}_mean_{when}.pgm"), image)
            means[f"{name}_mean_{when}"] = image
    write_container(storage.path("means.josa"), means)


@click.command("eval")
@click.option("--cohort", required=True, type=click.Path(file_okay=False))
@click.option("--run", "run_dir", type=click.Path(file_okay=False), default=None)
@click.option(
    "--fields",
    "fields_path",
    type=click.Path(dir_okay=False),
    default=None,
    help="Container of <subject>/geom and <subject>/func displacements "
    "into atlas space, produced by another tool.",
)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@threads_option
@exits
def evaluate_command(cohort, run_dir, fields_path, out, config_path, threads):
    """Score a fit (or external deformations) against the cohort."""
    if (run_dir is None) == (fields_path is None):
        raise click.UsageError("Give exactly one of --run or --fields")
    require_path(cohort, "cohort directory")
    cfg = load_config(config_path, threads)
    subjects = RunStorage(cohort).load_subjects(cfg.threads)
    grid = subjects[0].grid
    weights = area_weights(grid) if cfg.eval.weighted else None

    if run_dir is not None:
        run = RunStorage(run_dir)
        variant = read_json(run.path("report.json"))["variant"]
        velocities = load_velocities(run.path("velocities.josa"))
        names = ("v_j", "v_g", "v_f")
        missing = [
            s.id for s in subjects if not all(n in velocities.get(s.id, {}) for n in names)
        ]
        if missing:
            raise IdMismatchError(
                f"Run {run_dir} has no velocities for subjects {missing}"
            )
        fitted = [s.with_velocities(*(velocities[s.id][n] for n in names)) for s in subjects]
        transforms = transforms_from_velocities(
            fitted, cfg.hyperparams, variant != "shared"
        )
        label = variant
    else:
        transforms = transforms_from_fields(load_fields(require_path(fields_path)), grid)
        label = "external"

    storage = open_run(out, cfg, "eval")
    report = evaluate(subjects, transforms, weights, label)
    _write_eval(storage, report)
    click.echo(
        f"{label}: median geometric improvement "
        f"{float(np.median(report.geom.improvement)):.4f}"
    )


@click.command()
@click.option("--cohort", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@threads_option
@click.option(
    "--variant", "variants", type=click.Choice(VARIANTS), multiple=True, default=None
)
@exits
def ablate(cohort, out, config_path, threads, variants):
    """Fit every model variant on one cohort and compare them."""
    require_path(cohort, "cohort directory")
    cfg = load_config(config_path, threads)
    subjects = RunStorage(cohort).load_subjects(cfg.threads)
    weights = area_weights(subjects[0].grid) if cfg.eval.weighted else None
    storage = open_run(out, cfg, "ablate")

    report = run_ablation(
        subjects,
        replace(cfg.fit, grid=None),
        list(variants) or cfg.eval.variants,
        weights,
        cfg.threads,
    )
    write_json(storage.path("ablation.json"), report.to_dict())
    write_csv(
        storage.path("correlations.csv"),
        ["variant"] + CORRELATION_HEADER,
        ([variant] + row for variant, r in report.reports.items() for row in r.rows()),
    )
    write_csv(
        storage.path("comparisons.csv"),
        ["comparison", "median_difference", "statistic", "p_value", "n"],
        (
            [c.name, c.median_difference]
            + ([c.test.statistic, c.test.p_value, c.test.n] if c.test else ["", "", ""])
            for c in report.comparisons
        ),
    )
    for c in report.comparisons:
        p = "n/a" if c.test is None else f"{c.test.p_value:.3g}"
        click.echo(f"{c.name}: median difference {c.median_difference:.4f}, p {p}")


@click.command("check-grad")
@click.option("--grid", "grid_text", default="8x16", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--subjects", type=int, default=2, show_default=True)
@click.option("--max-components", type=int, default=None)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@exits
def check_grad(grid_text, seed, subjects, max_components, tolerance, out):
    """Compare analytic gradients with central finite differences."""
    report = check_gradients(
        parse_grid(grid_text), seed, subjects, max_components=max_components
    )
    for name, error in report.per_class.items():
        click.echo(f"{name}: {error:.3e}")
    click.echo(f"max relative error {report.max_rel_error:.3e}")
    if out is not None:
        storage = open_run(out, load_config(None), "check-grad")
        write_json(storage.path("gradcheck.json"), report.to_dict())
    if report.max_rel_error > tolerance:
        raise GradientCheckError(
            f"max relative error {report.max_rel_error:.3e} exceeds {tolerance:.1e}"
        )


@click.command("check-likelihood")
@click.option(
    "--sigma", "sigmas", type=float, multiple=True, default=(0.5, 1.0), show_default=True
)
@click.option("--trials", type=int, default=10000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tolerance", type=float, default=0.05, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@exits
def check_likelihood(sigmas, trials, seed, tolerance, out):
    """Monte-Carlo check of the composite likelihood variance 2σ²."""
    reports = [
        verify_marginal_likelihood(sigma, trials, [seed, i])
        for i, sigma in enumerate(sigmas)
    ]
    for r in reports:
        click.echo(
            f"sigma {r.sigma}: variance {r.empirical_variance:.6f} "
            f"expected {r.expected_variance:.6f} (relative error {r.relative_error:.4f})"
        )
    if out is not None:
        storage = open_run(out, load_config(None), "check-likelihood")
        write_json(storage.path("likelihood.json"), [r.to_dict() for r in reports])
    failed = [r.sigma for r in reports if r.relative_error > tolerance]
    if failed:
        raise LikelihoodCheckError(f"relative error above {tolerance} for sigma {failed}")
