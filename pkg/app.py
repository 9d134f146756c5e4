"""
Command-line front end: kernels, PCoA, CLR, single fits, cross-validation
and Monte-Carlo studies.
"""
import functools
import json
import logging
import sys

import click
import numpy as np

from utils.config_utils import LOG_LEVEL, N_JOBS, load_run_file, merge_settings, parse_float_list
from utils.errors import KprError, UsageError

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Import services after logging is configured
from models.results import Method, MethodSpec, Scenario, ScenarioConfig
from models.tables import DataBundle, Kernel
from services.compositional_service import aitchison_covariance, closure, clr_transform, replace_zeros, variation_matrix
from services.estimator_service import comp_kpr, compositional_design, fit_with_spec
from services.kernel_service import (
    double_center,
    edge_kernel,
    gram_kernel,
    linear_kernel,
    pcoa_coordinates,
    psd_project,
)
from services.phylo_service import edge_mass_matrix, patristic_distances, prune, unifrac_unweighted
from services.simulation_service import run_scenario, summarize
from services.tuning_service import cross_validate, default_lambda_grid, select
from utils.matio_utils import (
    align,
    center_columns,
    load_newick,
    load_table,
    save_cv,
    save_fit,
    save_records,
    save_summary,
    save_table,
    write_frame,
)
from utils.synthetic_utils import make_bundle

KERNEL_SOURCES = ("euclidean", "gram", "double-center", "unifrac", "patristic", "edge", "aitchison")
METHOD_CHOICES = ("pcr", "ridge", "gridge", "dpcr", "dpcoa", "franklin", "kpr2", "lasso", "comp-kpr")


def handle_errors(command):
    """Map package errors to exit codes and a one-line message on stderr"""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except KprError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
        except (click.ClickException, click.exceptions.Exit, SystemExit):
            raise
        except Exception as e:
            logger.error(f"Unexpected error: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(1)
    return wrapper


def _require(value, flag, context):
    if value is None:
        raise UsageError(f"{context} requires {flag}")
    return value


def _load_sample_kernel(path, sample_ids):
    """A sample kernel from CSV, or the identity for 'identity'"""
    if path == "identity":
        return Kernel.identity(sample_ids)
    H = load_table(path, "kernel")
    H.check_aligned(sample_ids, f"sample kernel {path}")
    return H


def _load_taxon_kernel(path, taxon_ids):
    """A taxon kernel from CSV, or the identity for 'identity'"""
    if path == "identity":
        return Kernel.identity(taxon_ids)
    Q = load_table(path, "kernel")
    Q.check_aligned(taxon_ids, f"taxon kernel {path}")
    return Q


def _echo_config(config):
    """Resolved configuration as '#'-comment key/value pairs"""
    return {'config': json.dumps(config, sort_keys=True)}


@click.group()
@click.option("--log-level", default=LOG_LEVEL, show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              help="Root logging level")
def cli(log_level):
    """Kernel-penalized regression for microbiome data."""
    logging.getLogger().setLevel(log_level.upper())


@cli.command("kernel")
@click.option("--from", "source", required=True, type=click.Choice(KERNEL_SOURCES), help="Constructor")
@click.option("--table", type=click.Path(dir_okay=False), help="Sample-by-taxon CSV")
@click.option("--tree", type=click.Path(dir_okay=False), help="Newick tree")
@click.option("--distance", type=click.Path(dir_okay=False), help="Squared dissimilarity CSV (double-center)")
@click.option("--q-kernel", "--q", "q_kernel", help="Taxon kernel CSV or 'identity' (gram)")
@click.option("--zero-replacement", type=float, help="Pseudocount for zeros (aitchison)")
@click.option("--repair/--no-repair", default=True, show_default=True,
              help="Clip rounding-level negative eigenvalues after double-centering")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output CSV")
@handle_errors
def cmd_kernel(source, table, tree, distance, q_kernel, zero_replacement, repair, out):
    """Build a kernel or distance matrix."""
    config = {'command': 'kernel', 'from': source, 'table': table, 'tree': tree, 'distance': distance,
              'q_kernel': q_kernel, 'zero_replacement': zero_replacement, 'repair': repair}
    comments = _echo_config(config)

    if source == "double-center":
        D = load_table(_require(distance, "--distance", "--from double-center"), "distance")
        K = double_center(D)
        save_table(psd_project(K) if repair else K, out, comments)
        return
    if source == "patristic":
        phylo = load_newick(_require(tree, "--tree", "--from patristic"))
        if table is not None:
            phylo = prune(phylo, load_table(table, "abundance").taxon_ids)
        save_table(patristic_distances(phylo, squared=True), out, comments)
        return

    X = load_table(_require(table, "--table", f"--from {source}"), "abundance")
    if source == "euclidean":
        save_table(linear_kernel(center_columns(X)), out, comments)
    elif source == "gram":
        Q = _load_taxon_kernel(_require(q_kernel, "--q-kernel", "--from gram"), X.taxon_ids)
        save_table(gram_kernel(center_columns(X), Q), out, comments)
    elif source == "unifrac":
        phylo = load_newick(_require(tree, "--tree", "--from unifrac"))
        save_table(unifrac_unweighted(phylo, X), out, comments)
    elif source == "edge":
        phylo = load_newick(_require(tree, "--tree", "--from edge"))
        save_table(edge_kernel(edge_mass_matrix(phylo, closure(X))), out, comments)
    else:
        positive = replace_zeros(X, zero_replacement)
        save_table(aitchison_covariance(variation_matrix(positive)), out, comments)
    logger.info(f"Wrote {source} matrix to {out}")


@cli.command("pcoa")
@click.option("--kernel", "kernel_path", required=True, type=click.Path(dir_okay=False), help="Kernel CSV")
@click.option("--k", "components", default=2, show_default=True, type=int, help="Number of coordinates")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Coordinate CSV")
@handle_errors
def cmd_pcoa(kernel_path, components, out):
    """Principal coordinates of a kernel."""
    K = load_table(kernel_path, "kernel")
    coordinates = pcoa_coordinates(K, components)
    config = {'command': 'pcoa', 'kernel': kernel_path, 'k': components}
    write_frame(out, K.ids, [f"PC{j + 1}" for j in range(components)], coordinates, "id", _echo_config(config))


@cli.command("clr")
@click.option("--table", required=True, type=click.Path(dir_okay=False), help="Counts or proportions CSV")
@click.option("--zero-replacement", type=float, help="Pseudocount for zeros")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="CLR table CSV")
@click.option("--variation-out", type=click.Path(dir_okay=False), help="Also write the variation matrix T")
@click.option("--covariance-out", type=click.Path(dir_okay=False), help="Also write the covariance kernel C")
@handle_errors
def cmd_clr(table, zero_replacement, out, variation_out, covariance_out):
    """Centered log-ratio transform."""
    X = load_table(table, "abundance")
    config = {'command': 'clr', 'table': table, 'zero_replacement': zero_replacement}
    comments = _echo_config(config)
    save_table(clr_transform(X, zero_replacement), out, comments)
    if variation_out or covariance_out:
        T = variation_matrix(replace_zeros(X, zero_replacement))
        if variation_out:
            save_table(T, variation_out, comments)
        if covariance_out:
            save_table(aitchison_covariance(T), covariance_out, comments)


def _prepare_fit(table, response, method, q_kernel, h_kernel, components, zero_replacement):
    """Design, response and MethodSpec for the fit and cv subcommands"""
    method = Method.parse(method)
    X_raw = load_table(table, "abundance")
    y = align(X_raw, load_table(response, "response"))

    if method is Method.COMP_KPR:
        X, C = compositional_design(X_raw, zero_replacement)
        Q = C if q_kernel is None else _load_taxon_kernel(q_kernel, X.taxon_ids)
        return X_raw, X, y, MethodSpec(method, q_kernel=Q.values)

    X = center_columns(X_raw)
    Q = None if q_kernel is None else _load_taxon_kernel(q_kernel, X.taxon_ids).values
    H = None if h_kernel is None else _load_sample_kernel(h_kernel, X.sample_ids).values
    return X_raw, X, y, MethodSpec(method, q_kernel=Q, h_kernel=H, components=components)


def _write_beta(path, fit, taxon_ids, comments):
    write_frame(path, taxon_ids, ["beta"], fit.effective_beta()[:, None], "taxon_id", comments)


@cli.command("fit")
@click.option("--table", required=True, type=click.Path(dir_okay=False), help="Sample-by-taxon CSV")
@click.option("--response", required=True, type=click.Path(dir_okay=False), help="Response CSV")
@click.option("--method", required=True, type=click.Choice(METHOD_CHOICES), help="Estimator")
@click.option("--lambda", "lambda_", type=float, help="Tuning parameter")
@click.option("--components", type=int, help="Component count (pcr, dpcr)")
@click.option("--q-kernel", help="Taxon kernel CSV or 'identity'")
@click.option("--h-kernel", help="Sample kernel CSV or 'identity'")
@click.option("--zero-replacement", type=float, help="Pseudocount for zeros (comp-kpr)")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Fit record (JSON)")
@click.option("--beta-csv", type=click.Path(dir_okay=False), help="Also write coefficients per taxon")
@handle_errors
def cmd_fit(table, response, method, lambda_, components, q_kernel, h_kernel, zero_replacement, out, beta_csv):
    """Fit one estimator at a fixed lambda."""
    X_raw, X, y, spec = _prepare_fit(table, response, method, q_kernel, h_kernel, components, zero_replacement)
    if spec.method not in (Method.PCR, Method.DPCR):
        _require(lambda_, "--lambda", f"--method {method}")

    if spec.method is Method.COMP_KPR:
        fit = comp_kpr(X_raw, y, lambda_, zero_replacement=zero_replacement,
                       covariance=None if q_kernel is None else spec.q_kernel)
    else:
        fit = fit_with_spec(spec, X.values, y.values, 0.0 if lambda_ is None else lambda_)

    config = {'command': 'fit', 'table': table, 'response': response, 'method': method, 'lambda': lambda_,
              'components': components, 'q_kernel': q_kernel, 'h_kernel': h_kernel,
              'zero_replacement': zero_replacement}
    save_fit(fit, out, taxon_ids=X.taxon_ids, sample_ids=X.sample_ids, config=config)
    if beta_csv:
        _write_beta(beta_csv, fit, X.taxon_ids, _echo_config(config))
    logger.info(f"Fitted {spec.method.value} on n={X.n}, p={X.p}")


@cli.command("cv")
@click.option("--table", required=True, type=click.Path(dir_okay=False), help="Sample-by-taxon CSV")
@click.option("--response", required=True, type=click.Path(dir_okay=False), help="Response CSV")
@click.option("--method", required=True, type=click.Choice(METHOD_CHOICES), help="Estimator")
@click.option("--q-kernel", help="Taxon kernel CSV or 'identity'")
@click.option("--h-kernel", help="Sample kernel CSV or 'identity'")
@click.option("--weighted", is_flag=True, help="Weight test errors by the --h-kernel principal submatrix")
@click.option("--zero-replacement", type=float, help="Pseudocount for zeros (comp-kpr)")
@click.option("--lambda-grid", help="Comma-separated grid (sorted descending on use)")
@click.option("--grid-size", default=50, show_default=True, type=int, help="Default grid length")
@click.option("--folds", default=10, show_default=True, type=int, help="Number of folds")
@click.option("--rule", default="1se", show_default=True, type=click.Choice(["min", "1se"]), help="Selection rule")
@click.option("--seed", default=0, show_default=True, type=int, help="Fold assignment seed")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="CV record (JSON)")
@click.option("--beta-csv", type=click.Path(dir_okay=False), help="Also write the refit's coefficients")
@handle_errors
def cmd_cv(table, response, method, q_kernel, h_kernel, weighted, zero_replacement, lambda_grid, grid_size,
           folds, rule, seed, out, beta_csv):
    """Cross-validate lambda and refit at the selected value."""
    _, X, y, spec = _prepare_fit(table, response, method, q_kernel, h_kernel, None, zero_replacement)
    weight = None
    if weighted:
        weight = _load_sample_kernel(_require(h_kernel, "--h-kernel", "--weighted"), X.sample_ids)

    grid = parse_float_list(lambda_grid)
    grid = np.sort(grid)[::-1] if grid else default_lambda_grid(X, y, spec, size=grid_size)
    cv = cross_validate(spec, X, y, grid, k=folds, seed=seed, weight=weight, n_jobs=N_JOBS)
    lambda_ = select(cv, rule)
    fit = fit_with_spec(spec, X.values, y.values, lambda_)

    click.echo(f"{'lambda':>14} {'mean_error':>14} {'se_error':>14}")
    for value, mean, se in zip(cv.lambda_grid, cv.mean_error, cv.se_error):
        marks = ("  min" if value == cv.lambda_min else "") + ("  1se" if value == cv.lambda_1se else "")
        click.echo(f"{value:14.6g} {mean:14.6g} {se:14.6g}{marks}")

    config = {'command': 'cv', 'table': table, 'response': response, 'method': method, 'q_kernel': q_kernel,
              'h_kernel': h_kernel, 'weighted': weighted, 'zero_replacement': zero_replacement,
              'folds': folds, 'rule': rule, 'seed': seed, 'lambda_selected': lambda_}
    save_cv(cv, out, sample_ids=X.sample_ids, config=config, fit=fit, taxon_ids=X.taxon_ids)
    if beta_csv:
        _write_beta(beta_csv, fit, X.taxon_ids, _echo_config(config))


def _real_bundle(scenario, table, response, tree, q_kernel, h_kernel):
    """DataBundle from user files"""
    X_raw = load_table(table, "abundance")
    y_seed = align(X_raw, load_table(_require(response, "--response", "--table"), "response"))
    X = center_columns(X_raw)
    phylo = None if tree is None else load_newick(tree)

    if scenario is Scenario.DPCOA:
        if q_kernel is not None:
            Q = _load_taxon_kernel(q_kernel, X.taxon_ids)
        else:
            pruned = prune(_require(phylo, "--tree or --q-kernel", "--scenario dpcoa"), X.taxon_ids)
            delta = patristic_distances(pruned, squared=True)
            order = [delta.ids.index(t) for t in X.taxon_ids]
            Q = psd_project(double_center(delta.submatrix(order)))
        return DataBundle(X, y_seed, q_kernel=Q, tree=phylo)

    if h_kernel is not None:
        return DataBundle(X, y_seed, h_kernel=_load_sample_kernel(h_kernel, X.sample_ids), tree=phylo)
    _require(phylo, "--tree or --h-kernel", f"--scenario {scenario.value}")
    if scenario is Scenario.UNIFRAC:
        H = psd_project(double_center(unifrac_unweighted(phylo, X_raw)))
    else:
        H = edge_kernel(edge_mass_matrix(phylo, closure(X_raw)))
    return DataBundle(X, y_seed, h_kernel=H, tree=phylo)


@cli.command("simulate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML run file")
@click.option("--scenario", type=click.Choice([s.value for s in Scenario]), help="Protocol")
@click.option("--r2-grid", help="Comma-separated R^2 values")
@click.option("--perturbation", help="Comma-separated Frobenius ratios")
@click.option("--sparsity", help="Comma-separated fractions of p (dpcoa)")
@click.option("--reps", type=int, help="Replications per cell")
@click.option("--seed", type=int, help="Root seed")
@click.option("--rule", help="Tuning rules: min, 1se or min,1se")
@click.option("--folds", type=int, help="Cross-validation folds")
@click.option("--n", "n_samples", type=int, help="Synthetic sample count")
@click.option("--p", "n_taxa", type=int, help="Synthetic taxon count")
@click.option("--n-jobs", type=int, help="Parallel replications")
@click.option("--table", type=click.Path(dir_okay=False), help="Design CSV (default: synthetic data)")
@click.option("--response", type=click.Path(dir_okay=False), help="Seed response CSV")
@click.option("--tree", type=click.Path(dir_okay=False), help="Newick tree for Q or H")
@click.option("--q-kernel", help="Taxon kernel CSV (dpcoa)")
@click.option("--h-kernel", help="Sample kernel CSV (unifrac, edge)")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Record file (JSON lines)")
@click.option("--summary-out", type=click.Path(dir_okay=False), help="Summary CSV")
@handle_errors
def cmd_simulate(config_path, scenario, r2_grid, perturbation, sparsity, reps, seed, rule, folds, n_samples,
                 n_taxa, n_jobs, table, response, tree, q_kernel, h_kernel, out, summary_out):
    """Run a Monte-Carlo comparison of KPR, ridge and lasso."""
    file_settings = load_run_file(config_path) if config_path else {}
    settings = merge_settings(file_settings, {
        'scenario': scenario,
        'r2_grid': parse_float_list(r2_grid),
        'perturbation_levels': parse_float_list(perturbation),
        'sparsity_levels': parse_float_list(sparsity),
        'replications': reps,
        'seed': seed,
        'tuning_rules': None if rule is None else [r.strip() for r in rule.split(",") if r.strip()],
        'folds': folds,
        'n_samples': n_samples,
        'n_taxa': n_taxa,
        'n_jobs': n_jobs,
    })
    _require(settings.get('scenario'), "--scenario", "simulate")
    n = int(settings.pop('n_samples', 60))
    p = int(settings.pop('n_taxa', 40))
    settings.setdefault('n_jobs', N_JOBS)
    config = ScenarioConfig(**settings)

    if table is not None:
        bundle = _real_bundle(config.scenario, table, response, tree, q_kernel, h_kernel)
        source = {'table': table, 'response': response, 'tree': tree, 'q_kernel': q_kernel, 'h_kernel': h_kernel}
    else:
        bundle = make_bundle(config.scenario, n=n, p=p, seed=config.seed)
        source = {'synthetic': True, 'n_samples': n, 'n_taxa': p}

    records = run_scenario(config, bundle)
    resolved = {**config.to_dict(), **source}
    save_records(records, out, config=resolved)
    if summary_out:
        save_summary(summarize(records), summary_out, _echo_config(resolved))
    click.echo(f"Wrote {len(records)} records to {out}")
