"""
Command-line entry point: fit, simulate, study, ari.

Every subcommand loads and validates all of its inputs before creating
any output. Exit codes: 0 success, 1 validation or IO error, 2 the fit
did not converge (report still written), 3 sampler degeneracy.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from . import config
from .errors import DegeneracyError, EstimationError, SrfmError
from .evaluation import adjusted_rand, adjusted_rand_subset, class_contrast_z, summarize_ari
from .mixture import CemControls, fit_cem
from .monitoring import monitor, setup_logging
from .network import CovariateTable, load_covariates, load_network, write_codebook
from .sampler import SamplerControls, simulate, write_draws
from .study import load_condition, run_condition, run_size_sweep
from .terms import ModelSpec, coerce_labels, load_model_spec
from .utils import derive_seeds, read_json, read_labels_csv, write_json, write_labels_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NOT_CONVERGED = 2
EXIT_DEGENERATE = 3


@dataclass
class RunConfig:
    """Parsed and validated inputs of one CLI invocation."""
    command: str
    seed: int = 0
    out: str = config.RESULTS_DIR
    jobs: int = config.JOBS
    verbose: int = 0
    spec: Optional[ModelSpec] = None
    network: object = None
    covariates: Optional[CovariateTable] = None
    labels: object = None
    theta: Optional[np.ndarray] = None
    controls: Optional[SamplerControls] = None
    extras: dict = field(default_factory=dict)


def _check_file(path: Optional[str], what: str) -> str:
    if not path:
        raise SrfmError(f"--{what} is required")
    if not os.path.isfile(path):
        raise SrfmError(f"{what} file not found: {path}")
    return path


def _load_schema(args, columns: List[str]):
    """Column kinds from --schema (JSON object column -> kind); defaults to all continuous."""
    if args.schema:
        try:
            return read_json(_check_file(args.schema, 'schema'))
        except json.JSONDecodeError as e:
            raise SrfmError(f"{args.schema}: malformed JSON ({e})") from None
    return {c: 'continuous' for c in columns}


def _load_inputs(args, need_network: bool):
    spec = load_model_spec(_check_file(args.model, 'model'))
    cov = None
    if args.covariates:
        path = _check_file(args.covariates, 'covariates')
        columns = list(pd.read_csv(path, nrows=0).columns)
        cov = load_covariates(path, _load_schema(args, columns))
    n_nodes = cov.n_nodes if cov is not None else args.n_nodes
    if n_nodes is None:
        raise SrfmError("--n-nodes is required when no covariates are given")
    if cov is None:
        cov = CovariateTable.empty(n_nodes)
    spec.validate(cov)
    net = None
    if need_network:
        net = load_network(_check_file(args.network, 'network'), n_nodes, one_based=args.one_based)
    return spec, cov, net


def _parse_theta(raw: str, spec: ModelSpec) -> np.ndarray:
    """Theta from a JSON list (in parameter order) or an object keyed by parameter name."""
    text = raw
    if os.path.isfile(raw):
        with open(raw) as f:
            text = f.read()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise SrfmError(f"--theta: malformed JSON ({e})") from None
    names = spec.param_names()
    if isinstance(payload, dict):
        missing = [n for n in names if n not in payload]
        unknown = [k for k in payload if k not in names]
        if missing or unknown:
            raise SrfmError(f"--theta: missing {missing}, unknown {unknown}; expected {names}")
        payload = [payload[n] for n in names]
    theta = np.asarray(payload, dtype=float)
    if theta.shape != (len(names),):
        raise SrfmError(f"--theta: expected {len(names)} values ({names}), got {theta.size}")
    if not np.isfinite(theta).all():
        raise SrfmError("--theta: values must be finite")
    return theta


def build_config(args) -> RunConfig:
    """Validate everything an invocation needs; nothing is written here."""
    cfg = RunConfig(args.command, seed=args.seed, out=args.out, verbose=args.verbose,
                    jobs=getattr(args, 'jobs', None) or config.JOBS)
    if cfg.jobs < 1:
        raise SrfmError("--jobs must be >= 1")
    if args.command == 'fit':
        cfg.spec, cfg.covariates, cfg.network = _load_inputs(args, need_network=True)
        if args.starts is not None and args.starts < 1:
            raise SrfmError("--starts must be >= 1")
        cfg.extras = {'starts': args.starts or config.CEM_N_STARTS, 'refine': args.refine,
                      'posterior': args.posterior}
    elif args.command == 'simulate':
        cfg.spec, cfg.covariates, _ = _load_inputs(args, need_network=False)
        if args.theta is None:
            raise SrfmError("--theta is required")
        cfg.theta = _parse_theta(args.theta, cfg.spec)
        labels = read_labels_csv(_check_file(args.labels, 'labels')) if args.labels else None
        cfg.labels = coerce_labels(labels, cfg.covariates.n_nodes, cfg.spec.n_classes)
        if args.n_draws < 1:
            raise SrfmError("--n-draws must be >= 1")
        cfg.controls = SamplerControls.for_network(cfg.covariates.n_nodes, n_draws=args.n_draws,
                                                   seed=args.seed)
        cfg.extras = {'one_based': args.one_based}
    elif args.command == 'study':
        cond = load_condition(args.condition)
        cond = cond.with_overrides(n_replications=args.reps if not args.sweep else None,
                                   seed=args.seed if args.seed_given else None)
        if args.reps is not None and args.reps < 1:
            raise SrfmError("--reps must be >= 1")
        sizes = None
        if args.sweep:
            try:
                sizes = [int(s) for s in args.sizes.split(',')]
            except ValueError:
                raise SrfmError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
            if any(b <= a for a, b in zip(sizes, sizes[1:])) or min(sizes) < 2:
                raise SrfmError(f"--sizes must be ascending and >= 2, got {sizes}")
        cfg.extras = {'condition': cond, 'sizes': sizes, 'reps': args.reps, 'starts': args.starts,
                      'refine': bool(args.refine)}
    elif args.command == 'ari':
        labels_a = read_labels_csv(_check_file(args.labels_a, 'labels-a'))
        labels_b = read_labels_csv(_check_file(args.labels_b, 'labels-b'))
        if len(labels_a) != len(labels_b):
            raise SrfmError(f"label files differ in length ({len(labels_a)} vs {len(labels_b)})")
        mask = None
        if args.mask_column:
            frame = pd.read_csv(_check_file(args.covariates, 'covariates'))
            if args.mask_column not in frame.columns:
                raise SrfmError(f"mask column {args.mask_column!r} not in {args.covariates}")
            if len(frame) != len(labels_a):
                raise SrfmError(f"{args.covariates}: {len(frame)} rows for {len(labels_a)} labels")
            column = frame[args.mask_column]
            mask = (column > 0).to_numpy() if pd.api.types.is_numeric_dtype(column) \
                else column.astype(str).str.lower().isin(['1', 'true', 'yes']).to_numpy()
            if mask.sum() < 2:
                raise SrfmError(f"mask column {args.mask_column!r} selects {int(mask.sum())} nodes; "
                                f"at least 2 needed")
        cfg.extras = {'labels_a': labels_a, 'labels_b': labels_b, 'mask': mask}
    return cfg


def _class_contrasts(fit) -> List[dict]:
    """z-tests of each heterogeneous parameter between class 1 and every other class."""
    spec = fit.spec
    theta, se = fit.final_estimates()
    class_theta, class_se = spec.class_theta(theta), spec.class_theta(se)
    out = []
    for k in spec.heterogeneous_idx:
        label = spec.terms[k].label
        for q in range(1, spec.n_classes):
            if not (np.isfinite(class_se[0, k]) and np.isfinite(class_se[q, k])
                    and class_se[0, k] > 0 and class_se[q, k] > 0):
                out.append({'parameter': label, 'classes': [1, q + 1], 'z': None, 'p_value': None})
                continue
            z, p = class_contrast_z(class_theta[0, k], class_se[0, k], class_theta[q, k], class_se[q, k])
            out.append({'parameter': label, 'classes': [1, q + 1], 'z': z, 'p_value': p})
    return out


def cmd_fit(cfg: RunConfig) -> int:
    controls = CemControls(n_starts=cfg.extras['starts'], seed=cfg.seed, jobs=cfg.jobs,
                           refine=cfg.extras['refine'])
    try:
        fit = fit_cem(cfg.network, cfg.covariates, cfg.spec, controls)
    except EstimationError as e:
        logger.error(f"[CEM] {str(e).splitlines()[0]}")
        write_json(os.path.join(cfg.out, 'fit_report.json'), {
            'status': 'failed', 'model': cfg.spec.to_dict(), 'converged': False, 'seed': cfg.seed,
            'density': cfg.network.density(),
            'parameters': [{'name': n, 'estimate': None, 'std_error': None} for n in cfg.spec.param_names()],
            'starts': e.diagnostics})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    report = fit.to_dict(include_posterior=cfg.extras['posterior'])
    report['status'] = 'converged' if fit.converged else 'not_converged'
    report['seed'] = cfg.seed
    report['density'] = cfg.network.density()
    if cfg.spec.n_classes > 1:
        contrasts = _class_contrasts(fit)
        report['class_contrasts'] = contrasts
        report['classes_near_equal'] = all(c['p_value'] is None or c['p_value'] >= 0.05 for c in contrasts)
        if report['classes_near_equal']:
            logger.warning("[CEM] No class contrast is significant at 5%; a homogeneous model may suffice")
    write_json(os.path.join(cfg.out, 'fit_report.json'), report)
    write_labels_csv(os.path.join(cfg.out, 'labels.csv'), fit.labels)
    converged = fit.converged and (fit.refined is None or fit.refined.converged)
    print(f"log_cpl={fit.log_cpl:.6f}  BIC={fit.bic:.3f}  converged={converged}")
    for p in report['parameters']:
        print(f"  {p['name']:<32} {p['estimate'] if p['estimate'] is not None else float('nan'):>10.4f} "
              f"({p['std_error'] if p['std_error'] is not None else float('nan'):.4f})")
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def cmd_simulate(cfg: RunConfig) -> int:
    """Draws are produced one by one so a degenerate chain still leaves the earlier draws on disk."""
    ctl = cfg.controls
    seeds = derive_seeds(cfg.seed, ctl.n_draws)
    draws, state, status = [], None, EXIT_OK
    try:
        for k, seed in enumerate(seeds):
            step = SamplerControls(burn_in=ctl.burn_in if k == 0 else 0, thin=ctl.thin, n_draws=1, seed=seed)
            state = simulate(cfg.spec, cfg.covariates, cfg.theta, cfg.labels, step, init=state)[0]
            draws.append(state)
    except DegeneracyError as e:
        logger.error(f"[Sampler] {e}; keeping {len(draws)} completed draws")
        status = EXIT_DEGENERATE
    write_draws(draws, cfg.out, cfg.spec, cfg.covariates, one_based=cfg.extras['one_based'])
    if cfg.covariates.names:
        write_codebook(cfg.covariates, os.path.join(cfg.out, 'codebook.json'))
    write_json(os.path.join(cfg.out, 'simulation.json'), {
        'model': cfg.spec.to_dict(), 'theta': dict(zip(cfg.spec.param_names(), cfg.theta.tolist())),
        'seed': cfg.seed, 'burn_in': ctl.burn_in, 'thin': ctl.thin, 'n_draws_requested': ctl.n_draws,
        'n_draws_written': len(draws), 'degenerate': status == EXIT_DEGENERATE,
        'densities': [d.density() for d in draws]})
    print(f"wrote {len(draws)} draws to {cfg.out}")
    return status


def cmd_study(cfg: RunConfig) -> int:
    cond = cfg.extras['condition']
    if cfg.extras['sizes']:
        frame = run_size_sweep(cond, cfg.extras['sizes'], cfg.extras['reps'] or 10, cfg.out, jobs=cfg.jobs,
                               n_starts=cfg.extras['starts'], refine=cfg.extras['refine'])
        table = frame.groupby('n_nodes')['ari'].agg(['count', 'mean', 'median', 'std'])
        print(table.to_string(float_format=lambda v: f"{v:.3f}"))
        return EXIT_OK
    result = run_condition(cond, cfg.out, jobs=cfg.jobs, n_starts=cfg.extras['starts'],
                           refine=cfg.extras['refine'])
    for name, report in result.bias.items():
        print(f"\n[{cond.name} / {name}]  failures: {result.failures[name]}")
        print(report.table[['parameter', 'true_value', 'mean_estimate', 'relative_bias', 'empirical_sd',
                            'mean_estimated_se']].to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    if len(result.ari):
        print()
        print(summarize_ari({cond.name: result.ari}).to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return EXIT_OK


def cmd_ari(cfg: RunConfig) -> int:
    a, b, mask = cfg.extras['labels_a'], cfg.extras['labels_b'], cfg.extras['mask']
    print(f"ARI: {adjusted_rand(a, b):.4f}")
    if mask is not None:
        print(f"ARI (subset, {int(mask.sum())} nodes): {adjusted_rand_subset(a, b, mask):.4f}")
    return EXIT_OK


COMMANDS = {'fit': cmd_fit, 'simulate': cmd_simulate, 'study': cmd_study, 'ari': cmd_ari}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='srfm-ergm',
                                     description='Sender/receiver finite-mixture ERGMs: fit, simulate, study')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='Master seed (default 0)')
    common.add_argument('--out', default=config.RESULTS_DIR, help='Output directory')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v info, -vv debug')

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument('--model', help='Model spec JSON')
    model.add_argument('--covariates', help='Covariate CSV (one row per node, header row)')
    model.add_argument('--schema', help='JSON object mapping covariate column -> categorical|continuous')
    model.add_argument('--n-nodes', type=int, help='Node count when no covariates are given')
    model.add_argument('--one-based', action='store_true', help='Node ids in edge lists start at 1')

    sub = parser.add_subparsers(dest='command', required=True)
    fit = sub.add_parser('fit', parents=[common, model], help='Fit a (mixture) ERGM by MPLE/CEM')
    fit.add_argument('--network', help='Edge-list CSV (from,to)')
    fit.add_argument('--starts', type=int, help=f'Random CEM starts (default {config.CEM_N_STARTS})')
    fit.add_argument('--jobs', type=int, help='Parallel CEM starts')
    fit.add_argument('--refine', dest='refine', action='store_true', default=None,
                     help='Always refine by MC-MLE')
    fit.add_argument('--no-refine', dest='refine', action='store_false', help='Never refine by MC-MLE')
    fit.add_argument('--posterior', action='store_true', help='Include the posterior matrix in the report')

    sim = sub.add_parser('simulate', parents=[common, model], help='Draw networks from a model')
    sim.add_argument('--theta', help='Parameters: JSON list, JSON object by name, or a JSON file')
    sim.add_argument('--labels', help='Class label CSV for mixture models')
    sim.add_argument('--n-draws', type=int, default=1, help='Number of retained draws')

    study = sub.add_parser('study', parents=[common], help='Run a simulation-study condition')
    study.add_argument('--condition', required=True, help='Condition name (1, 1+, ..., 5) or JSON path')
    study.add_argument('--reps', type=int, help='Replications (per size with --sweep)')
    study.add_argument('--starts', type=int, help='CEM starts per mixture fit')
    study.add_argument('--jobs', type=int, help='Parallel replications')
    study.add_argument('--sweep', action='store_true', help='Run the network-size sweep')
    study.add_argument('--sizes', default='75,151,300', help='Comma-separated ascending sizes for --sweep')
    study.add_argument('--refine', action='store_true', help='Refine fits by MC-MLE')

    ari = sub.add_parser('ari', parents=[common], help='Adjusted Rand index between two label files')
    ari.add_argument('labels_a')
    ari.add_argument('labels_b')
    ari.add_argument('--covariates', help='Covariate CSV holding the mask column')
    ari.add_argument('--mask-column', help='Also report ARI over nodes where this column is > 0')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.seed_given = args.seed is not None
    args.seed = 0 if args.seed is None else args.seed
    setup_logging('DEBUG' if args.verbose >= 2 else ('INFO' if args.verbose else None))
    try:
        cfg = build_config(args)
    except (SrfmError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID

    if cfg.command != 'ari':
        os.makedirs(cfg.out, exist_ok=True)
        monitor.reset()
        monitor.attach(os.path.join(cfg.out, 'run_log.jsonl'))
    try:
        return COMMANDS[cfg.command](cfg)
    except EstimationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except DegeneracyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (SrfmError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    finally:
        monitor.detach()


if __name__ == '__main__':
    sys.exit(main())
