"""That is the script called by gp2f
"""
import os
import sys
import json
import logging
import argparse
import dataclasses

from gp2f import logger, __version__
from gp2f.config import data_dir, load_config, to_dict, dump_json
from gp2f.errors import GP2FError, UsageError, AssumptionError, with_context
from gp2f.utils import RunManifest, ensure_dir, write_csv
from gp2f.graph import (load_graph_dir, save_graph_dir, load_sbm_pair_spec, generate_sbm_pair,
                        FEATURES_FILE, EDGES_FILE, LABELS_FILE)
from gp2f.encoder import save_checkpoint, load_checkpoint
from gp2f.pretrain import PretrainConfig, pretrain_source
from gp2f.trainer import TrainConfig, run_protocol, run_sweep, parse_variants, SWEEP_FIELDS
from gp2f import theory

CHECKPOINT_NAME = 'checkpoint.json'
PRETRAIN_LOSS_NAME = 'pretrain_loss.csv'
RESULTS_NAME = 'results.csv'
SUMMARY_NAME = 'summary.json'
HISTORY_NAME = 'history.csv'
THEORY_NAME = 'theory.csv'
VERDICT_NAME = 'verdict.json'
SWEEP_NAME = 'sweep.csv'


def resolve_path(path):
    """`path` as given if it exists, else relative to the data root"""
    if os.path.exists(path) or os.path.isabs(path):
        return path
    candidate = os.path.join(data_dir(), path)
    return candidate if os.path.exists(candidate) else path


def graph_dir(path, role):
    """directory holding the graph files: `path` itself or its `role` subdirectory"""
    path = resolve_path(path)
    sub = os.path.join(path, role)
    if not os.path.exists(os.path.join(path, FEATURES_FILE)) and os.path.isdir(sub):
        return sub
    return path


def graph_files(path):
    return [os.path.join(path, name) for name in (FEATURES_FILE, EDGES_FILE, LABELS_FILE)
            if os.path.exists(os.path.join(path, name))]


def _inputs(*files):
    return [f for f in files if f is not None and os.path.exists(f)]


# gen
# ===

def gencmd(parser, o):
    spec_file = resolve_path(o.spec)
    source_spec, target_spec = load_sbm_pair_spec(spec_file)
    seed = o.seed if o.seed is not None else 0
    out = ensure_dir(o.out or data_dir())
    manifest = RunManifest.start('gen', {'source': to_dict(source_spec), 'target': to_dict(target_spec)},
                                 [seed], _inputs(spec_file))
    source, target = generate_sbm_pair(source_spec, target_spec, seed)
    for role, g in (('source', source), ('target', target)):
        for path in save_graph_dir(g, ensure_dir(os.path.join(out, role))):
            manifest.add_output(path, os.path.relpath(path, out))
    manifest.save(out)
    print(f'source: {source}')
    print(f'target: {target}')


# pretrain
# ========

def pretraincmd(parser, o):
    cfg = load_config(PretrainConfig, o.config)
    if o.seed is not None:
        cfg = dataclasses.replace(cfg, seed=o.seed)
    if o.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=o.epochs)
    cfg.validate()
    source_dir = graph_dir(o.data, 'source')
    source = load_graph_dir(source_dir, labels=False)
    out = ensure_dir(o.out)
    manifest = RunManifest.start('pretrain', to_dict(cfg), [cfg.seed], _inputs(o.config, *graph_files(source_dir)))
    result = pretrain_source(source, cfg)
    save_checkpoint(manifest.add_output(os.path.join(out, CHECKPOINT_NAME)), result.encoder, result.projector)
    write_csv(manifest.add_output(os.path.join(out, PRETRAIN_LOSS_NAME)), ['epoch', 'loss'],
              enumerate(result.losses, 1))
    manifest.save(out)
    print(f'checkpoint: {os.path.join(out, CHECKPOINT_NAME)} (final loss {result.losses[-1]:.6g})')


# adapt
# =====

def _train_config(o):
    cfg = load_config(TrainConfig, o.config)
    if o.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(o.seed,))
    return cfg.validate()


def _load_downstream(o):
    checkpoint = resolve_path(o.checkpoint)
    encoder, projector = load_checkpoint(checkpoint)
    target_dir = graph_dir(o.data, 'target')
    target = load_graph_dir(target_dir)
    return checkpoint, encoder, projector, target_dir, target


def adaptcmd(parser, o):
    cfg = _train_config(o)
    variants = parse_variants(o.variant) if o.variant else [cfg.variant]
    checkpoint, encoder, projector, target_dir, target = _load_downstream(o)
    out = ensure_dir(o.out)
    manifest = RunManifest.start('adapt', {**to_dict(cfg), 'variants': variants, 'workers': o.workers},
                                 cfg.seeds, _inputs(checkpoint, o.config, *graph_files(target_dir)))
    reports = run_protocol(target, encoder, projector, cfg, variants, workers=o.workers)

    entries = [e for v in variants for e in reports[v].entries]
    write_csv(manifest.add_output(os.path.join(out, RESULTS_NAME)),
              ['variant', 'seed', 'sampling', 'accuracy', 'epochs_ran', 'final_alpha'],
              [(e.variant, e.seed, e.sampling, e.accuracy, e.epochs_ran, e.final_alpha) for e in entries])
    history = []
    for e in entries:
        for epoch, r in enumerate(e.history, 1):
            betas = list(r.betas) + [''] * (2 - len(r.betas))
            history.append((e.variant, e.seed, e.sampling, epoch, r.l_cls, r.l_ctr, r.l_fus, r.l_total,
                            r.alpha, *betas))
    write_csv(manifest.add_output(os.path.join(out, HISTORY_NAME)),
              ['variant', 'seed', 'sampling', 'epoch', 'L_cls', 'L_ctr', 'L_fus', 'L_total', 'alpha',
               'beta1', 'beta2'], history)
    dump_json({v: reports[v].summary() for v in variants}, manifest.add_output(os.path.join(out, SUMMARY_NAME)))
    manifest.save(out)
    for v in variants:
        print(f'{v:12s} {reports[v].mean:.4f} +- {reports[v].std:.4f}  (n={len(reports[v].entries)})')


# sweep
# =====

def sweepcmd(parser, o):
    cfg = _train_config(o)
    variants = parse_variants(o.variant) if o.variant else [cfg.variant]
    values = [v.strip() for v in o.values.split(',') if v.strip()]
    if not values:
        raise UsageError('--values needs at least one value')
    checkpoint, encoder, projector, target_dir, target = _load_downstream(o)
    out = ensure_dir(o.out)
    manifest = RunManifest.start('sweep', {**to_dict(cfg), 'variants': variants, 'field': o.field,
                                           'values': values, 'workers': o.workers},
                                 cfg.seeds, _inputs(checkpoint, o.config, *graph_files(target_dir)))
    try:
        results = run_sweep(target, encoder, projector, cfg, o.field, values, variants, workers=o.workers)
    except ValueError as error:
        raise UsageError(f'--values: {error}')
    rows = []
    for value, reports in results:
        for v in variants:
            rows.append((o.field, value, v, reports[v].mean, reports[v].std, len(reports[v].entries)))
            print(f'{o.field}={value} {v:12s} {reports[v].mean:.4f} +- {reports[v].std:.4f}')
    write_csv(manifest.add_output(os.path.join(out, SWEEP_NAME)),
              ['field', 'value', 'variant', 'mean', 'std', 'n'], rows)
    manifest.save(out)


# theory
# ======

def theorycmd(parser, o):
    cfg = load_config(theory.TheoryConfig, o.config)
    overrides = {k: getattr(o, k) for k in ('sigma_g2', 'sigma_a2', 'rho', 'n_samples', 'seed', 'dim')
                 if getattr(o, k) is not None}
    cfg = dataclasses.replace(cfg, **overrides).validate()
    stats = cfg.stats
    out = ensure_dir(o.out)
    manifest = RunManifest.start('theory', to_dict(cfg), [cfg.seed], _inputs(o.config))
    verdict_file = manifest.add_output(os.path.join(out, VERDICT_NAME))

    failed = stats.violations()
    if failed:
        report = theory.verify_improvement(stats, None, cfg.n_samples)
        dump_json({'improvement': report.to_dict()}, verdict_file)
        manifest.save(out)
        print(report.reason)
        raise AssumptionError(report.reason)

    model = theory.NoiseModel(stats, cfg.dim, cfg.seed)
    rows = theory.lambda_sweep(model, cfg.n_samples, cfg.grid_points)
    write_csv(manifest.add_output(os.path.join(out, THEORY_NAME)),
              ['lambda', 'analytic_mse', 'empirical_mse', 'stderr'], rows)
    A, B, C = theory.fit_quadratic([r[0] for r in rows], [r[2] for r in rows])
    report = theory.verify_improvement(stats, model, cfg.n_samples)

    problem = theory.MarginProblem.generate(cfg.margin_classes, cfg.dim, cfg.margin_radius, cfg.margin_gamma,
                                            cfg.margin_points, cfg.seed)
    bound_rows = []
    for lam, analytic, _, _ in rows:
        rate = theory.empirical_error_rate(problem, model, lam, cfg.margin_samples)
        clamped, raw = theory.misclassification_bound(problem, analytic)
        bound_rows.append({'lambda': lam, 'error_rate': rate, 'bound': clamped, 'bound_unclamped': raw})
    bound_holds = all(r['error_rate'] <= r['bound_unclamped'] for r in bound_rows)

    verdict = {
        'improvement': report.to_dict(),
        'lambda_star': theory.optimal_lambda(stats),
        'mse_at_optimum': theory.mse_at_optimum(stats),
        'coefficients': {'analytic': {'A': stats.A, 'B': stats.B, 'C': stats.C},
                         'fitted': {'A': A, 'B': B, 'C': C}},
        'misclassification_bound': {'verdict': bound_holds, 'grid': bound_rows},
    }
    dump_json(verdict, verdict_file)
    manifest.save(out)
    print(f'lambda* = {verdict["lambda_star"]:.6g}, MSE(lambda*) = {verdict["mse_at_optimum"]:.6g}')
    print(f'improvement verdict: {report.verdict}; bound verdict: {bound_holds}')


# info
# ====

def infocmd(parser, o):
    checkpoint = resolve_path(o.checkpoint)
    encoder, projector = load_checkpoint(checkpoint)
    with open(checkpoint) as f:
        doc = json.load(f)
    print(f'checkpoint: {checkpoint}')
    print(f'frozen: {encoder.frozen}')
    print(f'pre-training seed: {encoder.seed}')
    for name in sorted(doc['tensors']):
        print(f'  {name:12s} {tuple(doc["tensors"][name]["shape"])}')
    print(f'hidden dim: {encoder.hidden_dim}, input features: {projector.in_dim}')


def get_parser():
    parser = argparse.ArgumentParser(prog='gp2f', description='dual-branch graph prompt learning')
    parser.add_argument('--version', action='store_true', help='Print version string and exit.')

    subparsers = parser.add_subparsers(dest='cmd')

    # configuration (re-used everywhere)
    # =============
    loggingp = argparse.ArgumentParser(add_help=False)
    grp = loggingp.add_argument_group('logging level (default warn)')
    egrp = grp.add_mutually_exclusive_group()
    egrp.add_argument('--debug', action='store_const', dest='logging_level', const=logging.DEBUG)
    egrp.add_argument('--info', action='store_const', dest='logging_level', const=logging.INFO)
    egrp.add_argument('--warn', action='store_const', dest='logging_level', const=logging.WARN)
    egrp.add_argument('--error', action='store_const', dest='logging_level', const=logging.ERROR)

    cfg = argparse.ArgumentParser(add_help=False, parents=[loggingp])
    grp = cfg.add_argument_group('config')
    grp.add_argument('--config', default=None, help='JSON config file (default: built-in defaults)')
    grp.add_argument('--seed', type=int, default=None, help='override the config seed(s)')
    grp.add_argument('--out', default=None, help='output directory')

    downstream = argparse.ArgumentParser(add_help=False)
    grp = downstream.add_argument_group('downstream')
    grp.add_argument('checkpoint', help='pre-trained checkpoint')
    grp.add_argument('data', help='target graph directory (or a gen output holding target/)')
    grp.add_argument('--variant', default=None,
        help='comma separated variants: full, no_ctr, no_fus, no_both, prompt_only, lp, ft')
    grp.add_argument('--workers', type=int, default=1, help='parallel runs (default:%(default)s)')

    # gen
    # ===
    genp = subparsers.add_parser('gen', description='generate a source/target SBM pair', parents=[cfg])
    genp.add_argument('spec', help='JSON {"source": SbmSpec, "target": SbmSpec}')

    # pretrain
    # ========
    pretrainp = subparsers.add_parser('pretrain', description='contrastive pre-training on the source graph',
        parents=[cfg])
    pretrainp.add_argument('data', help='source graph directory (or a gen output holding source/)')
    pretrainp.add_argument('--epochs', type=int, default=None, help='override the config epochs')

    # adapt
    # =====
    subparsers.add_parser('adapt', description='few-shot adaptation protocol on the target graph',
        parents=[cfg, downstream])

    # sweep
    # =====
    sweepp = subparsers.add_parser('sweep', description='protocol over the values of one config field',
        parents=[cfg, downstream])
    sweepp.add_argument('--field', required=True, choices=SWEEP_FIELDS)
    sweepp.add_argument('--values', required=True, help='comma separated values')

    # theory
    # ======
    theoryp = subparsers.add_parser('theory', description='check the fusion MSE theory by simulation',
        parents=[cfg])
    theoryp.add_argument('--sigma-g2', type=float, default=None)
    theoryp.add_argument('--sigma-a2', type=float, default=None)
    theoryp.add_argument('--rho', type=float, default=None)
    theoryp.add_argument('--n-samples', type=int, default=None)
    theoryp.add_argument('--dim', type=int, default=None)

    # info
    # ====
    infop = subparsers.add_parser('info', description='inspect a checkpoint', parents=[loggingp])
    infop.add_argument('checkpoint')

    return parser, subparsers


COMMANDS = {
    'gen': gencmd,
    'pretrain': pretraincmd,
    'adapt': adaptcmd,
    'sweep': sweepcmd,
    'theory': theorycmd,
    'info': infocmd,
}


def main(args=None):

    parser, subparsers = get_parser()

    o = parser.parse_args(args)

    if o.version:
        print(__version__)
        return

    # verbosity
    if getattr(o, 'logging_level', None):
        logger.setLevel(o.logging_level)

    try:
        subp = subparsers.choices[o.cmd]
    except KeyError:
        parser.print_help()
        raise GP2FExit(1)

    # gen writes to the data root by default, everything else to the working directory
    if o.cmd not in ('gen', 'info') and not o.out:
        o.out = os.getcwd()

    try:
        COMMANDS[o.cmd](subp, o)
    except GP2FError as error:
        error = with_context(error, o.cmd)
        logger.error(str(error))
        raise GP2FExit(error.exit_code)


class GP2FExit(Exception):
    def __init__(self, code=1):
        super().__init__(code)
        self.code = code


def console():
    """entry point of the installed `gp2f` script"""
    # we use try/except here to use a clean exit instead of trace
    # test and debugging may use main() directly for speed-up => better to avoid sys.exit there
    try:
        main()
    except GP2FExit as exit:
        sys.exit(exit.code)


if __name__ == "__main__":
    console()
