"""Downstream adaptation: the training loop, its ablation variants, the
few-shot evaluation protocol and parameter sweeps.

Variants
--------
full         all three losses, learnable fusion weight
no_ctr       without the contrastive loss
no_fus       without the fusion loss
no_both      classification loss only
prompt_only  alpha pinned to 0: the classifier reads the adapted branch alone
lp           linear probe: classifier on the frozen branch, nothing else trains
ft           fine-tuning: encoder, projector and classifier all train
"""
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from gp2f import logger
from gp2f.config import suggest
from gp2f.errors import ConfigError, ContractError, GP2FError, ProtocolError, UsageError, with_context
from gp2f.graph import normalize_adjacency, sample_few_shot
from gp2f.numerics import Adam, forward_and_grad, make_rng, matmul, selection_matrix
from gp2f.encoder import (AdapterParams, ClassifierParams, DualBranchModel, FusionParams,
                          ProjectorParams, ADAPTER_RANK, ALPHA_LOGIT_INIT, BETA_INIT, classify)
from gp2f.losses import (LossReport, LossWeights, consistency_mask, contrastive_loss,
                         cross_entropy, fusion_loss, mix_similarity, objective, self_similarity)
from gp2f.theory import branch_discrepancy_stats

VARIANTS = ('full', 'no_ctr', 'no_fus', 'no_both', 'prompt_only', 'lp', 'ft')
ABLATIONS = ('full', 'no_ctr', 'no_fus', 'no_both', 'prompt_only')
SEEDS = (12345, 23456, 34567, 45678, 56789)
SWEEP_FIELDS = ('rank', 'shots', 'lambda_ctr', 'lambda_fus')

UP_GROUP = 'up'
DOWN_GROUP = 'down'


def check_variant(name):
    if name not in VARIANTS:
        guess = suggest(name, VARIANTS)
        hint = f" (did you mean {guess!r}?)" if guess else ''
        raise UsageError(f"unknown variant {name!r}{hint}; valid variants: {', '.join(VARIANTS)}")
    return name


def parse_variants(text):
    """comma separated variant list, order kept, duplicates dropped"""
    names = []
    for name in text.split(','):
        name = check_variant(name.strip())
        if name not in names:
            names.append(name)
    return names


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 500
    patience: int = 20
    up_lr: float = 5e-4
    down_lr: float = 1e-3
    up_wd: float = 5e-4
    down_wd: float = 5e-4
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    shots: int = 1
    seeds: tuple = SEEDS
    samplings: int = 10
    variant: str = 'full'
    rank: int = ADAPTER_RANK
    beta_init: float = BETA_INIT
    alpha_logit_init: float = ALPHA_LOGIT_INIT
    fixed_alpha: Optional[float] = None
    reinit_projector: bool = False
    track_term_grads: bool = False
    log_every: int = 50

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f'epochs must be >= 1, got {self.epochs}')
        if self.patience < 1:
            raise ConfigError(f'patience must be >= 1, got {self.patience}')
        if self.shots < 1:
            raise ConfigError(f'shots must be >= 1, got {self.shots}')
        if self.samplings < 1 or not self.seeds:
            raise ConfigError('need at least one seed and one sampling')
        if min(self.up_lr, self.down_lr, self.up_wd, self.down_wd) < 0:
            raise ConfigError('learning rates and weight decays must be non-negative')
        if self.fixed_alpha is not None and not 0 <= self.fixed_alpha <= 1:
            raise ConfigError(f'fixed_alpha must lie in [0, 1], got {self.fixed_alpha}')
        if self.rank < 1:
            raise ConfigError(f'rank must be >= 1, got {self.rank}')
        try:
            check_variant(self.variant)
        except UsageError as error:
            raise ConfigError(str(error))
        self.weights.validate()
        return self

    def for_variant(self, variant):
        """copy with the loss weights and fusion setting the variant implies"""
        check_variant(variant)
        weights = self.weights
        fixed_alpha = self.fixed_alpha
        if variant in ('no_ctr', 'no_both', 'lp', 'ft'):
            weights = dataclasses.replace(weights, lambda_ctr=0.0)
        if variant in ('no_fus', 'no_both', 'lp', 'ft'):
            weights = dataclasses.replace(weights, lambda_fus=0.0)
        if variant == 'prompt_only':
            fixed_alpha = 0.0
        return dataclasses.replace(self, variant=variant, weights=weights, fixed_alpha=fixed_alpha)


# MODEL SETUP
# ===========

def init_downstream(target, encoder, projector, cfg, seed, sampling=0):
    """fresh downstream model for one (seed, sampling)

    Classifier, adapters and a re-initialised projector each draw from their own
    named stream, so every variant starts from the same classifier.
    """
    hidden = encoder.hidden_dim
    classifier = ClassifierParams.init(make_rng(seed, sampling, 'classifier'), hidden, target.num_classes)
    if cfg.reinit_projector or projector.in_dim != target.feature_dim:
        if not cfg.reinit_projector:
            logger.warning(f'target has {target.feature_dim} features, projector expects '
                           f'{projector.in_dim}: re-initializing the projector')
        projector = ProjectorParams.init(make_rng(seed, sampling, 'projector'), target.feature_dim, hidden)
    else:
        projector = projector.with_named({k: np.array(v) for k, v in projector.named().items()})
    if cfg.variant in ('lp', 'ft'):
        return DualBranchModel(encoder.thaw() if cfg.variant == 'ft' else encoder, projector, None,
                               FusionParams(cfg.alpha_logit_init), classifier,
                               train_projector=cfg.variant == 'ft', train_encoder=cfg.variant == 'ft')
    adapters = AdapterParams.init(make_rng(seed, sampling, 'adapters'), hidden, cfg.rank, cfg.beta_init)
    return DualBranchModel(encoder, projector, adapters, FusionParams(cfg.alpha_logit_init), classifier,
                           fixed_alpha=cfg.fixed_alpha)


def optimizer_groups(model, cfg):
    """'up': everything on the pre-trained side; 'down': the classifier"""
    names = list(model.trainable())
    down = [n for n in names if n.startswith('classifier.')]
    up = [n for n in names if n not in down]
    return {UP_GROUP: (up, cfg.up_lr, cfg.up_wd), DOWN_GROUP: (down, cfg.down_lr, cfg.down_wd)}


# OBJECTIVE
# =========

def fusion_batch(num_nodes, batch_size, seed, sampling, epoch):
    """sorted node subset for the fusion loss, or None when the whole graph fits"""
    if num_nodes <= batch_size:
        return None
    rng = make_rng(seed, sampling, 'fusion-batch', epoch)
    return np.sort(rng.choice(num_nodes, size=batch_size, replace=False))


def loss_program(model, g, adj, split, weights, batch=None, terms=None):
    """program(leaves) -> (L, L_cls, L_ctr, L_fus, alpha, degenerate) for forward_and_grad

    Terms with zero weight are not evaluated and report 0. `terms` restricts the
    scalar output to a subset of {'cls', 'ctr', 'fus'} (for per-term gradients).
    """
    adjacency = g.adjacency()
    sel = selection_matrix(split.train_idx, g.num_nodes)
    labels = g.labels[split.train_idx]
    dual = model.adapters is not None

    def program(leaves):
        out = model.forward(g, adj, leaves)
        P = model.resolve(leaves)
        l_cls = cross_entropy(classify(matmul(sel, out.h_mix), P), labels)
        l_ctr = l_fus = 0.0
        degenerate = False
        if dual and weights.lambda_ctr > 0:
            l_ctr = contrastive_loss(out.h_pre, out.h_adp, adjacency, weights.tau_ctr)
        if dual and weights.lambda_fus > 0:
            h_pre, h_adp, a = out.h_pre, out.h_adp, adjacency
            if batch is not None:
                sel_b = selection_matrix(batch, g.num_nodes)
                h_pre, h_adp = matmul(sel_b, h_pre), matmul(sel_b, h_adp)
                a = adjacency[np.ix_(batch, batch)]
            s_mix = mix_similarity(self_similarity(h_pre), self_similarity(h_adp), out.alpha)
            mask = consistency_mask(s_mix, a, weights.threshold)
            l_fus, degenerate = fusion_loss(s_mix, a, mask, weights.tau_fus)
        if terms is None:
            total = objective(l_cls, l_ctr, l_fus, weights)
        else:
            w = dataclasses.replace(weights, lambda_ctr=weights.lambda_ctr if 'ctr' in terms else 0.0,
                                    lambda_fus=weights.lambda_fus if 'fus' in terms else 0.0)
            total = objective(l_cls if 'cls' in terms else 0.0, l_ctr, l_fus, w)
        return total, l_cls, l_ctr, l_fus, out.alpha, degenerate

    return program


def _grad_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _scalar(x):
    return float(np.asarray(x).reshape(()))


# TRAINING
# ========

@dataclasses.dataclass
class RunEntry:
    variant: str
    seed: int
    sampling: int
    accuracy: float
    epochs_ran: int
    best_epoch: int
    final_alpha: float
    final_betas: tuple
    history: list = dataclasses.field(default_factory=list)
    discrepancy_norm: Optional[float] = None


def adapt(target, encoder, projector, cfg, split, adj=None, model=None):
    """Train one downstream model on `split` and evaluate it on split.test_idx.

    Each epoch evaluates the weighted objective and takes one Adam step over
    the trainable parameters, 'up' and 'down' groups with their own lr and
    weight decay. Training stops after `patience` epochs without a lower total
    loss; the parameters of the best epoch are restored.
    Returns (trained model, RunEntry).
    """
    cfg = cfg.for_variant(cfg.variant)
    if cfg.variant != 'ft' and not encoder.frozen:
        raise ContractError('adapt needs a frozen encoder')
    adj = adj if adj is not None else normalize_adjacency(target)
    if model is None:
        model = init_downstream(target, encoder, projector, cfg, split.seed, split.sampling)
    opt = Adam(optimizer_groups(model, cfg))
    params = model.trainable()
    best_loss, best_params, best_epoch, wait = np.inf, params, 0, 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        batch = None
        if model.adapters is not None and cfg.weights.lambda_fus > 0:
            batch = fusion_batch(target.num_nodes, cfg.weights.batch_size, split.seed, split.sampling, epoch)
        try:
            values, grads = forward_and_grad(loss_program(model, target, adj, split, cfg.weights, batch), params)
            total, l_cls, l_ctr, l_fus, alpha, degenerate = values
            report = LossReport(_scalar(l_cls), _scalar(l_ctr), _scalar(l_fus), _scalar(total),
                                alpha=_scalar(alpha), degenerate_mask=bool(degenerate),
                                betas=tuple(_scalar(params[f'adapter{l}.beta']) for l in (1, 2)
                                            if f'adapter{l}.beta' in params))
            report.grad_norms['total'] = _grad_norm(grads)
            if cfg.track_term_grads:
                for term in ('cls', 'ctr', 'fus'):
                    if term != 'cls' and (model.adapters is None or getattr(cfg.weights, f'lambda_{term}') == 0):
                        report.grad_norms[term] = 0.0
                        continue
                    _, g = forward_and_grad(
                        loss_program(model, target, adj, split, cfg.weights, batch, terms=(term,)), params)
                    report.grad_norms[term] = _grad_norm(g)
        except GP2FError as error:
            raise with_context(error, f'epoch {epoch}')
        history.append(report)
        if epoch % cfg.log_every == 0:
            logger.info(f'epoch {epoch}: L={report.l_total:.6g} cls={report.l_cls:.6g} '
                        f'ctr={report.l_ctr:.6g} fus={report.l_fus:.6g} alpha={report.alpha:.4f}')
        else:
            logger.debug(f'epoch {epoch}: L={report.l_total:.6g}')
        if report.l_total < best_loss:
            best_loss, best_params, best_epoch, wait = report.l_total, params, epoch, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                logger.info(f'early stop at epoch {epoch}, best epoch {best_epoch} (L={best_loss:.6g})')
                break
        params = opt.step(params, grads)
    model = model.with_params(best_params)
    accuracy = evaluate(model, target, split.test_idx, adj)
    entry = RunEntry(cfg.variant, split.seed, split.sampling, accuracy, epoch, best_epoch,
                     float(model.alpha), tuple(model.adapters.betas) if model.adapters else (), history)
    if model.adapters is not None:
        out = model.forward(target, adj)
        stats = branch_discrepancy_stats(out.h_pre.value, out.h_adp.value)
        entry.discrepancy_norm = stats.mean_norm
        logger.info(f'{cfg.variant} seed {split.seed} sampling {split.sampling}: '
                    f'branch discrepancy |mean| = {stats.mean_norm:.6g}')
    return model, entry


def evaluate(model, target, test_idx, adj=None):
    """accuracy of argmax predictions on test_idx; ties go to the lowest class"""
    test_idx = np.asarray(test_idx, dtype=np.int64)
    if len(test_idx) == 0:
        raise ProtocolError('empty test set')
    adj = adj if adj is not None else normalize_adjacency(target)
    logits = model.logits(target, adj)
    predicted = np.argmax(logits[test_idx], axis=1)
    return float(np.mean(predicted == target.labels[test_idx]))


# PROTOCOL
# ========

@dataclasses.dataclass
class RunReport:
    variant: str
    entries: list = dataclasses.field(default_factory=list)

    @property
    def accuracies(self):
        return [e.accuracy for e in self.entries]

    @property
    def mean(self):
        return float(np.mean(self.accuracies))

    @property
    def std(self):
        return float(np.std(self.accuracies))

    def summary(self):
        return {'mean': self.mean, 'std': self.std, 'n': len(self.entries)}


def _protocol_tasks(cfg, variants):
    return [(variant, seed, sampling)
            for variant in variants for seed in cfg.seeds for sampling in range(cfg.samplings)]


def run_protocol(target, encoder, projector, cfg, variants=None, workers=1):
    """Every variant on every (seed, sampling) split; returns {variant: RunReport}.

    Splits depend on (seed, sampling) only, so all variants see the same ones.
    Results are ordered by (variant, seed, sampling) whatever the worker count.
    """
    cfg.validate()
    variants = list(variants or [cfg.variant])
    for v in variants:
        check_variant(v)
    adj = normalize_adjacency(target)
    snapshot = {k: v.tobytes() for k, v in encoder.named().items()}

    def task(key):
        variant, seed, sampling = key
        try:
            split = sample_few_shot(target, cfg.shots, seed, sampling)
            _, entry = adapt(target, encoder, projector, dataclasses.replace(cfg, variant=variant), split, adj)
        except GP2FError as error:
            raise with_context(error, f'{variant}, seed {seed}, sampling {sampling}')
        return entry

    tasks = _protocol_tasks(cfg, variants)
    logger.info(f'protocol: {len(tasks)} runs over {len(variants)} variant(s), {workers} worker(s)')
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(task, tasks))
    else:
        entries = [task(key) for key in tasks]
    if any(v.tobytes() != snapshot[k] for k, v in encoder.named().items()):
        raise ContractError('frozen encoder changed during the protocol')
    reports = {v: RunReport(v) for v in variants}
    for entry in entries:
        reports[entry.variant].entries.append(entry)
    for v, report in reports.items():
        logger.info(f'{v}: accuracy {report.mean:.4f} +- {report.std:.4f} over {len(report.entries)} runs')
    return reports


def sweep_config(cfg, field, value):
    if field not in SWEEP_FIELDS:
        guess = suggest(field, SWEEP_FIELDS)
        hint = f" (did you mean {guess!r}?)" if guess else ''
        raise UsageError(f"cannot sweep {field!r}{hint}; sweepable: {', '.join(SWEEP_FIELDS)}")
    if field in ('rank', 'shots'):
        return dataclasses.replace(cfg, **{field: int(value)})
    return dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, **{field: float(value)}))


def run_sweep(target, encoder, projector, cfg, field, values, variants=None, workers=1):
    """run_protocol once per value of `field`; returns [(value, {variant: RunReport})]"""
    results = []
    for value in values:
        logger.info(f'sweep {field} = {value}')
        results.append((value, run_protocol(target, encoder, projector, sweep_config(cfg, field, value),
                                            variants, workers)))
    return results
