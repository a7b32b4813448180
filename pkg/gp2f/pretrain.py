"""Self-supervised pre-training of the encoder on the source graph, and the two
reference baselines built on its output (linear probing, full fine-tuning).

Pre-training contrasts two randomly augmented views of the source graph:
each node's embedding in one view must pick out the same node in the other
view among all nodes of both views.
"""
import dataclasses

import numpy as np

from gp2f import logger
from gp2f.errors import ConfigError, ContractError, GP2FError, with_context
from gp2f.graph import augment_view, normalize_adjacency
from gp2f.numerics import Adam, forward_and_grad, make_rng
from gp2f.encoder import EncoderParams, ProjectorParams, HIDDEN_DIM, gcn_stack, project
from gp2f.losses import view_contrastive_loss
from gp2f import trainer


@dataclasses.dataclass
class PretrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-5
    tau_pre: float = 0.5
    p_edge_drop_1: float = 0.2
    p_edge_drop_2: float = 0.2
    p_feat_mask_1: float = 0.2
    p_feat_mask_2: float = 0.2
    seed: int = 0
    hidden_dim: int = HIDDEN_DIM
    log_every: int = 50

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f'epochs must be >= 1, got {self.epochs}')
        if self.tau_pre <= 0:
            raise ConfigError(f'tau_pre must be positive, got {self.tau_pre}')
        for name in ('p_edge_drop_1', 'p_edge_drop_2', 'p_feat_mask_1', 'p_feat_mask_2'):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ConfigError(f'{name} must lie in [0, 1], got {p}')
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError('lr and weight_decay must be non-negative')
        if self.hidden_dim < 2:
            raise ConfigError(f'hidden_dim must be >= 2, got {self.hidden_dim}')
        return self


@dataclasses.dataclass
class PretrainResult:
    encoder: EncoderParams
    projector: ProjectorParams
    losses: list


def init_pretrain(source, cfg):
    """fresh (encoder, projector) for `source`, seeded by cfg.seed"""
    encoder = EncoderParams.init(make_rng(cfg.seed, 'pretrain', 'encoder'), cfg.hidden_dim, seed=cfg.seed)
    projector = ProjectorParams.init(make_rng(cfg.seed, 'pretrain', 'projector'), source.feature_dim, cfg.hidden_dim)
    return encoder, projector


def _view_seed(seed, epoch, view):
    return int(make_rng(seed, 'view', epoch, view).integers(2**31 - 1))


def grace_pretrain(source, proj, enc, cfg):
    """Contrastive pre-training; returns the frozen encoder, the trained projector
    and the per-epoch losses."""
    cfg.validate()
    if enc.frozen:
        raise ContractError('pre-training needs an unfrozen encoder')
    params = {**enc.named(), **proj.named()}
    opt = Adam({'encoder': (list(params), cfg.lr, cfg.weight_decay)})
    rates = ((cfg.p_edge_drop_1, cfg.p_feat_mask_1), (cfg.p_edge_drop_2, cfg.p_feat_mask_2))
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        views = [augment_view(source, p_edge, p_feat, _view_seed(cfg.seed, epoch, i))
                 for i, (p_edge, p_feat) in enumerate(rates, 1)]
        adjs = [normalize_adjacency(v) for v in views]

        def program(P):
            z1, z2 = (gcn_stack(project(v.features, P), a, P) for v, a in zip(views, adjs))
            return view_contrastive_loss(z1, z2, cfg.tau_pre)

        try:
            loss, grads = forward_and_grad(program, params)
        except GP2FError as error:
            raise with_context(error, f'pretrain epoch {epoch}')
        loss = float(np.asarray(loss).reshape(()))
        losses.append(loss)
        if epoch % cfg.log_every == 0 or epoch == 1:
            logger.info(f'pretrain epoch {epoch}: loss={loss:.6g}')
        params = opt.step(params, grads)
    encoder = enc.with_named(params).freeze()
    projector = proj.with_named(params)
    logger.info(f'pretraining done after {cfg.epochs} epochs, final loss {losses[-1]:.6g}')
    return PretrainResult(encoder, projector, losses)


def pretrain_source(source, cfg):
    """init_pretrain + grace_pretrain"""
    encoder, projector = init_pretrain(source, cfg)
    return grace_pretrain(source, projector, encoder, cfg)


# BASELINES
# =========

def linear_probe(g, encoder, projector, split, cfg):
    """accuracy of a linear classifier trained on the frozen branch"""
    if not encoder.frozen:
        raise ContractError('linear probing needs a frozen encoder')
    _, entry = trainer.adapt(g, encoder, projector, dataclasses.replace(cfg, variant='lp'), split)
    return entry.accuracy


def full_finetune(g, encoder, projector, split, cfg):
    """accuracy after training encoder, projector and classifier together

    Works on copies: `encoder` and `projector` are left untouched.
    """
    _, entry = trainer.adapt(g, encoder, projector, dataclasses.replace(cfg, variant='ft'), split)
    return entry.accuracy


def transfer(source, target, pretrain_cfg, cfg, variants=None, workers=1):
    """pre-train on `source`, then run the protocol on `target`"""
    result = pretrain_source(source, pretrain_cfg)
    return result, trainer.run_protocol(target, result.encoder, result.projector, cfg, variants, workers)
