"""Dual-branch encoder: projector, frozen 2-layer GCN branch, residual-adapter
branch and the learnable convex fusion of the two.

Parameters live in small dataclasses of float64 arrays. The forward functions
take a mapping from parameter name to array *or* tape node, so the same code
serves plain evaluation and differentiation: pass tape leaves for the names
that should receive gradients, arrays for everything else.

Parameter names::

    encoder.w1  encoder.w2                      (theta*, frozen downstream)
    proj.w1  proj.b1  proj.w2  proj.b2          (dimension-aligning MLP)
    adapter1.down  adapter1.up  adapter1.beta   (one set per GCN layer)
    fusion.logit                                (alpha = logistic(logit))
    classifier.w  classifier.b
"""
import json
import dataclasses
from typing import Optional, Tuple

import numpy as np

from gp2f import logger
from gp2f.errors import ContractError, DimensionError, ValidationError
from gp2f.numerics import (Node, add, matmul, relu, scale, sigmoid, sub,
                           glorot, as_matrix)
from gp2f.config import dump_json

HIDDEN_DIM = 128
ADAPTER_RANK = 32
NUM_LAYERS = 2
BETA_INIT = 1e-3
ALPHA_LOGIT_INIT = 2.0

CHECKPOINT_FORMAT = 'gp2f-checkpoint-1'


@dataclasses.dataclass(eq=False)
class EncoderParams:
    w1: np.ndarray
    w2: np.ndarray
    frozen: bool = False
    seed: Optional[int] = None

    @classmethod
    def init(cls, rng, hidden_dim=HIDDEN_DIM, seed=None):
        return cls(glorot(rng, hidden_dim, hidden_dim), glorot(rng, hidden_dim, hidden_dim), seed=seed)

    @property
    def hidden_dim(self):
        return self.w1.shape[0]

    def named(self):
        return {'encoder.w1': self.w1, 'encoder.w2': self.w2}

    def with_named(self, named):
        return dataclasses.replace(self, w1=named.get('encoder.w1', self.w1),
                                   w2=named.get('encoder.w2', self.w2))

    def freeze(self):
        """frozen snapshot: read-only copies of the weights"""
        w1, w2 = np.array(self.w1), np.array(self.w2)
        w1.flags.writeable = w2.flags.writeable = False
        return dataclasses.replace(self, w1=w1, w2=w2, frozen=True)

    def thaw(self):
        """unfrozen, writable copy (full fine-tuning works on this)"""
        return dataclasses.replace(self, w1=np.array(self.w1), w2=np.array(self.w2), frozen=False)


@dataclasses.dataclass(eq=False)
class ProjectorParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng, in_dim, hidden_dim=HIDDEN_DIM):
        return cls(glorot(rng, in_dim, hidden_dim), np.zeros((1, hidden_dim)),
                   glorot(rng, hidden_dim, hidden_dim), np.zeros((1, hidden_dim)))

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim), np.zeros((1, dim)), np.eye(dim), np.zeros((1, dim)))

    @property
    def in_dim(self):
        return self.w1.shape[0]

    def named(self):
        return {'proj.w1': self.w1, 'proj.b1': self.b1, 'proj.w2': self.w2, 'proj.b2': self.b2}

    def with_named(self, named):
        return ProjectorParams(*(named.get(f'proj.{k}', getattr(self, k)) for k in ('w1', 'b1', 'w2', 'b2')))


@dataclasses.dataclass(eq=False)
class AdapterParams:
    downs: Tuple[np.ndarray, ...]
    ups: Tuple[np.ndarray, ...]
    betas: Tuple[float, ...]

    @classmethod
    def init(cls, rng, hidden_dim=HIDDEN_DIM, rank=ADAPTER_RANK, beta_init=BETA_INIT):
        if not 0 < rank < hidden_dim:
            raise ValidationError(f'adapter rank must satisfy 0 < r < {hidden_dim}, got {rank}')
        downs, ups = [], []
        for _ in range(NUM_LAYERS):
            downs.append(glorot(rng, hidden_dim, rank))
            ups.append(glorot(rng, rank, hidden_dim))
        return cls(tuple(downs), tuple(ups), (beta_init,) * NUM_LAYERS)

    @property
    def rank(self):
        return self.downs[0].shape[1]

    def named(self):
        named = {}
        for l, (down, up, beta) in enumerate(zip(self.downs, self.ups, self.betas), 1):
            named[f'adapter{l}.down'] = down
            named[f'adapter{l}.up'] = up
            named[f'adapter{l}.beta'] = np.full((1, 1), beta)
        return named

    def with_named(self, named):
        layers = range(1, len(self.downs) + 1)
        return AdapterParams(
            tuple(named.get(f'adapter{l}.down', d) for l, d in zip(layers, self.downs)),
            tuple(named.get(f'adapter{l}.up', u) for l, u in zip(layers, self.ups)),
            tuple(float(np.asarray(named[f'adapter{l}.beta']).reshape(())) if f'adapter{l}.beta' in named else b
                  for l, b in zip(layers, self.betas)))


@dataclasses.dataclass
class FusionParams:
    logit: float = ALPHA_LOGIT_INIT

    @property
    def alpha(self):
        return float(sigmoid(self.logit))

    def named(self):
        return {'fusion.logit': np.full((1, 1), self.logit)}

    def with_named(self, named):
        if 'fusion.logit' not in named:
            return self
        return FusionParams(float(np.asarray(named['fusion.logit']).reshape(())))


@dataclasses.dataclass(eq=False)
class ClassifierParams:
    w: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, rng, hidden_dim, num_classes):
        return cls(glorot(rng, hidden_dim, num_classes), np.zeros((1, num_classes)))

    def named(self):
        return {'classifier.w': self.w, 'classifier.b': self.b}

    def with_named(self, named):
        return ClassifierParams(named.get('classifier.w', self.w), named.get('classifier.b', self.b))


@dataclasses.dataclass(eq=False)
class BranchOutputs:
    h_pre: Node
    h_adp: Node
    h_mix: Node
    alpha: object


# LAYERS
# ======

def _adj(adj):
    return adj.matrix if hasattr(adj, 'matrix') else adj


def project(x, P):
    """Proj(X) = relu(X W1 + b1) W2 + b2"""
    return add(matmul(relu(add(matmul(x, P['proj.w1']), P['proj.b1'])), P['proj.w2']), P['proj.b2'])


def gcn_layer(h, adj, w, activate):
    """relu(A_hat H W) when activate, else A_hat H W; no bias"""
    out = matmul(matmul(_adj(adj), h), w)
    return relu(out) if activate else out


def _layer_activation(l):
    # first layer activated, last layer linear
    return l < NUM_LAYERS


def gcn_stack(h0, adj, P):
    h = h0
    for l in range(1, NUM_LAYERS + 1):
        h = gcn_layer(h, adj, P[f'encoder.w{l}'], _layer_activation(l))
    return h


def adapter_stack(h0, adj, P):
    h = h0
    for l in range(1, NUM_LAYERS + 1):
        h = gcn_layer(h, adj, P[f'encoder.w{l}'], _layer_activation(l))
        residual = matmul(relu(matmul(h, P[f'adapter{l}.down'])), P[f'adapter{l}.up'])
        h = add(h, scale(residual, P[f'adapter{l}.beta']))
    return h


def _check_input(g, P):
    w1 = P['proj.w1']
    in_dim = w1.shape[0]
    if g.feature_dim != in_dim:
        raise DimensionError(f'projector expects {in_dim} features, graph has {g.feature_dim}')


def _require_frozen(enc):
    if not enc.frozen:
        raise ContractError('encoder parameters must be frozen for the downstream branches')


def encode_frozen(g, adj, enc, proj):
    """H_pre: the pre-trained 2-layer GCN on Proj(X)"""
    _require_frozen(enc)
    P = {**enc.named(), **proj.named()}
    _check_input(g, P)
    return gcn_stack(project(g.features, P), adj, P)


def encode_adapted(g, adj, enc, adapters, proj):
    """H_adp: the same GCN with a residual bottleneck adapter after each layer"""
    _require_frozen(enc)
    P = {**enc.named(), **proj.named(), **adapters.named()}
    _check_input(g, P)
    return adapter_stack(project(g.features, P), adj, P)


def fuse(h_pre, h_adp, alpha):
    """H_mix = alpha H_pre + (1 - alpha) H_adp, computed as H_adp + alpha (H_pre - H_adp)

    alpha may be a number, a 1x1 node or FusionParams. Equal branches give a
    result bitwise equal to them, and a constant alpha of exactly 1 (0) returns
    H_pre (H_adp) itself.
    """
    if isinstance(alpha, FusionParams):
        alpha = alpha.alpha
    if h_pre.shape != h_adp.shape:
        raise DimensionError(f'fuse: {h_pre.shape} vs {h_adp.shape}')
    if isinstance(alpha, (int, float)) and alpha in (0, 1):
        return h_pre if alpha == 1 else h_adp
    return add(h_adp, scale(sub(h_pre, h_adp), alpha))


def classify(h_mix, classifier):
    """logits = H_mix W_c + b_c"""
    P = classifier.named() if isinstance(classifier, ClassifierParams) else classifier
    return add(matmul(h_mix, P['classifier.w']), P['classifier.b'])


# MODEL
# =====

@dataclasses.dataclass(eq=False)
class DualBranchModel:
    """frozen encoder + trainable projector, adapters, fusion weight and classifier

    `fixed_alpha` pins alpha to a constant (the fusion logit is then not a
    parameter): 0 routes everything through the adapted branch. Without
    adapters the model is single-branch and classifies H_pre (linear probing);
    `train_encoder` additionally exposes the encoder weights (fine-tuning).
    """
    encoder: EncoderParams
    projector: ProjectorParams
    adapters: Optional[AdapterParams]
    fusion: FusionParams
    classifier: ClassifierParams
    fixed_alpha: Optional[float] = None
    train_projector: bool = True
    train_encoder: bool = False

    def trainable(self):
        named = {}
        if self.train_encoder:
            named.update(self.encoder.named())
        if self.train_projector:
            named.update(self.projector.named())
        if self.adapters is not None:
            named.update(self.adapters.named())
            if self.fixed_alpha is None:
                named.update(self.fusion.named())
        named.update(self.classifier.named())
        return named

    def resolve(self, leaves=None):
        """every parameter by name; `leaves` override the stored arrays"""
        P = {**self.encoder.named(), **self.projector.named(), **self.fusion.named(),
             **self.classifier.named()}
        if self.adapters is not None:
            P.update(self.adapters.named())
        P.update(leaves or {})
        return P

    def with_params(self, named):
        encoder = self.encoder.with_named(named) if self.train_encoder else self.encoder
        adapters = self.adapters.with_named(named) if self.adapters is not None else None
        return dataclasses.replace(self, encoder=encoder,
                                   projector=self.projector.with_named(named),
                                   adapters=adapters,
                                   fusion=self.fusion.with_named(named),
                                   classifier=self.classifier.with_named(named))

    @property
    def alpha(self):
        if self.adapters is None:
            return 1.0
        return self.fixed_alpha if self.fixed_alpha is not None else self.fusion.alpha

    def forward(self, g, adj, leaves=None):
        """both branches and their fusion; `leaves` override parameters by name"""
        if not self.train_encoder:
            _require_frozen(self.encoder)
        P = self.resolve(leaves)
        _check_input(g, P)
        h0 = project(g.features, P)
        h_pre = gcn_stack(h0, adj, P)
        if self.adapters is None:
            return BranchOutputs(h_pre, None, h_pre, 1.0)
        h_adp = adapter_stack(h0, adj, P)
        alpha = self.fixed_alpha if self.fixed_alpha is not None else sigmoid(P['fusion.logit'])
        return BranchOutputs(h_pre, h_adp, fuse(h_pre, h_adp, alpha), alpha)

    def logits(self, g, adj):
        out = self.forward(g, adj)
        return np.asarray(classify(out.h_mix, self.classifier).value)


# CHECKPOINT
# ==========

def _tensor(a):
    a = as_matrix(a)
    return {'shape': list(a.shape), 'data': [float(x) for x in a.ravel()]}


def save_checkpoint(file, encoder, projector):
    """JSON document: every tensor with its shape, the frozen flag and the pre-training seed"""
    doc = {
        'format': CHECKPOINT_FORMAT,
        'frozen': bool(encoder.frozen),
        'seed': encoder.seed,
        'tensors': {name: _tensor(a) for name, a in {**encoder.named(), **projector.named()}.items()},
    }
    logger.info(f'save checkpoint: {file}')
    dump_json(doc, file)


def load_checkpoint(file):
    """(EncoderParams, ProjectorParams) exactly as saved"""
    try:
        with open(file) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f'missing file: {file}')
    except (OSError, json.JSONDecodeError) as error:
        raise ValidationError(f'{file}: {error}')
    if not isinstance(doc, dict) or doc.get('format') != CHECKPOINT_FORMAT:
        raise ValidationError(f'{file}: not a gp2f checkpoint')
    tensors = {}
    for name, t in doc.get('tensors', {}).items():
        a = np.array(t['data'], dtype=np.float64)
        if a.size != int(np.prod(t['shape'])):
            raise ValidationError(f'{file}: tensor {name} has {a.size} values for shape {t["shape"]}')
        tensors[name] = a.reshape(t['shape'])
    try:
        encoder = EncoderParams(tensors['encoder.w1'], tensors['encoder.w2'], seed=doc.get('seed'))
        projector = ProjectorParams(*(tensors[f'proj.{k}'] for k in ('w1', 'b1', 'w2', 'b2')))
    except KeyError as error:
        raise ValidationError(f'{file}: missing tensor {error.args[0]}')
    if doc.get('frozen'):
        encoder = encoder.freeze()
    return encoder, projector
