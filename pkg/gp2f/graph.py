"""Graph data model, text-file ingestion, SBM generation, GCN adjacency
normalization, augmentation views and the few-shot sampling protocol.
"""
import os
import json
import dataclasses
from typing import Optional, Tuple

import numpy as np
import networkx as nx

from gp2f import logger
from gp2f.errors import ParseError, ProtocolError, ValidationError, ConfigError
from gp2f.numerics import make_rng
from gp2f.config import from_dict, unknown_key_message
from gp2f.utils import fmt

FEATURES_FILE = 'features.txt'
EDGES_FILE = 'edges.txt'
LABELS_FILE = 'labels.txt'

TEST_FRACTION = 0.9
TEST_POOL_SEED = 0


def _readonly(a):
    a.flags.writeable = False
    return a


def canonical_edges(edges, num_nodes):
    """deduplicated (i, j), i < j edge array with self-loops removed"""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        bad = e[(e < 0).any(axis=1) | (e >= num_nodes).any(axis=1)][0]
        raise ValidationError(f'edge ({bad[0]}, {bad[1]}) has an endpoint outside [0, {num_nodes})')
    loops = e[:, 0] == e[:, 1]
    if loops.any():
        logger.warning(f'dropping {int(loops.sum())} self-loop(s)')
        e = e[~loops]
    e = np.sort(e, axis=1)
    if len(e):
        e = np.unique(e, axis=0)
    return e.reshape(-1, 2)


@dataclasses.dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph; immutable once built (use :meth:`create`)."""
    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    num_classes: int = 0

    @classmethod
    def create(cls, num_nodes, edges, features, labels=None, num_classes=None):
        num_nodes = int(num_nodes)
        features = np.array(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != num_nodes:
            raise ValidationError(f'features must be {num_nodes} x d, got {features.shape}')
        if not np.all(np.isfinite(features)):
            raise ValidationError('features contain NaN or Inf')
        edges = canonical_edges(edges, num_nodes)
        if labels is not None:
            labels = np.array(labels, dtype=np.int64).ravel()
            if len(labels) != num_nodes:
                raise ValidationError(f'{len(labels)} labels for {num_nodes} nodes')
            if len(labels) and labels.min() < 0:
                raise ValidationError('negative class label')
            if num_classes is None:
                num_classes = int(labels.max()) + 1 if len(labels) else 0
            if len(labels) and labels.max() >= num_classes:
                raise ValidationError(f'label {labels.max()} >= num_classes {num_classes}')
            labels = _readonly(labels)
        return cls(num_nodes, _readonly(edges), _readonly(features), labels, int(num_classes or 0))

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def num_edges(self):
        return len(self.edges)

    def adjacency(self):
        """dense binary adjacency, symmetric, zero diagonal"""
        A = np.zeros((self.num_nodes, self.num_nodes))
        if self.num_edges:
            A[self.edges[:, 0], self.edges[:, 1]] = 1.0
            A[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return A

    def replace(self, **changes):
        fields = dict(num_nodes=self.num_nodes, edges=self.edges, features=self.features,
                      labels=self.labels, num_classes=self.num_classes or None)
        fields.update(changes)
        return Graph.create(**fields)

    def __repr__(self):
        return (f'Graph(N={self.num_nodes}, edges={self.num_edges}, d={self.feature_dim}, '
                f'C={self.num_classes})')


@dataclasses.dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    matrix: np.ndarray


@dataclasses.dataclass(frozen=True, eq=False)
class FewShotSplit:
    train_idx: np.ndarray
    test_idx: np.ndarray
    k: int
    seed: int
    sampling: int = 0


@dataclasses.dataclass
class SbmSpec:
    blocks: int = 3
    nodes_per_block: int = 60
    p_in: float = 0.2
    p_out: float = 0.02
    feature_dim: int = 32
    center_scale: float = 1.0
    noise_scale: float = 1.0
    feature_shift: Tuple[float, ...] = ()

    def validate(self):
        if self.blocks < 1 or self.nodes_per_block < 1 or self.feature_dim < 1:
            raise ValidationError('SbmSpec: blocks, nodes_per_block and feature_dim must be >= 1')
        if not 0 <= self.p_out <= self.p_in <= 1:
            raise ValidationError(f'SbmSpec: need 0 <= p_out <= p_in <= 1, got p_in={self.p_in}, p_out={self.p_out}')
        if not self.center_scale > 0:
            raise ValidationError('SbmSpec: center_scale must be > 0')
        if self.noise_scale < 0:
            raise ValidationError('SbmSpec: noise_scale must be >= 0')
        if self.feature_shift and len(self.feature_shift) != self.feature_dim:
            raise ValidationError(f'SbmSpec: feature_shift has {len(self.feature_shift)} entries, expected {self.feature_dim}')


# INGESTION
# =========

def _read_lines(path):
    try:
        with open(path) as f:
            return f.read().splitlines()
    except FileNotFoundError:
        raise ValidationError(f'missing file: {path}')


def _parse(path, line, lineno, kind):
    try:
        return [kind(tok) for tok in line.split()]
    except ValueError:
        raise ParseError(f'{path}:{lineno}: cannot parse {line.strip()!r}')


def load_graph(features_path, edges_path, labels_path=None):
    """Read a graph from whitespace-separated text files.

    Row order of the features file defines node indexing.
    """
    rows = []
    for lineno, line in enumerate(_read_lines(features_path), 1):
        values = _parse(features_path, line, lineno, float)
        if not values:
            raise ParseError(f'{features_path}:{lineno}: empty feature row')
        if rows and len(values) != len(rows[0]):
            raise ParseError(f'{features_path}:{lineno}: expected {len(rows[0])} values, got {len(values)}')
        rows.append(values)
    if not rows:
        raise ParseError(f'{features_path}: no nodes')
    features = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ParseError(f'{features_path}: non-finite feature value')

    edges = []
    for lineno, line in enumerate(_read_lines(edges_path), 1):
        if not line.strip():
            continue
        pair = _parse(edges_path, line, lineno, int)
        if len(pair) != 2:
            raise ParseError(f'{edges_path}:{lineno}: expected two node indices, got {len(pair)}')
        edges.append(pair)

    labels = None
    if labels_path is not None:
        labels = []
        for lineno, line in enumerate(_read_lines(labels_path), 1):
            value = _parse(labels_path, line, lineno, int)
            if len(value) != 1:
                raise ParseError(f'{labels_path}:{lineno}: expected one class index')
            labels.extend(value)

    graph = Graph.create(len(features), edges, features, labels)
    logger.info(f'loaded {graph} from {os.path.dirname(features_path) or "."}')
    return graph


def load_graph_dir(path, labels=True):
    labels_path = os.path.join(path, LABELS_FILE)
    return load_graph(os.path.join(path, FEATURES_FILE), os.path.join(path, EDGES_FILE),
                      labels_path if labels and os.path.exists(labels_path) else None)


def save_graph_dir(graph, path):
    """write the three text files; returns their paths"""
    os.makedirs(path, exist_ok=True)
    paths = [os.path.join(path, name) for name in (FEATURES_FILE, EDGES_FILE, LABELS_FILE)]
    with open(paths[0], 'w') as f:
        for row in graph.features:
            f.write(' '.join(fmt(float(x)) for x in row) + '\n')
    with open(paths[1], 'w') as f:
        for i, j in graph.edges:
            f.write(f'{i} {j}\n')
    if graph.labels is None:
        return paths[:2]
    with open(paths[2], 'w') as f:
        for y in graph.labels:
            f.write(f'{y}\n')
    return paths


def load_sbm_pair_spec(file):
    """JSON object {"source": SbmSpec, "target": SbmSpec}"""
    try:
        with open(file) as f:
            js = json.load(f)
    except (OSError, json.JSONDecodeError) as error:
        raise ConfigError(f"{file}: {error}")
    for key in js:
        if key not in ('source', 'target'):
            raise ConfigError(unknown_key_message(key, ['source', 'target'], os.path.basename(file)))
    return (from_dict(SbmSpec, js.get('source', {}), where='source'),
            from_dict(SbmSpec, js.get('target', {}), where='target'))


# GCN PROPAGATION
# ===============

def normalize_adjacency(g):
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I"""
    A_tilde = g.adjacency() + np.eye(g.num_nodes)
    d_inv_sqrt = 1.0 / np.sqrt(A_tilde.sum(axis=1))
    return NormalizedAdjacency(_readonly(d_inv_sqrt[:, None] * A_tilde * d_inv_sqrt[None, :]))


# SYNTHETIC DOMAINS
# =================

def _sbm_graph(spec, seed, role, shifted):
    spec.validate()
    sizes = [spec.nodes_per_block] * spec.blocks
    probs = np.full((spec.blocks, spec.blocks), spec.p_out)
    np.fill_diagonal(probs, spec.p_in)
    edge_seed = int(make_rng(seed, role, 'edges').integers(2**31 - 1))
    G = nx.stochastic_block_model(sizes, probs.tolist(), seed=edge_seed)
    labels = np.repeat(np.arange(spec.blocks), spec.nodes_per_block)
    rng = make_rng(seed, role, 'features')
    centers = spec.center_scale * rng.standard_normal((spec.blocks, spec.feature_dim))
    noise = spec.noise_scale * rng.standard_normal((len(labels), spec.feature_dim))
    features = centers[labels] + noise
    if shifted and spec.feature_shift:
        features = features + np.asarray(spec.feature_shift, dtype=np.float64)
    return Graph.create(len(labels), list(G.edges()), features, labels, spec.blocks)


def generate_sbm_pair(source, target, seed):
    """labeled (source, target) graphs; node i belongs to block i // nodes_per_block"""
    src = _sbm_graph(source, seed, 'source', shifted=False)
    tgt = _sbm_graph(target, seed, 'target', shifted=True)
    logger.info(f'generated source {src} and target {tgt}')
    return src, tgt


# AUGMENTATION
# ============

def augment_view(g, p_edge_drop, p_feat_mask, seed):
    """drop each edge w.p. p_edge_drop, zero each feature column w.p. p_feat_mask"""
    for p in (p_edge_drop, p_feat_mask):
        if not 0 <= p <= 1:
            raise ConfigError(f'augmentation probability {p} outside [0, 1]')
    rng = make_rng(seed, 'augment')
    keep = rng.random(g.num_edges) >= p_edge_drop
    masked = rng.random(g.feature_dim) < p_feat_mask
    features = g.features
    if masked.any():
        features = features.copy()
        features[:, masked] = 0.0
    return Graph(g.num_nodes, _readonly(g.edges[keep]), _readonly(np.asarray(features)),
                 g.labels, g.num_classes)


# FEW-SHOT PROTOCOL
# =================

def split_pools(num_nodes):
    """fixed 90% test pool (seed 0) and the remaining training pool, both sorted"""
    perm = make_rng(TEST_POOL_SEED, 'test-pool').permutation(num_nodes)
    n_test = int(TEST_FRACTION * num_nodes)
    return np.sort(perm[:n_test]), np.sort(perm[n_test:])


def sample_few_shot(g, k, seed, sampling=0):
    """k labeled nodes per class from the 10% pool; the 90% test pool is shared by all seeds"""
    if g.labels is None:
        raise ProtocolError('few-shot sampling needs labels')
    if k < 1:
        raise ProtocolError(f'k must be >= 1, got {k}')
    test_idx, pool = split_pools(g.num_nodes)
    rng = make_rng(seed, 'few-shot', sampling)
    train = []
    for c in range(g.num_classes):
        candidates = pool[g.labels[pool] == c]
        if len(candidates) < k:
            raise ProtocolError(f'class {c} has {len(candidates)} node(s) in the training pool, {k} needed')
        train.extend(rng.choice(candidates, size=k, replace=False).tolist())
    return FewShotSplit(_readonly(np.array(train, dtype=np.int64)), _readonly(test_idx.astype(np.int64)),
                        k, seed, sampling)
