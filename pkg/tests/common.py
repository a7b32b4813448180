import os
import io
import json
import shlex
import tempfile
import unittest
from contextlib import redirect_stdout

import numpy as np

from gp2f.__main__ import main, GP2FExit
from gp2f.utils import set_directory
from gp2f.graph import Graph, FewShotSplit, SbmSpec, generate_sbm_pair
from gp2f.encoder import (AdapterParams, ClassifierParams, DualBranchModel, EncoderParams, FusionParams,
                          ProjectorParams)


def call(f, *args, check=False, check_output=False, **kwargs):
    if check_output:
        out = io.StringIO()
        with redirect_stdout(out):
            f(*args, **kwargs)
        return out.getvalue().strip()

    elif check:
        return f(*args, **kwargs)
    else:
        try:
            with redirect_stdout(io.StringIO()):
                f(*args, **kwargs)
            return 0
        except GP2FExit as exit:
            return exit.code


def gp2fcmd(cmd, check_output=False, cwd=None):
    """run the command line in process: exit code, or stdout with check_output"""
    args = shlex.split(cmd)
    if cwd:
        with set_directory(cwd):
            return call(main, args, check_output=check_output)
    return call(main, args, check_output=check_output)


# tiny graphs
# ===========

def path_graph(n=3, d=2, seed=0):
    features = np.random.default_rng(seed).standard_normal((n, d))
    return Graph.create(n, [(i, i + 1) for i in range(n - 1)], features)


def random_graph(n, d=4, num_classes=2, p=0.4, seed=0):
    """labeled Erdos-Renyi graph with Gaussian features; every class present"""
    rng = np.random.default_rng(seed)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    labels = np.arange(n) % num_classes
    return Graph.create(n, edges, rng.standard_normal((n, d)), labels, num_classes)


def tiny_model(g, hidden=6, rank=2, beta=0.5, logit=0.3, seed=0, fixed_alpha=None):
    rng = np.random.default_rng(seed)
    encoder = EncoderParams.init(rng, hidden, seed=seed).freeze()
    projector = ProjectorParams.init(rng, g.feature_dim, hidden)
    adapters = AdapterParams.init(rng, hidden, rank, beta_init=beta)
    classifier = ClassifierParams(rng.standard_normal((hidden, g.num_classes)),
                                  rng.standard_normal((1, g.num_classes)))
    return DualBranchModel(encoder, projector, adapters, FusionParams(logit), classifier, fixed_alpha=fixed_alpha)


def train_split(g, per_class=2):
    train = [i for c in range(g.num_classes) for i in np.flatnonzero(g.labels == c)[:per_class]]
    test = [i for i in range(g.num_nodes) if i not in train]
    return FewShotSplit(np.array(train), np.array(test), per_class, 0)


def small_sbm_pair(seed=0, blocks=3, nodes_per_block=100, feature_dim=8):
    source = SbmSpec(blocks=blocks, nodes_per_block=nodes_per_block, p_in=0.3, p_out=0.02,
                     feature_dim=feature_dim, center_scale=2.0)
    target = SbmSpec(blocks=blocks, nodes_per_block=nodes_per_block, p_in=0.25, p_out=0.03,
                     feature_dim=feature_dim, center_scale=2.0, feature_shift=(0.5,) * feature_dim)
    return generate_sbm_pair(source, target, seed)


class TempDirTest(unittest.TestCase):
    """This class provides a temporary directory to work with
    """

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.temp_dir.cleanup()

    def _path(self, p):
        return os.path.join(self.temp_dir.name, p)

    def write(self, name, text):
        path = self._path(name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, 'w') as f:
            f.write(text)
        return path

    def write_json(self, name, data):
        return self.write(name, json.dumps(data))

    def read_bytes(self, name):
        with open(self._path(name), 'rb') as f:
            return f.read()
