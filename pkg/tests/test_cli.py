import os
import sys
import json
import unittest
import subprocess as sp

from tests.common import TempDirTest, gp2fcmd
from gp2f.encoder import load_checkpoint, save_checkpoint
from gp2f.utils import read_csv

SBM_PAIR = {
    'source': {'blocks': 3, 'nodes_per_block': 100, 'p_in': 0.1, 'p_out': 0.01, 'feature_dim': 6,
               'center_scale': 2.0},
    'target': {'blocks': 3, 'nodes_per_block': 100, 'p_in': 0.08, 'p_out': 0.02, 'feature_dim': 6,
               'center_scale': 2.0, 'feature_shift': [0.5] * 6},
}
PRETRAIN = {'epochs': 3, 'hidden_dim': 8}
TRAIN = {'epochs': 3, 'patience': 3, 'rank': 2, 'seeds': [1], 'samplings': 2, 'shots': 1}


class CliTest(TempDirTest):

    def setUp(self):
        super().setUp()
        self.spec = self.write_json('spec.json', SBM_PAIR)
        self.pretrain_cfg = self.write_json('pretrain.json', PRETRAIN)
        self.train_cfg = self.write_json('train.json', TRAIN)

    def gen(self, out='data', seed=0):
        return gp2fcmd(f'gen {self.spec} --seed {seed} --out {self._path(out)}')

    def pretrain(self, data='data', out='pre'):
        return gp2fcmd(f'pretrain {self._path(data)} --config {self.pretrain_cfg} --out {self._path(out)}')

    def adapt(self, extra='', data='data', ckpt='pre', out='adapt'):
        return gp2fcmd(f'adapt {self._path(ckpt)}/checkpoint.json {self._path(data)} --config {self.train_cfg} '
                       f'--out {self._path(out)} {extra}')

    def manifest(self, out):
        with open(self._path(os.path.join(out, 'manifest.json'))) as f:
            return json.load(f)


class GenTest(CliTest):

    def test_files(self):
        self.assertEqual(self.gen(), 0)
        for role in ('source', 'target'):
            for name in ('features.txt', 'edges.txt', 'labels.txt'):
                self.assertTrue(os.path.exists(self._path(f'data/{role}/{name}')))
        manifest = self.manifest('data')
        self.assertEqual(manifest['command'], 'gen')
        self.assertEqual(len(manifest['outputs']), 6)
        self.assertIn(os.path.join('target', 'labels.txt'), manifest['outputs'])

    def test_repeatable(self):
        self.gen('a', seed=4)
        self.gen('b', seed=4)
        for name in ('source/features.txt', 'source/edges.txt', 'target/features.txt', 'target/labels.txt'):
            self.assertEqual(self.read_bytes(f'a/{name}'), self.read_bytes(f'b/{name}'))

    def test_invalid_probabilities(self):
        spec = self.write_json('bad.json', {'source': {'p_in': 0.01, 'p_out': 0.2}})
        self.assertEqual(gp2fcmd(f'gen {spec} --out {self._path("bad")}'), 3)

    def test_unknown_spec_key(self):
        spec = self.write_json('typo.json', {'sorce': {}})
        self.assertEqual(gp2fcmd(f'gen {spec} --out {self._path("typo")}'), 2)


class PipelineTest(CliTest):

    def test_pretrain_outputs(self):
        self.gen()
        self.assertEqual(self.pretrain(), 0)
        rows = read_csv(self._path('pre/pretrain_loss.csv'))
        self.assertEqual(len(rows), 3)
        encoder, projector = load_checkpoint(self._path('pre/checkpoint.json'))
        self.assertTrue(encoder.frozen)
        save_checkpoint(self._path('again.json'), encoder, projector)
        self.assertEqual(self.read_bytes('pre/checkpoint.json'), self.read_bytes('again.json'))
        self.assertEqual(self.manifest('pre')['command'], 'pretrain')

    def test_missing_features(self):
        os.makedirs(self._path('empty'))
        self.assertEqual(self.pretrain(data='empty'), 3)

    def test_unknown_config_key(self):
        cfg = self.write_json('typo.json', {'epoch': 3})
        self.gen()
        code = gp2fcmd(f'pretrain {self._path("data")} --config {cfg} --out {self._path("pre")}')
        self.assertEqual(code, 2)

    def test_adapt_outputs(self):
        self.gen()
        self.pretrain()
        self.assertEqual(self.adapt('--variant lp'), 0)
        rows = read_csv(self._path('adapt/results.csv'))
        self.assertEqual([(r['variant'], r['seed'], r['sampling']) for r in rows], [('lp', '1', '0'), ('lp', '1', '1')])
        with open(self._path('adapt/summary.json')) as f:
            summary = json.load(f)
        self.assertEqual(summary['lp']['n'], 2)
        self.assertEqual(sorted(self.manifest('adapt')['outputs']), ['history.csv', 'results.csv', 'summary.json'])

    def test_variant_list(self):
        self.gen()
        self.pretrain()
        self.assertEqual(self.adapt('--variant full,no_ctr,no_fus,no_both,prompt_only'), 0)
        rows = read_csv(self._path('adapt/results.csv'))
        self.assertEqual(sorted({r['variant'] for r in rows}),
                         ['full', 'no_both', 'no_ctr', 'no_fus', 'prompt_only'])
        self.assertEqual(len(rows), 10)

    def test_unknown_variant(self):
        self.gen()
        self.pretrain()
        self.assertEqual(self.adapt('--variant fulll'), 2)

    def test_identical_reruns(self):
        self.gen()
        for run in ('1', '2'):
            self.assertEqual(self.pretrain(out=f'pre{run}'), 0)
            self.assertEqual(self.adapt('--variant full,lp', ckpt=f'pre{run}', out=f'adapt{run}'), 0)
        self.assertEqual(self.read_bytes('pre1/checkpoint.json'), self.read_bytes('pre2/checkpoint.json'))
        self.assertEqual(self.read_bytes('adapt1/results.csv'), self.read_bytes('adapt2/results.csv'))
        self.assertEqual(self.read_bytes('adapt1/history.csv'), self.read_bytes('adapt2/history.csv'))

    def test_sweep(self):
        self.gen()
        self.pretrain()
        code = gp2fcmd(f'sweep {self._path("pre/checkpoint.json")} {self._path("data")} --config {self.train_cfg} '
                       f'--out {self._path("sweep")} --field rank --values 2,4 --variant full,lp')
        self.assertEqual(code, 0)
        rows = read_csv(self._path('sweep/sweep.csv'))
        self.assertEqual([(r['value'], r['variant']) for r in rows],
                         [('2', 'full'), ('2', 'lp'), ('4', 'full'), ('4', 'lp')])

    def test_info(self):
        self.gen()
        self.pretrain()
        out = gp2fcmd(f'info {self._path("pre/checkpoint.json")}', check_output=True)
        self.assertIn('frozen: True', out)
        self.assertIn('encoder.w1', out)

    def test_missing_checkpoint(self):
        self.gen()
        self.assertEqual(self.adapt(ckpt='nowhere'), 3)


class TheoryCliTest(CliTest):

    def test_verdict(self):
        self.assertEqual(gp2fcmd(f'theory --n-samples 20000 --out {self._path("th")}'), 0)
        rows = read_csv(self._path('th/theory.csv'))
        self.assertEqual(len(rows), 11)
        with open(self._path('th/verdict.json')) as f:
            verdict = json.load(f)
        self.assertIs(verdict['improvement']['verdict'], True)
        self.assertIs(verdict['misclassification_bound']['verdict'], True)
        self.assertAlmostEqual(verdict['lambda_star'], 0.7 / 2.4, delta=1e-12)
        self.assertEqual(self.manifest('th')['command'], 'theory')

    def test_inapplicable(self):
        self.assertEqual(gp2fcmd(f'theory --rho 1.5 --out {self._path("th")}'), 5)
        with open(self._path('th/verdict.json')) as f:
            verdict = json.load(f)
        self.assertEqual(verdict['improvement']['verdict'], 'inapplicable')

    def test_too_few_samples(self):
        self.assertEqual(gp2fcmd(f'theory --n-samples 10 --out {self._path("th")}'), 2)


class ConsoleTest(TempDirTest):
    """the `gp2f` script entry point, in a separate interpreter"""

    def run_console(self, args):
        script = 'from gp2f.__main__ import console; console()'
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        env = {**os.environ, 'PYTHONPATH': os.pathsep.join(filter(None, [root, os.environ.get('PYTHONPATH')]))}
        return sp.run([sys.executable, '-c', script, *args], capture_output=True, text=True, env=env)

    def test_assumption_exit_code(self):
        proc = self.run_console(['theory', '--rho', '1.5', '--out', self._path('th')])
        self.assertEqual(proc.returncode, 5)
        self.assertNotIn('Traceback', proc.stderr)

    def test_usage_exit_code(self):
        proc = self.run_console(['theory', '--n-samples', '10', '--out', self._path('th')])
        self.assertEqual(proc.returncode, 2)

    def test_ingestion_exit_code(self):
        proc = self.run_console(['info', self._path('nowhere.json')])
        self.assertEqual(proc.returncode, 3)
        self.assertIn('missing file', proc.stderr)

    def test_success(self):
        proc = self.run_console(['--version'])
        self.assertEqual(proc.returncode, 0)
        self.assertTrue(proc.stdout.strip())


class MainTest(unittest.TestCase):

    def test_no_command(self):
        self.assertEqual(gp2fcmd(''), 1)

    def test_version(self):
        self.assertTrue(gp2fcmd('--version', check_output=True))


if __name__ == '__main__':
    unittest.main()
