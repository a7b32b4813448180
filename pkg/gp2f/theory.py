"""Fusion of two noisy estimates of the same latent representation.

Both branches are modelled as ``h = z + eps`` with zero-mean errors of
second moments ``sigma_g2 = E|eps_g|^2``, ``sigma_a2 = E|eps_a|^2`` and
``rho = E<eps_g, eps_a>``. The fused estimate ``h_a + lam (h_g - h_a)`` has

    MSE(lam) = A lam^2 + B lam + C,
    A = sigma_g2 + sigma_a2 - 2 rho,  B = 2 (rho - sigma_a2),  C = sigma_a2

which is minimised at ``lam* = (sigma_a2 - rho) / A``, strictly inside (0, 1)
whenever ``rho < min(sigma_g2, sigma_a2)``.

>>> stats = ErrorStats(2.0, 1.0, 0.3)
>>> round(mse_curve(stats, 0.5), 12)
0.9
>>> round(optimal_lambda(stats), 5)
0.29167

This module is a verification oracle: it checks the closed forms against
Monte Carlo draws of an explicit Gaussian noise model, and a margin-based
misclassification bound against sampled classification problems.
"""
import dataclasses

import numpy as np

from gp2f import logger
from gp2f.errors import AssumptionError, ConfigError, DimensionError, NumericError
from gp2f.numerics import make_rng

MC_CHUNK = 10000
MIN_SAMPLES = 1000
SE_MARGIN = 4.0
GRID_POINTS = 11


# ERROR MODEL
# ===========

@dataclasses.dataclass(frozen=True)
class ErrorStats:
    sigma_g2: float
    sigma_a2: float
    rho: float

    @property
    def A(self):
        return self.sigma_g2 + self.sigma_a2 - 2 * self.rho

    @property
    def B(self):
        return 2 * (self.rho - self.sigma_a2)

    @property
    def C(self):
        return self.sigma_a2

    def violations(self):
        """the model assumptions that fail, as readable conditions"""
        failed = []
        values = (self.sigma_g2, self.sigma_a2, self.rho)
        if not all(np.isfinite(values)):
            failed.append('second moments must be finite')
            return failed
        if self.sigma_g2 <= 0:
            failed.append(f'sigma_g2 > 0 (got {self.sigma_g2})')
        if self.sigma_a2 <= 0:
            failed.append(f'sigma_a2 > 0 (got {self.sigma_a2})')
        if self.A <= 0:
            failed.append(f'sigma_g2 + sigma_a2 - 2 rho > 0 (got {self.A})')
        if not self.rho < min(self.sigma_g2, self.sigma_a2):
            failed.append(f'rho < min(sigma_g2, sigma_a2) (got rho={self.rho})')
        return failed

    def validate(self):
        failed = self.violations()
        if failed:
            raise AssumptionError('assumption violated: ' + '; '.join(failed))
        return self


def mse_curve(stats, lam):
    """A lam^2 + B lam + C; `lam` may be an array"""
    stats.validate()
    return stats.A * lam * lam + stats.B * lam + stats.C


def optimal_lambda(stats):
    stats.validate()
    return (stats.sigma_a2 - stats.rho) / stats.A


def mse_at_optimum(stats):
    """MSE(lam*), cross-checked against its symmetric closed form"""
    stats.validate()
    A = stats.A
    adapted = stats.sigma_a2 - (stats.sigma_a2 - stats.rho) ** 2 / A
    frozen = stats.sigma_g2 - (stats.sigma_g2 - stats.rho) ** 2 / A
    scale = max(1.0, abs(stats.sigma_g2), abs(stats.sigma_a2))
    if abs(adapted - frozen) > 1e-12 * scale:
        raise NumericError(f'closed forms of MSE(lam*) disagree: {adapted!r} vs {frozen!r}')
    return adapted


# MONTE CARLO
# ===========

@dataclasses.dataclass(frozen=True)
class NoiseModel:
    """Gaussian errors with prescribed second moments in dimension `dim`

    eps_g = sigma_g u / sqrt(d),
    eps_a = (rho / sigma_g) u / sqrt(d) + sqrt(sigma_a2 - rho^2 / sigma_g2) v / sqrt(d)
    with u, v independent standard normal vectors.
    """
    stats: ErrorStats
    dim: int = 16
    seed: int = 0

    def __post_init__(self):
        s = self.stats
        if self.dim < 1:
            raise ConfigError(f'noise dimension must be >= 1, got {self.dim}')
        if s.sigma_g2 <= 0 or s.sigma_a2 <= 0:
            raise AssumptionError('noise model needs positive variances')
        if s.rho ** 2 > s.sigma_g2 * s.sigma_a2:
            raise AssumptionError(f'rho^2 <= sigma_g2 sigma_a2 violated (rho={s.rho})')

    def chunk(self, index, size):
        """(eps_g, eps_a), each size x dim, for chunk number `index`"""
        s = self.stats
        rng = make_rng(self.seed, 'noise', index)
        u = rng.standard_normal((size, self.dim))
        v = rng.standard_normal((size, self.dim))
        sigma_g = np.sqrt(s.sigma_g2)
        root_d = np.sqrt(self.dim)
        eps_g = sigma_g * u / root_d
        rest = max(s.sigma_a2 - s.rho ** 2 / s.sigma_g2, 0.0)
        eps_a = (s.rho / sigma_g) * u / root_d + np.sqrt(rest) * v / root_d
        return eps_g, eps_a

    def chunks(self, n_samples, chunk=MC_CHUNK):
        done, index = 0, 0
        while done < n_samples:
            size = min(chunk, n_samples - done)
            yield self.chunk(index, size)
            done += size
            index += 1


@dataclasses.dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    stderr: float
    n: int


class _Moments:
    """running sum and sum of squares, accumulated in chunk order"""

    def __init__(self):
        self.n, self.total, self.squares = 0, 0.0, 0.0

    def add(self, values):
        self.n += len(values)
        self.total += float(np.sum(values))
        self.squares += float(np.sum(values * values))

    def estimate(self):
        mean = self.total / self.n
        var = max(self.squares / self.n - mean * mean, 0.0) * self.n / max(self.n - 1, 1)
        return MonteCarloEstimate(mean, float(np.sqrt(var / self.n)), self.n)


def _squared_error(eps_g, eps_a, lam):
    delta = lam * eps_g + (1 - lam) * eps_a
    return np.sum(delta * delta, axis=1)


def _check_samples(n_samples):
    if n_samples < MIN_SAMPLES:
        raise ConfigError(f'n_samples must be >= {MIN_SAMPLES}, got {n_samples}')


def monte_carlo_mse(model, lam, n_samples):
    """empirical E|lam eps_g + (1 - lam) eps_a|^2 with its standard error"""
    _check_samples(n_samples)
    moments = _Moments()
    for eps_g, eps_a in model.chunks(n_samples):
        moments.add(_squared_error(eps_g, eps_a, lam))
    return moments.estimate()


def lambda_sweep(model, n_samples, grid_points=GRID_POINTS):
    """rows (lam, analytic MSE, empirical MSE, stderr) on a uniform grid over [0, 1]

    Every grid point reuses the same draws.
    """
    _check_samples(n_samples)
    grid = np.linspace(0.0, 1.0, grid_points)
    moments = [_Moments() for _ in grid]
    for eps_g, eps_a in model.chunks(n_samples):
        for lam, m in zip(grid, moments):
            m.add(_squared_error(eps_g, eps_a, lam))
    rows = []
    for lam, m in zip(grid, moments):
        est = m.estimate()
        rows.append((float(lam), float(mse_curve(model.stats, lam)), est.mean, est.stderr))
    return rows


def fit_quadratic(lams, values):
    """least-squares (A, B, C) of A lam^2 + B lam + C"""
    A, B, C = np.polyfit(np.asarray(lams, dtype=np.float64), np.asarray(values, dtype=np.float64), 2)
    return float(A), float(B), float(C)


@dataclasses.dataclass
class ImprovementReport:
    applicable: bool
    holds: bool = False
    reason: str = ''
    lambda_star: float = float('nan')
    analytic: dict = dataclasses.field(default_factory=dict)
    empirical: dict = dataclasses.field(default_factory=dict)

    @property
    def verdict(self):
        if not self.applicable:
            return 'inapplicable'
        return self.holds

    def to_dict(self):
        return {
            'verdict': self.verdict,
            'reason': self.reason,
            'lambda_star': self.lambda_star,
            'analytic': self.analytic,
            'empirical': {k: dataclasses.asdict(v) for k, v in self.empirical.items()},
        }


def verify_improvement(stats, model, n_samples):
    """Check empirically that MSE(lam*) beats both single branches by 4 standard errors.

    The three estimates share their draws; the margin uses the standard error
    of the paired per-sample differences. Violated assumptions give an
    'inapplicable' report instead of a check.
    """
    failed = stats.violations()
    if failed:
        reason = 'assumptions violated, theorem inapplicable: ' + '; '.join(failed)
        logger.warning(reason)
        return ImprovementReport(False, reason=reason)
    _check_samples(n_samples)
    lam = optimal_lambda(stats)
    at = {'lambda_star': _Moments(), 'adapted_only': _Moments(), 'frozen_only': _Moments()}
    gain = {'adapted_only': _Moments(), 'frozen_only': _Moments()}
    for eps_g, eps_a in model.chunks(n_samples):
        best = _squared_error(eps_g, eps_a, lam)
        single = {'adapted_only': _squared_error(eps_g, eps_a, 0.0),
                  'frozen_only': _squared_error(eps_g, eps_a, 1.0)}
        at['lambda_star'].add(best)
        for key, values in single.items():
            at[key].add(values)
            gain[key].add(values - best)
    gains = {k: m.estimate() for k, m in gain.items()}
    holds = all(g.mean > SE_MARGIN * g.stderr for g in gains.values())
    reason = '; '.join(f'{k}: gain {g.mean:.6g} vs {SE_MARGIN:g} x stderr {g.stderr:.3g}'
                       for k, g in gains.items())
    logger.info(f'improvement check at lambda*={lam:.6g}: {holds} ({reason})')
    return ImprovementReport(
        True, holds=holds, reason=reason, lambda_star=lam,
        analytic={'lambda_star': mse_at_optimum(stats), 'adapted_only': stats.sigma_a2,
                  'frozen_only': stats.sigma_g2},
        empirical={k: m.estimate() for k, m in at.items()})


# MARGIN BOUND
# ============

@dataclasses.dataclass(frozen=True, eq=False)
class MarginProblem:
    """linear classifier rows of norm `radius` and latent points with margin `margin`"""
    weights: np.ndarray
    latent: np.ndarray
    labels: np.ndarray
    radius: float
    margin: float

    @property
    def num_classes(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]

    @classmethod
    def generate(cls, num_classes, dim, radius, margin, num_points, seed):
        """classifier rows sampled on the radius sphere; each z is a Gaussian draw
        pushed along its own class row until every margin holds"""
        if margin <= 0:
            raise AssumptionError(f'margin must be positive, got {margin}')
        if radius <= 0 or num_classes < 2:
            raise AssumptionError('margin problem needs radius > 0 and at least 2 classes')
        rng = make_rng(seed, 'margin-problem')
        while True:
            W = rng.standard_normal((num_classes, dim))
            W = radius * W / np.linalg.norm(W, axis=1, keepdims=True)
            gram = W @ W.T
            gaps = radius ** 2 - gram
            np.fill_diagonal(gaps, np.inf)
            # coincident rows admit no margin
            if gaps.min() > 1e-9 * radius ** 2:
                break
        labels = rng.integers(num_classes, size=num_points)
        Z = rng.standard_normal((num_points, dim))
        target = margin * (1 + 1e-9)
        for i, y in enumerate(labels):
            scores = W @ Z[i]
            need = (target - (scores[y] - scores)) / gaps[y]
            need[y] = -np.inf
            shift = need.max()
            if shift > 0:
                Z[i] = Z[i] + shift * W[y]
        problem = cls(W, Z, labels, float(radius), float(margin))
        if problem.smallest_margin() < margin:
            raise NumericError('margin problem generation failed to reach the margin')
        return problem

    def smallest_margin(self):
        scores = self.latent @ self.weights.T
        rows = np.arange(len(self.labels))
        own = scores[rows, self.labels]
        others = scores.copy()
        others[rows, self.labels] = -np.inf
        return float(np.min(own - others.max(axis=1)))


def misclassification_bound(problem, mse):
    """(clamped to [0, 1], unclamped) value of 4 (C - 1) B^2 mse / gamma^2"""
    if problem.margin <= 0:
        raise AssumptionError(f'margin must be positive, got {problem.margin}')
    if problem.radius <= 0 or problem.num_classes < 2:
        raise AssumptionError('bound needs radius > 0 and at least 2 classes')
    raw = 4 * (problem.num_classes - 1) * problem.radius ** 2 * mse / problem.margin ** 2
    return min(max(raw, 0.0), 1.0), raw


def empirical_error_rate(problem, model, lam, n_samples):
    """argmax misclassification rate of W (z + lam eps_g + (1 - lam) eps_a)"""
    if model.dim != problem.dim:
        raise DimensionError(f'noise dimension {model.dim} vs problem dimension {problem.dim}')
    errors, total = 0, 0
    for index, (eps_g, eps_a) in enumerate(model.chunks(n_samples)):
        pick = make_rng(model.seed, 'margin-points', index).integers(len(problem.labels), size=len(eps_g))
        noisy = problem.latent[pick] + lam * eps_g + (1 - lam) * eps_a
        predicted = np.argmax(noisy @ problem.weights.T, axis=1)
        errors += int(np.sum(predicted != problem.labels[pick]))
        total += len(pick)
    return errors / total


# DIAGNOSTICS
# ===========

@dataclasses.dataclass(frozen=True, eq=False)
class DiscrepancyStats:
    mean: np.ndarray
    mean_norm: float
    covariance: np.ndarray


def branch_discrepancy_stats(h_pre, h_adp):
    """mean and covariance of the per-node branch difference h_pre - h_adp"""
    h_pre, h_adp = np.asarray(h_pre, dtype=np.float64), np.asarray(h_adp, dtype=np.float64)
    if h_pre.shape != h_adp.shape:
        raise DimensionError(f'branch_discrepancy_stats: {h_pre.shape} vs {h_adp.shape}')
    delta = h_pre - h_adp
    mean = delta.mean(axis=0)
    centered = delta - mean
    covariance = centered.T @ centered / max(len(delta) - 1, 1)
    return DiscrepancyStats(mean, float(np.linalg.norm(mean)), covariance)


# COMMAND LINE CONFIGURATION
# ==========================

@dataclasses.dataclass
class TheoryConfig:
    sigma_g2: float = 2.0
    sigma_a2: float = 1.0
    rho: float = 0.3
    dim: int = 16
    n_samples: int = 200000
    grid_points: int = GRID_POINTS
    seed: int = 0
    margin_classes: int = 3
    margin_radius: float = 1.0
    margin_gamma: float = 1.0
    margin_points: int = 200
    margin_samples: int = 50000

    @property
    def stats(self):
        return ErrorStats(self.sigma_g2, self.sigma_a2, self.rho)

    def validate(self):
        if self.n_samples < MIN_SAMPLES:
            raise ConfigError(f'n_samples must be >= {MIN_SAMPLES}, got {self.n_samples}')
        if self.grid_points < 3:
            raise ConfigError(f'grid_points must be >= 3, got {self.grid_points}')
        if self.dim < 1:
            raise ConfigError(f'dim must be >= 1, got {self.dim}')
        return self
