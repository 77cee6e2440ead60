"""Gradient sanitization and Renyi-DP accounting.

Sanitization clips every generated-row gradient to L2 norm ``clip_bound`` and
adds Gaussian noise to the cross rows only; debias rows never see real data
and stay deterministic.

Two noise conventions are supported. ``ALG1`` draws noise with standard
deviation ``2 * clip_bound * sigma``, ``TEXT`` uses ``clip_bound * sigma``.
With per-row sensitivity ``2 * clip_bound`` the accountant's noise multiplier
is ``sigma`` under ``ALG1`` and ``sigma / 2`` under ``TEXT``.

Accounting is done at integer orders with the Poisson-subsampled Gaussian
bound and converted to (epsilon, delta)-DP with
``eps(alpha) + log(1/delta) / (alpha - 1)``.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .exceptions import ValidationError

DEFAULT_ORDERS = tuple(range(2, 65)) + (128, 256)


class NoiseConvention(str, enum.Enum):
    ALG1 = "alg1"
    TEXT = "text"


class Composition(str, enum.Enum):
    PER_ROW_N_FOLD = "perrow"
    SINGLE_QUERY = "single"


@dataclass(frozen=True)
class SanitizerConfig:
    clip_bound: float = 0.5
    sigma: float = 1.5
    convention: NoiseConvention = NoiseConvention.ALG1

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValidationError("clip bound must be positive", field="clip_bound")
        if not self.sigma >= 0:
            raise ValidationError("noise scale must be nonnegative", field="sigma")
        object.__setattr__(self, "convention", NoiseConvention(self.convention))

    @property
    def noise_std(self):
        factor = 2.0 if self.convention is NoiseConvention.ALG1 else 1.0
        return factor * self.clip_bound * self.sigma

    @property
    def sensitivity(self):
        return 2.0 * self.clip_bound

    @property
    def noise_multiplier(self):
        return self.noise_std / self.sensitivity


@dataclass(frozen=True)
class AccountingPolicy:
    q: float
    steps: int = 0
    composition: Composition = Composition.PER_ROW_N_FOLD
    batch_rows: int = 1

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValidationError(f"sampling ratio must lie in [0, 1], got {self.q}", field="q")
        if self.steps < 0:
            raise ValidationError("steps must be nonnegative", field="steps")
        object.__setattr__(self, "composition", Composition(self.composition))


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple
    epsilons: np.ndarray

    def __post_init__(self):
        eps = np.asarray(self.epsilons, dtype=float)
        if len(self.orders) != eps.shape[0]:
            raise ValueError("orders and epsilons differ in length")
        object.__setattr__(self, "orders", tuple(self.orders))
        object.__setattr__(self, "epsilons", eps)

    def __add__(self, other):
        return add_curves(self, other)

    def to_dict(self):
        return {"orders": [float(a) for a in self.orders],
                "epsilons": [float(e) for e in self.epsilons]}


# --- sanitization -----------------------------------------------------------

def clip_row(g, delta):
    """Scale ``g`` by ``min(delta / ||g||, 1)``."""
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g)
    if norm <= delta:
        return g.copy()
    return g * (delta / norm)


def clip_rows(G, delta):
    G = np.asarray(G, dtype=float)
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    factor = np.minimum(1.0, delta / np.maximum(norms, np.finfo(float).tiny))
    return G * factor


def sanitize(G, cfg, n, rng):
    """Clip every row of ``G``, then add noise to rows ``0..n-1``.

    ``rng`` is only consumed for the noised rows, so rows ``n:`` are a
    deterministic function of ``G``.
    """
    G = np.asarray(G, dtype=float)
    if n > G.shape[0]:
        raise ValueError(f"n={n} exceeds the {G.shape[0]} gradient rows")
    out = clip_rows(G, cfg.clip_bound)
    std = cfg.noise_std
    if std > 0 and n > 0:
        out[:n] += std * rng.standard_normal((n, G.shape[1]))
    return out


# --- RDP primitives ---------------------------------------------------------

def rdp_gaussian(alpha, sensitivity, std):
    """RDP of the Gaussian mechanism: ``alpha * S^2 / (2 std^2)``."""
    if not std > 0:
        raise ValueError("noise std must be positive")
    return alpha * sensitivity ** 2 / (2.0 * std ** 2)


def rdp_per_step(alpha, n, sigma, convention=NoiseConvention.ALG1):
    """n-fold composition of per-row releases without subsampling.

    ``2 alpha n / sigma^2`` under ``TEXT``; ``alpha n / (2 sigma^2)`` under ``ALG1``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    cfg = SanitizerConfig(clip_bound=1.0, sigma=sigma, convention=convention)
    return n * rdp_gaussian(alpha, cfg.sensitivity, cfg.noise_std)


def rdp_sampled_gaussian(q, z, alpha):
    """Integer-order RDP bound of the Poisson-subsampled Gaussian mechanism.

    ``log(sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1) / (2 z^2))) / (alpha-1)``
    """
    if int(alpha) != alpha or alpha < 2:
        raise ValueError(f"order must be an integer >= 2, got {alpha}")
    if not z > 0:
        raise ValueError("noise multiplier must be positive")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    if q == 0:
        return 0.0
    alpha = int(alpha)
    k = np.arange(alpha + 1, dtype=float)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    with np.errstate(divide="ignore"):
        terms = log_binom + xlogy(k, q) + xlogy(alpha - k, 1.0 - q) + k * (k - 1) / (2.0 * z * z)
    return float(max(logsumexp(terms), 0.0) / (alpha - 1))


def rdp_curve(q, z, orders=DEFAULT_ORDERS):
    return RdpCurve(orders, np.array([rdp_sampled_gaussian(q, z, a) for a in orders]))


def per_step_curve(q, sigma, convention=NoiseConvention.ALG1,
                   composition=Composition.PER_ROW_N_FOLD, n=1, orders=DEFAULT_ORDERS):
    """RDP curve of one training step.

    Each step is a Poisson-subsampled Gaussian release with noise multiplier
    ``sigma`` (ALG1) or ``sigma / 2`` (TEXT). ``PER_ROW_N_FOLD`` composes the
    ``n`` noised cross rows of a step; ``SINGLE_QUERY`` counts the step once.
    """
    z = SanitizerConfig(1.0, sigma, convention).noise_multiplier
    curve = rdp_curve(q, z, orders)
    if Composition(composition) is Composition.PER_ROW_N_FOLD:
        curve = compose(curve, n)
    return curve


def compose(curve, steps):
    """``steps``-fold composition (RDP adds linearly)."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    return RdpCurve(curve.orders, curve.epsilons * steps)


def add_curves(c1, c2):
    if tuple(c1.orders) != tuple(c2.orders):
        raise ValueError("curves are on different order grids")
    return RdpCurve(c1.orders, c1.epsilons + c2.epsilons)


def to_dp(curve, delta):
    """Convert to (epsilon, delta)-DP; returns ``(epsilon, best_order)``."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not curve.orders:
        raise ValueError("empty RDP curve")
    orders = np.asarray(curve.orders, dtype=float)
    eps = curve.epsilons + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(eps))
    return float(eps[best]), float(orders[best])


def calibrate_steps(q, z, delta, target_epsilon, policy=None, orders=DEFAULT_ORDERS,
                    max_steps=None):
    """Largest step count whose composed privacy cost stays within ``target_epsilon``.

    Parameters
    ----------
    q : float
        Poisson sampling ratio.
    z : float
        Noise multiplier (noise std over sensitivity); ``sigma`` under ALG1,
        ``sigma / 2`` under TEXT.
    delta, target_epsilon : float
    policy : AccountingPolicy, optional
        Supplies the composition mode and rows per step. Defaults to a
        single query per step.
    max_steps : int, optional
        Cap used when the budget never runs out (e.g. ``q = 0``).

    Returns
    -------
    int
        0 when even one step exceeds the target.
    """
    if not target_epsilon > 0:
        raise ValueError("target epsilon must be positive")
    curve = rdp_curve(q, z, orders)
    if policy is not None and policy.composition is Composition.PER_ROW_N_FOLD:
        curve = compose(curve, policy.batch_rows)
    return _max_steps(curve, delta, target_epsilon, max_steps)


def _max_steps(step_curve, delta, target_epsilon, max_steps=None):
    # eps_dp(T) = min_a (T e_a + c_a) is linear per order, so the horizon is
    # the best per-order floor((target - c_a) / e_a)
    orders = np.asarray(step_curve.orders, dtype=float)
    slack = target_epsilon - math.log(1.0 / delta) / (orders - 1.0)
    best = 0
    for e, s in zip(step_curve.epsilons, slack):
        if s < 0:
            continue
        if e <= 0:
            if max_steps is None:
                raise ValueError("privacy cost per step is zero; pass max_steps")
            return int(max_steps)
        best = max(best, int(math.floor(s / e)))
    # guard against rounding at the boundary
    while best > 0 and to_dp(compose(step_curve, best), delta)[0] > target_epsilon:
        best -= 1
    if max_steps is not None:
        best = min(best, int(max_steps))
    return best


class RdpAccountant:
    """Running privacy ledger over training steps.

    The reported epsilon depends only on ``(q, sigma, convention, n)`` and the
    number of steps taken.
    """

    def __init__(self, q, sigma, n, convention=NoiseConvention.ALG1,
                 composition=Composition.PER_ROW_N_FOLD, orders=DEFAULT_ORDERS):
        self.q = q
        self.sigma = sigma
        self.n = n
        self.convention = NoiseConvention(convention)
        self.composition = Composition(composition)
        self.step_curve = per_step_curve(q, sigma, self.convention, self.composition, n, orders)
        self.steps = 0

    def step(self, count=1):
        self.steps += count

    @property
    def curve(self):
        return compose(self.step_curve, self.steps)

    def epsilon(self, delta):
        return to_dp(self.curve, delta)[0]

    def max_steps(self, delta, target_epsilon, max_steps=None):
        return _max_steps(self.step_curve, delta, target_epsilon, max_steps)
