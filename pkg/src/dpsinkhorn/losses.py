"""Sinkhorn training losses over split generated batches.

A generated batch of ``n + n'`` rows is split into a *cross* group (rows
``0..n-1``, compared against real data) and a *debias* group (rows
``n..n+n'-1``) with ``n' = floor(n * p)``. The semi-debiased loss is

    2 * W(X[0:n], Y) - W(X[0:n], X[n':n+n'])

so ``p = 0`` gives the biased loss and ``p = 1`` pairs the cross group with a
fully fresh batch. The real-data self term ``W(Y, Y')`` has no generator
gradient and is never computed.

Class conditioning appends ``alpha_c * onehot(label)`` to every sample before
costs are taken; gradients on those coordinates are dropped.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ot
from .exceptions import SkipStep


def n_debias(n, p):
    """Size of the debias group, ``floor(n * p)``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return int(math.floor(n * p))


@dataclass(frozen=True)
class SplitBatch:
    samples: np.ndarray
    n: int
    n_prime: int
    labels: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("cross group needs at least one row")
        if self.samples.shape[0] != self.n + self.n_prime:
            raise ValueError(
                f"batch has {self.samples.shape[0]} rows, expected n + n' = {self.n + self.n_prime}")
        if self.labels.shape != (self.samples.shape[0],):
            raise ValueError("one label per generated row is required")

    @classmethod
    def from_fraction(cls, samples, labels, n, p):
        return cls(np.asarray(samples, dtype=float), int(n), n_debias(n, p), np.asarray(labels))

    @property
    def cross(self):
        return self.samples[: self.n]

    @property
    def self_view(self):
        # rows n'..n+n'-1; overlaps the cross group when p < 1
        return self.samples[self.n_prime: self.n + self.n_prime]


@dataclass
class LossOutput:
    value: float
    grad_cross: np.ndarray
    grad_debias: np.ndarray
    cross_value: float = float("nan")
    self_value: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    @property
    def grad(self):
        """Full ``(n + n', d)`` gradient, cross rows first."""
        return np.vstack([self.grad_cross, self.grad_debias])


def conditional_augment(samples, labels, alpha_c, n_classes):
    """Append ``alpha_c * onehot(label)`` to each row."""
    samples = np.asarray(samples, dtype=float)
    labels = np.asarray(labels)
    if samples.shape[0] != labels.shape[0]:
        raise ValueError("samples and labels differ in length")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    if alpha_c < 0:
        raise ValueError("alpha_c must be nonnegative")
    onehot = np.zeros((labels.shape[0], n_classes))
    onehot[np.arange(labels.shape[0]), labels.astype(int)] = alpha_c
    return np.hstack([samples, onehot])


@dataclass(frozen=True)
class SinkhornSettings:
    """Shared knobs for every transport solve inside a loss."""

    lam: float = 0.05
    m_mix: float = 1.0
    alpha_c: float = 15.0
    n_classes: int = 1
    max_iters: int = ot.DEFAULT_MAX_ITERS
    tol: float = ot.DEFAULT_TOL
    grad_scale: float = 1.0


def _transport(A, B, s):
    value, plan, pot, _ = ot.entropic_ot(A, B, s.lam, s.m_mix, max_iters=s.max_iters, tol=s.tol)
    return value, plan, pot


def _two_term(X_cross, x_labels, X_self, s_labels, Y, y_labels, s):
    """Value and input gradients of ``2 W(Xc, Y) - W(Xc, Xs)``."""
    d = X_cross.shape[1]
    A = conditional_augment(X_cross, x_labels, s.alpha_c, s.n_classes)
    B = conditional_augment(X_self, s_labels, s.alpha_c, s.n_classes)
    R = conditional_augment(Y, y_labels, s.alpha_c, s.n_classes)

    w_cross, p_cross, pot_cross = _transport(A, R, s)
    w_self, p_self, pot_self = _transport(A, B, s)

    g_cross = ot.sample_gradient(A, R, p_cross, s.m_mix, s.grad_scale)[:, :d]
    g_self_a = ot.sample_gradient(A, B, p_self, s.m_mix, s.grad_scale)[:, :d]
    g_self_b = ot.sample_gradient(B, A, p_self.weights.T, s.m_mix, s.grad_scale)[:, :d]
    diagnostics = {
        "cross_iters": pot_cross.iterations, "cross_residual": pot_cross.residual,
        "self_iters": pot_self.iterations, "self_residual": pot_self.residual,
    }
    return w_cross, w_self, g_cross, g_self_a, g_self_b, diagnostics


def semi_debiased_loss(batch, Y, y_labels, settings):
    """Semi-debiased Sinkhorn loss and its gradient per generated row.

    Parameters
    ----------
    batch : SplitBatch
    Y : array of shape (m, d)
        Real samples. An empty batch raises :class:`SkipStep`.
    y_labels : array of shape (m,)
    settings : SinkhornSettings

    Returns
    -------
    LossOutput
        ``grad_debias`` only ever carries the self-term contribution: the
        cross term does not read rows ``n..n+n'-1``.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.shape[0] == 0:
        raise SkipStep("empty real batch")
    n, n_prime = batch.n, batch.n_prime
    w_cross, w_self, g_cross, g_self_a, g_self_b, diagnostics = _two_term(
        batch.cross, batch.labels[:n], batch.self_view, batch.labels[n_prime:n + n_prime],
        Y, y_labels, settings)

    grad = np.zeros_like(batch.samples)
    grad[:n] += 2.0 * g_cross - g_self_a
    grad[n_prime:n + n_prime] -= g_self_b
    return LossOutput(
        value=2.0 * w_cross - w_self,
        grad_cross=grad[:n],
        grad_debias=grad[n:],
        cross_value=w_cross,
        self_value=w_self,
        diagnostics=diagnostics,
    )


def biased_loss(X, x_labels, Y, y_labels, settings):
    """``2 W(X, Y) - W(X, X)``: the empirical Sinkhorn loss without its Y-only term."""
    batch = SplitBatch(np.asarray(X, dtype=float), len(X), 0, np.asarray(x_labels))
    return semi_debiased_loss(batch, Y, y_labels, settings)


def debiased_loss(X, x_labels, X_fresh, fresh_labels, Y, y_labels, settings):
    """``2 W(X, Y) - W(X, X')`` with an independent generated batch ``X'``."""
    if len(X_fresh) != len(X):
        raise ValueError("the fresh batch must match the cross batch in size")
    batch = SplitBatch(np.vstack([X, X_fresh]), len(X), len(X_fresh),
                       np.concatenate([x_labels, fresh_labels]))
    return semi_debiased_loss(batch, Y, y_labels, settings)
