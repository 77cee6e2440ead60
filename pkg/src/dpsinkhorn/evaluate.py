"""Utility and quality measurements for trained generators.

The quality proxy is an empirical Sinkhorn divergence between synthetic and
held-out real samples. It is not an FID and its values are not comparable to
FID numbers.
"""

import csv
import math

import numpy as np

from . import losses, nn, ot
from . import rng as rng_mod
from .data import Dataset, denormalize, poisson_sample
from .exceptions import DataFormatError, SkipStep, ValidationError

METRIC_LABEL = "empirical Sinkhorn divergence (not FID)"


# --- downstream utility -------------------------------------------------------

def classifier_accuracy(train, test, kind="logreg", budget=500, seed=0):
    weights, biases = nn.train_classifier(train.samples, train.labels, kind=kind, budget=budget,
                                           n_classes=max(train.n_classes, test.n_classes), seed=seed)
    pred = nn.classifier_predict_proba(weights, biases, test.samples).argmax(axis=1)
    return float(np.mean(pred == test.labels))


def downstream_utility(synthetic, real_test, kind="logreg", repeats=5, budget=500, seed=0):
    """Accuracy on ``real_test`` of classifiers fitted to synthetic data.

    Parameters
    ----------
    synthetic : Dataset or callable
        Either a fixed synthetic set, or ``synthetic(r)`` returning a fresh
        synthetic :class:`Dataset` for repetition ``r``.
    real_test : Dataset
    kind : {"logreg", "mlp"}
    repeats : int
        Synthesis-and-fit repetitions; the mean accuracy is reported.

    Returns
    -------
    dict with ``accuracy`` (the mean), ``accuracies`` and ``std``.
    """
    accs = []
    for r in range(repeats):
        data = synthetic(r) if callable(synthetic) else synthetic
        if data.samples.shape[1] != real_test.samples.shape[1]:
            raise ValidationError("synthetic and test samples differ in dimension")
        if data.n_classes > real_test.n_classes:
            raise ValidationError("synthetic data has classes absent from the test set")
        if np.unique(data.labels).size < 2:
            raise ValidationError("synthetic data contains fewer than two classes")
        accs.append(classifier_accuracy(data, real_test, kind, budget, seed=seed + r))
    return {"accuracy": float(np.mean(accs)), "accuracies": accs, "std": float(np.std(accs)),
            "kind": kind, "repeats": repeats}


def synthesize(theta, count, seed, labels=None, latent_sampler="uniform"):
    """Draw ``count`` labelled samples; labels are uniform unless given."""
    r = rng_mod.stream(seed, "generate")
    k = theta.arch.latent_dim
    z = r.random((count, k)) if latent_sampler == "uniform" else r.standard_normal((count, k))
    if labels is None:
        labels = r.integers(0, theta.arch.n_classes, count)
    labels = np.asarray(labels, dtype=int)
    X = nn.generate(theta, z, labels).astype(float) if count else np.zeros((0, theta.arch.output_dim))
    return Dataset(np.clip(X, -1, 1), labels, theta.arch.n_classes,
                   {"kind": "synthetic", "seed": int(seed)})


# --- divergence -----------------------------------------------------------------

def _ot_value(A, B, lam, m_mix, max_iters, tol):
    return ot.entropic_ot(A, B, lam, m_mix, max_iters=max_iters, tol=tol)[0]


def divergence_metric(X, Y, lam=0.05, m_mix=1.0, draws=10, size=100, seed=0,
                      max_iters=500, tol=1e-6):
    """Three-term empirical Sinkhorn divergence ``2W(X, Y) - W(X, X') - W(Y, Y')``.

    Each draw splits both sets at random into halves of ``size`` rows (or
    fewer when the sets are small) and evaluates the cross term on the first
    halves and the self terms between halves. Sets of equal length share one
    permutation, so ``X is Y`` yields exactly zero.

    Returns
    -------
    dict with ``value`` (the mean over draws), ``std`` over draws and ``values``.
    """
    X = np.asarray(X.samples if isinstance(X, Dataset) else X, dtype=float)
    Y = np.asarray(Y.samples if isinstance(Y, Dataset) else Y, dtype=float)
    if len(X) < 2 or len(Y) < 2:
        raise ValidationError("divergence needs at least two samples per set")
    k = min(len(X) // 2, len(Y) // 2, size)
    values = []
    for d in range(draws):
        r = rng_mod.stream(seed, "eval", d)
        px = r.permutation(len(X))
        py = px if len(Y) == len(X) else r.permutation(len(Y))
        X1, X2 = X[px[:k]], X[px[k:2 * k]]
        Y1, Y2 = Y[py[:k]], Y[py[k:2 * k]]
        cross = _ot_value(X1, Y2, lam, m_mix, max_iters, tol)
        values.append(2 * cross - _ot_value(X1, X2, lam, m_mix, max_iters, tol)
                      - _ot_value(Y1, Y2, lam, m_mix, max_iters, tol))
    values = np.array(values)
    return {"value": float(values.mean()), "std": float(values.std(ddof=1)) if draws > 1 else 0.0,
            "values": values.tolist(), "metric": METRIC_LABEL, "size": int(k)}


# --- bias / variance probe ---------------------------------------------------------

def _flat(params):
    return np.concatenate([a.ravel().astype(float) for a in params.arrays()])


def _batch_gradients(theta, dataset, p_grid, settings, n, q, rng_real, rng_gen):
    # one (real, generated) batch pair shared by every p: the debias rows
    # for p are a prefix of those for p = 1
    idx = poisson_sample(len(dataset), q, rng_real)
    if idx.size == 0:
        raise SkipStep("empty real batch")
    width = n + max(losses.n_debias(n, p) for p in p_grid)
    z = rng_gen.random((width, theta.arch.latent_dim))
    labels = rng_gen.integers(0, dataset.n_classes, width)
    Y, y_labels = dataset.samples[idx], dataset.labels[idx]
    out = []
    for p in p_grid:
        k = n + losses.n_debias(n, p)
        X, cache = nn.generate_with_cache(theta, z[:k], labels[:k])
        batch = losses.SplitBatch(X.astype(float), n, k - n, labels[:k])
        loss = losses.semi_debiased_loss(batch, Y, y_labels, settings)
        out.append(_flat(nn.backprop_to_params(theta, z[:k], labels[:k], loss.grad, cache=cache)))
    return out


def probe_gradients(theta, p_grid, batches, dataset, settings=None, n=50, q=None, seed=0):
    """Noise-free parameter gradients, shape ``(batches, n_params)`` per ``p``.

    Every batch pair is shared across the grid (common random numbers), so
    differences between ``p`` values are estimated with paired samples.
    Batches whose Poisson draw is empty are redrawn.
    """
    p_grid = [float(p) for p in p_grid]
    settings = settings or losses.SinkhornSettings(n_classes=dataset.n_classes, grad_scale=n)
    q = n / len(dataset) if q is None else q
    rows, b = [], 0
    while len(rows) < batches:
        try:
            rows.append(_batch_gradients(theta, dataset, p_grid, settings, n, q,
                                         rng_mod.stream(seed, "probe", 2 * b),
                                         rng_mod.stream(seed, "probe", 2 * b + 1)))
        except SkipStep:
            pass
        b += 1
    return {p: np.array([r[i] for r in rows]) for i, p in enumerate(p_grid)}


def summarize_probe(grads):
    """Rows of ``(p, bias, bias_se, variance)`` from :func:`probe_gradients` output.

    ``bias = ||mean(G_p - G_1)||`` with a delta-method standard error over the
    paired differences; ``variance`` is the trace of the sample covariance of
    ``G_p`` divided by that of ``G_0``.
    """
    G1 = grads[1.0]
    var0 = grads[0.0].var(axis=0, ddof=1).sum()
    rows = []
    for p, G in grads.items():
        D = G - G1
        diff = D.mean(axis=0)
        bias = float(np.linalg.norm(diff))
        se = _norm_se(D, diff, bias)
        var = G.var(axis=0, ddof=1).sum()
        rows.append({"p": p, "bias": bias, "bias_se": se, "variance": float(var / var0),
                     "variance_raw": float(var), "batches": int(G.shape[0])})
    return rows


def _norm_se(D, diff, norm):
    if norm == 0:
        return 0.0
    proj = D @ (diff / norm)
    return float(proj.std(ddof=1) / math.sqrt(D.shape[0]))


def bias_gap(grads, p_lo, p_hi):
    """``bias(p_lo) - bias(p_hi)`` and its paired delta-method standard error."""
    G1 = grads[1.0]
    D_lo, D_hi = grads[float(p_lo)] - G1, grads[float(p_hi)] - G1
    d_lo, d_hi = D_lo.mean(axis=0), D_hi.mean(axis=0)
    n_lo, n_hi = np.linalg.norm(d_lo), np.linalg.norm(d_hi)
    u_lo = d_lo / n_lo if n_lo else np.zeros_like(d_lo)
    u_hi = d_hi / n_hi if n_hi else np.zeros_like(d_hi)
    s = D_lo @ u_lo - D_hi @ u_hi
    return float(n_lo - n_hi), float(s.std(ddof=1) / math.sqrt(len(s)))


def variance_gap(grads, p_lo, p_hi):
    """``trace Var(G_hi) - trace Var(G_lo)`` and a paired standard error."""
    G_lo, G_hi = grads[float(p_lo)], grads[float(p_hi)]
    B = G_lo.shape[0]
    s = (np.sum((G_hi - G_hi.mean(axis=0)) ** 2, axis=1)
         - np.sum((G_lo - G_lo.mean(axis=0)) ** 2, axis=1)) * (B / (B - 1))
    return float(s.mean()), float(s.std(ddof=1) / math.sqrt(B))


def bias_variance_probe(theta, p_grid, batches, dataset, settings=None, n=50, q=None, seed=0):
    """Bias and normalized variance of parameter gradients across debias fractions.

    For each ``p`` the gradient of the semi-debiased loss (no clipping or
    noise) is estimated on ``batches`` (real, generated) batch pairs. The
    mean at ``p = 1`` serves as ground truth and the variance is normalized
    by its value at ``p = 0``; see :func:`summarize_probe`.
    """
    p_grid = [float(p) for p in p_grid]
    if batches < 100:
        raise ValidationError("the probe needs at least 100 batches", field="batches")
    if 0.0 not in p_grid or 1.0 not in p_grid:
        raise ValidationError("p_grid must contain both 0 and 1", field="p_grid")
    return summarize_probe(probe_gradients(theta, p_grid, batches, dataset, settings, n, q, seed))


def write_probe_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# --- PGM sheets -----------------------------------------------------------------------

def grid_shape(k, side, pad=1):
    """``(height, width)`` of a sheet of ``k`` tiles.

    Tiles fill ``cols = ceil(sqrt(k))`` columns and ``ceil(k / cols)`` rows,
    with ``pad`` separator pixels between neighbouring tiles (none at the border).
    """
    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    return rows * side + (rows - 1) * pad, cols * side + (cols - 1) * pad


def export_grid(images, side, path, pad=1, background=0):
    """Write images in [-1, 1] as a binary PGM tile sheet.

    Pixels go through :func:`dpsinkhorn.data.denormalize`, which rounds half
    down (0.0 becomes byte 127). Separators and unused cells hold ``background``.
    """
    images = np.asarray(images, dtype=float)
    if images.ndim != 2 or images.shape[0] == 0 or images.shape[1] != side * side:
        raise ValueError(f"expected (k >= 1, {side * side}) images, got {images.shape}")
    k = images.shape[0]
    cols = math.ceil(math.sqrt(k))
    height, width = grid_shape(k, side, pad)
    sheet = np.full((height, width), background, dtype=np.uint8)
    tiles = denormalize(images).reshape(k, side, side)
    for t in range(k):
        r, c = divmod(t, cols)
        y, x = r * (side + pad), c * (side + pad)
        sheet[y:y + side, x:x + side] = tiles[t]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(sheet.tobytes())
    return sheet.shape


def read_pgm(path):
    """Read a binary (P5) 8-bit PGM into a ``(height, width)`` uint8 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DataFormatError("not an 8-bit binary PGM")
    width, height = int(tokens[1]), int(tokens[2])
    data = buf[pos + 1:pos + 1 + width * height]
    if len(data) != width * height:
        raise DataFormatError("truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)
