"""Small fully-connected networks with hand-written reverse mode.

The generator maps ``[z, onehot(label)]`` through ReLU hidden layers to a tanh
output. The same layer primitives back the softmax classifiers used for
downstream evaluation. All functions keep the dtype of the parameters, so a
float32 generator trains in float32 while gradient checks run in float64.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rng_mod


@dataclass(frozen=True)
class Architecture:
    latent_dim: int = 12
    n_classes: int = 1
    hidden: tuple = (128, 128)
    output_dim: int = 2

    @property
    def input_dim(self):
        return self.latent_dim + self.n_classes

    @property
    def widths(self):
        return (self.input_dim, *self.hidden, self.output_dim)

    def to_dict(self):
        return {"latent_dim": self.latent_dim, "n_classes": self.n_classes,
                "hidden": list(self.hidden), "output_dim": self.output_dim}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["latent_dim"]), int(d["n_classes"]), tuple(d["hidden"]), int(d["output_dim"]))


@dataclass
class GeneratorParams:
    arch: Architecture
    weights: list
    biases: list

    def __post_init__(self):
        widths = self.arch.widths
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (widths[k], widths[k + 1]) or b.shape != (widths[k + 1],):
                raise ValueError(f"layer {k} has shape {W.shape}/{b.shape}, expected "
                                 f"({widths[k]}, {widths[k + 1]})")

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self):
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_arrays(self, arrays):
        return GeneratorParams(self.arch, list(arrays[0::2]), list(arrays[1::2]))

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])


def init_layers(widths, rng, dtype=np.float32):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
    return weights, biases


def init_generator(arch, seed=0, dtype=np.float32):
    weights, biases = init_layers(arch.widths, rng_mod.stream(seed, "init"), dtype)
    return GeneratorParams(arch, weights, biases)


def onehot(labels, n_classes, dtype=float):
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


# --- layer primitives ---------------------------------------------------------

def mlp_forward(weights, biases, X, output="linear"):
    """Affine layers with ReLU between them; returns ``(output, cache)``.

    ``output`` is ``"linear"`` or ``"tanh"``.
    """
    acts = [X]
    h = X
    last = len(weights) - 1
    for k, (W, b) in enumerate(zip(weights, biases)):
        pre = h @ W + b
        if k < last:
            h = np.maximum(pre, 0)
        elif output == "tanh":
            h = np.tanh(pre)
        else:
            h = pre
        acts.append(h)
    return h, acts


def mlp_backward(weights, acts, upstream, output="linear"):
    """Reverse pass for :func:`mlp_forward`.

    ``upstream`` is the gradient with respect to the network output. Returns
    ``(dW list, db list, d_input)``.
    """
    grad = upstream
    if output == "tanh":
        grad = grad * (1 - acts[-1] * acts[-1])
    dWs, dbs = [None] * len(weights), [None] * len(weights)
    for k in range(len(weights) - 1, -1, -1):
        dWs[k] = acts[k].T @ grad
        dbs[k] = grad.sum(axis=0)
        if k > 0:
            grad = (grad @ weights[k].T) * (acts[k] > 0)
    d_input = grad @ weights[0].T
    return dWs, dbs, d_input


# --- generator ----------------------------------------------------------------

def _generator_input(theta, z, labels):
    z = np.asarray(z, dtype=theta.dtype)
    if z.ndim != 2 or z.shape[1] != theta.arch.latent_dim:
        raise ValueError(f"latents must have shape (k, {theta.arch.latent_dim}), got {z.shape}")
    if len(labels) != z.shape[0]:
        raise ValueError("one label per latent row is required")
    return np.hstack([z, onehot(labels, theta.arch.n_classes, theta.dtype)])


def generate(theta, z, labels):
    """Forward pass ``tanh(MLP([z, onehot(labels)]))`` with outputs in (-1, 1)."""
    out, _ = mlp_forward(theta.weights, theta.biases, _generator_input(theta, z, labels), "tanh")
    return out


def generate_with_cache(theta, z, labels):
    return mlp_forward(theta.weights, theta.biases, _generator_input(theta, z, labels), "tanh")


def backprop_to_params(theta, z, labels, upstream, cache=None):
    """Gradient of ``<generate(theta, z, labels), upstream>`` with respect to theta.

    Returns a :class:`GeneratorParams` holding the gradients.
    """
    if cache is None:
        _, cache = generate_with_cache(theta, z, labels)
    upstream = np.asarray(upstream, dtype=theta.dtype)
    if upstream.shape != cache[-1].shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {cache[-1].shape}")
    dWs, dbs, _ = mlp_backward(theta.weights, cache, upstream, "tanh")
    return GeneratorParams(theta.arch, dWs, dbs)


# --- optimizers ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 2e-5
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, **hyper):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


def adam_update(state, params, grads):
    """One bias-corrected Adam step with decoupled weight decay.

    ``params`` and ``grads`` are equal-length lists of arrays. Returns
    ``(new_params, new_state)``; inputs are not modified.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        decayed = p * (1 - state.lr * state.weight_decay) if state.weight_decay else p
        new_params.append((decayed - step).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return new_params, replace(state, m=new_m, v=new_v, step=t)


@dataclass
class SgdState:
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 0.0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def sgd_update(state, params, grads):
    """Plain gradient step ``p <- p (1 - lr wd) - lr g``."""
    new_params = []
    for p, g in zip(params, grads):
        decayed = p * (1 - state.lr * state.weight_decay) if state.weight_decay else p
        new_params.append((decayed - state.lr * g).astype(p.dtype))
    return new_params, replace(state, step=state.step + 1)


# --- classifiers ----------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_grad(weights, biases, X, Y_onehot, l2=0.0):
    """Mean cross-entropy of a softmax MLP and its parameter gradients."""
    logits, acts = mlp_forward(weights, biases, X, "linear")
    probs = softmax(logits)
    N = X.shape[0]
    loss = -np.sum(Y_onehot * np.log(np.clip(probs, 1e-300, None))) / N
    dWs, dbs, _ = mlp_backward(weights, acts, (probs - Y_onehot) / N, "linear")
    if l2:
        loss += 0.5 * l2 * sum(float(np.sum(W * W)) for W in weights)
        dWs = [dW + l2 * W for dW, W in zip(dWs, weights)]
    return loss, dWs, dbs


def train_classifier(features, labels, kind="logreg", budget=500, n_classes=None, hidden=100,
                     lr=0.05, l2=1e-4, seed=0):
    """Fit a softmax classifier by full-batch gradient descent (Adam steps).

    ``kind`` is ``"logreg"`` (no hidden layer) or ``"mlp"`` (one ReLU layer
    of ``hidden`` units). Returns ``(weights, biases)``.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    if np.unique(y).size < 2:
        raise ValueError("classifier training needs at least two classes")
    widths = [X.shape[1]] + ([hidden] if kind == "mlp" else []) + [n_classes]
    if kind not in ("logreg", "mlp"):
        raise ValueError(f"unknown classifier kind {kind!r}")
    weights, biases = init_layers(widths, rng_mod.stream(seed, "init"), dtype=float)
    if kind == "logreg":
        weights = [np.zeros_like(W) for W in weights]
        biases = [np.zeros_like(b) for b in biases]
    Y = onehot(y, n_classes)
    params = weights + biases
    state = AdamState.zeros_like(params, lr=lr, weight_decay=0.0)
    nw = len(weights)
    for _ in range(budget):
        _, dWs, dbs = cross_entropy_grad(params[:nw], params[nw:], X, Y, l2)
        params, state = adam_update(state, params, dWs + dbs)
    return params[:nw], params[nw:]


def classifier_predict_proba(weights, biases, X):
    logits, _ = mlp_forward(weights, biases, np.asarray(X, dtype=float), "linear")
    return softmax(logits)
