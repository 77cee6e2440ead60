"""The DP-Sinkhorn training loop.

One step:

1. Poisson-sample a real batch with ratio ``q``.
2. Draw ``n + n'`` latents and uniform labels, run the generator.
3. Take the semi-debiased loss gradient with respect to the generated rows.
4. Clip every row, add noise to the ``n`` cross rows (when ``dp_enabled``).
5. Backpropagate into the generator and take an optimizer step.

The privacy ledger advances on every step, including steps whose real batch
came out empty (those skip the update). With a privacy budget the horizon is
computed before training starts, so the ledger cannot overshoot.
"""

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np

from . import checkpoint as ckpt
from . import losses, nn, privacy
from . import rng as rng_mod
from .data import Dataset, poisson_sample
from .exceptions import NumericalFailure, SkipStep, ValidationError

log = logging.getLogger(__name__)

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "DP-Sinkhorn training config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "batch_size": {"type": "integer", "minimum": 1},
        "q": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "clip_bound": {"type": "number", "exclusiveMinimum": 0},
        "noise_convention": {"enum": ["alg1", "text"]},
        "composition": {"enum": ["perrow", "single"]},
        "lam": {"type": "number", "exclusiveMinimum": 0},
        "p": {"type": "number", "minimum": 0, "maximum": 1},
        "m_mix": {"type": "number", "minimum": 0},
        "alpha_c": {"type": "number", "minimum": 0},
        "latent_dim": {"type": "integer", "minimum": 1},
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "latent_sampler": {"enum": ["uniform", "normal"]},
        "optimizer": {"enum": ["adam", "sgd"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "steps": {"type": "integer", "minimum": 0},
        "target_epsilon": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "dataset": {"type": ["object", "null"]},
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "dp_enabled": {"type": "boolean"},
        "perturbation_point": {"enum": ["image_grad"]},
        "sinkhorn_iters": {"type": "integer", "minimum": 1},
        "sinkhorn_tol": {"type": "number", "exclusiveMinimum": 0},
        "grad_scale": {"oneOf": [{"enum": ["batch"]}, {"type": "number", "exclusiveMinimum": 0}]},
    },
}


@dataclass
class TrainConfig:
    batch_size: int = 50
    q: float = None
    sigma: float = 1.5
    clip_bound: float = 0.5
    noise_convention: str = "alg1"
    composition: str = "perrow"
    lam: float = 0.05
    p: float = 0.4
    m_mix: float = 1.0
    alpha_c: float = 15.0
    latent_dim: int = 12
    hidden: tuple = (128, 128)
    latent_sampler: str = "uniform"
    optimizer: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 2e-5
    steps: int = 1000
    target_epsilon: float = 10.0
    delta: float = 1e-5
    seed: int = 0
    dataset: dict = None
    checkpoint_every: int = 0
    dp_enabled: bool = True
    perturbation_point: str = "image_grad"
    sinkhorn_iters: int = 500
    sinkhorn_tol: float = 1e-6
    grad_scale: object = "batch"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        validate_config(self.to_dict())

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        validate_config(d)
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def sampling_ratio(self, M):
        q = self.q if self.q is not None else self.batch_size / M
        if not 0 <= q <= 1:
            raise ValidationError(f"sampling ratio {q} outside [0, 1]", field="q")
        return q

    @property
    def n_prime(self):
        return losses.n_debias(self.batch_size, self.p)

    def sanitizer(self):
        return privacy.SanitizerConfig(self.clip_bound, self.sigma, self.noise_convention)

    def sinkhorn(self, n_classes):
        scale = self.batch_size if self.grad_scale == "batch" else float(self.grad_scale)
        return losses.SinkhornSettings(self.lam, self.m_mix, self.alpha_c, n_classes,
                                       self.sinkhorn_iters, self.sinkhorn_tol, scale)

    def accountant(self, M):
        return privacy.RdpAccountant(self.sampling_ratio(M), self.sigma, self.batch_size,
                                     self.noise_convention, self.composition)


_VALIDATOR = jsonschema.Draft202012Validator(CONFIG_SCHEMA)


def validate_config(d):
    """Raise :class:`ValidationError` naming the first offending field."""
    d = dict(d)
    if isinstance(d.get("hidden"), tuple):
        d["hidden"] = list(d["hidden"])
    errors = sorted(_VALIDATOR.iter_errors(d), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        name = ".".join(str(p) for p in err.path) or (
            err.message.split("'")[1] if "'" in err.message else None)
        raise ValidationError(f"config field {name!r}: {err.message}", field=name)


@dataclass
class TrainState:
    theta: nn.GeneratorParams
    opt: object
    step: int = 0


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    epsilon: float = math.inf
    delta: float = 1e-5
    convention: str = "alg1"
    composition: str = "perrow"
    steps_taken: int = 0
    planned_steps: int = 0
    stop_reason: str = ""

    def privacy_statement(self):
        if math.isinf(self.epsilon):
            return "non-private run: no differential privacy guarantee"
        return (f"({self.epsilon:.4f}, {self.delta:g})-DP after {self.steps_taken} steps "
                f"[noise convention {self.convention}, composition {self.composition}]")

    def summary(self):
        d = {k: v for k, v in asdict(self).items() if k != "records"}
        d["epsilon"] = None if math.isinf(self.epsilon) else self.epsilon
        d["privacy_statement"] = self.privacy_statement()
        return d


def init_state(config, n_classes, output_dim):
    arch = nn.Architecture(config.latent_dim, n_classes, tuple(config.hidden), output_dim)
    theta = nn.init_generator(arch, config.seed)
    if config.optimizer == "adam":
        opt = nn.AdamState.zeros_like(theta.arrays(), lr=config.lr, beta1=config.beta1,
                                      beta2=config.beta2, weight_decay=config.weight_decay)
    else:
        opt = nn.SgdState(lr=config.lr, weight_decay=config.weight_decay)
    return TrainState(theta, opt, 0)


def sample_latents(config, k, n_classes, rng):
    if config.latent_sampler == "uniform":
        z = rng.random((k, config.latent_dim))
    else:
        z = rng.standard_normal((k, config.latent_dim))
    labels = rng.integers(0, n_classes, k)
    return z, labels


def step_gradients(theta, config, dataset, step, settings=None):
    """Image gradients for step ``step`` before sanitization.

    Returns ``(z, labels, cache, loss_output, real_idx)``; raises
    :class:`SkipStep` on an empty real batch.
    """
    settings = settings or config.sinkhorn(dataset.n_classes)
    seed = config.seed
    idx = poisson_sample(len(dataset), config.sampling_ratio(len(dataset)),
                         rng_mod.stream(seed, "sample", step))
    k = config.batch_size + config.n_prime
    z, labels = sample_latents(config, k, dataset.n_classes, rng_mod.stream(seed, "latent", step))
    X, cache = nn.generate_with_cache(theta, z, labels)
    if idx.size == 0:
        raise SkipStep("empty real batch")
    batch = losses.SplitBatch(X.astype(float), config.batch_size, config.n_prime, labels)
    out = losses.semi_debiased_loss(batch, dataset.samples[idx], dataset.labels[idx], settings)
    return z, labels, cache, out, idx


def train_step(state, config, dataset, settings=None):
    """Advance ``state`` by one step; returns ``(new_state, record)``."""
    step = state.step + 1
    record = {"step": step, "real_batch": 0, "skipped": False}
    try:
        z, labels, cache, out, idx = step_gradients(state.theta, config, dataset, step, settings)
    except SkipStep:
        record.update(skipped=True, loss=None)
        return TrainState(state.theta, state.opt, step), record

    if not math.isfinite(out.value):
        record.update(loss=out.value, **out.diagnostics)
        raise NumericalFailure(f"non-finite loss at step {step}", iteration=step, record=record)
    G = out.grad
    norms = np.linalg.norm(G, axis=1)
    record.update(real_batch=int(idx.size), loss=float(out.value),
                  grad_norm_mean=float(norms.mean()), grad_norm_max=float(norms.max()),
                  sinkhorn_iters=max(out.diagnostics["cross_iters"], out.diagnostics["self_iters"]))
    if config.dp_enabled:
        clipped_max = float(np.linalg.norm(privacy.clip_rows(G, config.clip_bound), axis=1).max())
        G = privacy.sanitize(G, config.sanitizer(), config.batch_size,
                             rng_mod.stream(config.seed, "noise", step))
        record["clipped_norm_max"] = clipped_max

    grads = nn.backprop_to_params(state.theta, z, labels, G, cache=cache)
    update = nn.adam_update if isinstance(state.opt, nn.AdamState) else nn.sgd_update
    params, opt = update(state.opt, state.theta.arrays(), grads.arrays())
    new_theta = state.theta.with_arrays(params)
    if not all(np.all(np.isfinite(p)) for p in params):
        raise NumericalFailure(f"non-finite parameters after step {step}", iteration=step, record=record)
    return TrainState(new_theta, opt, step), record


def planned_steps(config, M):
    """Step horizon: ``config.steps``, cut to the privacy budget when one is set."""
    if not config.dp_enabled or config.target_epsilon is None:
        return config.steps, "T_max reached"
    budget = config.accountant(M).max_steps(config.delta, config.target_epsilon,
                                            max_steps=config.steps)
    if budget < config.steps:
        return budget, "budget reached"
    return config.steps, "T_max reached"


def train(config, dataset, out_dir=None, state=None, log_every=0):
    """Run training to the planned horizon.

    Parameters
    ----------
    config : TrainConfig
    dataset : Dataset
    out_dir : path, optional
        Receives ``report.jsonl``, ``summary.json`` and checkpoints every
        ``config.checkpoint_every`` steps plus a final one.
    state : TrainState, optional
        Resume from this state (e.g. loaded from a checkpoint).

    Returns
    -------
    (GeneratorParams, TrainReport)
    """
    if not isinstance(dataset, Dataset):
        raise TypeError("dataset must be a Dataset")
    M = len(dataset)
    horizon, reason = planned_steps(config, M)
    state = state or init_state(config, dataset.n_classes, dataset.dim)
    accountant = config.accountant(M) if config.dp_enabled else None
    report = TrainReport(delta=config.delta, convention=config.noise_convention,
                         composition=config.composition, planned_steps=horizon)
    settings = config.sinkhorn(dataset.n_classes)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "report.jsonl", "a" if state.step else "w")
    cfg_dict = config.to_dict()
    if accountant is not None:
        accountant.step(state.step)
    try:
        while state.step < horizon:
            state, record = train_step(state, config, dataset, settings)
            if accountant is not None:
                accountant.step()
                record["epsilon"] = accountant.epsilon(config.delta)
            report.records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if log_every and state.step % log_every == 0:
                log.info("step %d loss %s", state.step, record.get("loss"))
            if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save(out_dir / f"step_{state.step:07d}.json", state, config)
    finally:
        if log_fh is not None:
            log_fh.close()

    report.steps_taken = state.step
    report.stop_reason = reason
    if accountant is not None:
        report.epsilon = accountant.epsilon(config.delta)
    if out_dir is not None:
        save(out_dir / "final.json", state, config)
        (out_dir / "summary.json").write_text(json.dumps(report.summary(), indent=2))
    return state.theta, report


def save(path, state, config):
    return ckpt.save_checkpoint(path, state.theta, state.opt, state.step, config.seed, config.to_dict())


def resume(path):
    """Load ``(config, state)`` from a checkpoint manifest."""
    theta, opt, manifest = ckpt.load_checkpoint(path)
    config = TrainConfig.from_dict(manifest["config"])
    if ckpt.config_hash(config.to_dict()) != manifest["config_hash"]:
        raise ValidationError("checkpoint config hash mismatch")
    return config, TrainState(theta, opt, manifest["step"])


def evaluate_config(config, **overrides):
    """Copy of ``config`` with fields replaced (validated)."""
    d = copy.deepcopy(config.to_dict())
    unknown = set(overrides) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ValidationError(f"unknown config fields {sorted(unknown)}")
    d.update(overrides)
    return TrainConfig.from_dict(d)
