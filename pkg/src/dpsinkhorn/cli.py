"""Command-line interface.

Machine-readable results go to stdout as JSON; human-readable summaries go
to stderr. Exit codes: 0 success, 2 validation error, 3 I/O error,
4 numerical failure.
"""

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import evaluate, privacy, train
from .data import Dataset, load_dataset_ref
from .exceptions import DataFormatError, NumericalFailure, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, default=_json_default)
    sys.stdout.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _say(msg):
    print(msg, file=sys.stderr)



def load_data(path):
    """A dataset from an ``.npz`` file or a JSON dataset reference."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if path.suffix == ".json":
        try:
            ref = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path} is not valid JSON") from exc
        return load_dataset_ref(ref, path.parent)
    return Dataset.load(path)


def parse_label_spec(spec):
    """``"0=5,2=7"`` to a label vector with exactly those per-class counts."""
    labels = []
    for part in spec.split(","):
        try:
            cls, count = part.split("=")
            cls, count = int(cls), int(count)
        except ValueError:
            raise ValidationError(f"bad label spec entry {part!r}; expected CLASS=COUNT",
                                  field="labels") from None
        if cls < 0 or count < 0:
            raise ValidationError("label spec entries must be nonnegative", field="labels")
        labels += [cls] * count
    return np.array(labels, dtype=int)


# --- commands -----------------------------------------------------------------------

def cmd_train(args):
    config_path = Path(args.config)
    if not config_path.exists():
        raise FileNotFoundError(f"no such config: {config_path}")
    config = train.TrainConfig.from_json(config_path)
    if config.dataset is None:
        raise ValidationError("config has no dataset reference", field="dataset")
    dataset = load_dataset_ref(config.dataset, config_path.parent)
    state = None
    if args.resume:
        saved_config, state = train.resume(args.resume)
        if ckpt.config_hash(saved_config.to_dict()) != ckpt.config_hash(config.to_dict()):
            raise ValidationError("checkpoint was written with a different config")
        horizon, _ = train.planned_steps(config, len(dataset))
        if state.step >= horizon:
            _say(f"checkpoint is already at step {state.step} of {horizon}; nothing to do")
            _emit({"status": "complete", "step": state.step, "planned_steps": horizon})
            return EXIT_OK
    out = Path(args.out or "run")
    _, report = train.train(config, dataset, out_dir=out, state=state,
                            log_every=args.log_every)
    summary = report.summary()
    summary["checkpoint"] = str(out / "final.json")
    _emit(summary)
    _say(report.privacy_statement())
    return EXIT_OK


def cmd_generate(args):
    theta, _, manifest = ckpt.load_checkpoint(args.ckpt)
    labels = None
    count = args.count
    if args.labels:
        labels = parse_label_spec(args.labels)
        if count is not None and count != labels.size:
            raise ValidationError(f"--count {count} disagrees with label spec total {labels.size}",
                                  field="count")
        count = labels.size
        if labels.size and labels.max() >= theta.arch.n_classes:
            raise ValidationError("label spec names a class the generator does not have",
                                  field="labels")
    if count is None:
        raise ValidationError("--count or --labels is required", field="count")
    if count < 0:
        raise ValidationError("--count must be nonnegative", field="count")
    sampler = manifest.get("config", {}).get("latent_sampler", "uniform")
    data = evaluate.synthesize(theta, count, args.seed, labels, sampler)
    data.provenance["checkpoint"] = os.fspath(args.ckpt)
    data.save(args.out)
    result = {"out": args.out, "count": count,
              "per_class": np.bincount(data.labels, minlength=theta.arch.n_classes).tolist()}
    if args.grid:
        d = theta.arch.output_dim
        side = args.side or int(round(math.sqrt(d)))
        if side * side != d or count == 0:
            raise ValidationError(f"cannot tile {count} samples of dimension {d} as {side}x{side} images",
                                  field="grid")
        result["grid"] = {"path": args.grid, "shape": evaluate.export_grid(data.samples, side, args.grid)}
    _emit(result)
    _say(f"wrote {count} samples to {args.out}")
    return EXIT_OK


def cmd_account(args):
    policy = privacy.Composition(args.policy)
    convention = privacy.NoiseConvention(args.convention)
    z = privacy.SanitizerConfig(1.0, args.sigma, convention).noise_multiplier
    step_curve = privacy.per_step_curve(args.q, args.sigma, convention, policy, args.n)
    curve = privacy.compose(step_curve, args.steps)
    eps, order = privacy.to_dp(curve, args.delta)
    result = {"q": args.q, "sigma": args.sigma, "noise_multiplier": z, "convention": convention.value,
              "policy": policy.value, "n": args.n, "steps": args.steps, "delta": args.delta,
              "rdp": curve.to_dict(), "epsilon": eps, "best_order": order}
    if args.target_eps is not None:
        result["target_epsilon"] = args.target_eps
        result["max_steps"] = privacy.calibrate_steps(
            args.q, z, args.delta, args.target_eps,
            privacy.AccountingPolicy(args.q, args.steps, policy, args.n))
    _emit(result)
    msg = f"({eps:.4f}, {args.delta:g})-DP after {args.steps} steps at order {order:g}"
    if "max_steps" in result:
        msg += f"; {result['max_steps']} steps fit in epsilon {args.target_eps:g}"
    _say(msg)
    return EXIT_OK


def _synthetic_for(args, real):
    if args.samples:
        return load_data(args.samples)
    if not args.ckpt:
        raise ValidationError("one of --ckpt or --samples is required", field="ckpt")
    theta, _, _ = ckpt.load_checkpoint(args.ckpt)
    return theta


def cmd_eval(args):
    real = load_data(args.data)
    source = _synthetic_for(args, real)
    if isinstance(source, Dataset):
        synth = lambda r: source  # noqa: E731
        first = source
    else:
        count = args.count or len(real)
        synth = lambda r: evaluate.synthesize(source, count, args.seed + r)  # noqa: E731
        first = synth(0)
    result = {"divergence": evaluate.divergence_metric(first.samples, real.samples, lam=args.lam,
                                                       m_mix=args.m_mix, seed=args.seed)}
    if not args.no_utility:
        result["utility"] = evaluate.downstream_utility(synth, real, kind=args.kind,
                                                        repeats=args.repeats, seed=args.seed)
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2))
    _emit(result)
    _say(f"divergence {result['divergence']['value']:.4f} ({evaluate.METRIC_LABEL})")
    return EXIT_OK


def cmd_probe(args):
    real = load_data(args.data)
    theta, _, manifest = ckpt.load_checkpoint(args.ckpt)
    cfg = manifest.get("config") or {}
    try:
        grid = [float(p) for p in args.p_grid.split(",")]
    except ValueError:
        raise ValidationError(f"bad --p-grid {args.p_grid!r}", field="p_grid") from None
    base = train.TrainConfig.from_dict(cfg) if cfg else train.TrainConfig()
    settings = base.sinkhorn(real.n_classes)
    rows = evaluate.bias_variance_probe(theta, grid, args.batches, real, settings,
                                        n=base.batch_size, seed=args.seed)
    if args.out:
        evaluate.write_probe_csv(rows, args.out)
    _emit(rows)
    for r in rows:
        _say(f"p={r['p']:.2f} bias={r['bias']:.4g}+-{r['bias_se']:.2g} variance={r['variance']:.4f}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="dpsinkhorn", description=__doc__.split("\n")[0])
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a generator from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (default ./run)")
    p.add_argument("--resume", default=None, help="checkpoint manifest to resume from")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample a trained generator")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--labels", default=None, help='per-class counts, e.g. "0=5,2=7"')
    p.add_argument("--out", default="samples.npz")
    p.add_argument("--grid", default=None, help="also write a PGM tile sheet here")
    p.add_argument("--side", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("account", help="Renyi-DP accounting and step calibration")
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--convention", choices=["alg1", "text"], default="alg1")
    p.add_argument("--policy", choices=["perrow", "single"], default="perrow")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--target-eps", type=float, default=None)
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("eval", help="divergence and downstream accuracy")
    p.add_argument("--data", required=True, help="real held-out data (.npz or JSON reference)")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--samples", default=None, help="synthetic data file instead of a checkpoint")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=["logreg", "mlp"], default="logreg")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--lam", type=float, default=0.05)
    p.add_argument("--m-mix", type=float, default=1.0)
    p.add_argument("--no-utility", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="gradient bias/variance across debias fractions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--p-grid", default="0,0.2,0.4,0.7,1")
    p.add_argument("--batches", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ValidationError as exc:
        where = f" [{exc.field}]" if getattr(exc, "field", None) else ""
        _say(f"validation error{where}: {exc}")
        return EXIT_VALIDATION
    except NumericalFailure as exc:
        _say(f"numerical failure: {exc}")
        if exc.record:
            _say(json.dumps(exc.record, default=_json_default))
        return EXIT_NUMERICAL
    except (OSError, DataFormatError) as exc:
        _say(f"I/O error: {exc}")
        return EXIT_IO
    except ValueError as exc:
        _say(f"validation error: {exc}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
