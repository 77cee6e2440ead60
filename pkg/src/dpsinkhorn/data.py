"""Datasets: IDX image files, synthetic Gaussian mixtures, Poisson batches.

Every :class:`Dataset` holds samples in [-1, 1] and integer labels in
``0..n_classes-1``. Byte images map to that range with ``v / 127.5 - 1``.
"""

import io
import json
import math
import os
import struct
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataFormatError, ValidationError


class BadMagicError(DataFormatError):
    pass


class UnsupportedTypeError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    def __init__(self, expected, actual):
        super().__init__(f"IDX payload truncated: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise ValidationError("samples must be (M, d) with one label per row")
        if self.samples.size and (self.samples.min() < -1 or self.samples.max() > 1):
            raise ValidationError("samples must lie in [-1, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in 0..{self.n_classes - 1}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]

    def subset(self, idx):
        return Dataset(self.samples[idx], self.labels[idx], self.n_classes, dict(self.provenance))

    def save(self, path):
        """Write an ``.npz`` archive; identical datasets give identical bytes."""
        arrays = {"samples": self.samples, "labels": self.labels,
                  "n_classes": np.array(self.n_classes),
                  "provenance": np.array(json.dumps(self.provenance, sort_keys=True))}
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                            buf.getvalue())

    @classmethod
    def load(cls, path):
        try:
            with np.load(path, allow_pickle=False) as z:
                return cls(z["samples"], z["labels"], int(z["n_classes"]),
                           json.loads(str(z["provenance"])))
        except (KeyError, ValueError, zipfile.BadZipFile) as exc:
            raise DataFormatError(f"cannot read dataset file {path}: {exc}") from exc


# --- sampling ---------------------------------------------------------------

def poisson_sample(M, q, rng):
    """Indices ``0..M-1`` each kept independently with probability ``q``."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    return np.flatnonzero(rng.random(M) < q)


# --- IDX ----------------------------------------------------------------------

_IDX_TYPES = {0x08: np.dtype(np.uint8)}


def parse_idx(buf):
    """Parse an IDX byte string into an ndarray."""
    if len(buf) < 4:
        raise TruncatedPayloadError(4, len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise BadMagicError(f"bad IDX magic bytes {buf[0]:#04x} {buf[1]:#04x}")
    type_code, ndim = buf[2], buf[3]
    if type_code not in _IDX_TYPES:
        raise UnsupportedTypeError(f"unsupported IDX type code {type_code:#04x}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedPayloadError(header, len(buf))
    shape = struct.unpack(f">{ndim}I", buf[4:header]) if ndim else ()
    dtype = _IDX_TYPES[type_code]
    expected = header + math.prod(shape) * dtype.itemsize
    if len(buf) < expected:
        raise TruncatedPayloadError(expected, len(buf))
    return np.frombuffer(buf, dtype=dtype, count=math.prod(shape), offset=header).reshape(shape).copy()


def read_idx(path):
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are written")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


# --- pixel scaling --------------------------------------------------------------

def normalize(raw):
    """Bytes in [0, 255] to floats in [-1, 1]."""
    return np.asarray(raw, dtype=float) / 127.5 - 1.0


def denormalize(values):
    """Inverse of :func:`normalize`, rounding half down and clipping to bytes.

    Rounding half down keeps 0.0 at byte 127.
    """
    scaled = (np.asarray(values, dtype=float) + 1.0) * 127.5
    return np.clip(np.ceil(scaled - 0.5), 0, 255).astype(np.uint8)


def _linear_weights(src, dst):
    # half-pixel-centre bilinear interpolation matrix of shape (dst, src)
    W = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    W[np.arange(dst), lo] += 1 - frac
    W[np.arange(dst), hi] += frac
    return W


def downsample(images, side=8):
    """Bilinear resize of square images ``(k, s, s)`` to ``(k, side * side)``."""
    images = np.asarray(images, dtype=float)
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ValueError(f"expected square images (k, s, s), got {images.shape}")
    W = _linear_weights(images.shape[1], side)
    out = np.einsum("ai,kij,bj->kab", W, images, W)
    return out.reshape(images.shape[0], side * side)


def load_idx_dataset(images_path, labels_path, side=None, n_classes=None):
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(int)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise DataFormatError("IDX images must be (k, s, s) with one label per image")
    if side is not None and side != images.shape[1]:
        samples = np.clip(normalize(downsample(images, side)), -1, 1)
    else:
        samples = normalize(images.reshape(images.shape[0], -1))
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    return Dataset(samples, labels, n_classes,
                   {"kind": "idx", "images": os.fspath(images_path), "side": side or images.shape[1]})


# --- Gaussian mixtures ----------------------------------------------------------

@dataclass(frozen=True)
class MixtureComponent:
    mean: tuple
    cov: tuple
    label: int
    weight: float


def parse_mixture_spec(spec):
    """Read components from a list of dicts (the JSON mixture document)."""
    if isinstance(spec, dict):
        spec = spec["components"]
    comps = []
    for i, c in enumerate(spec):
        try:
            comps.append(MixtureComponent(tuple(map(float, c["mean"])),
                                          tuple(tuple(map(float, r)) for r in c["cov"]),
                                          int(c["label"]), float(c["weight"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"mixture component {i} is malformed: {exc}",
                                  field=f"components[{i}]") from exc
    return comps


def load_mixture_spec(path):
    with open(path) as fh:
        return parse_mixture_spec(json.load(fh))


def synth_mixture(components, count, rng, transform=None):
    """Labeled Gaussian-mixture draws mapped affinely into [-1, 1]^d.

    The affine map ``x -> (x - center) / scale`` is fitted so the draws span
    exactly [-1, 1] per coordinate and recorded in ``provenance``. Passing a
    recorded ``transform`` reuses it (e.g. for held-out draws); points that
    fall outside are clipped.
    """
    components = parse_mixture_spec(components) if not isinstance(components[0], MixtureComponent) else components
    weights = np.array([c.weight for c in components])
    if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
        raise ValidationError("mixture weights must be nonnegative and sum to 1", field="weight")
    chols = []
    for i, c in enumerate(components):
        cov = np.array(c.cov)
        try:
            chols.append(np.linalg.cholesky(cov))
        except np.linalg.LinAlgError:
            raise ValidationError(f"component {i} covariance is not positive definite",
                                  field=f"components[{i}].cov") from None
    counts = rng.multinomial(count, weights)
    dim = len(components[0].mean)
    samples = np.empty((count, dim))
    labels = np.empty(count, dtype=int)
    start = 0
    for c, L, k in zip(components, chols, counts):
        samples[start:start + k] = np.array(c.mean) + rng.standard_normal((k, dim)) @ L.T
        labels[start:start + k] = c.label
        start += k
    order = rng.permutation(count)
    samples, labels = samples[order], labels[order]

    if transform is None:
        lo, hi = samples.min(axis=0), samples.max(axis=0)
        center = (lo + hi) / 2
        scale = np.where(hi > lo, (hi - lo) / 2, 1.0)
        transform = {"center": center.tolist(), "scale": scale.tolist()}
    mapped = (samples - np.array(transform["center"])) / np.array(transform["scale"])
    mapped = np.clip(mapped, -1.0, 1.0)
    n_classes = max(c.label for c in components) + 1
    return Dataset(mapped, labels, n_classes, {"kind": "mixture", "transform": transform})


def three_blobs(radius=2.0, std=0.35):
    """The three-class benchmark mixture: equal-weight isotropic blobs on a circle."""
    comps = []
    for k in range(3):
        angle = 2 * np.pi * k / 3 + np.pi / 2
        comps.append(MixtureComponent((radius * np.cos(angle), radius * np.sin(angle)),
                                      ((std ** 2, 0.0), (0.0, std ** 2)), k, 1 / 3))
    return comps


# --- dataset references ------------------------------------------------------------

def load_dataset_ref(ref, base_dir="."):
    """Build a :class:`Dataset` from a config reference.

    ``ref["kind"]`` is one of

    * ``"npz"``: ``{"path"}``, a file written by :meth:`Dataset.save`;
    * ``"idx"``: ``{"images", "labels", "side", "limit"}``;
    * ``"mixture"``: ``{"count", "seed"}`` plus ``"components"`` (inline),
      ``"spec"`` (a JSON file) or ``"preset": "three_blobs"``.

    Relative paths resolve against ``base_dir``.
    """
    if not isinstance(ref, dict) or "kind" not in ref:
        raise ValidationError("dataset reference needs a 'kind'", field="dataset")
    resolve = lambda p: os.path.join(base_dir, p)  # noqa: E731
    kind = ref["kind"]
    if kind == "npz":
        return Dataset.load(resolve(ref["path"]))
    if kind == "idx":
        ds = load_idx_dataset(resolve(ref["images"]), resolve(ref["labels"]), ref.get("side"),
                              ref.get("n_classes"))
        limit = ref.get("limit")
        return ds.subset(slice(0, limit)) if limit else ds
    if kind == "mixture":
        from .rng import stream
        if "components" in ref:
            comps = parse_mixture_spec(ref["components"])
        elif "spec" in ref:
            comps = load_mixture_spec(resolve(ref["spec"]))
        elif ref.get("preset") == "three_blobs":
            comps = three_blobs()
        else:
            raise ValidationError("mixture reference needs components, spec or preset",
                                  field="dataset")
        return synth_mixture(comps, int(ref.get("count", 6000)), stream(int(ref.get("seed", 0)), "data"),
                             transform=ref.get("transform"))
    raise ValidationError(f"unknown dataset kind {kind!r}", field="dataset.kind")
