"""Dataset ingestion (IDX files) and seeded synthetic generators."""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .errors import ArgumentError, FormatError

_UBYTE = 0x08


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def parse_idx(buf: bytes, scale: bool = True) -> np.ndarray:
    """Decode an unsigned-byte IDX blob.

    Header: two zero bytes, type byte 0x08, a dimension count, then one
    big-endian uint32 per dimension; the payload follows in row-major order.
    With ``scale`` the bytes of an image file (ndim > 1) are mapped to [0, 1].
    """
    if len(buf) < 4:
        raise FormatError("truncated IDX header", offset=len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise FormatError("bad IDX magic, expected 0x00 0x00", offset=0 if buf[0] else 1)
    if buf[2] != _UBYTE:
        raise FormatError(f"unsupported IDX element type 0x{buf[2]:02x}", offset=2)
    ndim = buf[3]
    if ndim == 0:
        raise FormatError("IDX file declares zero dimensions", offset=3)
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise FormatError("truncated IDX dimension table", offset=len(buf))
    shape = struct.unpack(f">{ndim}I", buf[4:end])
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - end != count:
        raise FormatError(f"payload has {len(buf) - end} bytes, header promises {count}", offset=end)
    data = np.frombuffer(buf, dtype=np.uint8, offset=end).reshape(shape)
    if scale and ndim > 1:
        return data.astype(float) / 255.0
    return data.copy()


def load_idx(path, scale: bool = True) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed)."""
    with _open(path) as fh:
        return parse_idx(fh.read(), scale=scale)


def encode_idx(array) -> bytes:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        if np.any((a < 0) | (a > 255)) or np.any(a != np.round(a)):
            raise ArgumentError("IDX unsigned-byte payload must hold integers in [0, 255]")
        a = a.astype(np.uint8)
    header = bytes([0, 0, _UBYTE, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a).tobytes()


def write_idx(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_idx(array))


def one_hot(labels, n_classes: int = 10, smoothing: float = 0.0) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.full((labels.size, n_classes), smoothing / n_classes)
    out[np.arange(labels.size), labels] += 1.0 - smoothing
    return out


def load_mnist_subset(images_path, labels_path, n_train: int, n_test: int, seed: int = 0):
    """Shuffle an IDX image/label pair with ``seed`` and split it.

    Returns ``(x_train, y_train, x_test, y_test)`` with flattened images in
    [0, 1] and integer labels.
    """
    X = load_idx(images_path)
    y = load_idx(labels_path, scale=False).astype(int)
    if X.shape[0] != y.shape[0]:
        raise FormatError("image and label files disagree on the item count")
    if n_train + n_test > X.shape[0]:
        raise ArgumentError(f"requested {n_train + n_test} items, file holds {X.shape[0]}")
    X = X.reshape(X.shape[0], -1)
    perm = np.random.default_rng(seed).permutation(X.shape[0])
    tr, te = perm[:n_train], perm[n_train:n_train + n_test]
    return X[tr], y[tr], X[te], y[te]


def synth_linear_gaussian(seed: int, n: int, dims, model) -> dict:
    """Draw ``n`` samples from a two-level linear-Gaussian model.

    ``model`` is a mapping with ``theta`` (d0 x d1), ``prior_mean`` (d1,),
    ``Sigma_x`` (d1 x d1) and ``Sigma_o`` (d0 x d0): x ~ N(prior_mean,
    Sigma_x), o ~ N(theta x, Sigma_o). Zero covariances are allowed.
    """
    d0, d1 = dims
    rng = np.random.default_rng(seed)
    theta = np.asarray(model.get("theta", np.eye(d0, d1)), dtype=float).reshape(d0, d1)
    mean = np.asarray(model.get("prior_mean", np.zeros(d1)), dtype=float).reshape(d1)
    Sx = np.asarray(model.get("Sigma_x", np.eye(d1)), dtype=float).reshape(d1, d1)
    So = np.asarray(model.get("Sigma_o", np.eye(d0)), dtype=float).reshape(d0, d0)
    x = mean + rng.standard_normal((n, d1)) @ _sqrt_psd(Sx).T
    o = x @ theta.T + rng.standard_normal((n, d0)) @ _sqrt_psd(So).T
    return {"x": x, "o": o}


def _sqrt_psd(S):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if w[0] < -1e-12:
        raise ArgumentError("covariance must be positive semi-definite")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def simulate_ssm(model, n_steps: int, rng=None, x0=None, controls=None):
    """Sample a trajectory (states, observations) from a LinearStateSpace."""
    rng = np.random.default_rng(rng)
    x = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
    L1, L2 = _sqrt_psd(model.Sigma1), _sqrt_psd(model.Sigma2)
    xs, os_ = [], []
    for t in range(n_steps):
        u = np.zeros(model.m) if controls is None else np.atleast_1d(controls[t])
        x = model.A @ x + model.B @ u + L1 @ rng.standard_normal(model.n)
        xs.append(x)
        os_.append(model.C @ x + L2 @ rng.standard_normal(model.p))
    return np.array(xs), np.array(os_)


def synth_classification(rng, n: int, dim: int, n_classes: int, noise: float = 0.3,
                         prototypes=None):
    """Noisy copies of per-class prototype vectors, clipped to [0, 1].

    Returns ``(inputs, labels, prototypes)``; pass the prototypes back in to
    draw a test set from the same classes.
    """
    rng = np.random.default_rng(rng)
    if prototypes is None:
        prototypes = rng.uniform(0.0, 1.0, size=(n_classes, dim))
    labels = rng.integers(0, n_classes, size=n)
    x = prototypes[labels] + noise * rng.standard_normal((n, dim))
    return np.clip(x, 0.0, 1.0), labels, prototypes
