"""Datasets, label bookkeeping and the synthetic factorial generator.

On-disk container (little-endian)::

    magic  b"FMXB"
    version u16      1: payload is N*H*W bytes of 0/1 pixels
                     2: payload is N*H*W float64 values (real-valued data)
    N u64, H u32, W u32
    payload

Synthetic truth sidecar (``<dataset>.truth``, little-endian)::

    magic b"FMXT", version u16, I u32, D u32, K_1..K_I u32, N u64, P u32,
    decoder kind u8 (0 identity, 1 affine), sigma f64, obs_noise f64,
    then f64 arrays: means (sum K_i * D), weights (sum K_i), codes (N*I),
    z (N*D*I), noise (N*P), A (P*D*I), bias (P)

Label files hold one ``n i k`` triple per line: ``n`` is the 0-based datum
index, ``i`` and ``k`` are 1-based block and component indices.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

MAGIC = b"FMXB"
TRUTH_MAGIC = b"FMXT"
HEADER = struct.Struct("<4sHQII")
MAX_PAYLOAD = 1 << 40
DECODERS = ("identity", "affine")


class FormatError(ValueError):
    """Malformed dataset, truth or label file."""


@dataclass
class Dataset:
    x: np.ndarray
    image_shape: tuple

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        H, W = self.image_shape
        if self.x.shape[1] != H * W:
            raise ValueError(f"rows have {self.x.shape[1]} values, image shape is {H}x{W}")

    @property
    def N(self):
        return self.x.shape[0]

    @property
    def P(self):
        return self.x.shape[1]

    @property
    def binary(self):
        return bool(np.all((self.x == 0) | (self.x == 1)))


@dataclass
class LabelSet:
    """Observed one-hot labels: ``entries[n][i] = k`` with 0-based i and k."""

    Ks: tuple
    entries: dict = field(default_factory=dict)

    def add(self, n, i, k):
        if not 0 <= i < len(self.Ks):
            raise ValueError(f"block {i + 1} out of range 1..{len(self.Ks)}")
        if not 0 <= k < self.Ks[i]:
            raise ValueError(f"component {k + 1} out of range 1..{self.Ks[i]} for block {i + 1}")
        if n < 0:
            raise ValueError(f"negative datum index {n}")
        row = self.entries.setdefault(int(n), {})
        if i in row:
            raise ValueError(f"duplicate label for datum {n}, block {i + 1}")
        row[i] = int(k)

    def one_hot(self, n, i):
        y = np.zeros(self.Ks[i])
        y[self.entries[n][i]] = 1.0
        return y

    @property
    def labeled_blocks(self):
        return sorted({i for row in self.entries.values() for i in row})

    def __len__(self):
        return len(self.entries)

    def batch(self, indices):
        """Per-block (mask, one-hot) arrays for a batch, ``None`` for unlabeled blocks."""
        out = []
        for i, K in enumerate(self.Ks):
            mask = np.zeros(len(indices), dtype=bool)
            y = np.zeros((len(indices), K))
            for row, n in enumerate(indices):
                k = self.entries.get(int(n), {}).get(i)
                if k is not None:
                    mask[row] = True
                    y[row, k] = 1.0
            out.append((mask, y) if mask.any() else None)
        return out if any(o is not None for o in out) else None


@dataclass
class SyntheticTruth:
    means: list          # per block (K_i, D)
    weights: list        # per block (K_i,)
    sigma: float
    codes: np.ndarray    # (N, I), 0-based
    z: np.ndarray        # (N, D*I)
    noise: np.ndarray    # (N, P)
    decoder: str
    A: np.ndarray        # (P, D*I)
    bias: np.ndarray     # (P,)
    obs_noise: float

    @property
    def precisions(self):
        return [np.full_like(m, 1.0 / self.sigma**2) for m in self.means]

    def replay(self):
        """Regenerate observations from the stored latents and noise."""
        return self.z @ self.A.T + self.bias + self.obs_noise * self.noise


def _simplex(K, edge):
    """Vertices of a centred regular simplex, shape (K, K - 1)."""
    corners = np.eye(K) - 1.0 / K
    u, s, _ = np.linalg.svd(corners)
    return u[:, :K - 1] * s[:K - 1] * (edge / np.sqrt(2.0))


def lattice_means(K, D, separation):
    """K component means with pairwise distances of at least ``separation``.

    A regular simplex with edge ``separation`` when ``K <= D + 1``; for
    ``K == D + 2`` the simplex's centroid joins its vertices, which sit at
    distance ``separation`` from it; beyond that, an evenly spaced line along
    the first axis. None of these layouts is a Cartesian product of smaller
    ones (a 2x2 square would be), so the split of a multi-block code into its
    blocks stays identifiable.
    """
    out = np.zeros((K, D))
    if K == 1:
        return out
    if K <= D + 1:
        out[:, :K - 1] = _simplex(K, separation)
    elif K == D + 2:
        vertices = _simplex(D + 1, 1.0)
        out[1:] = vertices * (separation / np.linalg.norm(vertices[0]))
        out -= out.mean(axis=0)
    else:
        out[:, 0] = separation * (np.arange(K) - (K - 1) / 2.0)
    return out


def generate_synthetic(I, D, Ks, N, separation, decoder="identity", label_fraction=0.0,
                       seed=0, sigma=0.5, obs_dim=None, obs_noise=0.1):
    """Sample data from a factorial Gaussian mixture pushed through a fixed decoder.

    Codes are uniform per block; ``z_i ~ N(mean_{i,k_i}, sigma^2 I)``. The
    identity decoder returns ``z`` itself; the affine decoder applies a random
    matrix (scaled so observations are of order one), a bias and Gaussian noise
    of scale ``obs_noise``. A uniformly chosen
    ``label_fraction`` of data receive labels on block 1.
    """
    Ks = tuple(int(k) for k in Ks)
    if len(Ks) != I or I < 1 or D < 1 or N < 1 or min(Ks) < 1:
        raise ValueError("invalid shape arguments")
    if not separation >= 0:
        raise ValueError("separation must be nonnegative")
    if decoder not in DECODERS:
        raise ValueError(f"decoder must be one of {DECODERS}")
    if not 0 <= label_fraction <= 1:
        raise ValueError("label_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    DI = D * I
    means = [lattice_means(K, D, separation) for K in Ks]
    codes = np.stack([rng.integers(0, K, size=N) for K in Ks], axis=1)
    z = np.concatenate([means[i][codes[:, i]] for i in range(I)], axis=1)
    z = z + sigma * rng.standard_normal((N, DI))
    if decoder == "identity":
        P = DI
        A = np.eye(DI)
        bias = np.zeros(DI)
        noise = np.zeros((N, P))
        obs_noise = 0.0
    else:
        P = obs_dim or 2 * DI
        # unit-scale observations keep optimizer step sizes meaningful
        rms = float(np.sqrt(np.mean(z * z))) or 1.0
        A = rng.standard_normal((P, DI)) / (np.sqrt(DI) * rms)
        bias = rng.standard_normal(P)
        noise = rng.standard_normal((N, P))
    truth = SyntheticTruth(means, [np.full(K, 1.0 / K) for K in Ks], float(sigma), codes, z,
                           noise, decoder, A, bias, float(obs_noise))
    labels = LabelSet(Ks)
    n_lab = int(round(label_fraction * N))
    for n in sorted(rng.choice(N, size=n_lab, replace=False).tolist()):
        labels.add(n, 0, int(codes[n, 0]))
    return Dataset(truth.replay(), (1, P)), labels, truth


# -- containers ----------------------------------------------------------------

def write_dataset(path, ds: Dataset):
    H, W = ds.image_shape
    binary = ds.binary
    header = HEADER.pack(MAGIC, 1 if binary else 2, ds.N, H, W)
    payload = ds.x.astype(np.uint8) if binary else ds.x.astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def load_binary_images(path) -> Dataset:
    """Read an FMXB container; byte payloads are thresholded to {0, 1}."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < HEADER.size:
        raise FormatError(f"{path}: header truncated ({len(buf)} of {HEADER.size} bytes)")
    magic, version, N, H, W = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version not in (1, 2):
        raise FormatError(f"{path}: unsupported version {version}")
    itemsize = 1 if version == 1 else 8
    if H == 0 or W == 0:
        raise FormatError(f"{path}: zero image dimension {H}x{W}")
    expected = N * H * W * itemsize
    if expected > MAX_PAYLOAD:
        raise FormatError(f"{path}: dimensions {N}x{H}x{W} overflow the payload limit")
    actual = len(buf) - HEADER.size
    if actual != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {actual}")
    if version == 1:
        raw = np.frombuffer(buf, dtype=np.uint8, offset=HEADER.size)
        x = raw if raw.max(initial=0) <= 1 else (raw >= 128)
    else:
        x = np.frombuffer(buf, dtype="<f8", offset=HEADER.size)
    return Dataset(x.reshape(N, H * W).astype(np.float64), (H, W))


def truth_path(dataset_path):
    return Path(str(dataset_path) + ".truth")


def write_truth(path, t: SyntheticTruth):
    I = len(t.means)
    D = t.means[0].shape[1]
    Ks = [m.shape[0] for m in t.means]
    N, P = t.noise.shape
    parts = [TRUTH_MAGIC, struct.pack("<HII", 1, I, D), struct.pack(f"<{I}I", *Ks),
             struct.pack("<QIBdd", N, P, DECODERS.index(t.decoder), t.sigma, t.obs_noise)]
    arrays = [*t.means, *t.weights, t.codes.astype(np.float64), t.z, t.noise, t.A, t.bias]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    Path(path).write_bytes(b"".join(parts))


def read_truth(path) -> SyntheticTruth:
    buf = Path(path).read_bytes()
    if buf[:4] != TRUTH_MAGIC:
        raise FormatError(f"{path}: bad truth magic")
    version, I, D = struct.unpack_from("<HII", buf, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported truth version {version}")
    off = 14
    Ks = struct.unpack_from(f"<{I}I", buf, off)
    off += 4 * I
    N, P, kind, sigma, obs_noise = struct.unpack_from("<QIBdd", buf, off)
    off += struct.calcsize("<QIBdd")
    DI = D * I

    def take(*shape):
        nonlocal off
        n = int(np.prod(shape))
        if off + 8 * n > len(buf):
            raise FormatError(f"{path}: truth payload truncated")
        a = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
        return a

    means = [take(K, D) for K in Ks]
    weights = [take(K) for K in Ks]
    codes = take(N, I).astype(np.int64)
    z, noise, A, bias = take(N, DI), take(N, P), take(P, DI), take(P)
    return SyntheticTruth(means, weights, sigma, codes, z, noise, DECODERS[kind], A, bias, obs_noise)


def write_labels(path, labels: LabelSet):
    lines = [f"{n} {i + 1} {k + 1}" for n in sorted(labels.entries)
             for i, k in sorted(labels.entries[n].items())]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_labels(path, Ks, N=None) -> LabelSet:
    labels = LabelSet(tuple(Ks))
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'n i k', got {line!r}")
        try:
            n, i, k = (int(p) for p in parts)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
        if N is not None and not 0 <= n < N:
            raise FormatError(f"{path}:{lineno}: datum index {n} out of range 0..{N - 1}")
        try:
            labels.add(n, i - 1, k - 1)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return labels


def code_accuracy(pred, truth, K, permute=True):
    """Fraction of matching codes, optionally under the best relabelling."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if not permute:
        return float(np.mean(pred == truth))
    Kp = max(K, int(pred.max(initial=0)) + 1, int(truth.max(initial=0)) + 1)
    confusion = np.zeros((Kp, Kp))
    np.add.at(confusion, (pred, truth), 1)
    rows, cols = linear_sum_assignment(-confusion)
    return float(confusion[rows, cols].sum() / len(pred))


def block_code_accuracy(pred, truth, Ks, permute=True, swap_blocks=True):
    """Per-block code accuracy for (N, I) code arrays.

    With ``swap_blocks`` the predicted blocks are also matched to true blocks
    of the same size, since such blocks are exchangeable in the model; the
    assignment maximizing total accuracy wins. Returns a list aligned with the
    true blocks.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    Ks = [int(k) for k in Ks]
    I = len(Ks)
    if pred.shape != truth.shape or pred.shape[1] != I:
        raise ValueError("pred and truth must both have shape (N, I)")
    score = np.full((I, I), -np.inf)
    for p in range(I):
        for t in range(I):
            if p == t or (swap_blocks and Ks[p] == Ks[t]):
                score[p, t] = code_accuracy(pred[:, p], truth[:, t], max(Ks[p], Ks[t]), permute)
    rows, cols = linear_sum_assignment(-np.where(np.isfinite(score), score, -1.0))
    out = [0.0] * I
    for p, t in zip(rows, cols):
        out[t] = float(score[p, t])
    return out
