"""Quantitative evaluation of generated series.

Fréchet distance over a fixed seeded random convolutional embedding (a
training-free stand-in for a learned representation; absolute values are
only comparable within this artifact), a discriminative score from a
post-hoc LSTM classifier, predictive scores in both train-on-synthetic
protocols, a 2-d PCA projection for plotting, and FFT peak checks. The
eigen-decompositions run on a cyclic Jacobi solver and the spectra on a
radix-2 transform, both implemented here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import Tape, Tensor, adam_init, adam_step

_POSTHOC_STEPS = 500
_PREDICTIVE_STEPS = 4000  # forecasting needs the longer budget to converge
_POSTHOC_BATCH = 64
_POSTHOC_LR = 1e-3
_POSTHOC_HIDDEN = 64
_PROB_EPS = 1e-7


# --- fixed random embedder ----------------------------------------------------


@dataclass
class EmbedderParams:
    """Seeded, never-trained causal conv encoder: 3 layers, dilations 1/2/4,
    64 channels, global average pooling to a 64-dim embedding."""

    conv1: L.Conv1dParams
    conv2: L.Conv1dParams
    conv3: L.Conv1dParams
    in_channels: int
    seed: int


def make_embedder(in_channels, seed=7):
    rng = np.random.default_rng(seed)
    return EmbedderParams(
        conv1=L.init_conv1d(rng, in_channels, 64, kernel_size=4, dilation=1,
                            causal=True),
        conv2=L.init_conv1d(rng, 64, 64, kernel_size=4, dilation=2, causal=True),
        conv3=L.init_conv1d(rng, 64, 64, kernel_size=4, dilation=4, causal=True),
        in_channels=in_channels,
        seed=seed,
    )


def embed(x, embedder):
    """Deterministic 64-dim embedding per sample; needs t >= 8."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[2] != embedder.in_channels:
        raise ValueError(
            f"embed: expected (n, t, {embedder.in_channels}), got {x.shape}"
        )
    if x.shape[1] < 8:
        raise ValueError(f"embed: series too short ({x.shape[1]} < 8)")
    h = Tensor(x)
    h = T.relu(L.conv1d_forward(h, embedder.conv1))
    h = T.relu(L.conv1d_forward(h, embedder.conv2))
    h = T.relu(L.conv1d_forward(h, embedder.conv3))
    return h.mean(axis=1).numpy()


# --- gaussian fit and Frechet distance --------------------------------------------


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray  # symmetric


def gaussian_fit(embeddings):
    """Sample mean and unbiased covariance, symmetrized."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"gaussian_fit: need >= 2 vectors, got {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianFit(mean=mean, cov=(cov + cov.T) / 2.0)


class EigenError(RuntimeError):
    """Jacobi sweep budget exhausted without convergence."""


def jacobi_eigh(a, max_sweeps=100, tol=1e-12):
    """Eigenvalues (descending) and orthonormal eigenvectors (columns) of a
    symmetric matrix via cyclic Jacobi rotations."""
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"jacobi_eigh: expected square matrix, got {a.shape}")
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.reshape(1).copy(), v
    scale = max(np.abs(a).max(), tol)

    for _ in range(max_sweeps):
        upper = np.triu(np.abs(a), k=1)
        if upper.max() <= tol * scale:
            order = np.argsort(a.diagonal())[::-1]
            return a.diagonal()[order].copy(), v[:, order]
        threshold = tol * scale
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= threshold:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    raise EigenError(f"jacobi_eigh: no convergence after {max_sweeps} sweeps")


def _sym_sqrt(cov):
    lam, q = jacobi_eigh(cov)
    lam = np.maximum(lam, 0.0)
    return (q * np.sqrt(lam)) @ q.T


def frechet(f1, f2):
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2*(S1 S2)^(1/2)), clamped at zero.

    The cross term uses the symmetric form sqrt(S1^(1/2) S2 S1^(1/2)), whose
    eigenvalues are clamped at zero before the square root.
    """
    if f1.mean.shape != f2.mean.shape:
        raise ValueError(
            f"frechet: dimension mismatch {f1.mean.shape} vs {f2.mean.shape}"
        )
    diff = f1.mean - f2.mean
    s1h = _sym_sqrt(f1.cov)
    inner = s1h @ f2.cov @ s1h
    inner = (inner + inner.T) / 2.0
    lam, _ = jacobi_eigh(inner)
    cross = np.sqrt(np.maximum(lam, 0.0)).sum()
    value = diff @ diff + np.trace(f1.cov) + np.trace(f2.cov) - 2.0 * cross
    return float(max(value, 0.0))


def fid_score(real, synth, seed=7):
    """Frechet distance between embedded real and synthetic batches."""
    real = np.asarray(real, dtype=np.float32)
    synth = np.asarray(synth, dtype=np.float32)
    embedder = make_embedder(real.shape[2], seed=seed)
    return frechet(gaussian_fit(embed(real, embedder)),
                   gaussian_fit(embed(synth, embedder)))


# --- post-hoc sequential models -----------------------------------------------------


def _train_posthoc(params, batch_fn, loss_fn, steps, rng):
    T.enable_allocator_reuse()
    tensors = L.trainable(params)
    state = adam_init(tensors)
    for _ in range(steps):
        inputs, targets = batch_fn(rng)
        with Tape() as tape:
            loss = loss_fn(Tensor(inputs), Tensor(targets))
            grads = tape.backward(loss, params=tensors)
        adam_step(tensors, [grads[p] for p in tensors], state, _POSTHOC_LR)


def discriminative_score(real, synth, seed, steps=_POSTHOC_STEPS):
    """|test accuracy - 0.5| of an LSTM classifier told to separate real
    (label 1) from synthetic (label 0), stratified 80/20 split."""
    real = np.asarray(real, dtype=np.float32)
    synth = np.asarray(synth, dtype=np.float32)
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError(
            f"discriminative_score: shape mismatch {real.shape} vs {synth.shape}"
        )
    if real.shape[0] < 40 or synth.shape[0] < 40:
        raise ValueError("discriminative_score: need >= 40 samples per side")

    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for batch, label in ((real, 1.0), (synth, 0.0)):
        order = rng.permutation(batch.shape[0])
        cut = int(round(batch.shape[0] * 0.8))
        xs.append((batch[order[:cut]], batch[order[cut:]]))
        ys.append(label)
    train_x = np.concatenate([xs[0][0], xs[1][0]])
    train_y = np.concatenate([np.ones(len(xs[0][0])), np.zeros(len(xs[1][0]))])
    test_x = np.concatenate([xs[0][1], xs[1][1]])
    test_y = np.concatenate([np.ones(len(xs[0][1])), np.zeros(len(xs[1][1]))])
    train_y = train_y.astype(np.float32).reshape(-1, 1)

    params = L.init_recurrent(rng, real.shape[2], _POSTHOC_HIDDEN, 1)

    def batch_fn(r):
        idx = r.integers(0, len(train_x), _POSTHOC_BATCH)
        return train_x[idx], train_y[idx]

    def loss_fn(x, y):
        final, _ = L.recurrent_forward(x, params)
        probs = T.sigmoid(L.dense_forward(final, params.head))
        probs = T.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)
        one = Tensor(np.ones((), dtype=np.float32))
        return -((y * T.log(probs) + (one - y) * T.log(one - probs)).mean())

    _train_posthoc(params, batch_fn, loss_fn, steps, rng)

    final, _ = L.recurrent_forward(Tensor(test_x), params)
    probs = T.sigmoid(L.dense_forward(final, params.head)).numpy().reshape(-1)
    acc = float(((probs > 0.5) == (test_y > 0.5)).mean())
    return abs(acc - 0.5)


def predictive_score(real, synth, variant, seed, steps=_PREDICTIVE_STEPS):
    """Train-on-synthetic / test-on-real forecasting error, reported 10*MAE.

    variant 'last_step': inputs are steps 1..n-1 of all channels, target is
    the final step of all channels, linear output. variant 'timegan':
    inputs are steps 1..n-1 of the first c-1 channels, targets the last
    channel shifted one step ahead, sigmoid output; needs c >= 2.
    """
    real = np.asarray(real, dtype=np.float32)
    synth = np.asarray(synth, dtype=np.float32)
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError(
            f"predictive_score: shape mismatch {real.shape} vs {synth.shape}"
        )
    t, c = real.shape[1], real.shape[2]
    if t < 2:
        raise ValueError("predictive_score: need at least 2 time steps")
    if variant == "last_step":
        d_in, d_out, head_act = c, c, None
        def split(batch):
            return batch[:, :-1, :], batch[:, -1, :]
    elif variant == "timegan":
        if c < 2:
            raise ValueError("predictive_score: 'timegan' variant needs c >= 2")
        d_in, d_out, head_act = c - 1, 1, "sigmoid"
        def split(batch):
            return batch[:, :-1, : c - 1], batch[:, 1:, c - 1 :]
    else:
        raise ValueError(f"unknown predictive variant {variant!r}")

    rng = np.random.default_rng(seed)
    params = L.init_recurrent(rng, d_in, _POSTHOC_HIDDEN, d_out,
                              head_activation=head_act)

    def forward(x):
        final, seq = L.recurrent_forward(x, params)
        if variant == "last_step":
            return L.dense_forward(final, params.head)
        return L.dense_forward(seq, params.head)

    def batch_fn(r):
        idx = r.integers(0, len(synth), _POSTHOC_BATCH)
        return split(synth[idx])

    def loss_fn(x, y):
        return T.absolute(forward(x) - y).mean()

    _train_posthoc(params, batch_fn, loss_fn, steps, rng)

    test_x, test_y = split(real)
    pred = forward(Tensor(test_x)).numpy()
    mae = float(np.abs(pred - test_y).mean())
    return 10.0 * mae


# --- PCA projection -------------------------------------------------------------------


def pca_project_2d(x):
    """Flatten (n, t, c) to (n, t*c), center, and project onto the top two
    principal directions. Sign convention: each direction's largest-magnitude
    loading is positive."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x.reshape(x.shape[0], -1)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"pca_project_2d: need >= 3 samples, got {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    if np.trace(cov) <= 1e-12:
        raise ValueError("pca_project_2d: zero-variance data")
    lam, vec = jacobi_eigh(cov)
    top = vec[:, :2].copy()
    for j in range(2):
        lead = np.argmax(np.abs(top[:, j]))
        if top[lead, j] < 0:
            top[:, j] = -top[:, j]
    return centered @ top


def pca_top2_eigenvalues(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x.reshape(x.shape[0], -1)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    lam, _ = jacobi_eigh(cov)
    return lam[:2]


# --- FFT ----------------------------------------------------------------------------


def radix2_fft(x):
    """Iteratively computable radix-2 transform along the last axis, which
    must be a power of two. Returns complex128."""
    x = np.asarray(x)
    t = x.shape[-1]
    if t & (t - 1) or t == 0:
        raise ValueError(f"radix2_fft: length {t} is not a power of two")
    out = np.asarray(x, dtype=np.complex128)
    if t == 1:
        return out.copy()
    even = radix2_fft(out[..., ::2])
    odd = radix2_fft(out[..., 1::2])
    twiddle = np.exp(-2j * np.pi * np.arange(t // 2) / t)
    half = twiddle * odd
    return np.concatenate([even + half, even - half], axis=-1)


def magnitude_spectrum(x):
    """Mean magnitude spectrum over samples and channels, zero-padded to the
    next power of two. Returns (spectrum, padded_length)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"magnitude_spectrum: expected (n, t, c), got {x.shape}")
    t = x.shape[1]
    if t < 4:
        raise ValueError("magnitude_spectrum: need t >= 4")
    t_pad = 1 << (t - 1).bit_length()
    if t_pad != t:
        pad = np.zeros((x.shape[0], t_pad - t, x.shape[2]))
        x = np.concatenate([x, pad], axis=1)
    series = np.moveaxis(x, 1, 2)  # (n, c, t_pad)
    mags = np.abs(radix2_fft(series))
    return mags.mean(axis=(0, 1)), t_pad


def fft_peaks(x, k):
    """Indices of the k largest non-DC bins of the mean magnitude spectrum,
    strongest first, restricted to the positive-frequency half."""
    spectrum, t_pad = magnitude_spectrum(x)
    half = spectrum[1 : t_pad // 2 + 1]
    order = np.argsort(half)[::-1][:k]
    return [int(b) + 1 for b in order]


# --- report -----------------------------------------------------------------------


@dataclass
class EvalReport:
    fid: float | None = None
    discriminative: float | None = None
    predictive_last_step: float | None = None
    predictive_timegan: float | None = None
    seeds: dict = field(default_factory=dict)
    n_real: int = 0
    n_synth: int = 0

    def to_json(self):
        payload = {
            "fid": self.fid,
            "discriminative": self.discriminative,
            "predictive_last_step": self.predictive_last_step,
            "predictive_timegan": self.predictive_timegan,
            "seeds": self.seeds,
            "n_real": self.n_real,
            "n_synth": self.n_synth,
        }
        return json.dumps(payload, sort_keys=True, indent=2)
