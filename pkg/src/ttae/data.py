"""Synthetic dataset generators, CSV ingestion with sliding windows, and
min-max normalization. Every generator is a pure function of its spec and
seed; generated batches come back normalized to [0, 1] per channel unless
the spec says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass
class SineSpec:
    """Random sinusoids x_k = amp * sin(2*pi*freq*k + phase) per (sample, dim).

    components=1 gives the simple family; components=3 sums three waves with
    mutually distinct parameter triples per dimension. Degenerate ranges
    (low == high) pin parameters for closed-form checks; enforce_distinct
    must then be off for the multi-component family.
    """

    n_samples: int = 5000
    length: int = 24
    dims: int = 5
    amp_range: tuple = (1.0, 3.0)
    freq_range: tuple = (0.1, 0.15)
    phase_range: tuple = (0.0, TWO_PI)
    components: int = 1
    seed: int = 0
    enforce_distinct: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.n_samples < 1 or self.length < 1 or self.dims < 1:
            raise ValueError("sine spec requires positive sizes")
        if self.components not in (1, 3):
            raise ValueError("components must be 1 (simple) or 3 (complex)")


@dataclass
class MixtureSpec:
    """Additive mix of a high-frequency (local) and low-frequency (global)
    tone, convex-weighted by local_weight. Each sample draws its own
    amplitudes U[amp_range] and, by default, its own phases U[0, 2*pi) per
    component; phases shift nothing in the magnitude spectrum, so the FFT
    peaks stay pinned to the two tone bins."""

    n_samples: int = 5000
    length: int = 128
    local_weight: float = 0.5
    local_freq_hz: float = 50.0
    global_freq_hz: float = 5.0
    sample_rate_hz: float = 128.0
    amp_range: tuple = (1.0, 3.0)
    random_phase: bool = True
    seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.local_weight <= 1.0:
            raise ValueError("local_weight must lie in [0, 1]")
        if self.n_samples < 1 or self.length < 2:
            raise ValueError("mixture spec requires n_samples >= 1, length >= 2")
        if self.local_freq_hz >= self.sample_rate_hz / 2:
            raise ValueError("local frequency must stay below Nyquist")


@dataclass
class ScalerState:
    mins: np.ndarray  # per channel
    maxs: np.ndarray


def minmax_fit(x):
    """Per-channel min/max over the whole batch (n, t, c)."""
    x = np.asarray(x, dtype=np.float32)
    if x.size == 0:
        raise ValueError("minmax_fit: empty data")
    return ScalerState(mins=x.min(axis=(0, 1)), maxs=x.max(axis=(0, 1)))


def minmax_transform(x, state):
    if state is None:
        raise ValueError("minmax_transform: scaler was not fitted")
    x = np.asarray(x, dtype=np.float32)
    span = state.maxs - state.mins
    safe = np.where(span > 0, span, 1.0).astype(np.float32)
    out = (x - state.mins) / safe
    return np.where(span > 0, out, 0.0).astype(np.float32)


def minmax_inverse(x, state):
    if state is None:
        raise ValueError("minmax_inverse: scaler was not fitted")
    x = np.asarray(x, dtype=np.float32)
    return (x * (state.maxs - state.mins) + state.mins).astype(np.float32)


def _normalized(raw, normalize):
    if not normalize:
        return raw.astype(np.float32)
    return minmax_transform(raw, minmax_fit(raw))


def gen_sine_sim(spec):
    """Simple sinusoid family; one (amp, freq, phase) draw per (sample, dim)."""
    if spec.components != 1:
        raise ValueError("gen_sine_sim requires components=1")
    rng = np.random.default_rng(spec.seed)
    n, t, d = spec.n_samples, spec.length, spec.dims
    amp = rng.uniform(*spec.amp_range, size=(n, d))
    freq = rng.uniform(*spec.freq_range, size=(n, d))
    phase = rng.uniform(*spec.phase_range, size=(n, d))
    k = np.arange(t).reshape(1, t, 1)
    raw = amp[:, None, :] * np.sin(TWO_PI * freq[:, None, :] * k + phase[:, None, :])
    return _normalized(raw, spec.normalize)


def gen_sine_cpx(spec):
    """Sum of three sinusoids per dimension with pairwise-distinct triples."""
    if spec.components != 3:
        raise ValueError("gen_sine_cpx requires components=3")
    rng = np.random.default_rng(spec.seed)
    n, t, d = spec.n_samples, spec.length, spec.dims
    k = np.arange(t).reshape(1, t, 1)
    raw = np.zeros((n, t, d))
    draws = []
    for _ in range(3):
        amp = rng.uniform(*spec.amp_range, size=(n, d))
        freq = rng.uniform(*spec.freq_range, size=(n, d))
        phase = rng.uniform(*spec.phase_range, size=(n, d))
        draws.append((amp, freq, phase))

    if spec.enforce_distinct:
        for later in range(1, 3):
            amp, freq, phase = draws[later]
            for earlier in range(later):
                e_amp, e_freq, e_phase = draws[earlier]
                for _ in range(100):
                    clash = (amp == e_amp) | (freq == e_freq) | (phase == e_phase)
                    if not clash.any():
                        break
                    amp[clash] = rng.uniform(*spec.amp_range, size=int(clash.sum()))
                    freq[clash] = rng.uniform(*spec.freq_range, size=int(clash.sum()))
                    phase[clash] = rng.uniform(*spec.phase_range, size=int(clash.sum()))
                else:
                    raise ValueError("could not draw distinct component parameters")
            draws[later] = (amp, freq, phase)

    for amp, freq, phase in draws:
        raw += amp[:, None, :] * np.sin(TWO_PI * freq[:, None, :] * k
                                        + phase[:, None, :])
    return _normalized(raw, spec.normalize)


def gen_local_global(spec):
    """High/low frequency mixture: with t_k = k / sample_rate seconds,
    local_weight * amp_l*sin(2*pi*f_local*t_k) + (1-w) * amp_g*sin(2*pi*f_global*t_k).

    At the defaults (128 steps, 128 Hz, 50/5 Hz) both tones land exactly on
    FFT bins 50 and 5. Output has one channel.
    """
    rng = np.random.default_rng(spec.seed)
    n, t = spec.n_samples, spec.length
    amp_local = rng.uniform(*spec.amp_range, size=(n, 1))
    amp_global = rng.uniform(*spec.amp_range, size=(n, 1))
    if spec.random_phase:
        phase_local = rng.uniform(0.0, TWO_PI, size=(n, 1))
        phase_global = rng.uniform(0.0, TWO_PI, size=(n, 1))
    else:
        phase_local = phase_global = np.zeros((n, 1))
    tk = np.arange(t) / spec.sample_rate_hz
    local = amp_local * np.sin(TWO_PI * spec.local_freq_hz * tk + phase_local)
    globl = amp_global * np.sin(TWO_PI * spec.global_freq_hz * tk + phase_global)
    raw = (spec.local_weight * local
           + (1.0 - spec.local_weight) * globl)[:, :, None]
    return _normalized(raw, spec.normalize)


def sliding_windows(series, window):
    """All stride-1 windows of a (T, c) series, in order: (T-window+1, window, c)."""
    series = np.asarray(series, dtype=np.float32)
    if series.ndim != 2:
        raise ValueError(f"sliding_windows: expected (T, c), got {series.shape}")
    total = series.shape[0]
    if window < 1 or window > total:
        raise ValueError(
            f"sliding_windows: window {window} invalid for series of length {total}"
        )
    count = total - window + 1
    out = np.empty((count, window, series.shape[1]), dtype=np.float32)
    for i in range(count):
        out[i] = series[i : i + window]
    return out


def load_csv(path, header=False, delimiter=",", columns=None):
    """Numeric CSV to a (T, c) float array; every bad row is an error naming
    its 1-based line number."""
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if header and lineno == 1:
                continue
            cells = line.split(delimiter)
            if columns is not None:
                try:
                    cells = [cells[i] for i in columns]
                except IndexError:
                    raise ValueError(
                        f"line {lineno}: row has {len(line.split(delimiter))} fields, "
                        f"column selection needs {max(columns) + 1}"
                    )
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise ValueError(
                    f"line {lineno}: expected {width} fields, got {len(cells)}"
                )
            try:
                rows.append([float(cell) for cell in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_float(c))
                raise ValueError(f"line {lineno}: could not parse {bad!r} as a number")
    if not rows:
        raise ValueError(f"{path}: no numeric rows selected")
    return np.asarray(rows, dtype=np.float32)


def _is_float(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


# --- dataset container -------------------------------------------------------------

_DATASET_MAGIC = "ttae-dataset"
_DATASET_VERSION = "v1"


def save_dataset(path, batch):
    """Write `<magic> <version> n t c` header line + little-endian f32 payload."""
    batch = np.ascontiguousarray(batch, dtype="<f4")
    if batch.ndim != 3:
        raise ValueError(f"save_dataset: expected (n, t, c), got {batch.shape}")
    n, t, c = batch.shape
    with open(path, "wb") as fh:
        fh.write(f"{_DATASET_MAGIC} {_DATASET_VERSION} {n} {t} {c}\n".encode("ascii"))
        fh.write(batch.tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 5 or parts[0] != _DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset container (header {header!r})")
        if parts[1] != _DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {parts[1]!r}")
        try:
            n, t, c = (int(p) for p in parts[2:])
        except ValueError:
            raise ValueError(f"{path}: malformed dataset dimensions in {header!r}")
        payload = fh.read()
    expected = n * t * c * 4
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n, t, c).copy()
