"""Waveform/spectrogram conversion and chunked overlap-add inference.

STFT uses a square-root Hann analysis+synthesis window with 50% hop, which
satisfies COLA exactly, and fixed-duration windows so the frame count depends
only on duration while the bin count tracks the sampling rate.  The inverse
transform exists twice: a plain numpy path for evaluation and a differentiable
tensor op (`istft_tensor`) whose backward is the exact adjoint, needed because
training losses are computed in the time domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, ShapeError
from .tensor import Tensor, _make

_TINY = 1e-12


@dataclass
class Waveform:
    """Multi-channel audio: data [M, L] float64, sampling rate in Hz."""

    data: np.ndarray
    rate: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[None, :]
        if self.data.ndim != 2:
            raise ShapeError(f"waveform data must be [M, L], got {self.data.shape}")
        if self.rate <= 0:
            raise ConfigError(f"sampling rate must be positive, got {self.rate}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.data ** 2))) if self.data.size else 0.0


@dataclass(frozen=True)
class StftConfig:
    """Fixed-duration STFT framing; hop must be half the window (COLA)."""

    window_s: float = 0.032
    hop_s: float = 0.016

    def __post_init__(self):
        if self.window_s <= 0:
            raise ConfigError("window duration must be positive")
        if abs(self.hop_s * 2 - self.window_s) > 1e-12:
            raise ConfigError(
                f"hop {self.hop_s}s must be half the window {self.window_s}s"
            )

    def win_length(self, rate: int) -> int:
        n = int(round(self.window_s * rate))
        return n + (n % 2)  # even so Nyquist bin exists and hop is integral

    def hop_length(self, rate: int) -> int:
        return self.win_length(rate) // 2

    def num_bins(self, rate: int) -> int:
        return self.win_length(rate) // 2 + 1


@dataclass
class Spectrogram:
    """Real/imag stacked TF representation: data [2, M, T, F]."""

    data: np.ndarray
    cfg: StftConfig
    rate: int

    @property
    def num_frames(self) -> int:
        return self.data.shape[2]

    @property
    def num_bins(self) -> int:
        return self.data.shape[3]


def _sqrt_hann(n: int) -> np.ndarray:
    # periodic Hann -> sqrt == sine window; hann(k)=sin^2(pi k/n)
    return np.sin(np.pi * np.arange(n) / n)


def _frame_count(padded_len: int, win: int, hop: int) -> int:
    return 1 + (padded_len - win) // hop


def stft(w: Waveform, cfg: StftConfig) -> Spectrogram:
    win = cfg.win_length(w.rate)
    hop = cfg.hop_length(w.rate)
    if w.num_samples < win:
        raise ShapeError(
            f"signal of {w.num_samples} samples is shorter than one window ({win})"
        )
    window = _sqrt_hann(win)
    pad = win // 2
    xp = np.pad(w.data, ((0, 0), (pad, pad)), mode="reflect")
    t = _frame_count(xp.shape[1], win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    frames = xp[:, idx] * window  # [M, T, win]
    spec = np.fft.rfft(frames, axis=-1)  # [M, T, F]
    data = np.stack([spec.real, spec.imag], axis=0)
    return Spectrogram(data=data, cfg=cfg, rate=w.rate)


def _ola_weight(t: int, win: int, hop: int) -> np.ndarray:
    window = _sqrt_hann(win)
    total = (t - 1) * hop + win
    wsum = np.zeros(total)
    for m in range(t):
        wsum[m * hop:m * hop + win] += window ** 2
    return wsum


def _istft_core(real: np.ndarray, imag: np.ndarray, win: int, hop: int,
                length: int | None) -> np.ndarray:
    """[M, T, F] RI parts -> [M, L] samples (centre-crop by win//2)."""
    t = real.shape[1]
    window = _sqrt_hann(win)
    frames = np.fft.irfft(real + 1j * imag, n=win, axis=-1) * window
    total = (t - 1) * hop + win
    y = np.zeros((real.shape[0], total))
    for m in range(t):
        y[:, m * hop:m * hop + win] += frames[:, m]
    wsum = np.maximum(_ola_weight(t, win, hop), _TINY)
    y /= wsum
    pad = win // 2
    if length is None:
        length = total - 2 * pad
    return np.ascontiguousarray(y[:, pad:pad + length])


def istft(s: Spectrogram, cfg: StftConfig, length: int | None = None) -> Waveform:
    if s.cfg != cfg:
        raise ConfigError(f"spectrogram built with {s.cfg}, asked to invert with {cfg}")
    win = cfg.win_length(s.rate)
    f_expect = win // 2 + 1
    if s.num_bins != f_expect:
        raise ConfigError(
            f"spectrogram has {s.num_bins} bins but config/rate imply {f_expect}"
        )
    out = _istft_core(s.data[0], s.data[1], win, cfg.hop_length(s.rate), length)
    return Waveform(out, s.rate)


def istft_tensor(x: Tensor, cfg: StftConfig, rate: int, length: int | None = None) -> Tensor:
    """Differentiable inverse STFT: Tensor [2, M, T, F] -> Tensor [M, L].

    The inverse is linear in the RI parts, so the backward pass is its exact
    adjoint: crop -> zero-pad, OLA -> frame gather, window multiply, and the
    rfft-based adjoint of irfft (interior bins doubled, imaginary gradients of
    DC/Nyquist zeroed because irfft ignores them).
    """
    if x.ndim != 4 or x.shape[0] != 2:
        raise ShapeError(f"istft_tensor expects [2, M, T, F], got {x.shape}")
    win = cfg.win_length(rate)
    hop = cfg.hop_length(rate)
    t, f = x.shape[2], x.shape[3]
    if f != win // 2 + 1:
        raise ConfigError(f"{f} bins inconsistent with window {win}")
    out = _istft_core(x.data[0], x.data[1], win, hop, length)
    l = out.shape[1]
    window = _sqrt_hann(win)
    wsum = np.maximum(_ola_weight(t, win, hop), _TINY)
    pad = win // 2

    def bw(g):
        gp = np.zeros((g.shape[0], wsum.shape[0]))
        gp[:, pad:pad + l] = g
        gp /= wsum
        idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
        gframes = gp[:, idx] * window  # [M, T, win]
        spec = np.fft.rfft(gframes, axis=-1) / win
        gr = spec.real.copy()
        gi = spec.imag.copy()
        gr[..., 1:f - 1] *= 2.0
        gi[..., 1:f - 1] *= 2.0
        gi[..., 0] = 0.0
        gi[..., f - 1] = 0.0
        x._accumulate(np.stack([gr, gi], axis=0))

    return _make(out, (x,), bw, "istft")


def rms_normalize(w: Waveform) -> tuple[Waveform, float]:
    """Scale to unit RMS; silent input is returned unchanged with rms 0."""
    r = w.rms()
    if r == 0.0:
        return Waveform(w.data.copy(), w.rate), 0.0
    return Waveform(w.data / r, w.rate), r


def chunked_separate(
    w: Waveform,
    separate_fn: Callable[[Waveform], Sequence[Waveform]],
    chunk_s: float,
    hop_s: float | None = None,
) -> list[Waveform]:
    """Chunk the signal, separate each chunk, overlap-add the results.

    Chunks of `chunk_s` seconds advance by half a chunk (or `hop_s`).  Each
    chunk's sources are greedily re-ordered to maximize correlation with the
    running estimate over the overlap, then cross-faded with triangular
    weights; accumulated weights are normalized so an identity separator
    reproduces the input exactly.
    """
    if chunk_s <= 0:
        raise ConfigError(f"chunk duration must be positive, got {chunk_s}")
    l = w.num_samples
    chunk = int(round(chunk_s * w.rate))
    hop = int(round(hop_s * w.rate)) if hop_s is not None else chunk // 2
    if hop < 1:
        raise ConfigError("chunk hop is zero samples")
    if chunk >= l:
        return [Waveform(e.data.copy(), w.rate) for e in separate_fn(w)]

    starts = list(range(0, l - chunk + 1, hop))
    if starts[-1] + chunk < l:
        starts.append(l - chunk)

    tri = np.minimum(np.arange(1, chunk + 1), np.arange(chunk, 0, -1)).astype(np.float64)
    tri /= tri.max()

    acc: np.ndarray | None = None
    wacc = np.zeros(l)
    for start in starts:
        piece = Waveform(w.data[:, start:start + chunk], w.rate)
        ests = [np.asarray(e.data, dtype=np.float64) for e in separate_fn(piece)]
        n = len(ests)
        if acc is None:
            acc = np.zeros((n, w.channels, l))
        elif n != acc.shape[0]:
            raise ShapeError(f"separator returned {n} sources, expected {acc.shape[0]}")
        order = _align_sources(acc, wacc, ests, start, chunk)
        for slot, src in enumerate(order):
            acc[slot, :, start:start + chunk] += tri * ests[src]
        wacc[start:start + chunk] += tri

    assert acc is not None
    acc /= np.maximum(wacc, _TINY)
    return [Waveform(acc[i], w.rate) for i in range(acc.shape[0])]


def _align_sources(acc, wacc, ests, start, chunk) -> list[int]:
    """Greedy slot assignment by correlation over the already-covered overlap."""
    n = len(ests)
    ov = slice(start, start + chunk)
    cov = wacc[ov] > 0
    if not cov.any():
        return list(range(n))
    prev = acc[:, :, ov][:, :, cov] / np.maximum(wacc[ov][cov], _TINY)
    cur = np.stack([e[:, cov] for e in ests])
    corr = np.einsum("smk,tmk->st", prev, cur)
    order = [-1] * n
    used_slots: set[int] = set()
    used_srcs: set[int] = set()
    flat = [(-corr[s, t], s, t) for s in range(n) for t in range(n)]
    for _, s, t in sorted(flat):
        if s in used_slots or t in used_srcs:
            continue
        order[s] = t
        used_slots.add(s)
        used_srcs.add(t)
    return order


# -- WAV I/O ------------------------------------------------------------------


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    """Write PCM 16-bit or IEEE float 32-bit little-endian WAV."""
    data = w.data.T  # scipy expects [L, M]
    if w.channels == 1:
        data = data[:, 0]
    if fmt == "float32":
        wavfile.write(path, w.rate, data.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(data, -1.0, 1.0)
        wavfile.write(path, w.rate, (clipped * 32767.0).astype(np.int16))
    else:
        raise ConfigError(f"unsupported wav format {fmt!r} (use 'float32' or 'pcm16')")


def read_wav(path) -> Waveform:
    rate, data = wavfile.read(path)
    if data.ndim == 1:
        data = data[:, None]
    data = data.T
    if data.dtype == np.int16:
        out = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        out = data.astype(np.float64)
    else:
        raise ConfigError(f"unsupported wav sample dtype {data.dtype}")
    return Waveform(out, int(rate))
