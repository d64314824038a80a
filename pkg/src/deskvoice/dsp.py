"""Waveform and spectrogram conversions.

The analysis front end (80-dim log-mel at 100 fps, frame stacking) and a
Griffin-Lim style mel inverter used as the vocoder stand-in. All functions are
pure; determinism comes from explicit seeds.
"""

from __future__ import annotations

import functools
import time
import wave as wave_module
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, LengthError, ParameterError

SAMPLE_RATE = 16000
N_MELS = 80
WIN_SECONDS = 0.025
HOP_SECONDS = 0.010
N_FFT = 512
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-10

WIN_SAMPLES = int(round(WIN_SECONDS * SAMPLE_RATE))   # 400
HOP_SAMPLES = int(round(HOP_SECONDS * SAMPLE_RATE))   # 160


@dataclass
class Waveform:
    """Mono audio at 16 kHz; samples bounded to [-1, 1] with 1e-3 slack."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise ContractError("waveform must be non-empty")
        if self.sample_rate != SAMPLE_RATE:
            raise ContractError(f"sample rate fixed at {SAMPLE_RATE}, got {self.sample_rate}")
        peak = np.abs(self.samples).max()
        if peak > 1.0 + 1e-3:
            raise ContractError(f"waveform peak {peak:.4f} exceeds 1 + 1e-3")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    hop: float = HOP_SECONDS
    win: float = WIN_SECONDS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise ContractError(f"mel frames must be T x {N_MELS}, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class StackedFeature:
    frames: np.ndarray
    stack_factor: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS * self.stack_factor:
            raise ContractError(
                f"stacked frames must be T' x {N_MELS * self.stack_factor}, got {self.frames.shape}")


def frame_count(num_samples: int) -> int:
    """Full analysis frames in a signal: 1 + floor((N - win) / hop)."""
    if num_samples < WIN_SAMPLES:
        raise LengthError(f"need at least {WIN_SAMPLES} samples, got {num_samples}")
    return 1 + (num_samples - WIN_SAMPLES) // HOP_SAMPLES


def _hz_to_mel(f):
    """Slaney scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    lin = f / (200.0 / 3.0)
    log_step = np.log(6.4) / 27.0
    return np.where(f < 1000.0, lin, 15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) / log_step)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    log_step = np.log(6.4) / 27.0
    return np.where(m < 15.0, m * (200.0 / 3.0), 1000.0 * np.exp((m - 15.0) * log_step))


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN,
                           fmax: float = FMAX) -> np.ndarray:
    """Center frequency of each triangular filter, in Hz."""
    mels = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    return _mel_to_hz(mels)[1:-1]


@functools.lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """(n_mels, n_fft//2+1) triangular filters, Slaney area-normalized."""
    mels = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz = _mel_to_hz(mels)
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sr)
    fb = np.zeros((n_mels, bins.size))
    for i in range(n_mels):
        lo, ctr, hi = hz[i], hz[i + 1], hz[i + 2]
        up = (bins - lo) / max(ctr - lo, 1e-12)
        down = (hi - bins) / max(hi - ctr, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    return fb


@functools.lru_cache(maxsize=2)
def _hann() -> np.ndarray:
    # periodic Hann, standard for STFT analysis
    n = np.arange(WIN_SAMPLES)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_SAMPLES)


def stft_magnitude(samples: np.ndarray) -> np.ndarray:
    return np.abs(_stft(samples))


def _stft(samples: np.ndarray) -> np.ndarray:
    t = frame_count(samples.size)
    idx = np.arange(WIN_SAMPLES)[None, :] + HOP_SAMPLES * np.arange(t)[:, None]
    frames = samples[idx] * _hann()[None, :]
    return np.fft.rfft(frames, n=N_FFT, axis=1)


def _istft(spec: np.ndarray) -> np.ndarray:
    t = spec.shape[0]
    frames = np.fft.irfft(spec, n=N_FFT, axis=1)[:, :WIN_SAMPLES]
    w = _hann()
    out = np.zeros((t - 1) * HOP_SAMPLES + WIN_SAMPLES)
    norm = np.zeros_like(out)
    for i in range(t):
        lo = i * HOP_SAMPLES
        out[lo:lo + WIN_SAMPLES] += frames[i] * w
        norm[lo:lo + WIN_SAMPLES] += w * w
    return out / np.maximum(norm, 1e-8)


def log_mel(w: Waveform) -> MelSpectrogram:
    """80-dim log-mel energies: ln(max(mel power, 1e-10)) per frame."""
    mag = stft_magnitude(w.samples)
    power = mag * mag
    mel = power @ mel_filterbank().T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)))


def stack_downsample(m: MelSpectrogram, f: int) -> StackedFeature:
    """Row i of the result is frames [i*f, i*f + f) laid side by side.

    The tail window is zero padded, so T' = ceil(T / f). Zero here means zero
    feature values, not the log floor; padding rows are exactly zero.
    """
    if f < 1:
        raise ParameterError(f"stack factor must be >= 1, got {f}")
    t = m.num_frames
    t_out = -(-t // f)
    padded = np.zeros((t_out * f, N_MELS))
    padded[:t] = m.frames
    return StackedFeature(padded.reshape(t_out, f * N_MELS), stack_factor=f)


@functools.lru_cache(maxsize=2)
def _mel_pinv() -> np.ndarray:
    return np.linalg.pinv(mel_filterbank())


def _mel_to_magnitude(m: MelSpectrogram) -> np.ndarray:
    power = np.maximum(np.exp(m.frames) @ _mel_pinv().T, 0.0)
    return np.sqrt(power)


def _mel_distance(samples: np.ndarray, target: MelSpectrogram) -> float:
    got = log_mel(Waveform(_bounded(samples))).frames
    t = min(got.shape[0], target.frames.shape[0])
    return float(np.sqrt(((got[:t] - target.frames[:t]) ** 2).mean()))


def _bounded(samples: np.ndarray) -> np.ndarray:
    peak = np.abs(samples).max()
    return samples / peak if peak > 1.0 else samples


def griffin_lim(m: MelSpectrogram, iters: int = 32, seed: int = 0,
                return_trace: bool = False):
    """Invert a log-mel matrix to audio by iterative phase re-estimation.

    Keeps the best iterate under the re-analysis objective (L2 distance of the
    output's log-mel to `m`), so more iterations can never return a worse
    waveform and the reported trace is non-increasing.
    """
    if iters < 1:
        raise ParameterError("griffin_lim needs iters >= 1")
    target_mag = _mel_to_magnitude(m)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target_mag.shape))
    best_samples = None
    best_err = np.inf
    trace = []
    for _ in range(iters):
        samples = _istft(target_mag * phase)
        err = _mel_distance(samples, m)
        if err < best_err:
            best_err = err
            best_samples = samples
        trace.append(best_err)
        phase = np.exp(1j * np.angle(_stft(samples)))
    wave = Waveform(_bounded(best_samples))
    return (wave, trace) if return_trace else wave


def griffin_lim_chunked(m: MelSpectrogram, chunk_frames: int, overlap_frames: int,
                        iters: int = 32, seed: int = 0):
    """Streaming variant: invert fixed-size frame chunks and crossfade.

    Consecutive chunks share `overlap_frames` frames; their waveforms are
    blended with a cosine fade across the shared span. Returns the assembled
    waveform and the per-chunk wall-clock seconds (the emission cadence a
    streaming caller would see).
    """
    if overlap_frames < 0 or chunk_frames <= overlap_frames:
        raise ParameterError(
            f"need chunk_frames > overlap_frames >= 0, got {chunk_frames}/{overlap_frames}")
    t = m.num_frames
    step = chunk_frames - overlap_frames
    starts = list(range(0, max(t - overlap_frames, 1), step))
    # clamp the final chunk to end exactly at frame t
    out_len = (t - 1) * HOP_SAMPLES + WIN_SAMPLES
    out = np.zeros(out_len)
    weight = np.zeros(out_len)
    latencies = []
    for start in starts:
        stop = min(start + chunk_frames, t)
        t0 = time.perf_counter()
        piece = griffin_lim(MelSpectrogram(m.frames[start:stop]), iters=iters, seed=seed)
        latencies.append(time.perf_counter() - t0)
        seg = piece.samples
        lo = start * HOP_SAMPLES
        w = np.ones(seg.size)
        if start > 0 and overlap_frames > 0:
            fade = overlap_frames * HOP_SAMPLES
            n = min(fade, seg.size)
            w[:n] = 0.5 - 0.5 * np.cos(np.pi * (np.arange(n) + 0.5) / n)
        hi = min(lo + seg.size, out_len)
        out[lo:hi] += (seg * w)[:hi - lo]
        weight[lo:hi] += w[:hi - lo]
        if stop >= t:
            break
    filled = weight > 1e-8
    out[filled] /= weight[filled]
    return Waveform(_bounded(out)), latencies


# -- WAV file I/O ------------------------------------------------------------


def write_wav(path, w: Waveform):
    """RIFF PCM16 mono 16 kHz, little-endian."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave_module.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    try:
        with wave_module.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave_module.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a readable WAV file: {exc}") from exc
    if channels != 1 or width != 2 or rate != SAMPLE_RATE:
        raise FormatError(
            f"{path}: need mono PCM16 @ {SAMPLE_RATE} Hz, got "
            f"{channels} ch, {8 * width}-bit, {rate} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    if samples.size == 0:
        raise FormatError(f"{path}: WAV contains no samples")
    return Waveform(samples)


def dominant_frequency(w: Waveform) -> float:
    """FFT-peak frequency estimate, used by tests as an independent oracle."""
    spec = np.abs(np.fft.rfft(w.samples * np.hanning(w.samples.size)))
    spec[0] = 0.0
    return float(np.fft.rfftfreq(w.samples.size, 1.0 / w.sample_rate)[np.argmax(spec)])
