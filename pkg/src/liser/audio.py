"""WAV decoding, resampling, 3 s segmentation and log-Mel features."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAMPLE_RATE = 16000
SEGMENT_SAMPLES = 3 * SAMPLE_RATE
EVAL_HOP = SAMPLE_RATE // 10
N_MELS = 64
N_FFT = 2048  # 128 ms at 16 kHz
HOP = 512  # 32 ms
N_FRAMES = (SEGMENT_SAMPLES - N_FFT) // HOP + 1
LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8


class WavError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


# ----------------------------------------------------------------------- wav

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def decode_wav(data: bytes) -> Waveform:
    """Decode a RIFF/WAVE byte string (PCM16 or float32, mono or stereo)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError("RIFF header: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        name = cid.decode("latin-1")
        if len(body) < size and cid != b"data":
            raise WavError(f"'{name}' chunk: truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"'fmt ' chunk: too short ({size} bytes)")
            tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise WavError("'fmt ' chunk: extensible format without subformat")
                tag = struct.unpack("<H", body[24:26])[0]
            fmt = (tag, channels, rate, bits)
        elif cid == b"data":
            payload = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavError("'fmt ' chunk: missing")
    if payload is None:
        raise WavError("'data' chunk: missing")
    tag, channels, rate, bits = fmt
    if channels not in (1, 2):
        raise WavError(f"'fmt ' chunk: {channels} channels unsupported (1 or 2)")
    if tag == _PCM and bits == 16:
        raw = np.frombuffer(payload[:len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FLOAT and bits == 32:
        raw = np.frombuffer(payload[:len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise WavError(f"'fmt ' chunk: unsupported codec (format tag {tag}, {bits} bits)")
    if rate == 0:
        raise WavError("'fmt ' chunk: zero sample rate")
    if channels == 2:
        raw = raw[:len(raw) // 2 * 2].reshape(-1, 2).mean(axis=1)
    return Waveform(raw, rate)


def read_wav(path) -> Waveform:
    return decode_wav(Path(path).read_bytes())


def write_wav(path, w: Waveform) -> None:
    """Write mono PCM16."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())


# ----------------------------------------------------------------- resample

def resample(w: Waveform, target: int = SAMPLE_RATE) -> Waveform:
    """Linear-interpolation resampling to ``target`` Hz."""
    if w.sample_rate == target:
        return w
    if w.sample_rate < 8000:
        raise ValueError(f"source rate {w.sample_rate} Hz below 8 kHz")
    n_out = int(round(len(w) * target / w.sample_rate))
    t = np.arange(n_out) * (w.sample_rate / target)
    return Waveform(np.interp(t, np.arange(len(w)), w.samples), target)


# ------------------------------------------------------------- segmentation

def segment_starts(n: int, mode: str = "eval", rng: np.random.Generator | None = None) -> list[int]:
    """Start offsets (in samples) of the 3 s windows cut from an n-sample signal."""
    if n <= 0:
        raise ValueError("empty waveform")
    if n <= SEGMENT_SAMPLES:
        return [0]
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode cropping needs a random generator")
        return [int(rng.integers(0, n - SEGMENT_SAMPLES + 1))]
    if mode != "eval":
        raise ValueError(f"unknown mode {mode!r}")
    starts = list(range(0, n - SEGMENT_SAMPLES + 1, EVAL_HOP))
    if starts[-1] + SEGMENT_SAMPLES < n:
        starts.append(n - SEGMENT_SAMPLES)
    return starts


def cut_segment(samples: np.ndarray, start: int) -> np.ndarray:
    seg = samples[start:start + SEGMENT_SAMPLES]
    if len(seg) < SEGMENT_SAMPLES:
        seg = np.concatenate([seg, np.zeros(SEGMENT_SAMPLES - len(seg))])
    return seg


def crop_or_pad_3s(w: Waveform, mode: str = "eval", seed=None) -> list[Waveform]:
    """3 s segments: right zero-padding for short input, one random crop in
    train mode, 0.1 s-hop sliding windows in eval mode."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    rng = np.random.default_rng(seed) if mode == "train" else None
    return [Waveform(cut_segment(w.samples, s), SAMPLE_RATE)
            for s in segment_starts(len(w), mode, rng)]


# ------------------------------------------------------------------ log-mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filters of unit area, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    tri = np.maximum(0.0, np.minimum(rising, falling))
    return tri * (2.0 / (hi - lo))


_FB = mel_filterbank()
_HANN = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(N_FFT) / N_FFT)


def n_frames(n_samples: int) -> int:
    return (n_samples - N_FFT) // HOP + 1


def log_mel(segment, standardize: bool = True) -> np.ndarray:
    """64 x 90 log-Mel matrix of one 3 s, 16 kHz segment."""
    if isinstance(segment, Waveform):
        if segment.sample_rate != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz segment, got {segment.sample_rate}")
        segment = segment.samples
    x = np.asarray(segment, dtype=np.float64)
    if x.shape != (SEGMENT_SAMPLES,):
        raise ValueError(f"log_mel expects exactly {SEGMENT_SAMPLES} samples, got {x.shape}")
    frames = sliding_window_view(x, N_FFT)[::HOP] * _HANN
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    out = np.log(np.maximum(_FB @ power.T, LOG_FLOOR))
    if standardize:
        if out.min() == out.max():  # the mean of a constant need not round back to it
            return np.zeros_like(out)
        out = (out - out.mean()) / np.sqrt(max(out.var(), VAR_FLOOR))
    return out


def featurize_eval(w: Waveform) -> np.ndarray:
    """Stack of standardized log-Mels for every eval window, shape (W, 64, 90)."""
    w = resample(w)
    return np.stack([log_mel(cut_segment(w.samples, s)) for s in segment_starts(len(w), "eval")])
