"""Audio ingestion, spectrograms, normalized windows and the synthetic corpus."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ClipTooShort,
    EmptyAudio,
    EmptyRecipe,
    InvalidConfig,
    IOFailure,
    MalformedContainer,
    SpectrogramTooShort,
    UnsupportedEncoding,
)

WINDOW_FRAMES = 128
NORM_EPS = 1e-8
CLASSES = ("noise", "whistle", "click", "burst")

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidConfig("AudioClip samples must be mono (1-D)")
        if self.samples.size == 0:
            raise EmptyAudio(f"{self.source_id or 'clip'}: no samples")
        if int(self.sample_rate) <= 0:
            raise InvalidConfig(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidConfig(f"{self.source_id or 'clip'}: non-finite samples")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class SpectrogramParams:
    window_seconds: float = 0.01
    hop_seconds: float = 0.005
    fft_size: int = 512
    scale: str = "magnitude"

    def window_length(self, sample_rate: int) -> int:
        return int(round(self.window_seconds * sample_rate))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(self.hop_seconds * sample_rate))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def validate(self, sample_rate: int) -> None:
        n = self.fft_size
        if n < 2 or n & (n - 1):
            raise InvalidConfig(f"fft_size must be a power of two, got {n}")
        W, H = self.window_length(sample_rate), self.hop_length(sample_rate)
        if W < 1 or H < 1:
            raise InvalidConfig("window and hop must span at least one sample")
        if H > W:
            raise InvalidConfig(f"hop ({H} samples) exceeds window ({W} samples)")
        if n < W:
            raise InvalidConfig(f"fft_size {n} is shorter than the window ({W} samples)")
        if self.scale not in ("magnitude", "power", "log"):
            raise InvalidConfig(f"unknown spectrogram scale {self.scale!r}")


@dataclass
class Spectrogram:
    frames: np.ndarray  # T x F
    params: SpectrogramParams
    sample_rate: int
    source_id: str = ""
    start_sample: int = 0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    def frame_to_sample(self, frame: int) -> int:
        return self.start_sample + frame * self.params.hop_length(self.sample_rate)

    def to_csv(self, path) -> None:
        write_frames_csv(path, self.frames)


@dataclass
class Window:
    values: np.ndarray  # 128 x F, per-frame standard scores
    source_id: str = ""
    start_frame: int = 0

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self, path) -> None:
        write_frames_csv(path, self.values)


@dataclass
class LabeledClip:
    clip: AudioClip
    label: str
    meta: dict = field(default_factory=dict)


def write_frames_csv(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    header = "frame," + ",".join(f"bin_{j}" for j in range(frames.shape[1]))
    idx = np.arange(frames.shape[0])[:, None]
    np.savetxt(path, np.hstack([idx, frames]), delimiter=",", header=header,
               comments="", fmt=["%d"] + ["%.9g"] * frames.shape[1])


# WAV I/O


def _parse_fmt(body: bytes):
    if len(body) < 16:
        raise MalformedContainer("fmt chunk shorter than 16 bytes")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", body[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(body) < 40:
            raise MalformedContainer("WAVE_FORMAT_EXTENSIBLE fmt chunk truncated")
        tag = struct.unpack("<H", body[24:26])[0]
    return tag, channels, rate, block_align, bits


def load_audio(path) -> AudioClip:
    """Read a PCM16 or float32 RIFF/WAVE file as a mono clip in [-1, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IOFailure(f"{path}: {exc.strerror or exc}") from exc
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedContainer(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack("<4sI", raw[pos:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise MalformedContainer(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            fmt = _parse_fmt(body)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise MalformedContainer(f"{path}: missing fmt chunk")
    if data is None:
        raise MalformedContainer(f"{path}: missing data chunk")

    tag, channels, rate, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise MalformedContainer(f"{path}: invalid channel count or sample rate")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncoding(f"{path}: format tag {tag:#06x} with {bits} bits per sample")

    frame_bytes = dtype.itemsize * channels
    n_frames = len(data) // frame_bytes
    if n_frames == 0:
        raise EmptyAudio(f"{path}: data chunk holds no samples")
    pcm = np.frombuffer(data[:n_frames * frame_bytes], dtype=dtype).reshape(n_frames, channels)
    samples = pcm.astype(np.float64).mean(axis=1) * scale
    if not np.all(np.isfinite(samples)):
        raise MalformedContainer(f"{path}: non-finite float samples")
    return AudioClip(np.clip(samples, -1.0, 1.0), rate, source_id=str(path))


def save_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono 16-bit PCM."""
    pcm = np.round(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32767.0)
    try:
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(int(sample_rate))
            w.writeframes(pcm.astype("<i2").tobytes())
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from exc


# Spectrograms


def hann(n: int) -> np.ndarray:
    """Periodic Hann window 0.5 * (1 - cos(2 pi k / n))."""
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def n_frames_for(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def stft(clip: AudioClip, params: SpectrogramParams = SpectrogramParams()) -> Spectrogram:
    rate = clip.sample_rate
    params.validate(rate)
    W, H = params.window_length(rate), params.hop_length(rate)
    x = clip.samples
    if x.size < W:
        raise ClipTooShort(f"{clip.source_id or 'clip'}: {x.size} samples < window of {W}")
    T = n_frames_for(x.size, W, H)
    segments = np.lib.stride_tricks.sliding_window_view(x, W)[::H][:T]
    spectrum = np.abs(np.fft.rfft(segments * hann(W), n=params.fft_size, axis=1))
    if params.scale == "power":
        spectrum = spectrum ** 2
    elif params.scale == "log":
        spectrum = np.log1p(spectrum)
    return Spectrogram(spectrum, params, rate, source_id=clip.source_id)


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    mean = frames.mean(axis=-1, keepdims=True)
    std = frames.std(axis=-1, keepdims=True)
    out = (frames - mean) / np.maximum(std, NORM_EPS)
    # constant frames collapse to exactly zero
    out[np.broadcast_to(std <= NORM_EPS, out.shape)] = 0.0
    return out


def window_starts(n_frames: int, window_frames: int, hop_frames: int) -> list[int]:
    if n_frames < window_frames:
        return []
    return list(range(0, n_frames - window_frames + 1, hop_frames))


def extract_windows(spec: Spectrogram, window_frames: int = WINDOW_FRAMES,
                    hop_frames: int = 64) -> list[Window]:
    if hop_frames < 1 or window_frames < 1:
        raise InvalidConfig("window_frames and hop_frames must be >= 1")
    if spec.n_frames < window_frames:
        raise SpectrogramTooShort(
            f"{spec.source_id or 'spectrogram'}: {spec.n_frames} frames < {window_frames}")
    out = []
    for s in window_starts(spec.n_frames, window_frames, hop_frames):
        vals = normalize_frames(spec.frames[s:s + window_frames])
        out.append(Window(vals, spec.source_id, s))
    return out


def window_sample_span(start_frame: int, sample_rate: int,
                       params: SpectrogramParams = SpectrogramParams(),
                       window_frames: int = WINDOW_FRAMES) -> tuple[int, int]:
    """Half-open sample interval covered by a window's frames."""
    W, H = params.window_length(sample_rate), params.hop_length(sample_rate)
    start = start_frame * H
    return start, start + (window_frames - 1) * H + W


# Synthetic corpus


def band_noise(rng, n: int, rate: int, lo: float, hi: float) -> np.ndarray:
    """Unit-RMS Gaussian noise restricted to [lo, hi] Hz."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n=n)
    rms = np.sqrt(np.mean(x ** 2))
    return x / rms if rms > 0 else x


def chirp(n: int, rate: int, f_start: float, f_end: float, shape: str = "up",
          f_turn: float | None = None) -> np.ndarray:
    """Unit-amplitude frequency sweep; 'turn' bends through f_turn at the midpoint."""
    u = np.arange(n) / max(n - 1, 1)
    if shape == "turn":
        mid = f_turn if f_turn is not None else max(f_start, f_end) * 1.3
        freq = f_start + (mid - f_start) * 2 * u
        freq = np.where(u <= 0.5, freq, mid + (f_end - mid) * (2 * u - 1))
    else:
        freq = f_start + (f_end - f_start) * u
    phase = 2.0 * np.pi * np.cumsum(freq) / rate
    return np.sin(phase)


def chirp_frequency(u: np.ndarray, f_start: float, f_end: float) -> np.ndarray:
    """Instantaneous frequency of a linear sweep at relative position u in [0, 1]."""
    return f_start + (f_end - f_start) * np.asarray(u)


def pulse_train(n: int, rate: int, times_s: Sequence[float], center_hz: float,
                width_s: float = 2.5e-5) -> np.ndarray:
    """Sum of short Gabor pulses (broadband clicks) at the given times."""
    x = np.zeros(n)
    half = int(np.ceil(5 * width_s * rate))
    k = np.arange(-half, half + 1)
    tk = k / rate
    pulse = np.exp(-0.5 * (tk / width_s) ** 2) * np.cos(2 * np.pi * center_hz * tk)
    for t in times_s:
        c = int(round(t * rate))
        lo, hi = c - half, c + half + 1
        a, b = max(lo, 0), min(hi, n)
        if a < b:
            x[a:b] += pulse[a - lo:b - lo]
    return x


def _background(rng, n, rate):
    lo, hi = rng.uniform(100, 500), rng.uniform(3000, 6000)
    return 0.02 * band_noise(rng, n, rate, lo, hi) + 0.002 * rng.standard_normal(n)


def _synth_one(rng, label: str, n: int, rate: int):
    x = _background(rng, n, rate)
    meta = {}
    if label == "noise":
        lo, hi = rng.uniform(100, 800), rng.uniform(2000, 8000)
        x = x + rng.uniform(0.02, 0.08) * band_noise(rng, n, rate, lo, hi)
        meta.update(band=(lo, hi))
    elif label == "whistle":
        shape = rng.choice(["up", "down", "turn"])
        f0, f1 = rng.uniform(5000, 9000), rng.uniform(10000, 16000)
        if shape == "down":
            f0, f1 = f1, f0
        length = int(n * rng.uniform(0.75, 1.0))
        onset = int(rng.integers(0, n - length + 1))
        tone = chirp(length, rate, f0, f1, shape, f_turn=rng.uniform(16000, 18000))
        ramp = np.minimum(1.0, np.minimum(np.arange(length), np.arange(length)[::-1]) / (0.005 * rate))
        if 2 * max(f0, f1) < 0.45 * rate and shape != "turn":
            tone = tone + 0.3 * chirp(length, rate, 2 * f0, 2 * f1, shape)
        x[onset:onset + length] += rng.uniform(0.1, 0.3) * tone * ramp
        meta.update(shape=str(shape), f_start=f0, f_end=f1)
    elif label == "click":
        rate_hz = rng.uniform(20, 80)
        times = np.arange(rng.uniform(0, 1 / rate_hz), n / rate, 1.0 / rate_hz)
        x = x + rng.uniform(0.3, 0.8) * pulse_train(n, rate, times, rng.uniform(10000, 16000))
        meta.update(click_rate=rate_hz)
    elif label == "burst":
        rate_hz = rng.uniform(300, 700)
        length = n / rate * rng.uniform(0.7, 1.0)
        t0 = rng.uniform(0, n / rate - length)
        times = np.arange(t0, t0 + length, 1.0 / rate_hz)
        x = x + rng.uniform(0.2, 0.5) * pulse_train(n, rate, times, rng.uniform(6000, 10000),
                                                     width_s=5e-5)
        meta.update(pulse_rate=rate_hz)
    else:
        raise InvalidConfig(f"unknown class {label!r}; expected one of {CLASSES}")
    return np.clip(x, -1.0, 1.0), meta


def synthesize_corpus(seed: int, recipe: Mapping[str, int], duration: float = 0.75,
                      sample_rate: int = 44100) -> list[LabeledClip]:
    """Deterministic labeled clips; recipe maps class name to clip count."""
    counts = {k: int(v) for k, v in recipe.items() if int(v) > 0}
    if not counts:
        raise EmptyRecipe("recipe requests no clips")
    for k in counts:
        if k not in CLASSES:
            raise InvalidConfig(f"unknown class {k!r}; expected one of {CLASSES}")
    n = int(round(duration * sample_rate))
    out = []
    for ci, label in enumerate(CLASSES):
        for i in range(counts.get(label, 0)):
            rng = np.random.default_rng([seed, ci, i])
            x, meta = _synth_one(rng, label, n, sample_rate)
            clip = AudioClip(x, sample_rate, source_id=f"synth-{seed}-{label}-{i:05d}")
            out.append(LabeledClip(clip, label, meta))
    return out


def synthesize_recording(seed: int, segments: Sequence[tuple[str, float]],
                         sample_rate: int = 44100, source_id: str | None = None):
    """Concatenate class segments over one continuous noise floor.

    Returns the clip and the ground-truth list of (label, start_sample, end_sample).
    """
    if not segments:
        raise EmptyRecipe("no segments")
    rng = np.random.default_rng([seed, 99])
    lengths = [int(round(d * sample_rate)) for _, d in segments]
    total = sum(lengths)
    x = _background(rng, total, sample_rate)
    truth = []
    pos = 0
    for (label, _), n in zip(segments, lengths):
        seg, _ = _synth_one(rng, label, n, sample_rate)
        x[pos:pos + n] += seg
        truth.append((label, pos, pos + n))
        pos += n
    clip = AudioClip(np.clip(x, -1, 1), sample_rate, source_id=source_id or f"rec-{seed}")
    return clip, truth
