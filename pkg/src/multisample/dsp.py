"""Waveform ingestion, log-mel features and pitch-shift augmentation.

Everything here is a pure function of its inputs. Features use centre-padded
framing: the signal is zero-padded by ``(window - hop) / 2`` samples on each
side, so a clip of ``L`` samples yields ``L // hop`` frames and frame ``k`` is
centred on ``(k + 0.5) * hop``. A 960 ms clip at 16 kHz therefore gives exactly
96 frames.
"""
from __future__ import annotations

import json
import wave
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import signal

CANONICAL_SR = 16000


class AudioError(ValueError):
    """Raised for invalid waveforms, configs or audio files."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = CANONICAL_SR

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError(f"expected mono samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("waveform contains NaN or Inf")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = CANONICAL_SR
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 64
    fmin_hz: float = 60.0
    fmax_hz: float = 7800.0
    segment_frames: int = 96
    log_floor: float = 1e-6
    pad_short: bool = False

    def __post_init__(self):
        if not 0 < self.hop_ms < self.window_ms:
            raise AudioError("need window_ms > hop_ms > 0")
        if not 0 <= self.fmin_hz < self.fmax_hz < self.sample_rate / 2:
            raise AudioError("need fmin_hz < fmax_hz < sample_rate / 2")
        if self.n_mels < 1 or self.segment_frames < 1:
            raise AudioError("n_mels and segment_frames must be positive")
        if self.log_floor <= 0:
            raise AudioError("log_floor must be positive")
        if (self.win_length - self.hop_length) % 2:
            raise AudioError("window - hop must be an even number of samples")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_length - 1).bit_length()

    @property
    def segment_samples(self) -> int:
        return self.segment_frames * self.hop_length


@dataclass
class FeatureSegment:
    values: np.ndarray
    source_id: str = ""
    start_frame: int = 0

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """The ``n_mels + 2`` band edges in Hz; entry ``k + 1`` is the centre of filter ``k``."""
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    return mel_band_edges(cfg)[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-style filters, shape ``(n_mels, n_fft // 2 + 1)``, peak weight 1."""
    edges = mel_band_edges(cfg)
    fft_freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (centre - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    win, hop = cfg.win_length, cfg.hop_length
    pad = (win - hop) // 2
    if len(x) < win:
        if not cfg.pad_short:
            raise AudioError(
                f"waveform of {len(x)} samples is shorter than one {win}-sample window"
            )
        x = np.pad(x, (0, win - len(x)))
    x = np.pad(x, (pad, pad))
    n_frames = (len(x) - win) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]


def power_spectrogram(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    frames = frame_signal(np.asarray(x, dtype=np.float64), cfg)
    window = signal.get_window("hann", cfg.win_length, fftbins=True)
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=-1)
    return (spec.real**2 + spec.imag**2).T


def extract_logmel(w: Waveform, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Log-compressed mel spectrogram of shape ``(n_mels, n_frames)``.

    Raises:
        AudioError: if the sample rate does not match ``cfg`` or the waveform
            is shorter than one analysis window (and ``cfg.pad_short`` is off).
    """
    if w.sample_rate != cfg.sample_rate:
        raise AudioError(
            f"waveform is at {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz"
        )
    mel = mel_filterbank(cfg) @ power_spectrogram(w.samples, cfg)
    return np.log(mel + cfg.log_floor)


def n_frames_for(n_samples: int, cfg: MelConfig = MelConfig()) -> int:
    return n_samples // cfg.hop_length


def slice_segment(
    features: np.ndarray,
    start_frame: int,
    cfg: MelConfig = MelConfig(),
    source_id: str = "",
) -> FeatureSegment:
    total = features.shape[1]
    if start_frame < 0 or start_frame + cfg.segment_frames > total:
        raise AudioError(
            f"segment [{start_frame}, {start_frame + cfg.segment_frames}) does not fit "
            f"in {total} frames of clip {source_id!r}"
        )
    values = np.array(features[:, start_frame : start_frame + cfg.segment_frames])
    return FeatureSegment(values, source_id=source_id, start_frame=start_frame)


# -- pitch shifting ---------------------------------------------------------


def _stft(x, n_fft, hop):
    window = signal.get_window("hann", n_fft, fftbins=True)
    x = np.pad(x, (n_fft // 2, n_fft // 2))
    n = 1 + (len(x) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n]
    return np.fft.rfft(frames * window, axis=-1).T


def _istft(spec, n_fft, hop, length):
    window = signal.get_window("hann", n_fft, fftbins=True)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=-1) * window
    n_out = n_fft + hop * (frames.shape[0] - 1)
    positions = (np.arange(frames.shape[0]) * hop)[:, None] + np.arange(n_fft)[None, :]
    out = np.bincount(positions.ravel(), weights=frames.ravel(), minlength=n_out)
    norm = np.bincount(positions.ravel(), weights=np.tile(window**2, frames.shape[0]), minlength=n_out)
    out = out[n_fft // 2 :]
    norm = norm[n_fft // 2 :]
    out = np.where(norm > 1e-10, out / np.maximum(norm, 1e-10), 0.0)
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out[:length]


def time_stretch(x: np.ndarray, rate: float, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    """Phase-vocoder time stretch; output length is ``round(len(x) / rate)``."""
    spec = _stft(np.asarray(x, dtype=np.float64), n_fft, hop)
    n_bins, n_frames = spec.shape
    steps = np.arange(0, n_frames, rate)
    expected = 2 * np.pi * hop * np.arange(n_bins) / n_fft
    padded = np.concatenate([spec, np.zeros((n_bins, 2), complex)], axis=1)
    idx = steps.astype(int)
    frac = steps - idx
    left, right = padded[:, idx], padded[:, idx + 1]
    mag = (1 - frac) * np.abs(left) + frac * np.abs(right)
    dphi = np.angle(right) - np.angle(left) - expected[:, None]
    dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
    advance = np.cumsum(expected[:, None] + dphi, axis=1)
    phase = np.angle(spec[:, :1]) + np.concatenate([np.zeros((n_bins, 1)), advance[:, :-1]], axis=1)
    out = mag * np.exp(1j * phase)
    length = int(round(len(x) / rate))
    return _istft(out, n_fft, hop, length)


def pitch_shift(w: Waveform, a: float, a_range: Optional[Sequence[float]] = None) -> Waveform:
    """Scale every frequency in ``w`` by the ratio ``a`` without changing its duration.

    The signal is time-stretched by ``a`` with a phase vocoder and then resampled
    back to the original number of samples, then rescaled to the input's RMS level.
    """
    if a <= 0:
        raise AudioError(f"shift factor must be positive, got {a}")
    if a_range is not None and not a_range[0] <= a <= a_range[1]:
        raise AudioError(f"shift factor {a} outside range {tuple(a_range)}")
    if a == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    n = len(w)
    stretched = time_stretch(w.samples, 1.0 / a)
    shifted = signal.resample(stretched, n)
    rms_in, rms_out = np.sqrt(np.mean(w.samples**2)), np.sqrt(np.mean(shifted**2))
    if rms_out > 0:
        shifted = shifted * (rms_in / rms_out)
    return Waveform(shifted, w.sample_rate)


# -- WAV I/O and manifests --------------------------------------------------


def resample(w: Waveform, target_sr: int = CANONICAL_SR) -> Waveform:
    if w.sample_rate == target_sr:
        return w
    ratio = Fraction(target_sr, w.sample_rate).limit_denominator(1000)
    y = signal.resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(y, target_sr)


def peak_normalize(w: Waveform) -> Waveform:
    peak = np.max(np.abs(w.samples)) if len(w) else 0.0
    if peak == 0:
        return w
    return Waveform(w.samples / peak, w.sample_rate)


def read_wav(path, target_sr: int = CANONICAL_SR, normalize: bool = True) -> Waveform:
    """Read a 16-bit PCM WAV file, downmix to mono, resample and peak-normalise."""
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise AudioError(f"{path}: only 16-bit PCM is supported")
        n_channels = f.getnchannels()
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    data = data.reshape(-1, n_channels).mean(axis=1)
    w = resample(Waveform(data, sr), target_sr)
    return peak_normalize(w) if normalize else w


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


@dataclass
class ManifestRecord:
    """One line of a dataset manifest.

    ``path`` and ``frame_labels`` are resolved relative to the manifest file.
    ``label`` is an optional integer class; ``frame_labels`` optionally points
    to a file of ``{"frame": i, "label": c}`` lines at 10 ms resolution.
    """

    path: str
    clip_id: str
    label: Optional[int] = None
    frame_labels: Optional[str] = None


@dataclass
class Clip:
    clip_id: str
    waveform: Waveform
    label: Optional[int] = None
    frame_labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(ManifestRecord(**obj))
            except (TypeError, json.JSONDecodeError) as e:
                raise AudioError(f"{path}:{lineno}: bad manifest record ({e})") from None
    return records


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w") as f:
        for r in records:
            obj = {k: v for k, v in asdict(r).items() if v is not None}
            f.write(json.dumps(obj) + "\n")


def read_frame_labels(path, n_frames: Optional[int] = None) -> np.ndarray:
    pairs = []
    with open(path) as f:
        for line in f:
            if line.strip():
                obj = json.loads(line)
                pairs.append((int(obj["frame"]), int(obj["label"])))
    size = n_frames if n_frames is not None else (max(p[0] for p in pairs) + 1 if pairs else 0)
    labels = np.zeros(size, dtype=np.int64)
    for i, c in pairs:
        if i < size:
            labels[i] = c
    return labels


def write_frame_labels(path, labels: np.ndarray) -> None:
    with open(path, "w") as f:
        for i, c in enumerate(np.asarray(labels)):
            f.write(json.dumps({"frame": i, "label": int(c)}) + "\n")


def load_corpus(manifest_path, target_sr: int = CANONICAL_SR) -> list[Clip]:
    root = Path(manifest_path).parent
    clips = []
    for r in read_manifest(manifest_path):
        w = read_wav(root / r.path, target_sr)
        frame_labels = None
        if r.frame_labels is not None:
            frame_labels = read_frame_labels(root / r.frame_labels)
        clips.append(Clip(r.clip_id, w, r.label, frame_labels))
    return clips


def save_corpus(directory, clips: Sequence[Clip], manifest_name: str = "manifest.jsonl") -> Path:
    """Write clips as WAV files (plus frame-label files) and a manifest; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for clip in clips:
        wav_name = f"{clip.clip_id}.wav"
        write_wav(directory / wav_name, clip.waveform)
        fl_name = None
        if clip.frame_labels is not None:
            fl_name = f"{clip.clip_id}.labels.jsonl"
            write_frame_labels(directory / fl_name, clip.frame_labels)
        records.append(ManifestRecord(wav_name, clip.clip_id, clip.label, fl_name))
    path = directory / manifest_name
    write_manifest(path, records)
    return path
