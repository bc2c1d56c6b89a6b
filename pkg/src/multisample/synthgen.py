"""Deterministic synthetic corpora: tone banks, event tracks and noise textures.

Each generator is a pure function of its spec (which carries the seed) and
returns a list of :class:`~multisample.dsp.Clip`. ``dsp.save_corpus`` writes
any of them to WAV files plus a manifest.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .dsp import CANONICAL_SR, Clip, MelConfig, Waveform

N_PIANO_KEYS = 88
LOWEST_KEY_MIDI = 21  # A0


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "tone_bank"
    n_clips: int = 64
    duration_s: float = 1.5
    seed: int = 0
    sample_rate: int = CANONICAL_SR
    # tone_bank
    midi_range: tuple[int, int] = (36, 96)
    n_harmonics: int = 4
    rolloff_range: tuple[float, float] = (1.0, 1.0)  # harmonic k has amplitude k ** -p
    detune_cents: float = 0.0
    snr_db_range: Optional[tuple[float, float]] = None
    # texture_clips and event_track
    n_classes: int = 4
    noise_level: float = 0.05
    # event_track
    event_density: float = 1.0  # events per second
    event_duration_s: tuple[float, float] = (0.4, 0.9)
    min_gap_s: float = 0.1
    max_polyphony: int = 1
    event_jitter: float = 0.0  # relative frequency jitter of each event
    clutter_density: float = 0.0  # unlabelled distractor tones per second


def midi_to_hz(midi) -> np.ndarray:
    return 440.0 * 2.0 ** ((np.asarray(midi, dtype=np.float64) - 69) / 12)


def midi_to_key(midi: int) -> int:
    """Piano-key class index in [0, 88), A0 = 0."""
    return int(midi) - LOWEST_KEY_MIDI


def harmonic_tone(f0, duration_s, sr, rng, n_harmonics=4, rolloff=1.0):
    """Tone with ``n_harmonics`` partials at ``k ** -rolloff`` amplitude, random
    phases and an attack/decay envelope. Partials at or above Nyquist are dropped."""
    t = np.arange(int(round(duration_s * sr))) / sr
    x = np.zeros_like(t)
    for k in range(1, n_harmonics + 1):
        if k * f0 >= sr / 2:
            break
        x += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) * k**-rolloff
    attack = rng.uniform(0.005, 0.03)
    decay = rng.uniform(1.0, 4.0)
    env = np.minimum(t / attack, 1.0) * np.exp(-t / decay)
    return x * env * rng.uniform(0.5, 1.0)


def _peak(x):
    p = np.max(np.abs(x))
    return x / p if p > 0 else x


def _add_noise(x, rng, snr_db_range):
    snr = rng.uniform(*snr_db_range)
    power = np.mean(x**2)
    return x + np.sqrt(power / 10 ** (snr / 10)) * rng.standard_normal(len(x))


def gen_tone_bank(spec: SynthSpec) -> list[Clip]:
    """Harmonic tones cycling through the MIDI range; ``label`` is the piano key index.

    Raises:
        SynthError: if a fundamental falls outside the default mel band.
    """
    lo, hi = spec.midi_range
    mel = MelConfig()
    if not (LOWEST_KEY_MIDI <= lo <= hi < LOWEST_KEY_MIDI + N_PIANO_KEYS):
        raise SynthError(f"midi_range {spec.midi_range} is not within the 88 piano keys")
    if midi_to_hz(lo) < mel.fmin_hz or midi_to_hz(hi) > mel.fmax_hz:
        raise SynthError(
            f"fundamentals {midi_to_hz(lo):.1f}-{midi_to_hz(hi):.1f} Hz fall outside "
            f"[{mel.fmin_hz}, {mel.fmax_hz}] Hz"
        )
    rng = np.random.default_rng(spec.seed)
    clips = []
    pitches = np.arange(lo, hi + 1)
    for i in range(spec.n_clips):
        midi = int(pitches[i % len(pitches)])
        f0 = midi_to_hz(midi) * 2 ** (rng.uniform(-1, 1) * spec.detune_cents / 1200)
        rolloff = rng.uniform(*spec.rolloff_range)
        x = harmonic_tone(f0, spec.duration_s, spec.sample_rate, rng, spec.n_harmonics, rolloff)
        if spec.snr_db_range is not None:
            x = _add_noise(x, rng, spec.snr_db_range)
        else:
            x = x + spec.noise_level * 0.1 * rng.standard_normal(len(x))
        clips.append(
            Clip(f"tone{spec.seed}_{i:04d}", Waveform(_peak(x), spec.sample_rate),
                 label=midi_to_key(midi), meta={"midi": midi})
        )
    return clips


def texture_bands(n_classes: int, lo_hz=150.0, hi_hz=6000.0) -> list[tuple[float, float]]:
    """Disjoint log-spaced passbands, one per class, separated by guard gaps."""
    edges = np.geomspace(lo_hz, hi_hz, n_classes + 1)
    return [(e0 * 1.08, e1 / 1.08) for e0, e1 in zip(edges[:-1], edges[1:])]


def _band_noise(n, sr, band, rng):
    sos = signal.butter(4, band, btype="bandpass", fs=sr, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n + 2048))[2048:]


def gen_texture_clips(spec: SynthSpec) -> list[Clip]:
    """Band-limited, amplitude-modulated noise; class ``c`` owns passband ``c``."""
    if spec.n_classes < 2:
        raise SynthError("texture clips need at least two classes")
    rng = np.random.default_rng(spec.seed)
    bands = texture_bands(spec.n_classes)
    sr = spec.sample_rate
    n = int(round(spec.duration_s * sr))
    t = np.arange(n) / sr
    clips = []
    for i in range(spec.n_clips):
        c = i % spec.n_classes
        x = _band_noise(n, sr, bands[c], rng)
        am_rate = 2.0 + 3.0 * c + rng.uniform(-0.5, 0.5)
        x = x * (1.0 + 0.5 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi)))
        x = _peak(x) + spec.noise_level * rng.standard_normal(n)
        clips.append(Clip(f"texture{spec.seed}_{i:04d}", Waveform(_peak(x), sr), label=c))
    return clips


def event_template(c: int, n: int, sr: int, rng, jitter: float = 0.0) -> np.ndarray:
    """Class ``c`` (1-based) sound: a two-partial tone at a class-specific
    frequency over band noise, with a short fade in and out."""
    f = 300.0 * 1.6 ** (c - 1) * (1 + rng.uniform(-jitter, jitter))
    t = np.arange(n) / sr
    x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    x += 0.5 * np.sin(2 * np.pi * 2.5 * f * t + rng.uniform(0, 2 * np.pi))
    x += 0.9 * _band_noise(n, sr, (f * 0.8, min(f * 1.25, sr / 2 - 100)), rng)
    fade = min(n // 2, int(0.01 * sr))
    ramp = np.linspace(0, 1, fade) if fade else np.ones(0)
    env = np.ones(n)
    env[:fade], env[n - fade:] = ramp, ramp[::-1]
    return x * env


def frame_labels_for(events, duration_s: float, hop_s: float = 0.01) -> np.ndarray:
    """Per-frame class track; frame k is labelled when its centre ``(k + 0.5) * hop``
    lies inside an event's ``[onset, offset)``. Background is 0."""
    n_frames = int(round(duration_s / hop_s))
    centres = (np.arange(n_frames) + 0.5) * hop_s
    labels = np.zeros(n_frames, dtype=np.int64)
    for onset, offset, c in events:
        labels[(centres >= onset) & (centres < offset)] = c
    return labels


def _clutter(n, sr, rng, density):
    """Unlabelled short tones at random frequencies, part of the background."""
    x = np.zeros(n)
    for _ in range(rng.poisson(density * n / sr)):
        length = int(rng.uniform(0.05, 0.3) * sr)
        start = int(rng.integers(0, max(1, n - length)))
        f = rng.uniform(150, 4000)
        t = np.arange(length) / sr
        x[start:start + length] += 0.3 * np.sin(2 * np.pi * f * t) * np.hanning(length)
    return x


def render_event_track(events, duration_s: float, sr: int = CANONICAL_SR, rng=None,
                       noise_level: float = 0.05, clip_id: str = "event",
                       jitter: float = 0.0, clutter_density: float = 0.0) -> Clip:
    """Render explicit ``(onset_s, offset_s, class)`` events over a noise bed."""
    rng = np.random.default_rng(0) if rng is None else rng
    n = int(round(duration_s * sr))
    x = noise_level * rng.standard_normal(n)
    if clutter_density > 0:
        x += _clutter(n, sr, rng, clutter_density)
    ordered = sorted(events)
    for (on0, off0, _), (on1, _, _) in zip(ordered, ordered[1:]):
        if on1 < off0:
            raise SynthError("overlapping events exceed max polyphony of 1")
    for onset, offset, c in ordered:
        if c < 1:
            raise SynthError("event classes start at 1; 0 is background")
        i0, i1 = int(round(onset * sr)), min(int(round(offset * sr)), n)
        x[i0:i1] += 0.5 * event_template(c, i1 - i0, sr, rng, jitter)
    labels = frame_labels_for(ordered, duration_s)
    return Clip(clip_id, Waveform(np.clip(x, -1, 1), sr), frame_labels=labels,
                meta={"events": [tuple(e) for e in ordered], "onsets": onsets_from_labels(labels)})


def onsets_from_labels(labels: Sequence[int]) -> list[tuple[int, int]]:
    """``(frame, class)`` for the first frame of each run of a non-background class."""
    out, prev = [], 0
    for i, c in enumerate(labels):
        if c != 0 and c != prev:
            out.append((i, int(c)))
        prev = c
    return out


def _place_events(rng, spec: SynthSpec):
    # Poisson count, capped at what fits back to back with the longest duration
    capacity = int((spec.duration_s - spec.min_gap_s) // (spec.event_duration_s[1] + spec.min_gap_s))
    n_events = min(rng.poisson(spec.event_density * spec.duration_s), capacity)
    if n_events == 0:
        return []
    durs = rng.uniform(*spec.event_duration_s, size=n_events)
    slack = spec.duration_s - durs.sum() - spec.min_gap_s * (n_events + 1)
    if slack < 0:
        raise SynthError(
            f"{n_events} events of {durs.sum():.2f} s total do not fit in "
            f"{spec.duration_s} s without overlap (max polyphony {spec.max_polyphony})"
        )
    gaps = rng.dirichlet(np.ones(n_events + 1)) * slack + spec.min_gap_s
    classes = rng.integers(1, spec.n_classes + 1, size=n_events)
    events, t = [], 0.0
    for gap, dur, c in zip(gaps[:-1], durs, classes):
        onset = round(t + gap, 2)
        events.append((onset, round(onset + dur, 2), int(c)))
        t = onset + dur
    return events


def gen_event_track(spec: SynthSpec) -> list[Clip]:
    """Noise-bed clips with non-overlapping labelled events at random times.

    Each clip carries a 10 ms frame-label track (0 = background) and the onset list
    in ``meta["onsets"]``.
    """
    if spec.n_classes < 2:
        raise SynthError("event tracks need at least two event classes")
    if spec.max_polyphony != 1:
        raise SynthError("only monophonic event tracks (max_polyphony=1) are supported")
    if spec.event_density * spec.event_duration_s[1] >= 1.0:
        raise SynthError("event density too high to keep events from overlapping")
    rng = np.random.default_rng(spec.seed)
    return [
        render_event_track(_place_events(rng, spec), spec.duration_s, spec.sample_rate, rng,
                           spec.noise_level, f"event{spec.seed}_{i:04d}",
                           spec.event_jitter, spec.clutter_density)
        for i in range(spec.n_clips)
    ]


# timbre, tuning and noise variation used by the desk-scale corpora
VARIED_TONES = dict(rolloff_range=(0.5, 2.0), snr_db_range=(5.0, 20.0), detune_cents=30.0)
VARIED_EVENTS = dict(event_jitter=0.2, clutter_density=3.0, noise_level=0.3)


def gen_mixed_corpus(n_clips: int = 200, seed: int = 0, duration_s: float = 1.5,
                     tone_options: Optional[dict] = None) -> list[Clip]:
    """Half tone-bank clips, half texture clips; the pretraining corpus of the desk suite.

    ``tone_options`` are extra :class:`SynthSpec` fields for the tones
    (default :data:`VARIED_TONES`).
    """
    n_tones = n_clips // 2
    rng = np.random.default_rng(seed)
    tone_seed, texture_seed = (int(s) for s in rng.integers(0, 2**31, size=2))
    options = VARIED_TONES if tone_options is None else tone_options
    tones = gen_tone_bank(SynthSpec("tone_bank", n_tones, duration_s, tone_seed, **options))
    # shuffle pitches so that clip order does not encode pitch
    order = rng.permutation(n_tones)
    tones = [tones[i] for i in order]
    textures = gen_texture_clips(SynthSpec("texture_clips", n_clips - n_tones, duration_s, texture_seed))
    return tones + textures


GENERATORS = {
    "tone_bank": gen_tone_bank,
    "event_track": gen_event_track,
    "texture_clips": gen_texture_clips,
}


def generate(spec: SynthSpec) -> list[Clip]:
    if spec.kind not in GENERATORS:
        raise SynthError(f"unknown corpus kind {spec.kind!r}")
    return GENERATORS[spec.kind](spec)
