# Log-mel features and the pitch-shift augmentation on a synthetic tone.
#
# Run: python demos/01_features_and_pitch_shift.py

# %%
import numpy as np

from multisample.dsp import MelConfig, extract_logmel, mel_center_frequencies, pitch_shift
from multisample.synthgen import SynthSpec, gen_tone_bank

cfg = MelConfig()
print("window", cfg.win_length, "hop", cfg.hop_length, "fft", cfg.n_fft, "bins", cfg.n_mels)

# %%
# one A4 tone, 0.96 s: exactly one 64 x 96 segment
tone = gen_tone_bank(SynthSpec("tone_bank", 1, 0.96, seed=0, midi_range=(69, 69)))[0]
feats = extract_logmel(tone.waveform, cfg)
print("features", feats.shape)

centres = mel_center_frequencies(cfg)
peak_bin = int(np.argmax(feats.mean(axis=1)))
print(f"loudest mel bin {peak_bin} centred at {centres[peak_bin]:.0f} Hz")


# %%
def dominant_hz(x, sr=16000):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n=1 << 18))
    return np.argmax(spec) * sr / (1 << 18)


for a in (0.8, 0.9, 1.0, 1.1, 1.2):
    shifted = pitch_shift(tone.waveform, a)
    print(f"a={a:.1f}  length {len(shifted)}  peak {dominant_hz(shifted.samples):7.1f} Hz"
          f"  (expected {440 * a:.1f})")

# %%
# the shifted view keeps its duration, so frames line up with the anchor
shifted_feats = extract_logmel(pitch_shift(tone.waveform, 1.2), cfg)
print("shifted features", shifted_feats.shape)
print("loudest bin moves from", peak_bin, "to", int(np.argmax(shifted_feats.mean(axis=1))))
