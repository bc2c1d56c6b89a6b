# Pretrain a small encoder on the synthetic mixed corpus, then probe it.
#
# Run: python demos/03_pretrain_and_probe.py [epochs]
# Takes a few minutes on one CPU core at the default 5 epochs.

# %%
import sys

import numpy as np

from multisample import experiments, probe
from multisample.model import init_params, state_hash
from multisample.pretrain import TrainConfig, epoch_means, train
from multisample.synthgen import gen_mixed_corpus

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5

# %%
corpus = gen_mixed_corpus(200, seed=0)
print(len(corpus), "clips,", sum(c.clip_id.startswith("tone") for c in corpus), "of them tones")

cfg = TrainConfig(epochs=epochs, seed=0)
ckpt = train(corpus, cfg, on_record=lambda r: r.step == 0 and print(
    f"epoch {r.epoch:2d}  a={r.shift:.3f}  L={r.L:.3f}  clip={r.L_clip:.3f}  frame={r.L_frame:.3f}  pitch={r.L_pitch:.3f}"))
print("epoch means", np.round(epoch_means(ckpt.log), 3))

# %%
data = experiments.probe_datasets(seed=0)
for name, d in data.items():
    print(f"{name:8s} train {len(d.train):3d}  test {len(d.test):3d}  task {d.task.kind}")

# %%
encoder = ckpt.build_model().encoder
before = state_hash(encoder)
for label, source in [("random", init_params(seed=0)), ("pretrained", encoder)]:
    for rep in experiments.probe_encoder(source, data, label=label):
        print(f"{label:10s} {rep.task:8s}", {k: round(v, 3) for k, v in rep.metrics.items()})
print("encoder unchanged by probing:", state_hash(encoder) == before)

# %%
# the embedding archive is what the CLI passes between stages
archive = probe.embed_corpus(data["events"].test[:2], encoder, "framewise")
print("framewise archive:", [e.shape for e in archive.embeddings], "hop", archive.frame_hop_s, "s")
