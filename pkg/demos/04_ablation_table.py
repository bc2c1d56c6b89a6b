# Loss-combination ablation in the layout of the published comparison table.
#
# Run: python demos/04_ablation_table.py [epochs] [seed ...]
# Five pretraining runs per seed; about ten minutes per seed on one core at 20 epochs.

# %%
import sys

from multisample import experiments
from multisample.cli import cmd_table
from multisample.model import init_params
from multisample.pretrain import TrainConfig, train
from multisample.sampling import FeatureBank
from multisample.synthgen import gen_mixed_corpus

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
seeds = [int(s) for s in sys.argv[2:]] or [0]

# %%
reports = []
for seed in seeds:
    bank = FeatureBank(gen_mixed_corpus(200, seed=seed))
    data = experiments.probe_datasets(seed)
    reports += experiments.probe_encoder(init_params(seed=seed), data, label="random init")
    for name in experiments.ABLATIONS:
        ckpt = train(bank, experiments.ablation_config(name, TrainConfig(seed=seed, epochs=epochs)))
        reports += experiments.probe_encoder(ckpt, data, label=name)
        print("done", name, "seed", seed, flush=True)

# %%
print(cmd_table(reports, paper_values=True).to_text())
