# The three training objectives on toy embeddings.
#
# Run: python demos/02_losses.py

# %%
import math

import torch

from multisample import losses
from multisample.model import HeadOutputs

torch.manual_seed(0)
B, d, T = 4, 8, 3
W = torch.eye(d)

# %%
# clip loss: matching rows are positives, other clips in the batch are negatives
za = torch.randn(B, d)
print("clip loss, unrelated pairs   ", losses.loss_clip(za, torch.randn(B, d), W=W).item())
print("clip loss, identical pairs   ", losses.loss_clip(3 * za, 3 * za, W=W).item())
print("uniform logits, B=2 -> log 2 ", losses.clip_loss_from_logits(torch.zeros(2, 2)).item(), math.log(2))

# %%
# frame loss: each frame should be closest to itself (m=0) among the T' frames
same = torch.ones(B, d, T)
print("identical frames -> log 3    ", losses.loss_frame_single(same, m=0, W=W).item(), math.log(3))
distinct = torch.eye(d)[:T].T.expand(B, d, T) * 4
print("orthogonal frames            ", losses.loss_frame_single(distinct, m=0, W=W).item())

# %%
# pitch loss: the head difference between shifted and anchor should equal a
a = torch.tensor([0.8, 0.9, 1.1, 1.2])
anchor = torch.zeros(B, T)
print("perfect regression           ", losses.loss_pitch(anchor + a[:, None], anchor, a).item())
print("off by 0.1 per frame         ", losses.loss_pitch(anchor + a[:, None] + 0.1, anchor, a).item())

# %%
# combined objective with its three terms
views = [HeadOutputs(torch.randn(B, d), torch.randn(B, d, T), torch.randn(B, T)) for _ in range(3)]
total, terms = losses.loss_total(*views, a, W, W, losses.LossWeights(alpha=1.0, beta=1.0))
print("total", round(total.item(), 4), {k: round(v.item(), 4) for k, v in terms.items()})

# %%
# cosine similarity with temperature 0.2 puts identical vectors at 5
u = torch.randn(d)
print("cosine(u, u) / 0.2 =", losses.sim_cosine(u, u, 0.2).item())
