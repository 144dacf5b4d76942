# # Losses on toy maps
#
# Every term of the model objective evaluated on hand-sized inputs.
# Run with `python demos/01_losses.py`.

import math

import torch

from contuda import losses as L

# ## Self-information of a pixel distribution
#
# Maps are channels-first `(C, H, W)`. A confident pixel carries no
# information, a uniform one carries `ln C` in total.

p = torch.tensor([[[0.8]], [[0.2]]], dtype=torch.float64)
info = L.self_information_map(p)
print("self-information of (0.8, 0.2):", info.flatten().tolist())
print("sum equals the entropy:", info.sum().item(), -(0.8 * math.log(0.8) + 0.2 * math.log(0.2)))

uniform = torch.full((4, 2, 2), 0.25, dtype=torch.float64)
print("uniform C=4, per entry:", L.self_information_map(uniform)[0, 0, 0].item())

# ## Discriminator and adversarial terms
#
# The discriminator wants source patches near 1 and target patches near 0;
# the segmentation model wants its target patches scored as source.

half = torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64)
print("discriminator loss at 0.5:", L.discriminator_loss(half, half).item(), "= 2 ln 2")
print("fool loss at 0.5:", L.adversarial_fool_loss(half).item(), "= ln 2")

# ## KL distillation
#
# Summed over pixels and classes; the teacher is detached.

teacher = torch.tensor([[[0.8]], [[0.2]]], dtype=torch.float64)
student = torch.full((2, 1, 1), 0.5, dtype=torch.float64, requires_grad=True)
kl = L.kl_map(teacher, student)
kl.backward()
print("KL((0.8,0.2) || (0.5,0.5)):", kl.item())
print("student gradient:", student.grad.flatten().tolist())

w = L.LossWeights(lambda_prev=1e-5)
print("distribution distillation, first step:", L.generalist_distillation_loss([0.2], [], w))
print("distribution distillation, later step:", L.generalist_distillation_loss([0.4, 0.2], [0.1], w))

# ## Pooled feature distillation
#
# Row means then column means, per region, per channel, per scale.

feature = torch.tensor([[[1.0, 3.0], [5.0, 7.0]]])
print("pooled embedding at scale 1:", L.pod_embed(feature, [1]).tolist())
print("distance to an all-zero feature:", L.local_pod_loss([feature], [torch.zeros_like(feature)], [1]).item())

f = torch.randn(8, 16, 16)
print("embedding length for scales (1, 2):", L.pod_embed(f, [1, 2]).numel(), "=", 8 * 3 * 32)

# ## Weighted total

w = L.LossWeights(lambda_adv=1e-3, lambda_dd=1.0, lambda_fd=1e-2)
print("total:", L.total_model_loss(0.5, 1.0, 0.2, 74.0, w))
