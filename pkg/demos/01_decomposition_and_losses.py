"""
Recomposition and the four losses on tensors small enough to read
=================================================================

A segmenter here is trained without masks. It predicts a soft mask stack
``M`` (one map per class, summing to one at every pixel) and one image-let
``X_k`` per class, and is rewarded for rebuilding the input as
``sum_k M_k * X_k``. Run with ``python demos/01_decomposition_and_losses.py``.
"""

import math

import torch

from decompseg import (
    LossWeights,
    average_mask_score,
    component_images,
    loss_classifier,
    loss_cls,
    loss_mask,
    loss_recon,
    loss_total,
    recompose,
)

torch.set_printoptions(precision=4)

# One 2x2 RGB image and K=2 classes: class 0 is the object, class 1 the background.
image = torch.tensor([[[1.0, 0.2], [0.2, 0.2]]] * 3).unsqueeze(0)  # bright top-left pixel

# A hard mask that puts the bright pixel in class 0 and everything else in class 1.
m = torch.zeros(1, 2, 2, 2)
m[0, 0, 0, 0] = 1
m[0, 1] = 1 - m[0, 0]

# Each image-let may hold anything where its mask is zero; here both simply copy the image.
x = image.unsqueeze(1).repeat(1, 2, 1, 1, 1)

print("recomposition equals the image:", torch.allclose(recompose(m, x), image))
print("component images (class 0 then class 1), first channel:")
print(component_images(m, x)[0, :, 0])

# The mask scores are the per-class mean of the mask, i.e. predicted area fractions.
y_hat = average_mask_score(m)
print("average mask score:", y_hat)

# Tags say "object present, background present". The area term wants both scores at 1,
# which a mask that sums to one can never give; it bottoms out at ln 2 with a 50/50 split.
y = torch.tensor([[1.0, 1.0]])
print(f"mask loss at this 25/75 split: {loss_mask(y_hat, y).item():.4f}")
half = torch.full((1, 2, 2, 2), 0.5)
print(f"mask loss at a 50/50 split:    {loss_mask(average_mask_score(half), y).item():.4f} "
      f"(ln 2 = {math.log(2):.4f})")

# Reconstruction error of a uniform offset of one is one.
print("unit-offset reconstruction loss:", loss_recon(image + 1, image).item())


# Classifier guidance needs a frozen tag classifier. A toy one: "object present" when
# any pixel is brighter than 0.5.
class Bright(torch.nn.Module):
    def forward(self, images):
        score = torch.sigmoid(20 * (images.amax(dim=(1, 2, 3)) - 0.5))
        return score.unsqueeze(1)


g = Bright().eval()
print(f"guidance loss with the object isolated: {loss_cls(m, x, y, g).item():.4f}")
leaky = torch.full_like(m, 0.5)
print(f"guidance loss when both components see the object: {loss_cls(leaky, x, y, g).item():.4f}")

# The classifier itself is trained beforehand with a per-class binary cross-entropy.
print(f"classifier loss for scores (0.8, 0.3) against tags (1, 0): "
      f"{loss_classifier(torch.tensor([[0.8, 0.3]]), torch.tensor([[1.0, 0.0, 1.0]])).item():.6f}")

# The training objective weighs the three terms; the report keeps each part.
report = loss_total(m, x, image, y, g, LossWeights(lambda_m=1e-3, lambda_c=1e-3))
for key, value in report.as_dict().items():
    print(f"  {key:>14}: {value:.6g}")
