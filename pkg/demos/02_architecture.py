"""
The shared-encoder, two-decoder U-Net, layer by layer
=====================================================

Both networks read the same encoder features: the mask decoder ends in a
K-channel softmax, the decomposition decoder in 3K channels reshaped to K
RGB image-lets. Parameter counts below are computed on the ``meta`` device,
so even the 35-million-parameter reference model costs no memory.
"""

import torch

from decompseg.models import (
    build_classifier,
    build_segmenter,
    desk_spec,
    format_table,
    forward_pair,
    layer_table,
    paper_spec,
    paper_table_diff,
    parameter_summary,
)

# Reference configuration: K=2 at 224x224.
paper = build_segmenter(paper_spec(2), device="meta")
print(format_table(layer_table(paper)))
print(parameter_summary(paper))
print("differences from the reference tables:", paper_table_diff(paper) or "none")

# The desk variant divides every width by eight and runs at 64x64.
torch.manual_seed(0)
desk = build_segmenter(desk_spec(2))
print("\ndesk-scale parameters:", parameter_summary(desk))

image = torch.rand(2, 3, 64, 64)
m, x = forward_pair(desk.f_m, desk.f_x, image)
print("mask stack", tuple(m.shape), "sums to one:", torch.allclose(m.sum(1), torch.ones(2, 64, 64)))
print("image-lets", tuple(x.shape))

# The two views share one encoder object, so a gradient step through either moves both.
print("encoder shared:", desk.f_m.encoder is desk.f_x.encoder)

# The guidance classifier is a ResNet-18 with one sigmoid output per foreground class.
g = build_classifier(2).freeze()
print("classifier scores:", g(image).detach().squeeze(1))
