"""
Model anatomy: the backbone and its four add-ons
================================================

Each add-on (atrous [1,2,4], atrous [1,3,9], max pooling pyramid, average
pooling pyramid) can be switched on or off. Switching everything off leaves
a plain U-Net whose weights are shared with every other configuration.
"""

import numpy as np

from qapseg import Tensor, build, parameter_count
from qapseg.model import TABLE2_COMBINATIONS, ModelConfig

config = ModelConfig(base_channels=8, input_size=(64, 64))

print(" 139  124  max  avg   params")
for flags in TABLE2_COMBINATIONS:
    model = build(config.with_flags(*flags), seed=0)
    marks = "".join(f"{'x' if on else '.':>5}" for on in flags)
    print(f"{marks}  {parameter_count(model):>8}")

# One forward pass of the full model on a random image.
full = build(config, seed=0)
probs = full(Tensor(np.random.default_rng(0).random((1, 1, 64, 64))))
print("output", probs.shape, "sums to one:", np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-5))

# The atrous skip path gets shorter as we go deeper: 4, 3, 2, 1 modules.
print([full.skip_module_count(level) for level in range(1, 5)])
