"""
Checking hand-written gradients
===============================

Every backward pass is verified against central finite differences in
float64 (step 1e-4, relative error below 1e-4). This walks through one
check by hand, then runs the layer suite.
"""
import time

import numpy as np

from atvnet import gradcheck
from atvnet.layers import (Conv2DParams, conv2d_backward, conv2d_forward,
                           finite_difference_check)

rng = np.random.default_rng(1)

# reduce the conv output to a scalar with a random projection r,
# so d(sum(y * r))/dy = r is the upstream gradient
x = rng.standard_normal((2, 3, 6, 6))
p = Conv2DParams(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), stride=2, padding=1)
r = rng.standard_normal(conv2d_forward(x, p).shape)
dx, dw, db = conv2d_backward(x, p, r)

report = finite_difference_check(lambda: float((conv2d_forward(x, p) * r).sum()),
                                 {"x": x, "weight": p.weight, "bias": p.bias},
                                 {"x": dx, "weight": dw, "bias": db}, name="conv3x3 s2")
print(report)

# a wrong gradient is caught, and the offending coordinate is named
bad = finite_difference_check(lambda: float((conv2d_forward(x, p) * r).sum()),
                              {"bias": p.bias}, {"bias": db * 1.01}, name="perturbed bias grad")
print(bad)
print("first failure (array, index, analytic, numeric):", bad.failures[0])

# the per-layer suite (the CLI's `atvnet gradcheck` adds the whole tiny model)
t0 = time.time()
for rep in gradcheck.run_suite(seed=0, include_model=False):
    print("  ", rep)
print("layer suite took %.1fs" % (time.time() - t0))
