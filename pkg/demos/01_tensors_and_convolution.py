"""
Tensors, convolution and upsampling
===================================

Everything is a plain NCHW numpy array. The convolution used by the model
is an im2col + matrix-product implementation; here it is compared with a
direct loop over output pixels.
"""
import numpy as np

from atvnet import tensor_core as tc
from atvnet.layers import Conv2DParams, conv2d_direct, conv2d_forward, same_padding

rng = np.random.default_rng(0)

# seeded creation is bitwise reproducible
x = tc.create((2, 3, 9, 9), "normal", seed=42, dtype=np.float64)
print("x", x.shape, "mean %.3f" % x.mean())

# the scout view: 5x5 kernel, dilation 2, padded so the map keeps its size
p = Conv2DParams(rng.standard_normal((4, 3, 5, 5)), rng.standard_normal(4),
                 stride=1, padding=same_padding(5, 2), dilation=2)
fast = conv2d_forward(x, p)
slow = conv2d_direct(x, p)
print("scout conv", fast.shape, "max |fast - direct| = %.2e" % np.abs(fast - slow).max())

# stride 2 halves the map
p2 = Conv2DParams(rng.standard_normal((4, 3, 3, 3)), None, stride=2, padding=1)
print("stride-2 conv", conv2d_forward(x, p2).shape)

# softmax over channels sums to one at every pixel
s = tc.softmax_channels(x)
print("softmax channel sums in [%.6f, %.6f]" % (s.sum(1).min(), s.sum(1).max()))

# x8 bilinear upsampling (half-pixel centres) keeps constants constant
flat = np.full((1, 1, 2, 3), 0.25)
up = tc.bilinear_upsample(flat, 8)
print("upsampled", up.shape, "unique values", np.unique(up))

# a ramp stays a ramp in the interior
ramp = np.arange(4.0).reshape(1, 1, 1, 4).repeat(2, axis=2)
print("ramp row after x2:", tc.bilinear_upsample(ramp, 2)[0, 0, 0])
