"""
Tensors and gradients
=====================

The segmentation model is built on a small reverse-mode autograd over numpy
arrays. Feature maps are ``C x H x W``; there is no batch axis.
"""

import numpy as np

from stackseg import functional as F
from stackseg.tensor import Tape, Tensor, backward, sigmoid, tsum

rng = np.random.default_rng(0)

# a 3x3 convolution with one output channel, followed by a squashing nonlinearity
x = Tensor(rng.random((1, 8, 8)))
w = Tensor(rng.normal(0, 0.3, (1, 1, 3, 3)), requires_grad=True)
b = Tensor(np.zeros(1), requires_grad=True)
y = sigmoid(F.conv2d(x, w, b, padding=1))
loss = tsum(y * y)

# the tape lists every recorded op in execution order
print("ops:", Tape.record(loss).ops())

backward(loss)
print("dL/dw:\n", w.grad[0, 0].round(4))

# compare one entry against a central difference
h = 1e-6
w.data[0, 0, 1, 1] += h
up = tsum(sigmoid(F.conv2d(x, w, b, padding=1)) ** 2).item()
w.data[0, 0, 1, 1] -= 2 * h
down = tsum(sigmoid(F.conv2d(x, w, b, padding=1)) ** 2).item()
w.data[0, 0, 1, 1] += h
print("analytic %.8f  numeric %.8f" % (w.grad[0, 0, 1, 1], (up - down) / (2 * h)))

# half-pixel bilinear resize: a 2x2 ramp upsampled to 3x3
ramp = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
print(F.bilinear_resize(ramp, 3, 3).data[0])
