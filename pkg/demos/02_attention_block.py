"""The contextual attention block on a hand-made feature stack.

Each channel's strongest response is compared against every other channel's
total activity. Channels that co-occur with strong evidence elsewhere get a
larger weight, and the block returns F + w * F.
"""
import numpy as np

from cocoreco.cab import apply_cab, attention_weights, causality_map
from cocoreco.tensor import Tensor

rng = np.random.default_rng(0)
F = rng.random((4, 6, 6)) * 0.1
F[0, 2, 2] = 1.0           # one sharp, isolated peak
F[1] += 0.6                # a diffuse, busy channel
F[3] = 0.0                 # a silent channel

cm = causality_map(Tensor(F))
print("co-occurrence map:\n", np.round(cm.c.data, 4))
w = attention_weights(cm).data
print("channel weights:", np.round(w, 4))

out, _ = apply_cab(Tensor(F))
print("peak before:", np.round(F.max(axis=(1, 2)), 4), "after:", np.round(out.data.max(axis=(1, 2)), 4))
print("argmax kept:", (out.data.reshape(4, -1).argmax(1) == F.reshape(4, -1).argmax(1)).all())

scaled = causality_map(Tensor(1000.0 * F)).c.data
print("scale invariant:", np.allclose(scaled, cm.c.data, rtol=1e-12))
