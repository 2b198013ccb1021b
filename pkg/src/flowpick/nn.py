"""Small MLP built on the autodiff core, shared by fusion/policy/value heads."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class MLP:
    """Fully connected net with tanh hidden activations.

    zero_last initializes the output layer (weights and bias) to zero so the
    network is an exact constant at the start of training; last_bias sets the
    initial output bias.
    """

    def __init__(self, rng: np.random.Generator, sizes, name: str,
                 zero_last=False, last_bias=0.0):
        self.name = name
        self.weights = []
        self.biases = []
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            wname = f"{name}/W{i}"
            if zero_last and i == n_layers - 1:
                w = ad.zeros_param((sizes[i], sizes[i + 1]), name=wname)
            else:
                w = ad.glorot_uniform(rng, (sizes[i], sizes[i + 1]), name=wname)
            b = ad.zeros_param((sizes[i + 1],), name=f"{name}/b{i}")
            if i == n_layers - 1 and last_bias != 0.0:
                b.data[:] = last_bias
            self.weights.append(w)
            self.biases.append(b)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.add(ad.matmul(x, w), b)
            if i < n - 1:
                x = ad.tanh(x)
        return x

    def params(self) -> dict:
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[w.name] = w
            out[b.name] = b
        return out
