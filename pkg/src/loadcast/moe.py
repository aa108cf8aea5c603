"""Gated mixture-of-experts input lifting.

One small hypernetwork per external data source emits a candidate lifting
matrix from that source's features; a softmax gate blends the candidates,
and a static trainable matrix provides a skip path.  The blended matrix
multiplies the raw load vector to form the encoder input.
"""

from typing import Mapping

import numpy as np

from .errors import InputError, ShapeError
from .numerics import Tensor, matmul, stack


class Mlp2:
    """Two-layer perceptron with tanh hidden activation."""

    def __init__(self, in_width: int, hidden_width: int, out_width: int,
                 rng: np.random.Generator, zero_output: bool = False):
        bound = 1.0 / np.sqrt(in_width)
        self.w1 = Tensor(rng.uniform(-bound, bound, (hidden_width, in_width)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden_width), requires_grad=True)
        if zero_output:
            w2 = np.zeros((out_width, hidden_width))
        else:
            hbound = 1.0 / np.sqrt(hidden_width)
            w2 = rng.uniform(-hbound, hbound, (out_width, hidden_width))
        self.w2 = Tensor(w2, requires_grad=True)
        self.b2 = Tensor(np.zeros(out_width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        hidden = (matmul(self.w1, x) + self.b1).tanh()
        return matmul(self.w2, hidden) + self.b2

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}_w1": self.w1, f"{prefix}_b1": self.b1,
                f"{prefix}_w2": self.w2, f"{prefix}_b2": self.b2}


class MetaLifter:
    """Expert-blended lifting matrix builder.

    For each time step the gate consumes the concatenation of all source
    features and produces one weight per source (softmax-normalized, so
    they sum to 1).  Each source's hypernetwork maps its features to a
    flattened ``lift_width x input_width`` matrix.  Hypernetwork output
    layers start at zero so the lifter initially reduces to the static
    skip matrix.
    """

    def __init__(self, source_names, source_dim: int, input_width: int,
                 lift_width: int, rng: np.random.Generator,
                 gate_hidden: int = 16, hyper_hidden: int = 16):
        self.source_names = tuple(source_names)
        self.source_dim = source_dim
        self.input_width = input_width
        self.lift_width = lift_width
        gate_in = len(self.source_names) * source_dim
        self.gate = Mlp2(gate_in, gate_hidden, len(self.source_names), rng)
        self.hypernets = [
            Mlp2(source_dim, hyper_hidden, lift_width * input_width, rng,
                 zero_output=True)
            for _ in self.source_names
        ]
        bound = 1.0 / np.sqrt(input_width)
        self.theta0 = Tensor(rng.uniform(-bound, bound, (lift_width, input_width)),
                             requires_grad=True)

    @property
    def num_sources(self) -> int:
        return len(self.source_names)

    def _source_features(self, externals) -> np.ndarray:
        """Validate and arrange externals as a (sources, source_dim) array."""
        if isinstance(externals, Mapping):
            rows = []
            for name in self.source_names:
                if name not in externals:
                    raise InputError(f"missing external source {name!r}")
                rows.append(np.asarray(externals[name], dtype=np.float64))
            feats = np.stack(rows)
        else:
            feats = np.asarray(externals, dtype=np.float64)
        if feats.shape != (self.num_sources, self.source_dim):
            raise ShapeError(
                f"externals must have shape ({self.num_sources}, {self.source_dim}), "
                f"got {feats.shape}"
            )
        return feats

    def gate_weights(self, externals) -> Tensor:
        """Softmax gate weights over sources for one time step."""
        feats = self._source_features(externals)
        logits = self.gate(Tensor(feats.reshape(-1)))
        return logits.softmax()

    def theta(self, externals) -> Tensor:
        """Blended lifting matrix: gated hypernet outputs plus the skip matrix."""
        feats = self._source_features(externals)
        weights = self.gate_weights(feats)
        candidates = stack([net(Tensor(feats[j])) for j, net in enumerate(self.hypernets)])
        blended = matmul(weights, candidates)
        return blended.reshape((self.lift_width, self.input_width)) + self.theta0

    def lift(self, loads: Tensor, theta: Tensor) -> Tensor:
        """Apply the lifting matrix to one step's raw load vector."""
        if theta.shape != (self.lift_width, self.input_width):
            raise ShapeError(
                f"lifting matrix must be {(self.lift_width, self.input_width)}, "
                f"got {theta.shape}"
            )
        return matmul(theta, loads)

    def parameters(self) -> dict[str, Tensor]:
        params = self.gate.parameters("lifter.gate")
        for j, net in enumerate(self.hypernets):
            params.update(net.parameters(f"lifter.hyper{j}"))
        params["lifter.theta0"] = self.theta0
        return params
