"""Low-rank adapters for frozen-backbone group fine-tuning.

An adapter adds ``(alpha/rank) * A @ B`` to one or two targeted backbone
matrices.  Three targets are supported: the static input-lifting matrix,
the encoder's recurrent candidate matrix, and the pair of decoder output
heads (mean and log-variance adapted together).  Factor ``B`` starts at
zero so a fresh adapter is an exact no-op.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .forecaster import Forecaster
from .numerics import Tensor, matmul

TARGET_INPUT = "input_matrix"
TARGET_HIDDEN = "hidden_transition_matrix"
TARGET_OUTPUT = "output_matrix"
TARGETS = (TARGET_INPUT, TARGET_HIDDEN, TARGET_OUTPUT)

# Backbone parameter names adapted by each target.
TARGET_PARAMS = {
    TARGET_INPUT: ("lifter.theta0",),
    TARGET_HIDDEN: ("encoder.u_cand",),
    TARGET_OUTPUT: ("decoder.w_mu", "decoder.w_logvar"),
}


@dataclass
class FactorPair:
    """Low-rank factors for one targeted matrix: delta = scale * a @ b."""

    param_name: str
    a: Tensor  # (d_out, rank)
    b: Tensor  # (rank, d_in)


@dataclass
class LoraAdapter:
    """Group-specific low-rank update set for one target."""

    target: str
    rank: int
    alpha: float
    group_id: str
    pairs: list[FactorPair] = field(default_factory=list)
    backbone_hash: str = ""

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def trainable_params(self) -> dict[str, Tensor]:
        """Exactly the factor tensors; backbone weights are never included."""
        params = {}
        for pair in self.pairs:
            params[f"adapter.{pair.param_name}.a"] = pair.a
            params[f"adapter.{pair.param_name}.b"] = pair.b
        return params

    def param_count(self) -> int:
        return sum(p.a.size + p.b.size for p in self.pairs)

    def delta(self, param_name: str) -> np.ndarray:
        """Numeric update matrix for one targeted parameter."""
        for pair in self.pairs:
            if pair.param_name == param_name:
                return self.scale * (pair.a.data @ pair.b.data)
        raise ContractError(f"adapter does not target {param_name!r}")

    def overrides(self, model: Forecaster) -> dict[str, Tensor]:
        """Effective-weight tensors routing gradients to the factors only."""
        out = {}
        params = model.parameters()
        for pair in self.pairs:
            w0 = params[pair.param_name]
            if (pair.a.shape[0], pair.b.shape[1]) != w0.shape:
                raise ShapeError(
                    f"adapter factors {pair.a.shape}x{pair.b.shape} do not match "
                    f"backbone matrix {pair.param_name} of shape {w0.shape}"
                )
            out[pair.param_name] = apply_update(w0, pair.a, pair.b, self.rank, self.alpha)
        return out


def init_adapter(model: Forecaster, target: str, rank: int, alpha: float,
                 group_id: str, rng: np.random.Generator) -> LoraAdapter:
    """Fresh adapter: uniform-init A, zero B, so the initial update is zero."""
    if target not in TARGETS:
        raise ContractError(f"unknown adapter target {target!r}; expected one of {TARGETS}")
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    params = model.parameters()
    adapter = LoraAdapter(target=target, rank=rank, alpha=alpha, group_id=group_id)
    for name in TARGET_PARAMS[target]:
        d_out, d_in = params[name].shape
        if not 1 <= rank <= min(d_out, d_in):
            raise ContractError(
                f"rank must be in [1, {min(d_out, d_in)}] for {name} "
                f"({d_out}x{d_in}), got {rank}"
            )
        bound = 1.0 / np.sqrt(d_in)
        a = Tensor(rng.uniform(-bound, bound, (d_out, rank)), requires_grad=True)
        b = Tensor(np.zeros((rank, d_in)), requires_grad=True)
        adapter.pairs.append(FactorPair(name, a, b))
    return adapter


def full_rank(model: Forecaster, target: str) -> int:
    """Largest admissible rank for a target (its smallest matrix dimension)."""
    params = model.parameters()
    return min(min(params[name].shape) for name in TARGET_PARAMS[target])


def apply_update(w0: Tensor, a: Tensor, b: Tensor, rank: int, alpha: float) -> Tensor:
    """W0 + (alpha/rank) * A @ B, leaving W0 out of the gradient path."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"factor inner dims differ: {a.shape} x {b.shape}")
    if (a.shape[0], b.shape[1]) != w0.shape:
        raise ShapeError(
            f"update shape {(a.shape[0], b.shape[1])} does not match target {w0.shape}"
        )
    return w0.detach() + matmul(a, b) * (alpha / rank)


def merge(model: Forecaster, adapter: LoraAdapter) -> Forecaster:
    """Standalone backbone copy with the adapter's updates folded in."""
    state = model.state_arrays()
    for pair in adapter.pairs:
        if pair.param_name not in state:
            raise ContractError(f"backbone has no parameter {pair.param_name!r}")
        delta = adapter.scale * (pair.a.data @ pair.b.data)
        if delta.shape != state[pair.param_name].shape:
            raise ShapeError(
                f"update for {pair.param_name} has shape {delta.shape}, "
                f"expected {state[pair.param_name].shape}"
            )
        state[pair.param_name] = state[pair.param_name] + delta
    return Forecaster.from_state(model.config, state)
