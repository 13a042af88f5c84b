"""Layer zoo: stochastic LWTA blocks with Gaussian variational weights,
plus the deterministic-LWTA / ReLU / point-estimate ablation modes and the
dense output head.

A layer holds weights organized as (in_dim, blocks, block_size). Within a
block the J linear units compete: the winner keeps its linear sum, the rest
emit zero. Stochastic mode samples the winner from a Categorical posterior
proportional to softmax of the linear sums; training uses the
temperature-relaxed sample so gradients flow, prediction uses hard one-hot
draws.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import RngStream, softmax as np_softmax

ACTIVATION_MODES = ("stochastic_lwta", "deterministic_lwta", "relu")
WEIGHT_MODES = ("gaussian", "point")

LOG_VAR_FLOOR = -20.0


@dataclass
class WinnerSample:
    """One draw of the per-block winner latents.

    xi_relaxed: temperature-relaxed sample (rows sum to 1, strictly positive)
    xi_hard:    one-hot winner per block
    logits:     pre-softmax block logits the posterior was built from
    """
    xi_relaxed: np.ndarray
    xi_hard: np.ndarray
    logits: np.ndarray


@dataclass
class VariationalLwtaLayer:
    mu: np.ndarray                      # (I, R, J)
    log_var: Optional[np.ndarray]       # (I, R, J) or None in point mode
    in_dim: int
    blocks: int
    block_size: int
    activation_mode: str = "stochastic_lwta"
    weight_mode: str = "gaussian"
    bias: Optional[np.ndarray] = None   # (R*J,) point-estimate, optional

    def __post_init__(self):
        if self.activation_mode not in ACTIVATION_MODES:
            raise ConfigError(f"unknown activation_mode {self.activation_mode!r}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}")
        if self.mu.shape != (self.in_dim, self.blocks, self.block_size):
            raise DimensionError(
                f"mu shape {self.mu.shape} != {(self.in_dim, self.blocks, self.block_size)}")

    @property
    def out_dim(self) -> int:
        return self.blocks * self.block_size

    def copy(self) -> "VariationalLwtaLayer":
        return VariationalLwtaLayer(
            mu=self.mu.copy(),
            log_var=None if self.log_var is None else self.log_var.copy(),
            in_dim=self.in_dim, blocks=self.blocks, block_size=self.block_size,
            activation_mode=self.activation_mode, weight_mode=self.weight_mode,
            bias=None if self.bias is None else self.bias.copy())

    def param_count(self) -> int:
        n = self.mu.size * (2 if self.weight_mode == "gaussian" else 1)
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass
class DenseHead:
    """Output layer: plain dense weights into softmax (classification) or a
    linear readout (regression)."""
    mu: np.ndarray                      # (I, O)
    log_var: Optional[np.ndarray]
    kind: str = "softmax"               # {softmax, linear}
    weight_mode: str = "gaussian"
    bias: Optional[np.ndarray] = None

    def copy(self) -> "DenseHead":
        return DenseHead(
            mu=self.mu.copy(),
            log_var=None if self.log_var is None else self.log_var.copy(),
            kind=self.kind, weight_mode=self.weight_mode,
            bias=None if self.bias is None else self.bias.copy())

    def param_count(self) -> int:
        n = self.mu.size * (2 if self.weight_mode == "gaussian" else 1)
        if self.bias is not None:
            n += self.bias.size
        return n


def glorot_uniform(rng: RngStream, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    u = rng.uniform(shape)
    return ((u * 2.0 - 1.0) * limit).astype(dtype)


def init_lwta_layer(rng: RngStream, in_dim: int, blocks: int, block_size: int,
                    activation_mode="stochastic_lwta", weight_mode="gaussian",
                    init_log_var_shift: float = 0.0, use_bias: bool = False,
                    dtype=np.float32) -> VariationalLwtaLayer:
    shape = (in_dim, blocks, block_size)
    mu = glorot_uniform(rng.derive("mu"), in_dim, blocks * block_size, shape, dtype)
    log_var = None
    if weight_mode == "gaussian":
        lv = rng.derive("lv").normal(shape) * 0.1 + 0.0005 + init_log_var_shift
        log_var = lv.astype(dtype)
    bias = np.zeros(blocks * block_size, dtype=dtype) if use_bias else None
    return VariationalLwtaLayer(mu=mu, log_var=log_var, in_dim=in_dim, blocks=blocks,
                                block_size=block_size, activation_mode=activation_mode,
                                weight_mode=weight_mode, bias=bias)


def init_head(rng: RngStream, in_dim: int, out_dim: int, kind="softmax",
              weight_mode="gaussian", init_log_var_shift: float = 0.0,
              use_bias: bool = False, dtype=np.float32) -> DenseHead:
    mu = glorot_uniform(rng.derive("mu"), in_dim, out_dim, (in_dim, out_dim), dtype)
    log_var = None
    if weight_mode == "gaussian":
        lv = rng.derive("lv").normal((in_dim, out_dim)) * 0.1 + 0.0005 + init_log_var_shift
        log_var = lv.astype(dtype)
    bias = np.zeros(out_dim, dtype=dtype) if use_bias else None
    return DenseHead(mu=mu, log_var=log_var, kind=kind, weight_mode=weight_mode, bias=bias)


# --- spec-level ops (numpy, single input vector) ------------------------------

def sample_weights(layer, rng: RngStream) -> np.ndarray:
    """One reparameterized weight draw: mu + sigma * eps."""
    if layer.weight_mode != "gaussian":
        raise ContractError("sample_weights requires gaussian weight_mode; "
                            "point mode exposes the means directly")
    lv = np.maximum(layer.log_var, LOG_VAR_FLOOR)
    eps = rng.normal(layer.mu.shape)
    return (layer.mu + np.exp(0.5 * lv) * eps.astype(layer.mu.dtype)).astype(layer.mu.dtype)


def point_weights(layer) -> np.ndarray:
    return layer.mu


def block_logits(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """out[r,j] = sum_i w[i,r,j] * x[i]."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 1 or w.ndim != 3 or w.shape[0] != x.shape[0]:
        raise DimensionError(f"block_logits shape mismatch: x {x.shape} vs w {w.shape}")
    return np.einsum("i,irj->rj", x, w)


def sample_winner_relaxed(logits: np.ndarray, tau: float, rng: RngStream) -> WinnerSample:
    """Gumbel-perturbed relaxed winner sample per block.

    The hard sample is the argmax of the same perturbed logits, so the pair
    (relaxed, hard) comes from one underlying Categorical draw.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits)
    u = rng.uniform(logits.shape)
    g = -np.log(-np.log(u))
    perturbed = logits + g
    xi_relaxed = np_softmax(perturbed / tau, axis=-1)
    winners = np.argmax(perturbed, axis=-1)
    xi_hard = np.zeros_like(logits)
    np.put_along_axis(xi_hard, winners[..., None], 1.0, axis=-1)
    return WinnerSample(xi_relaxed=xi_relaxed, xi_hard=xi_hard, logits=logits)


def winner_posterior(logits: np.ndarray) -> np.ndarray:
    """Categorical posterior over winners: softmax of block logits."""
    return np_softmax(logits, axis=-1)


def sample_winner_hard(logits: np.ndarray, rng: RngStream) -> np.ndarray:
    """One-hot draw from Categorical(softmax(logits)) per block (any batch shape)."""
    pi = winner_posterior(logits)
    cdf = np.cumsum(pi, axis=-1)
    u = rng.uniform(pi.shape[:-1])
    idx = (u[..., None] > cdf).sum(axis=-1)
    idx = np.minimum(idx, pi.shape[-1] - 1)
    onehot = np.zeros_like(pi)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    return onehot


def deterministic_winner(logits: np.ndarray) -> np.ndarray:
    """Argmax winner; ties break to the lowest index (np.argmax contract)."""
    winners = np.argmax(logits, axis=-1)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, winners[..., None], 1.0, axis=-1)
    return onehot


def lwta_forward(x: np.ndarray, layer: VariationalLwtaLayer, rng: Optional[RngStream],
                 phase: str = "train", tau: float = 0.67):
    """Single-vector forward pass.

    train + stochastic: relaxed winners multiply the logits (dense but
    differentiable). predict + stochastic: hard winners drawn from the
    Categorical posterior. deterministic: argmax winner. relu: elementwise.
    Returns (y, WinnerSample-or-None).
    """
    if layer.weight_mode == "gaussian":
        if rng is None:
            raise ContractError("gaussian layers need an RngStream")
        w = sample_weights(layer, rng.derive("w"))
    else:
        w = point_weights(layer)
    logits = block_logits(x, w)
    if layer.bias is not None:
        logits = logits + layer.bias.reshape(layer.blocks, layer.block_size)
    if layer.activation_mode == "relu":
        return np.maximum(logits, 0.0).reshape(-1), None
    if layer.activation_mode == "deterministic_lwta":
        xi_hard = deterministic_winner(logits)
        winner = WinnerSample(xi_relaxed=xi_hard, xi_hard=xi_hard, logits=logits)
        return (xi_hard * logits).reshape(-1), winner
    if rng is None:
        raise ContractError("stochastic_lwta needs an RngStream")
    if phase == "train":
        winner = sample_winner_relaxed(logits, tau, rng.derive("xi"))
        return (winner.xi_relaxed * logits).reshape(-1), winner
    xi_hard = sample_winner_hard(logits, rng.derive("xi"))
    winner = WinnerSample(xi_relaxed=xi_hard, xi_hard=xi_hard, logits=logits)
    return (xi_hard * logits).reshape(-1), winner


# --- network container --------------------------------------------------------

@dataclass
class Network:
    """LWTA layers followed by a dense head; owns all posterior parameters."""
    layers: list
    head: DenseHead
    tau: float = 0.67
    task_type: str = "classification"   # {classification, regression}

    def copy(self) -> "Network":
        return Network(layers=[l.copy() for l in self.layers], head=self.head.copy(),
                       tau=self.tau, task_type=self.task_type)

    def param_arrays(self) -> list:
        """All trainable arrays in a fixed order (update target for SGD)."""
        out = []
        for layer in self.layers:
            out.append(layer.mu)
            if layer.log_var is not None:
                out.append(layer.log_var)
            if layer.bias is not None:
                out.append(layer.bias)
        out.append(self.head.mu)
        if self.head.log_var is not None:
            out.append(self.head.log_var)
        if self.head.bias is not None:
            out.append(self.head.bias)
        return out

    def forward_sample(self, x: np.ndarray, rng: RngStream, hard: bool = True) -> np.ndarray:
        """One stochastic forward draw over a batch (N, I) -> output logits (N, O).

        Samples weights from the Gaussian posterior (gaussian mode) and
        winners from the Categorical posterior (hard) per example.
        """
        h = np.atleast_2d(np.asarray(x))
        for li, layer in enumerate(self.layers):
            if layer.weight_mode == "gaussian":
                w = sample_weights(layer, rng.derive("w", li))
            else:
                w = point_weights(layer)
            z = h @ w.reshape(layer.in_dim, layer.out_dim)
            if layer.bias is not None:
                z = z + layer.bias
            z3 = z.reshape(h.shape[0], layer.blocks, layer.block_size)
            if layer.activation_mode == "relu":
                h = np.maximum(z, 0.0)
            elif layer.activation_mode == "deterministic_lwta":
                h = (deterministic_winner(z3) * z3).reshape(h.shape[0], layer.out_dim)
            else:
                if hard:
                    xi = sample_winner_hard(z3, rng.derive("xi", li))
                else:
                    xi = sample_winner_relaxed(z3, self.tau, rng.derive("xi", li)).xi_relaxed
                h = (xi * z3).reshape(h.shape[0], layer.out_dim)
        if self.head.weight_mode == "gaussian":
            wh = sample_weights(self.head, rng.derive("w", "head"))
        else:
            wh = self.head.mu
        out = h @ wh
        if self.head.bias is not None:
            out = out + self.head.bias
        return out


def count_parameters(network: Network) -> int:
    """Trainable parameter count: gaussian tensors count mean+log-variance."""
    return sum(l.param_count() for l in network.layers) + network.head.param_count()


def build_network(rng: RngStream, in_dim: int, out_dim: int,
                  blocks=(16, 8), block_size: int = 2,
                  activation_mode="stochastic_lwta", weight_mode="gaussian",
                  task_type="classification", tau: float = 0.67,
                  init_log_var_shift: float = 0.0, use_bias: bool = False,
                  dtype=np.float32) -> Network:
    layers = []
    dim = in_dim
    for li, r in enumerate(blocks):
        layers.append(init_lwta_layer(
            rng.derive("layer", li), dim, r, block_size,
            activation_mode=activation_mode, weight_mode=weight_mode,
            init_log_var_shift=init_log_var_shift, use_bias=use_bias, dtype=dtype))
        dim = r * block_size
    head_kind = "softmax" if task_type == "classification" else "linear"
    head = init_head(rng.derive("head"), dim, out_dim, kind=head_kind,
                     weight_mode=weight_mode, init_log_var_shift=init_log_var_shift,
                     use_bias=use_bias, dtype=dtype)
    return Network(layers=layers, head=head, tau=tau, task_type=task_type)
