"""Single-sample Monte-Carlo ELBO: task likelihood minus the two MC KL
penalties (winner Categoricals against a symmetric prior, Gaussian weights
against a standard normal prior), with closed-form Gaussian KL as a test
oracle.

The relaxed winner sample is scored by expected log-mass under the
posterior / prior (sum_j xi_j log pi_j vs -log J), which coincides with the
Categorical log-pmf whenever xi is one-hot and stays differentiable in
between.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .layers import LOG_VAR_FLOOR, Network, WinnerSample
from .tensor import RngStream, softmax as np_softmax

PROB_FLOOR = 1e-12


@dataclass
class ElboBreakdown:
    likelihood_term: float
    kl_xi: float
    kl_w: float
    total: float


# --- spec-level scalar ops (numpy) --------------------------------------------

def cross_entropy(probs: np.ndarray, target: int) -> float:
    """-log probs[target] with the probability floored at 1e-12."""
    probs = np.asarray(probs)
    if not 0 <= int(target) < probs.shape[-1]:
        raise IndexError(f"target {target} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(float(probs[int(target)]), PROB_FLOOR)))


def mc_kl_categorical(winner: WinnerSample, block_size: int) -> float:
    """Single-sample KL estimate for the winner latents of one layer pass."""
    pi = np_softmax(winner.logits, axis=-1)
    xi = winner.xi_relaxed
    log_q = xi * np.log(np.maximum(pi, PROB_FLOOR))
    log_p = xi * np.log(1.0 / block_size)
    return float(np.sum(log_q - log_p))


def mc_kl_gaussian(w_hat: np.ndarray, mu: np.ndarray, log_var: np.ndarray) -> float:
    """Single-sample KL estimate: sum of log q(w_hat) - log p(w_hat)."""
    lv = np.maximum(np.asarray(log_var, dtype=np.float64), LOG_VAR_FLOOR)
    mu = np.asarray(mu, dtype=np.float64)
    w = np.asarray(w_hat, dtype=np.float64)
    log_q = -0.5 * lv - 0.5 * (w - mu) ** 2 / np.exp(lv)
    log_p = -0.5 * w ** 2
    return float(np.sum(log_q - log_p))


def closed_form_kl_gaussian(mu: np.ndarray, log_var: np.ndarray) -> float:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over entries."""
    mu = np.asarray(mu, dtype=np.float64)
    lv = np.asarray(log_var, dtype=np.float64)
    return float(np.sum(-0.5 * (1.0 + lv - np.exp(lv) - mu ** 2)))


# --- differentiable forward + ELBO graph --------------------------------------

def forward_train_nodes(tape: ad.Tape, net: Network, x: np.ndarray, rng: RngStream):
    """Build the training-phase forward graph for a batch (N, I).

    Returns (output_node, kl_xi_node, kl_w_node, param_bindings) where
    param_bindings pairs each trainable numpy array with its leaf node.
    kl nodes are None when the corresponding stochasticity is absent.
    Per-example winner KL sums over blocks/units and averages over the batch,
    mirroring the mean-likelihood convention.
    """
    x = np.atleast_2d(np.asarray(x))
    n_examples = x.shape[0]
    h = tape.constant(x)
    bindings = []
    kl_xi_terms = []
    kl_w_terms = []

    def dense_weights(owner, label, shape2):
        mu_node = tape.leaf(owner.mu, trainable=True, tag=f"{label}.mu")
        bindings.append((owner.mu, mu_node))
        if owner.weight_mode == "gaussian":
            lv_node = tape.leaf(owner.log_var, trainable=True, tag=f"{label}.log_var")
            bindings.append((owner.log_var, lv_node))
            eps = rng.derive("w", label).normal(owner.mu.shape).astype(owner.mu.dtype)
            w_node = ad.gaussian_reparam(mu_node, lv_node, eps, LOG_VAR_FLOOR)
            # log q - log p = -lv/2 - eps^2/2 + w^2/2, summed over entries
            lv_clipped = ad.clip_min(lv_node, LOG_VAR_FLOOR)
            kl = ad.add(ad.scale(ad.sum_all(ad.mul(w_node, w_node)), 0.5),
                        ad.scale(ad.sum_all(lv_clipped), -0.5))
            kl = ad.add_const(kl, np.asarray(-0.5 * np.sum(eps.astype(np.float64) ** 2),
                                             dtype=owner.mu.dtype))
            kl_w_terms.append(kl)
        else:
            w_node = mu_node
        return ad.reshape(w_node, shape2)

    for li, layer in enumerate(net.layers):
        w2 = dense_weights(layer, f"layer{li}", (layer.in_dim, layer.out_dim))
        z = ad.matmul(h, w2)
        if layer.bias is not None:
            b_node = tape.leaf(layer.bias, trainable=True, tag=f"layer{li}.bias")
            bindings.append((layer.bias, b_node))
            z = ad.add(z, b_node)
        z3 = ad.reshape(z, (n_examples, layer.blocks, layer.block_size))
        if layer.activation_mode == "relu":
            h = ad.relu(z)
        elif layer.activation_mode == "deterministic_lwta":
            winners = np.argmax(z3.value, axis=-1)
            mask = np.zeros_like(z3.value)
            np.put_along_axis(mask, winners[..., None], 1.0, axis=-1)
            h = ad.reshape(ad.mul_const(z3, mask), (n_examples, layer.out_dim))
        else:
            pi = ad.softmax(z3)
            u = rng.derive("xi", li).uniform(z3.value.shape)
            g = (-np.log(-np.log(u))).astype(layer.mu.dtype)
            xi = ad.gumbel_softmax(z3, g, net.tau)
            log_ratio = ad.add_const(ad.log(ad.clip_min(pi, PROB_FLOOR)),
                                     np.asarray(np.log(layer.block_size),
                                                dtype=layer.mu.dtype))
            kl_xi_terms.append(ad.scale(ad.sum_all(ad.mul(xi, log_ratio)),
                                        1.0 / n_examples))
            h = ad.reshape(ad.mul(xi, z3), (n_examples, layer.out_dim))

    wh = dense_weights(net.head, "head", net.head.mu.shape)
    out = ad.matmul(h, wh)
    if net.head.bias is not None:
        b_node = tape.leaf(net.head.bias, trainable=True, tag="head.bias")
        bindings.append((net.head.bias, b_node))
        out = ad.add(out, b_node)

    def accumulate(terms):
        if not terms:
            return None
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return acc

    return out, accumulate(kl_xi_terms), accumulate(kl_w_terms), bindings


def elbo_nodes(net: Network, inputs: np.ndarray, targets, rng: RngStream,
               task_type: str, tape: ad.Tape):
    """One fresh MC sample of all latents, full ELBO graph on `tape`.

    Returns (breakdown, total_node, param_bindings)."""
    inputs = np.atleast_2d(np.asarray(inputs))
    if inputs.shape[0] == 0:
        raise ContractError("empty episode")
    out, kl_xi_node, kl_w_node, bindings = forward_train_nodes(tape, net, inputs, rng)
    if task_type == "classification":
        probs = ad.softmax(out)
        likelihood = ad.neg(ad.cross_entropy(probs, np.asarray(targets, dtype=np.int64)))
    elif task_type == "regression":
        y = np.asarray(targets, dtype=out.value.dtype).reshape(out.value.shape)
        likelihood = ad.neg(ad.squared_error(out, y))
    else:
        raise ContractError(f"unknown task_type {task_type!r}")
    total = likelihood
    if kl_xi_node is not None:
        total = ad.sub(total, kl_xi_node)
    if kl_w_node is not None:
        total = ad.sub(total, kl_w_node)
    breakdown = ElboBreakdown(
        likelihood_term=float(likelihood.value),
        kl_xi=float(kl_xi_node.value) if kl_xi_node is not None else 0.0,
        kl_w=float(kl_w_node.value) if kl_w_node is not None else 0.0,
        total=float(total.value))
    return breakdown, total, bindings


def task_elbo(net: Network, inputs: np.ndarray, targets, rng: RngStream,
              task_type: str) -> ElboBreakdown:
    """Evaluate the single-sample MC ELBO of one episode (no gradients kept)."""
    tape = ad.Tape()
    breakdown, _, _ = elbo_nodes(net, inputs, targets, rng, task_type, tape)
    return breakdown
