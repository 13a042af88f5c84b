"""Inner/outer meta-training loop and Bayesian-model-averaged prediction.

Inner loop: per-task SGD on the negative single-sample ELBO, starting from
a copy of the meta-parameters. Outer loop: first-order interpolation toward
the batch-averaged adapted parameters, with the step size linearly annealed
to zero. Prediction draws B posterior samples of weights and winners and
averages the resulting output logits.

Determinism contract: task i of outer iteration t always uses the stream
derived from (seed, "task", t, i), and task deltas are reduced in ascending
task index, so results do not depend on the thread schedule.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DivergedTaskError
from .layers import Network
from .objective import ElboBreakdown, elbo_nodes
from .tensor import RngStream


@dataclass
class MetaConfig:
    inner_lr: float = 0.003
    outer_step_init: float = 0.25
    task_batch: int = 50
    inner_steps: int = 1
    eval_inner_steps: int = 10
    total_iters: int = 1000
    tau: float = 0.67
    predict_samples: int = 4
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.inner_lr <= 0:
            raise ConfigError(f"inner_lr must be > 0, got {self.inner_lr}")
        if self.outer_step_init <= 0:
            raise ConfigError(f"outer_step_init must be > 0, got {self.outer_step_init}")
        if self.task_batch < 1:
            raise ConfigError(f"task_batch must be >= 1, got {self.task_batch}")
        if self.predict_samples < 1:
            raise ConfigError(f"predict_samples must be >= 1, got {self.predict_samples}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.inner_steps < 0 or self.eval_inner_steps < 0:
            raise ConfigError("inner step counts must be >= 0")
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


@dataclass
class TrainState:
    network: Network
    iteration: int = 0
    seed: int = 0

    def beta(self, config: MetaConfig) -> float:
        if config.total_iters == 0:
            return 0.0
        return max(0.0, config.outer_step_init * (1.0 - self.iteration / config.total_iters))

    def root_rng(self) -> RngStream:
        return RngStream(self.seed)


@dataclass
class IterationStats:
    iteration: int
    elbo_total: float
    likelihood: float
    kl_xi: float
    kl_w: float
    wallclock_ms: float


def inner_adapt(network: Network, episode, config: MetaConfig, rng: RngStream,
                steps: Optional[int] = None, lr: Optional[float] = None):
    """SGD-adapt a copy of the network on one episode's support set.

    Each step minimizes the negative ELBO with a fresh MC sample. The
    original network is untouched. Returns (adapted_network, breakdown of
    the first step at the starting parameters).
    """
    steps = config.inner_steps if steps is None else steps
    lr = config.inner_lr if lr is None else lr
    net = network.copy()
    first: Optional[ElboBreakdown] = None
    for step in range(steps):
        tape = ad.Tape()
        breakdown, total, bindings = elbo_nodes(
            net, episode.support_x, episode.support_y, rng.derive("inner", step),
            net.task_type, tape)
        if first is None:
            first = breakdown
        if not np.isfinite(breakdown.total):
            raise DivergedTaskError(f"non-finite ELBO at inner step {step}", step=step)
        loss = ad.neg(total)
        ad.backward(loss)
        for arr, node in bindings:
            arr -= (lr * node.grad).astype(arr.dtype)
    if first is None:
        first = ElboBreakdown(0.0, 0.0, 0.0, 0.0)
    return net, first


def outer_update(state: TrainState, adapted_list, config: MetaConfig) -> None:
    """psi <- psi + beta * mean_i(psi'_i - psi), then advance the schedule."""
    beta = state.beta(config)
    base = state.network.param_arrays()
    deltas = [np.zeros_like(p) for p in base]
    for adapted in adapted_list:
        for d, p, q in zip(deltas, base, adapted.param_arrays()):
            d += q - p
    m = len(adapted_list)
    for p, d in zip(base, deltas):
        p += (beta / m) * d
    state.iteration += 1


def meta_train(state: TrainState, task_source: Callable[[RngStream], object],
               config: MetaConfig,
               on_iteration: Optional[Callable[[IterationStats, TrainState], None]] = None):
    """Run outer iterations from state.iteration up to config.total_iters.

    task_source(rng) -> episode. Returns the list of IterationStats."""
    stats_log = []
    root = state.root_rng()
    for it in range(state.iteration, config.total_iters):
        t0 = time.monotonic()

        def run_task(i):
            task_rng = root.derive("task", it, i)
            episode = task_source(task_rng.derive("data"))
            try:
                return inner_adapt(state.network, episode, config,
                                   task_rng.derive("adapt"))
            except DivergedTaskError as err:
                err.iteration = it
                raise

        indices = range(config.task_batch)
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                results = list(pool.map(run_task, indices))
        else:
            results = [run_task(i) for i in indices]
        # results arrive in ascending task index regardless of schedule
        adapted = [net for net, _ in results]
        breakdowns = [b for _, b in results]
        outer_update(state, adapted, config)
        stats = IterationStats(
            iteration=it,
            elbo_total=float(np.mean([b.total for b in breakdowns])),
            likelihood=float(np.mean([b.likelihood_term for b in breakdowns])),
            kl_xi=float(np.mean([b.kl_xi for b in breakdowns])),
            kl_w=float(np.mean([b.kl_w for b in breakdowns])),
            wallclock_ms=(time.monotonic() - t0) * 1000.0)
        stats_log.append(stats)
        if on_iteration is not None:
            on_iteration(stats, state)
    return stats_log


def predict_bma(network: Network, inputs, config: MetaConfig, rng: RngStream,
                return_samples: bool = False):
    """B-sample Bayesian model average of output logits.

    Each sample draws weights from the Gaussian posterior and hard winners
    from the Categorical posterior. Classification callers argmax the
    averaged logits."""
    draws = [network.forward_sample(inputs, rng.derive("bma", s), hard=True)
             for s in range(config.predict_samples)]
    stacked = np.stack(draws)
    avg = stacked.mean(axis=0)
    if return_samples:
        return avg, stacked
    return avg


def adapt_then_predict(network: Network, support_x, support_y, query_x,
                       config: MetaConfig, rng: RngStream,
                       steps: Optional[int] = None) -> np.ndarray:
    """Standard meta-test protocol: adapt on the support set, BMA-predict on
    the query set. Empty support skips adaptation."""
    support_x = np.atleast_2d(np.asarray(support_x))
    if support_x.shape[0] == 0 or support_x.size == 0:
        return predict_bma(network, query_x, config, rng.derive("predict"))

    class _Episode:
        pass

    ep = _Episode()
    ep.support_x = support_x
    ep.support_y = support_y
    steps = config.eval_inner_steps if steps is None else steps
    adapted, _ = inner_adapt(network, ep, config, rng.derive("adapt"), steps=steps)
    return predict_bma(adapted, query_x, config, rng.derive("predict"))
