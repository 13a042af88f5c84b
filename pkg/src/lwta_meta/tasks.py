"""Task distributions: sinusoid regression (default and challenging),
synthetic Gaussian-blob few-shot classification, file-based image episodes
(STLW tensors + manifest), and the max-variance active-learning protocol.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .meta import MetaConfig, inner_adapt, predict_bma
from .tensor import RngStream, load_stlw


@dataclass
class TaskEpisode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    task_type: str = "regression"
    n_way: int = 0
    k_shot: int = 0
    task_params: Optional[dict] = None


@dataclass
class SinusoidSpec:
    """y = A sin(w x + b) + eps over x in [-5, 5].

    Default setting: fixed frequency 1.0, no noise. Challenging setting:
    frequency in [0.5, 2.0] and noise std 0.01 * A."""
    amplitude_range: tuple = (0.1, 5.0)
    phase_range: tuple = (0.0, 2.0 * np.pi)
    frequency_range: tuple = (1.0, 1.0)
    noise_scale: float = 0.0            # std = noise_scale * A
    x_range: tuple = (-5.0, 5.0)
    points: int = 10
    query_points: int = 100             # dense evaluation grid

    @classmethod
    def default(cls) -> "SinusoidSpec":
        return cls()

    @classmethod
    def challenging(cls) -> "SinusoidSpec":
        return cls(frequency_range=(0.5, 2.0), noise_scale=0.01)


def sinusoid_value(params: dict, x: np.ndarray) -> np.ndarray:
    return params["amplitude"] * np.sin(params["frequency"] * x + params["phase"])


def sample_sinusoid_task(spec: SinusoidSpec, rng: RngStream) -> TaskEpisode:
    """Draw task parameters and points; support gets `spec.points` noisy
    samples, the query is a fresh noiseless evaluation grid."""
    a_lo, a_hi = spec.amplitude_range
    amplitude = a_lo + (a_hi - a_lo) * float(rng.uniform(1)[0])
    b_lo, b_hi = spec.phase_range
    phase = b_lo + (b_hi - b_lo) * float(rng.uniform(1)[0])
    f_lo, f_hi = spec.frequency_range
    frequency = f_lo + (f_hi - f_lo) * float(rng.uniform(1)[0])
    params = {"amplitude": amplitude, "phase": phase, "frequency": frequency}

    x_lo, x_hi = spec.x_range
    sx = x_lo + (x_hi - x_lo) * rng.uniform(spec.points)
    sy = sinusoid_value(params, sx)
    if spec.noise_scale > 0:
        sy = sy + rng.normal(spec.points) * (spec.noise_scale * amplitude)
    qx = np.linspace(x_lo, x_hi, spec.query_points)
    qy = sinusoid_value(params, qx)
    return TaskEpisode(
        support_x=sx.reshape(-1, 1).astype(np.float32),
        support_y=sy.reshape(-1, 1).astype(np.float32),
        query_x=qx.reshape(-1, 1).astype(np.float32),
        query_y=qy.reshape(-1, 1).astype(np.float32),
        task_type="regression", task_params=params)


def sample_synthetic_classification_task(n_way: int, k_shot: int, query_per_class: int,
                                         dim: int, rng: RngStream,
                                         class_std: float = 0.25) -> TaskEpisode:
    """Episode of isotropic Gaussian blobs with fresh prototypes in [-1,1]^dim."""
    if n_way < 2:
        raise ConfigError(f"n_way must be >= 2, got {n_way}")
    protos = rng.uniform((n_way, dim)) * 2.0 - 1.0
    sx, sy, qx, qy = [], [], [], []
    for c in range(n_way):
        s = protos[c] + rng.normal((k_shot, dim)) * class_std
        q = protos[c] + rng.normal((query_per_class, dim)) * class_std
        sx.append(s)
        qx.append(q)
        sy.extend([c] * k_shot)
        qy.extend([c] * query_per_class)
    return TaskEpisode(
        support_x=np.concatenate(sx).astype(np.float32),
        support_y=np.asarray(sy, dtype=np.int64),
        query_x=np.concatenate(qx).astype(np.float32),
        query_y=np.asarray(qy, dtype=np.int64),
        task_type="classification", n_way=n_way, k_shot=k_shot)


def read_manifest(dataset_dir: str) -> dict:
    """manifest.tsv: one `class_name<TAB>split` line per class."""
    path = os.path.join(dataset_dir, "manifest.tsv")
    if not os.path.exists(path):
        raise ConfigError(f"missing manifest: {path}")
    splits: dict = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                name, split = line.split("\t")
            except ValueError as exc:
                raise DataError(f"malformed manifest line: {line!r}") from exc
            splits.setdefault(split, []).append(name)
    return splits


def image_episode_sampler(dataset_dir: str, n_way: int, k_shot: int,
                          query_per_class: int, split: str, rng: RngStream) -> TaskEpisode:
    """Sample an N-way episode from `<root>/<class>/<item>.stlw` files."""
    splits = read_manifest(dataset_dir)
    classes = sorted(splits.get(split, []))
    if len(classes) < n_way:
        raise DataError(f"split {split!r} has {len(classes)} classes, need {n_way}")
    chosen = [classes[i] for i in sorted(rng.choice(len(classes), n_way))]
    sx, sy, qx, qy = [], [], [], []
    need = k_shot + query_per_class
    for label, cls in enumerate(chosen):
        cls_dir = os.path.join(dataset_dir, cls)
        items = sorted(f for f in os.listdir(cls_dir) if f.endswith(".stlw"))
        if len(items) < need:
            raise DataError(f"class {cls!r} has {len(items)} items, need {need}")
        picked = rng.choice(len(items), need)
        arrays = [load_stlw(os.path.join(cls_dir, items[i])).reshape(-1) for i in picked]
        sx.extend(arrays[:k_shot])
        qx.extend(arrays[k_shot:])
        sy.extend([label] * k_shot)
        qy.extend([label] * query_per_class)
    return TaskEpisode(
        support_x=np.stack(sx).astype(np.float32),
        support_y=np.asarray(sy, dtype=np.int64),
        query_x=np.stack(qx).astype(np.float32),
        query_y=np.asarray(qy, dtype=np.int64),
        task_type="classification", n_way=n_way, k_shot=k_shot)


def make_task_source(kind: str, rng_unused=None, *, spec: Optional[SinusoidSpec] = None,
                     n_way=5, k_shot=1, query_per_class=15, dim=8,
                     dataset_dir=None, split="train"):
    """Callable(rng) -> TaskEpisode for the named task family."""
    if kind == "sine-default":
        s = spec or SinusoidSpec.default()
        return lambda rng: sample_sinusoid_task(s, rng)
    if kind == "sine-challenging":
        s = spec or SinusoidSpec.challenging()
        return lambda rng: sample_sinusoid_task(s, rng)
    if kind == "synth-class":
        return lambda rng: sample_synthetic_classification_task(
            n_way, k_shot, query_per_class, dim, rng)
    if kind == "image-class":
        if not dataset_dir:
            raise ConfigError("image-class requires dataset_dir")
        return lambda rng: image_episode_sampler(
            dataset_dir, n_way, k_shot, query_per_class, split, rng)
    raise ConfigError(f"unknown task kind {kind!r}")


# --- active learning ----------------------------------------------------------

@dataclass
class ActiveLearningTrace:
    mse: list = field(default_factory=list)     # held-out MSE after each step (incl. initial)
    queried_x: list = field(default_factory=list)


def _al_adapt_and_mse(network, labeled_x, labeled_y, episode, config, rng):
    class _Ep:
        pass

    ep = _Ep()
    ep.support_x = np.asarray(labeled_x, dtype=np.float32).reshape(-1, 1)
    ep.support_y = np.asarray(labeled_y, dtype=np.float32).reshape(-1, 1)
    adapted, _ = inner_adapt(network, ep, config, rng.derive("adapt", len(labeled_x)),
                             steps=config.eval_inner_steps)
    preds = predict_bma(adapted, episode.query_x, config, rng.derive("mse", len(labeled_x)))
    mse = float(np.mean((preds.reshape(-1) - episode.query_y.reshape(-1)) ** 2))
    return adapted, mse


def active_learning_run(network, spec: SinusoidSpec, config: MetaConfig, rng: RngStream,
                        initial_points: int = 5, query_budget: int = 5,
                        candidate_pool_size: int = 100,
                        strategy: str = "max_variance") -> ActiveLearningTrace:
    """Label-efficient regression: start from a few labeled points, then
    repeatedly query the candidate with the largest predictive variance
    across the B posterior-sampled regressors (or a random candidate).

    Re-adapts from the meta-initialization on the full labeled set after
    every query; records held-out MSE per step."""
    if strategy not in ("max_variance", "random"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    episode = sample_sinusoid_task(spec, rng.derive("task"))
    params = episode.task_params
    x_lo, x_hi = spec.x_range
    labeled_x = list(x_lo + (x_hi - x_lo) * rng.derive("init").uniform(initial_points))

    label_count = [0]

    def label(x):
        y = float(sinusoid_value(params, np.asarray(x)))
        if spec.noise_scale > 0:
            y += float(rng.derive("noise", label_count[0]).normal(1)[0]) \
                * spec.noise_scale * params["amplitude"]
        label_count[0] += 1
        return y

    labeled_y = [label(x) for x in labeled_x]
    pool = list(np.linspace(x_lo, x_hi, candidate_pool_size))
    available = list(range(candidate_pool_size))

    trace = ActiveLearningTrace()
    adapted, mse = _al_adapt_and_mse(network, labeled_x, labeled_y, episode, config,
                                     rng.derive("fit", 0))
    trace.mse.append(mse)
    for step in range(query_budget):
        if strategy == "max_variance":
            cand = np.asarray([pool[i] for i in available], dtype=np.float32).reshape(-1, 1)
            _, samples = predict_bma(adapted, cand, config,
                                     rng.derive("score", step), return_samples=True)
            variances = samples.reshape(samples.shape[0], -1).var(axis=0)
            pick = int(np.argmax(variances))
        else:
            pick = int(rng.derive("pick", step).integers(0, len(available)))
        idx = available.pop(pick)
        x_star = pool[idx]
        trace.queried_x.append(x_star)
        labeled_x.append(x_star)
        labeled_y.append(label(x_star))
        adapted, mse = _al_adapt_and_mse(network, labeled_x, labeled_y, episode, config,
                                         rng.derive("fit", step + 1))
        trace.mse.append(mse)
    return trace
