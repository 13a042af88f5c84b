"""Command-line harness: training runs, checkpointing, evaluation,
active-learning traces and hyperparameter sweeps.

Config handling is a flat key=value text file with `--key value` CLI
overrides; `lwta-meta config --dump` prints every default. Checkpoints are
a text manifest followed by concatenated STLW tensors; round-trips are
byte-identical.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import ast
import csv
import io
import os
import struct
import sys
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, DivergedTaskError
from .layers import DenseHead, Network, VariationalLwtaLayer, build_network, count_parameters
from .meta import MetaConfig, TrainState, adapt_then_predict, meta_train
from .tasks import SinusoidSpec, active_learning_run, make_task_source
from .tensor import RngStream, read_stlw, write_stlw

CONFIG_DEFAULTS = {
    "task": "sine-default",            # sine-default | sine-challenging | synth-class | image-class
    "activation": "stochastic_lwta",   # stochastic_lwta | deterministic_lwta | relu
    "weights": "gaussian",             # gaussian | point
    "blocks": "16,8",
    "block_size": 2,
    "inner_lr": 0.003,
    "outer_step": 0.25,
    "iters": 1000,
    "task_batch": 50,
    "inner_steps": 1,
    "eval_inner_steps": 10,
    "tau": 0.67,
    "samples": 4,
    "seed": 0,
    "threads": 1,
    "checkpoint": "",
    "checkpoint_every": 1000,
    "metrics_out": "",
    "num_eval_tasks": 100,
    "init_log_var_shift": 0.0,
    "use_bias": 0,
    "n_way": 5,
    "k_shot": 1,
    "query_per_class": 15,
    "class_dim": 8,
    "dataset_dir": "",
    "split": "train",
    "al_initial": 5,
    "al_budget": 5,
    "al_pool": 100,
}


@dataclass
class MetricRecord:
    iter: int
    elbo_total: float
    likelihood: float
    kl_xi: float
    kl_w: float
    eval_metric: Optional[float]
    wallclock_ms: float


METRIC_COLUMNS = ["iter", "elbo_total", "likelihood", "kl_xi", "kl_w",
                  "eval_metric", "wallclock_ms"]


def parse_config_value(key: str, raw):
    if key not in CONFIG_DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}; valid keys: "
                          + ", ".join(sorted(CONFIG_DEFAULTS)))
    default = CONFIG_DEFAULTS[key]
    if isinstance(default, str):
        return str(raw)
    try:
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"malformed config line: {line!r}")
                key, raw = (s.strip() for s in line.split("=", 1))
                cfg[key] = parse_config_value(key, raw)
    for key, raw in (overrides or {}).items():
        if raw is not None:
            cfg[key] = parse_config_value(key, raw)
    return cfg


def dump_config(cfg: dict) -> str:
    return "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg)) + "\n"


def meta_config_from(cfg: dict) -> MetaConfig:
    return MetaConfig(
        inner_lr=cfg["inner_lr"], outer_step_init=cfg["outer_step"],
        task_batch=cfg["task_batch"], inner_steps=cfg["inner_steps"],
        eval_inner_steps=cfg["eval_inner_steps"], total_iters=cfg["iters"],
        tau=cfg["tau"], predict_samples=cfg["samples"], seed=cfg["seed"],
        threads=cfg["threads"])


def task_source_from(cfg: dict, split: Optional[str] = None):
    kind = cfg["task"]
    spec = None
    if kind == "sine-default":
        spec = SinusoidSpec.default()
    elif kind == "sine-challenging":
        spec = SinusoidSpec.challenging()
    return make_task_source(
        kind, spec=spec, n_way=cfg["n_way"], k_shot=cfg["k_shot"],
        query_per_class=cfg["query_per_class"], dim=cfg["class_dim"],
        dataset_dir=cfg["dataset_dir"] or None, split=split or cfg["split"])


def build_state(cfg: dict) -> TrainState:
    kind = cfg["task"]
    if kind.startswith("sine"):
        in_dim, out_dim, task_type = 1, 1, "regression"
    elif kind == "synth-class":
        in_dim, out_dim, task_type = cfg["class_dim"], cfg["n_way"], "classification"
    elif kind == "image-class":
        probe = task_source_from(cfg)(RngStream(cfg["seed"]).derive("probe"))
        in_dim, out_dim, task_type = probe.support_x.shape[1], cfg["n_way"], "classification"
    else:
        raise ConfigError(f"unknown task {kind!r}")
    blocks = tuple(int(b) for b in str(cfg["blocks"]).split(",") if b.strip())
    if not blocks:
        raise ConfigError(f"bad blocks spec {cfg['blocks']!r}")
    net = build_network(
        RngStream(cfg["seed"]).derive("init"), in_dim, out_dim,
        blocks=blocks, block_size=cfg["block_size"],
        activation_mode=cfg["activation"], weight_mode=cfg["weights"],
        task_type=task_type, tau=cfg["tau"],
        init_log_var_shift=cfg["init_log_var_shift"], use_bias=bool(cfg["use_bias"]))
    return TrainState(network=net, iteration=0, seed=cfg["seed"])


# --- checkpoint format --------------------------------------------------------
# magic "LWCK", u16 version=1, u32 manifest length, utf-8 manifest
# (key=value lines), then one STLW tensor per manifest `tensor=` entry in order.

_CKPT_MAGIC = b"LWCK"
_CKPT_VERSION = 1


def _layer_descriptor(layer: VariationalLwtaLayer) -> str:
    return (f"{layer.in_dim},{layer.blocks},{layer.block_size},"
            f"{layer.activation_mode},{layer.weight_mode},{int(layer.bias is not None)}")


def save_checkpoint(path: str, state: TrainState, config: MetaConfig) -> None:
    net = state.network
    tensors = []
    names = []
    for li, layer in enumerate(net.layers):
        names.append(f"layer{li}.mu")
        tensors.append(layer.mu)
        if layer.log_var is not None:
            names.append(f"layer{li}.log_var")
            tensors.append(layer.log_var)
        if layer.bias is not None:
            names.append(f"layer{li}.bias")
            tensors.append(layer.bias)
    names.append("head.mu")
    tensors.append(net.head.mu)
    if net.head.log_var is not None:
        names.append("head.log_var")
        tensors.append(net.head.log_var)
    if net.head.bias is not None:
        names.append("head.bias")
        tensors.append(net.head.bias)

    lines = [f"version={_CKPT_VERSION}",
             f"iteration={state.iteration}",
             f"seed={state.seed}",
             f"task_type={net.task_type}",
             f"tau={net.tau!r}",
             f"head={net.head.mu.shape[0]},{net.head.mu.shape[1]},{net.head.kind},"
             f"{net.head.weight_mode},{int(net.head.bias is not None)}"]
    for layer in net.layers:
        lines.append(f"layer={_layer_descriptor(layer)}")
    for key in sorted(vars(config)):
        lines.append(f"config.{key}={getattr(config, key)!r}")
    for name in names:
        lines.append(f"tensor={name}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")

    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<HI", _CKPT_VERSION, len(manifest)))
    buf.write(manifest)
    for arr in tensors:
        write_stlw(buf, arr)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Returns (TrainState, MetaConfig)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ConfigError(f"not a checkpoint file: {path}")
        version, mlen = struct.unpack("<HI", fh.read(6))
        if version != _CKPT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        manifest = fh.read(mlen).decode("utf-8")
        fields = {}
        layer_specs = []
        config_kv = {}
        tensor_names = []
        for line in manifest.splitlines():
            key, val = line.split("=", 1)
            if key == "layer":
                layer_specs.append(val)
            elif key == "tensor":
                tensor_names.append(val)
            elif key.startswith("config."):
                config_kv[key[len("config."):]] = val
            else:
                fields[key] = val
        tensors = {name: read_stlw(fh) for name in tensor_names}

    layers = []
    for li, spec in enumerate(layer_specs):
        in_dim, blocks, block_size, activation, weight_mode, has_bias = spec.split(",")
        layers.append(VariationalLwtaLayer(
            mu=tensors[f"layer{li}.mu"],
            log_var=tensors.get(f"layer{li}.log_var"),
            in_dim=int(in_dim), blocks=int(blocks), block_size=int(block_size),
            activation_mode=activation, weight_mode=weight_mode,
            bias=tensors.get(f"layer{li}.bias")))
    h_in, h_out, h_kind, h_wmode, h_bias = fields["head"].split(",")
    head = DenseHead(mu=tensors["head.mu"], log_var=tensors.get("head.log_var"),
                     kind=h_kind, weight_mode=h_wmode, bias=tensors.get("head.bias"))
    net = Network(layers=layers, head=head, tau=float(fields["tau"]),
                  task_type=fields["task_type"])
    state = TrainState(network=net, iteration=int(fields["iteration"]),
                       seed=int(fields["seed"]))
    defaults = MetaConfig()
    kwargs = {}
    for key, val in config_kv.items():
        current = getattr(defaults, key)
        kwargs[key] = type(current)(ast.literal_eval(val))
    return state, MetaConfig(**kwargs)


# --- metrics ------------------------------------------------------------------

class MetricsWriter:
    def __init__(self, path: Optional[str]):
        self.path = path
        if path:
            exists = os.path.exists(path) and os.path.getsize(path) > 0
            self._fh = open(path, "a", newline="")
            self._csv = csv.writer(self._fh)
            if not exists:
                self._csv.writerow(METRIC_COLUMNS)
        else:
            self._fh = None

    def write(self, rec: MetricRecord) -> None:
        if self._fh is None:
            return
        self._csv.writerow([rec.iter, repr(rec.elbo_total), repr(rec.likelihood),
                            repr(rec.kl_xi), repr(rec.kl_w),
                            "" if rec.eval_metric is None else repr(rec.eval_metric),
                            f"{rec.wallclock_ms:.3f}"])
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


# --- evaluation helpers -------------------------------------------------------

def evaluate(state: TrainState, cfg: dict, config: MetaConfig, num_tasks: int,
             seed_salt: str = "eval"):
    """Mean/std of the per-task eval metric (accuracy for classification,
    query MSE for regression) plus mean prediction wall-clock in ms."""
    source = task_source_from(cfg, split="test" if cfg["task"] == "image-class" else None)
    root = RngStream(config.seed).derive(seed_salt)
    metrics = []
    pred_ms = []
    for t in range(num_tasks):
        ep = source(root.derive("episode", t))
        t0 = time.monotonic()
        preds = adapt_then_predict(state.network, ep.support_x, ep.support_y,
                                   ep.query_x, config, root.derive("run", t))
        pred_ms.append((time.monotonic() - t0) * 1000.0)
        if ep.task_type == "classification":
            metrics.append(float(np.mean(np.argmax(preds, axis=-1) == ep.query_y)))
        else:
            metrics.append(float(np.mean((preds.reshape(-1) - ep.query_y.reshape(-1)) ** 2)))
    return float(np.mean(metrics)), float(np.std(metrics)), float(np.mean(pred_ms))


# --- subcommands --------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    config = meta_config_from(cfg)
    if cfg["checkpoint"] and os.path.exists(cfg["checkpoint"]) and cfg.get("_resume"):
        state, _ = load_checkpoint(cfg["checkpoint"])
        _check_resume_arch(state, cfg)
    else:
        state = build_state(cfg)
    source = task_source_from(cfg)
    writer = MetricsWriter(cfg["metrics_out"] or None)
    ckpt = cfg["checkpoint"] or None

    def on_iteration(stats, st):
        writer.write(MetricRecord(stats.iteration, stats.elbo_total, stats.likelihood,
                                  stats.kl_xi, stats.kl_w, None, stats.wallclock_ms))
        if ckpt and cfg["checkpoint_every"] > 0 \
                and (stats.iteration + 1) % cfg["checkpoint_every"] == 0:
            save_checkpoint(ckpt, st, config)

    try:
        meta_train(state, source, config, on_iteration=on_iteration)
    except DivergedTaskError:
        if ckpt:
            save_checkpoint(ckpt, state, config)
        raise
    finally:
        writer.close()
    if ckpt:
        save_checkpoint(ckpt, state, config)
    print(f"trained {state.iteration} iterations; parameters: "
          f"{count_parameters(state.network)}")
    return 0


def _check_resume_arch(state: TrainState, cfg: dict) -> None:
    blocks = tuple(int(b) for b in str(cfg["blocks"]).split(",") if b.strip())
    got = tuple(l.blocks for l in state.network.layers)
    if got != blocks or any(l.block_size != cfg["block_size"] for l in state.network.layers):
        raise ConfigError(f"checkpoint architecture {got} does not match config {blocks}")


def cmd_eval(cfg: dict) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("eval requires --checkpoint")
    state, saved_config = load_checkpoint(cfg["checkpoint"])
    config = meta_config_from(cfg)
    expected = "regression" if cfg["task"].startswith("sine") else "classification"
    if state.network.task_type != expected:
        raise ConfigError(f"checkpoint is a {state.network.task_type} network "
                          f"but task {cfg['task']!r} needs {expected}")
    mean, std, ms = evaluate(state, cfg, config, cfg["num_eval_tasks"])
    label = "accuracy" if expected == "classification" else "mse"
    print(f"{label}: {mean:.4f} +/- {std:.4f} over {cfg['num_eval_tasks']} tasks "
          f"(mean prediction {ms:.2f} ms)")
    return 0


def cmd_active_learn(cfg: dict, strategy: str, num_tasks: int, out: Optional[str]) -> int:
    if strategy not in ("max_variance", "random"):
        raise ConfigError(f"unknown strategy {strategy!r} (max_variance|random)")
    if not cfg["checkpoint"]:
        raise ConfigError("active-learn requires --checkpoint")
    state, _ = load_checkpoint(cfg["checkpoint"])
    if state.network.task_type != "regression":
        raise ConfigError("active learning needs a regression checkpoint")
    config = meta_config_from(cfg)
    spec = SinusoidSpec.challenging() if cfg["task"] == "sine-challenging" \
        else SinusoidSpec.default()
    root = RngStream(config.seed).derive("active", strategy)
    traces = []
    for t in range(num_tasks):
        traces.append(active_learning_run(
            state.network, spec, config, root.derive("task", t),
            initial_points=cfg["al_initial"], query_budget=cfg["al_budget"],
            candidate_pool_size=cfg["al_pool"], strategy=strategy).mse)
    arr = np.asarray(traces)
    rows = [(step, float(arr[:, step].mean()), float(arr[:, step].std()))
            for step in range(arr.shape[1])]
    target = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(target)
        w.writerow(["step", "mean_mse", "std_mse"])
        for row in rows:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
    finally:
        if out:
            target.close()
    return 0


SWEEP_AXES = {"block_size": "block_size", "task_batch": "task_batch", "samples": "samples"}


def cmd_sweep(cfg: dict, axis: str, values, out: Optional[str]) -> int:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; valid: {', '.join(SWEEP_AXES)}")
    rows = []
    for value in values:
        run_cfg = dict(cfg)
        run_cfg[SWEEP_AXES[axis]] = parse_config_value(SWEEP_AXES[axis], value)
        run_cfg["checkpoint"] = ""
        run_cfg["metrics_out"] = ""
        config = meta_config_from(run_cfg)
        state = build_state(run_cfg)
        meta_train(state, task_source_from(run_cfg), config)
        mean, std, _ = evaluate(state, run_cfg, config, run_cfg["num_eval_tasks"])
        rows.append((value, mean, std))
    target = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(target)
        w.writerow([axis, "metric_mean", "metric_std"])
        for row in rows:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
    finally:
        if out:
            target.close()
    return 0


# --- argument parsing ---------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    for key in CONFIG_DEFAULTS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V")


def _collect_overrides(args) -> dict:
    return {key: getattr(args, f"cfg_{key}") for key in CONFIG_DEFAULTS
            if getattr(args, f"cfg_{key}", None) is not None}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lwta-meta",
        description="Meta-learning with stochastic competing-unit networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run meta-training")
    _add_config_flags(p_train)
    p_train.add_argument("--resume", action="store_true",
                         help="resume from an existing --checkpoint file")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p_eval)

    p_al = sub.add_parser("active-learn", help="active-learning MSE trace")
    _add_config_flags(p_al)
    p_al.add_argument("--strategy", default="max_variance")
    p_al.add_argument("--num-tasks", type=int, default=50)
    p_al.add_argument("--out", help="output CSV path (default stdout)")

    p_sweep = sub.add_parser("sweep", help="train/eval across one axis")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values, e.g. 2,4,8")
    p_sweep.add_argument("--out", help="output CSV path (default stdout)")

    p_cfg = sub.add_parser("config", help="inspect configuration")
    _add_config_flags(p_cfg)
    p_cfg.add_argument("--dump", action="store_true")
    return parser


def run(argv=None) -> int:
    args = make_parser().parse_args(argv)
    cfg = load_config(getattr(args, "config", None), _collect_overrides(args))
    if args.command == "train":
        cfg["_resume"] = args.resume
        return cmd_train(cfg)
    if args.command == "eval":
        return cmd_eval(cfg)
    if args.command == "active-learn":
        return cmd_active_learn(cfg, args.strategy, args.num_tasks, args.out)
    if args.command == "sweep":
        return cmd_sweep(cfg, args.axis, args.values.split(","), args.out)
    if args.command == "config":
        sys.stdout.write(dump_config(cfg))
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        code = run(argv)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        code = 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        code = 3
    except DivergedTaskError as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        code = 4
    if argv is None:
        sys.exit(code)
    return code
