import csv
import os

import numpy as np
import pytest

from lwta_meta.cli import (CONFIG_DEFAULTS, build_state, dump_config,
                           evaluate, load_checkpoint, load_config, main,
                           meta_config_from, parse_config_value,
                           save_checkpoint, task_source_from)
from lwta_meta.errors import ConfigError
from lwta_meta.meta import meta_train
from lwta_meta.tensor import save_stlw

TINY = ["--blocks", "2,2", "--task-batch", "2", "--eval-inner-steps", "2",
        "--num-eval-tasks", "3"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestConfigParsing:
    def test_type_coercion(self):
        assert parse_config_value("iters", "250") == 250
        assert parse_config_value("inner_lr", "0.01") == 0.01
        assert parse_config_value("task", "synth-class") == "synth-class"

    def test_unknown_key_lists_valid(self):
        with pytest.raises(ConfigError, match="inner_lr"):
            parse_config_value("learning_rate", "0.1")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config_value("iters", "many")

    def test_file_with_comments_and_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\niters = 7\ntask=sine-challenging\n\n")
        cfg = load_config(str(p), {"iters": "9"})
        assert cfg["iters"] == 9
        assert cfg["task"] == "sine-challenging"
        assert cfg["tau"] == CONFIG_DEFAULTS["tau"]

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("iters 7\n")
        with pytest.raises(ConfigError):
            load_config(str(p))

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/x.cfg")

    def test_dump_round_trips(self, tmp_path):
        text = dump_config(dict(CONFIG_DEFAULTS))
        p = tmp_path / "dumped.cfg"
        p.write_text(text)
        assert load_config(str(p)) == CONFIG_DEFAULTS

    def test_config_dump_command(self, capsys):
        assert main(["config", "--dump"]) == 0
        out = capsys.readouterr().out
        for key in CONFIG_DEFAULTS:
            assert f"{key}=" in out


class TestCheckpoint:
    def _state(self, **over):
        cfg = load_config(overrides={"blocks": "2,2", "iters": "4", **over})
        return build_state(cfg), meta_config_from(cfg), cfg

    def test_save_load_save_byte_identical(self, tmp_path):
        state, config, _ = self._state(use_bias="1")
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(str(p1), state, config)
        loaded, loaded_cfg = load_checkpoint(str(p1))
        save_checkpoint(str(p2), loaded, loaded_cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_restores_everything(self, tmp_path):
        state, config, _ = self._state(weights="point", activation="relu")
        state.iteration = 3
        p = tmp_path / "c.ckpt"
        save_checkpoint(str(p), state, config)
        loaded, loaded_cfg = load_checkpoint(str(p))
        assert loaded.iteration == 3
        assert loaded.seed == state.seed
        assert loaded.network.task_type == state.network.task_type
        assert loaded_cfg == config
        for a, b in zip(state.network.param_arrays(),
                        loaded.network.param_arrays()):
            assert np.array_equal(a, b)
            assert a.dtype == b.dtype

    def test_rejects_non_checkpoint(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ConfigError):
            load_checkpoint(str(p))


class TestTrainCommand:
    def test_zero_iters_checkpoint_is_initialization(self, tmp_path):
        ckpt = tmp_path / "init.ckpt"
        code = main(["train", "--task", "sine-default", "--iters", "0",
                     "--checkpoint", str(ckpt)] + TINY)
        assert code == 0
        loaded, _ = load_checkpoint(str(ckpt))
        fresh = build_state(load_config(overrides={"blocks": "2,2"}))
        for a, b in zip(loaded.network.param_arrays(),
                        fresh.network.param_arrays()):
            assert np.array_equal(a, b)

    def test_metrics_csv_format_and_determinism(self, tmp_path):
        m1, m2 = tmp_path / "m1.csv", tmp_path / "m2.csv"
        for m in (m1, m2):
            assert main(["train", "--iters", "3", "--metrics-out", str(m),
                         "--seed", "5"] + TINY) == 0
        rows = read_csv(m1)
        assert rows[0] == ["iter", "elbo_total", "likelihood", "kl_xi", "kl_w",
                           "eval_metric", "wallclock_ms"]
        assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
        for r in rows[1:]:
            assert np.isfinite(float(r[1]))
        # wallclock differs between runs; everything else is seeded
        assert [r[:6] for r in read_csv(m1)] == [r[:6] for r in read_csv(m2)]

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = load_config(overrides={"blocks": "2,2", "task_batch": "2",
                                     "iters": "4", "seed": "7"})
        config = meta_config_from(cfg)
        full = build_state(cfg)
        ckpt = tmp_path / "mid.ckpt"

        def grab(stats, st):
            if st.iteration == 2:
                save_checkpoint(str(ckpt), st, config)

        meta_train(full, task_source_from(cfg), config, on_iteration=grab)
        m2 = tmp_path / "resumed.csv"
        assert main(["train", "--resume", "--checkpoint", str(ckpt),
                     "--iters", "4", "--seed", "7", "--metrics-out", str(m2)]
                    + TINY) == 0
        resumed, _ = load_checkpoint(str(ckpt))
        assert resumed.iteration == 4
        for a, b in zip(full.network.param_arrays(),
                        resumed.network.param_arrays()):
            assert np.array_equal(a, b)
        assert [r[0] for r in read_csv(m2)[1:]] == ["2", "3"]

    def test_resume_architecture_mismatch(self, tmp_path):
        ckpt = tmp_path / "arch.ckpt"
        assert main(["train", "--iters", "0", "--checkpoint", str(ckpt)]
                    + TINY) == 0
        code = main(["train", "--resume", "--checkpoint", str(ckpt),
                     "--iters", "1", "--blocks", "4,4", "--task-batch", "2"])
        assert code == 2

    def test_ablation_arm_flags(self, tmp_path):
        code = main(["train", "--task", "sine-challenging", "--weights", "point",
                     "--activation", "deterministic_lwta", "--iters", "1"] + TINY)
        assert code == 0

    def test_divergence_exit_code_and_checkpoint(self, tmp_path):
        ckpt = tmp_path / "div.ckpt"
        code = main(["train", "--iters", "3", "--inner-lr", "1e30",
                     "--checkpoint", str(ckpt)] + TINY)
        assert code == 4
        assert os.path.exists(ckpt)


class TestEvalCommand:
    def _trained(self, tmp_path):
        ckpt = tmp_path / "t.ckpt"
        assert main(["train", "--iters", "2", "--checkpoint", str(ckpt),
                     "--seed", "3"] + TINY) == 0
        return ckpt

    def test_eval_prints_summary(self, tmp_path, capsys):
        ckpt = self._trained(tmp_path)
        assert main(["eval", "--checkpoint", str(ckpt)] + TINY) == 0
        assert "mse:" in capsys.readouterr().out

    def test_eval_deterministic(self, tmp_path, capsys):
        ckpt = self._trained(tmp_path)
        capsys.readouterr()  # drop the train command's output
        main(["eval", "--checkpoint", str(ckpt)] + TINY)
        first = capsys.readouterr().out
        main(["eval", "--checkpoint", str(ckpt)] + TINY)
        second = capsys.readouterr().out
        # wall-clock varies between runs; the metric summary must not
        assert second.split("(")[0] == first.split("(")[0]

    def test_task_type_mismatch(self, tmp_path):
        ckpt = self._trained(tmp_path)
        code = main(["eval", "--checkpoint", str(ckpt),
                     "--task", "synth-class"] + TINY)
        assert code == 2

    def test_eval_requires_checkpoint(self):
        assert main(["eval"] + TINY) == 2


class TestActiveLearnCommand:
    def _trained(self, tmp_path):
        ckpt = tmp_path / "al.ckpt"
        assert main(["train", "--task", "sine-challenging", "--iters", "1",
                     "--checkpoint", str(ckpt)] + TINY) == 0
        return ckpt

    def test_trace_csv(self, tmp_path):
        ckpt = self._trained(tmp_path)
        out = tmp_path / "trace.csv"
        code = main(["active-learn", "--checkpoint", str(ckpt),
                     "--task", "sine-challenging", "--num-tasks", "1",
                     "--al-budget", "2", "--out", str(out)] + TINY)
        assert code == 0
        rows = read_csv(out)
        assert rows[0] == ["step", "mean_mse", "std_mse"]
        assert len(rows) == 4  # initial fit + 2 queries

    def test_deterministic(self, tmp_path):
        ckpt = self._trained(tmp_path)
        o1, o2 = tmp_path / "t1.csv", tmp_path / "t2.csv"
        for o in (o1, o2):
            main(["active-learn", "--checkpoint", str(ckpt),
                  "--task", "sine-challenging", "--num-tasks", "1",
                  "--al-budget", "2", "--strategy", "random",
                  "--out", str(o)] + TINY)
        assert o1.read_text() == o2.read_text()

    def test_unknown_strategy(self, tmp_path):
        ckpt = self._trained(tmp_path)
        code = main(["active-learn", "--checkpoint", str(ckpt),
                     "--strategy", "psychic"] + TINY)
        assert code == 2


class TestSweepCommand:
    def test_single_value_equals_train_plus_eval(self, tmp_path):
        args = {"blocks": "2,2", "task_batch": "2", "iters": "2",
                "eval_inner_steps": "2", "num_eval_tasks": "3", "seed": "11"}
        out = tmp_path / "sweep.csv"
        argv = ["sweep", "--axis", "samples", "--values", "4",
                "--out", str(out)]
        for k, v in args.items():
            argv += [f"--{k.replace('_', '-')}", v]
        assert main(argv) == 0
        rows = read_csv(out)
        assert rows[0] == ["samples", "metric_mean", "metric_std"]

        cfg = load_config(overrides=args)
        config = meta_config_from(cfg)
        state = build_state(cfg)
        meta_train(state, task_source_from(cfg), config)
        mean, std, _ = evaluate(state, cfg, config, cfg["num_eval_tasks"])
        assert float(rows[1][1]) == pytest.approx(mean, rel=1e-12)
        assert float(rows[1][2]) == pytest.approx(std, rel=1e-12)

    def test_unknown_axis(self):
        assert main(["sweep", "--axis", "flavor", "--values", "1",
                     "--iters", "0"] + TINY) == 2


class TestExitCodes:
    def test_data_error_is_3(self, tmp_path):
        # manifest present but the split has too few classes for n_way
        (tmp_path / "classA").mkdir()
        arr = np.zeros(4, dtype=np.float32)
        save_stlw(tmp_path / "classA" / "i0.stlw", arr)
        (tmp_path / "manifest.tsv").write_text("classA\ttrain\n")
        code = main(["train", "--task", "image-class", "--dataset-dir",
                     str(tmp_path), "--n-way", "5", "--iters", "1"] + TINY)
        assert code == 3

    def test_config_error_is_2(self, tmp_path):
        code = main(["train", "--task", "image-class",
                     "--dataset-dir", str(tmp_path / "nope"), "--iters", "1"]
                    + TINY)
        assert code == 2
