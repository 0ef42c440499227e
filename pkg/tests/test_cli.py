import json

import pytest

from xmixup.cli import (CliError, dispatch, read_config_file, resolve_config,
                        train_config_from)
from xmixup.corpus import load_jsonl


def gen_args(tmp_path, name="bundle.jsonl", train=20, test=6):
    out = tmp_path / name
    return ["gen-data", "--task", "classification", "--train-size", str(train),
            "--test-size", str(test), "--vocab-size", "30", "--seed", "5",
            "--out", str(out)], out


TRAIN_FLAGS = ["--config", None, "--seed", "3"]


def small_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# desk-scale run\n"
        "encoder.d_model = 16\n"
        "encoder.num_heads = 2\n"
        "encoder.ffn_dim = 24\n"
        "encoder.vocab_size = 30\n"
        "encoder.max_len = 16\n"
        "train.epochs = 1\n"
        "train.batch_size = 8\n"
        "train.schedule_k = 50.0\n"
        "train.alpha = 0.4\n"
    )
    return cfg


class TestConfigResolution:
    def test_file_parsing_skips_comments_and_casts(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("train.alpha = 0.5  # balance\ntrain.use_mixup = false\n\n")
        values = read_config_file(cfg)
        assert values == {"train.alpha": 0.5, "train.use_mixup": False}

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("train.warp_speed = 9\n")
        with pytest.raises(CliError, match="unknown config key"):
            resolve_config(str(cfg), {})

    def test_precedence_flags_over_file_over_defaults(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("train.alpha = 0.6\ntrain.epochs = 7\n")
        resolved = resolve_config(str(cfg), {"train.alpha": 0.9})
        assert resolved["train.alpha"] == 0.9   # flag wins
        assert resolved["train.epochs"] == 7    # file wins over default
        assert resolved["train.batch_size"] == 16  # default

    def test_per_task_defaults_fill_in(self):
        resolved = resolve_config(None, {"corpus.task": "span"})
        assert resolved["train.alpha"] == 0.2
        assert resolved["train.schedule_k"] == 2000.0

    def test_malformed_line_rejected(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("just words\n")
        with pytest.raises(CliError, match="key = value"):
            read_config_file(cfg)

    def test_train_config_materializes(self):
        resolved = resolve_config(None, {})
        config = train_config_from(resolved)
        assert config.encoder.d_model == 32
        assert config.alpha == 0.4


class TestCommands:
    def test_gen_data_writes_loadable_bundle(self, tmp_path, capsys):
        args, out = gen_args(tmp_path)
        assert dispatch(args) == 0
        bundle = load_jsonl(out)
        assert len(bundle.train) == 20 and len(bundle.test) == 6
        assert "wrote 20 train / 6 test" in capsys.readouterr().out

    def test_train_then_eval_and_analyze(self, tmp_path, capsys):
        args, data = gen_args(tmp_path)
        dispatch(args)
        cfg = small_config_file(tmp_path)
        run_dir = tmp_path / "run"
        rc = dispatch(["train", "--data", str(data), "--config", str(cfg),
                       "--seed", "3", "--out", str(run_dir)])
        assert rc == 0
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "checkpoint.json").exists()
        resolved = (run_dir / "resolved_config.txt").read_text()
        assert "train.seed = 3" in resolved and "encoder.d_model = 16" in resolved

        rc = dispatch(["eval", "--checkpoint", str(run_dir / "checkpoint.json"),
                       "--data", str(data)])
        assert rc == 0
        assert "accuracy =" in capsys.readouterr().out

        rc = dispatch(["analyze", "--checkpoint", str(run_dir / "checkpoint.json"),
                       "--data", str(data), "--out", str(tmp_path / "report")])
        assert rc == 0
        for name in ("cka.csv", "centroids.csv", "pca.csv"):
            assert (tmp_path / "report" / name).exists()

    def test_reruns_are_byte_identical(self, tmp_path):
        args, data = gen_args(tmp_path)
        dispatch(args)
        cfg = small_config_file(tmp_path)
        outs = []
        for name in ("r1", "r2"):
            run_dir = tmp_path / name
            assert dispatch(["train", "--data", str(data), "--config", str(cfg),
                             "--seed", "3", "--out", str(run_dir)]) == 0
            outs.append((run_dir / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_toggle_flags_reach_training(self, tmp_path):
        args, data = gen_args(tmp_path)
        dispatch(args)
        cfg = small_config_file(tmp_path)
        run_dir = tmp_path / "baseline"
        rc = dispatch(["train", "--data", str(data), "--config", str(cfg),
                       "--seed", "3", "--out", str(run_dir), "--no-mixup",
                       "--no-mixup-inference", "--no-scheduled-sampling",
                       "--no-mse-consistency", "--no-kl-consistency"])
        assert rc == 0
        resolved = (run_dir / "resolved_config.txt").read_text()
        assert "train.use_mixup = False" in resolved
        ckpt = json.loads((run_dir / "checkpoint.json").read_text())
        assert ckpt["config"]["use_mixup"] is False

    def test_gradcheck_exit_code_zero(self, capsys):
        assert dispatch(["gradcheck", "--seed", "7"]) == 0
        assert "max relative error" in capsys.readouterr().out

    def test_sweep_layer_emits_csv(self, tmp_path):
        args, data = gen_args(tmp_path, train=12, test=4)
        dispatch(args)
        cfg = small_config_file(tmp_path)
        run_dir = tmp_path / "sweep"
        rc = dispatch(["sweep-layer", "--data", str(data), "--config", str(cfg),
                       "--seed", "1", "--layers", "1", "--out", str(run_dir)])
        assert rc == 0
        lines = (run_dir / "sweep.csv").read_text().splitlines()
        assert lines[0].startswith("row,")
        assert len(lines) == 3  # header, layer=1, baseline

    def test_ablate_emits_all_rows(self, tmp_path):
        args, data = gen_args(tmp_path, train=12, test=4)
        dispatch(args)
        cfg = small_config_file(tmp_path)
        run_dir = tmp_path / "ablation"
        rc = dispatch(["ablate", "--data", str(data), "--config", str(cfg),
                       "--seed", "1", "--out", str(run_dir)])
        assert rc == 0
        lines = (run_dir / "ablation.csv").read_text().splitlines()
        assert len(lines) == 9  # header + 8 rows
        assert "w/o mixup" in lines[2]

    def test_log_level_env_var(self, tmp_path, capsys, monkeypatch):
        import logging

        monkeypatch.setenv("X_MIXUP_LOG", "quiet")
        logging.getLogger().handlers.clear()
        args, _ = gen_args(tmp_path, name="quiet.jsonl", train=4, test=2)
        assert dispatch(args) == 0
        assert logging.getLogger().level == logging.WARNING

    def test_unknown_subcommand_exits_two(self, capsys):
        assert dispatch(["frobnicate"]) == 2
        assert dispatch([]) == 2

    def test_missing_data_is_one_line_error(self, tmp_path, capsys):
        rc = dispatch(["train", "--data", str(tmp_path / "nope.jsonl")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and err.count("\n") == 1

    def test_empty_dataset_rejected(self, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert dispatch(["train", "--data", str(empty)]) == 1
