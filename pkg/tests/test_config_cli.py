import json

import pytest
import yaml

from vemkd.cli import main
from vemkd.config import (
    DEFAULTS,
    echo_config,
    expand_sweep,
    load_config_file,
    parse_overrides,
    resolve_config,
)
from vemkd.errors import ConfigError


class TestResolve:
    def test_defaults(self):
        cfg = resolve_config()
        assert cfg["sampler.steps"] == 10
        assert cfg["sampler.step_size"] == 100.0
        assert cfg["sampler.noise_std"] == 0.005
        assert cfg["vem.lambda_mi"] == 0.1
        assert cfg["schedule.lr_student"] == 0.0002
        assert cfg["schedule.lr_ebm"] == 0.0001
        assert cfg["ebm.num_res_blocks"] == 7
        assert cfg["ebm.leaky_slope"] == 0.2

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            resolve_config({"nonsense": 1})
        with pytest.raises(ConfigError, match="unknown config key"):
            resolve_config({"vem": {"typo_mi": 0.2}})

    def test_type_coercion_and_errors(self):
        cfg = resolve_config({"schedule": {"total_iters": "250"}})
        assert cfg["schedule.total_iters"] == 250
        with pytest.raises(ConfigError):
            resolve_config({"schedule": {"total_iters": "many"}})

    def test_clamp_nullable(self):
        cfg = resolve_config({"sampler": {"clamp": None}})
        assert cfg["sampler.clamp"] is None
        cfg = resolve_config({"sampler": {"clamp": [-0.5, 0.5]}})
        assert cfg["sampler.clamp"] == (-0.5, 0.5)

    def test_invalid_mode(self):
        with pytest.raises(ConfigError, match="schedule.mode"):
            resolve_config({"schedule": {"mode": "sideways"}})

    def test_overrides_win(self):
        cfg = resolve_config({"seed": 1}, {"seed": 2})
        assert cfg["seed"] == 2

    def test_every_key_has_default(self):
        cfg = resolve_config()
        for key in DEFAULTS:
            assert key in cfg


class TestSweep:
    def test_no_sweep_single_run(self):
        runs = list(expand_sweep(resolve_config()))
        assert len(runs) == 1 and runs[0][0] == ""

    def test_lambda_mi_grid(self):
        cfg = resolve_config({"sweep": {"vem": {"lambda_mi": [0.05, 0.1, 0.2]}}})
        runs = list(expand_sweep(cfg))
        assert len(runs) == 3
        values = [c["vem.lambda_mi"] for _, c in runs]
        assert values == [0.05, 0.1, 0.2]
        assert all("lambda_mi=" in suffix for suffix, _ in runs)

    def test_unknown_sweep_target(self):
        with pytest.raises(ConfigError):
            resolve_config({"sweep": {"bogus": [1]}})


class TestEchoFidelity:
    def test_echoed_config_resolves_identically(self, tmp_path):
        cfg = resolve_config({"seed": 3, "vem": {"lambda_mi": 0.2}},
                             {"schedule.total_iters": 7})
        path = echo_config(cfg, tmp_path)
        reloaded = resolve_config(load_config_file(path))
        cfg_clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
        reloaded_clean = {k: v for k, v in reloaded.items() if not k.startswith("_")}
        assert cfg_clean == reloaded_clean


class TestOverrideParsing:
    def test_key_value(self):
        out = parse_overrides(["seed=4", "vem.lambda_mi=0.05", "vem.enabled=false"])
        assert out == {"seed": 4, "vem.lambda_mi": 0.05, "vem.enabled": False}

    def test_malformed(self):
        with pytest.raises(ConfigError):
            parse_overrides(["notakeyvalue"])


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    code = main(["gen-data", f"data.path={data}", "data.num_train=24", "data.num_val=8"])
    assert code == 0
    return root, data


class TestCli:
    def test_gen_data_deterministic(self, cli_env, tmp_path):
        _, data = cli_env
        other = tmp_path / "data2"
        assert main(["gen-data", f"data.path={other}", "data.num_train=24", "data.num_val=8"]) == 0
        assert (other / "train_y.f32").read_bytes() == (data / "train_y.f32").read_bytes()

    def test_train_eval_report_flow(self, cli_env, capsys):
        root, data = cli_env
        run_dir = root / "run_a"
        args = [
            "train", f"data.path={data}", f"output_dir={run_dir}",
            "model.width=8", "model.disc_width=8",
            "ebm.base_channels=4", "ebm.num_res_blocks=2", "sampler.steps=2",
            "schedule.total_iters=3", "schedule.batch_size=4",
        ]
        assert main(args) == 0
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "ckpt_final" / "manifest.json").exists()
        capsys.readouterr()  # drop the train summary

        assert main([
            "eval", "--ckpt", str(run_dir / "ckpt_final"),
            f"data.path={data}", "model.width=8", "model.disc_width=8",
            "ebm.base_channels=4", "ebm.num_res_blocks=2",
        ]) == 0
        out = capsys.readouterr().out
        report = json.loads(out[out.index("{"):])
        assert report["sampler_invocations"] == 0
        assert (run_dir / "ckpt_final" / "eval.json").exists()

        report_dir = root / "report"
        assert main(["report", "--runs", str(run_dir), "--out", str(report_dir)]) == 0
        assert (report_dir / "comparison.csv").exists()
        plots = list((report_dir / "run_a").glob("*.png"))
        assert plots, "expected at least one curve plot"

    def test_sweep_fans_out(self, cli_env, tmp_path):
        _, data = cli_env
        sweep_cfg = tmp_path / "sweep.yaml"
        sweep_cfg.write_text(yaml.safe_dump({
            "data": {"path": str(data)},
            "output_dir": str(tmp_path / "sweeprun"),
            "model": {"width": 8, "disc_width": 8},
            "ebm": {"base_channels": 4, "num_res_blocks": 2},
            "sampler": {"steps": 2},
            "schedule": {"total_iters": 2, "batch_size": 4},
            "sweep": {"vem": {"lambda_mi": [0.0, 0.1]}},
        }))
        assert main(["train", "--config", str(sweep_cfg)]) == 0
        subdirs = sorted(p.name for p in (tmp_path / "sweeprun").iterdir())
        assert subdirs == ["lambda_mi=0.0", "lambda_mi=0.1"]

    def test_config_error_exit_code(self):
        assert main(["train", "bogus.key=1"]) == 2

    def test_missing_config_file(self):
        assert main(["train", "--config", "/nonexistent.yaml"]) == 2

    def test_report_missing_run_exit_code(self, tmp_path):
        assert main(["report", "--runs", str(tmp_path / "ghost"), "--out", str(tmp_path / "r")]) == 4

    def test_missing_dataset_exit_code(self, tmp_path):
        assert main(["train", f"data.path={tmp_path / 'nodata'}",
                     f"output_dir={tmp_path / 'r'}"]) == 4


class TestEchoRerun:
    def test_echoed_config_reproduces_run_bitwise(self, cli_env, tmp_path):
        _, data = cli_env
        from vemkd import trainer
        from vemkd.config import resolve_config

        first = tmp_path / "first"
        cfg = resolve_config({}, {
            "data.path": str(data), "output_dir": str(first),
            "model.width": 8, "model.disc_width": 8,
            "ebm.base_channels": 4, "ebm.num_res_blocks": 2,
            "sampler.steps": 2, "schedule.total_iters": 4,
            "schedule.batch_size": 4,
        })
        trainer.run(cfg)
        echoed = resolve_config(load_config_file(first / "config.yaml"),
                                {"output_dir": str(tmp_path / "second")})
        trainer.run(echoed)
        a = (first / "metrics.csv").read_bytes()
        b = (tmp_path / "second" / "metrics.csv").read_bytes()
        assert a == b
