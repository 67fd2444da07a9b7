from pathlib import Path

import pytest

import config
import model
from batchlab import DESK_DEVICE_RULE
from config import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


class TestExampleConfigs:
    def test_train(self):
        run = config.load_run_config(CONFIGS / "train.json")
        assert run.optimizer == "muon"
        assert run.spec.hidden_width == 128 and run.spec.depth == 3
        assert run.schedule.total_steps == run.total_steps == 400
        assert run.schedule.max_lr == 0.02
        assert run.task.teacher_width == model.TEACHER_RATIO * run.spec.hidden_width

    def test_sweep(self):
        sweep = config.load_sweep_config(CONFIGS / "sweep_batch.json")
        assert sweep.batch_sizes == (8, 16, 32, 64, 128, 256)
        assert sweep.base.schedule.total_steps == 600
        assert sweep.learning_rates == {"adamw": 0.01, "muon": 0.02}
        assert sweep.cost.device_rule == DESK_DEVICE_RULE
        assert sweep.base.task.teacher_width >= model.TEACHER_RATIO * sweep.base.spec.hidden_width

    def test_telescope(self):
        job = config.load_telescope_job(CONFIGS / "telescope.json")
        assert job.telescope.ranges == ((-3.0, -0.5), (-5.0, 0.0))
        assert job.base.total_steps == job.telescope.steps == 200
        assert job.base.optimizer == "muon"
        assert job.fit_powerlaw
        assert job.base.task.teacher_width == model.TEACHER_RATIO * job.telescope.final_width

    def test_telescope_weight_decay_range_reaches_unity(self):
        job = config.load_telescope_job(CONFIGS / "telescope.json")
        lo, hi = job.telescope.ranges[job.telescope.names.index("weight_decay")]
        assert lo <= -3.0 and hi >= 0.0


class TestRunConfig:
    def test_empty_object_is_default(self):
        assert config.parse_run_config({}) == config.RunConfig()

    def test_schedule_length_follows_run(self):
        run = config.parse_run_config({"total_steps": 50, "schedule": {"max_lr": 0.02, "warmup_steps": 5}})
        assert run.schedule.total_steps == 50

    def test_missing_schedule_takes_the_run_length(self):
        run = config.parse_run_config({"total_steps": 100})
        assert run.schedule.total_steps == run.total_steps == 100
        assert (run.schedule.max_lr, run.schedule.warmup_steps) == (0.01, 10)

    def test_missing_schedule_clamps_warmup_to_short_runs(self):
        run = config.parse_run_config({"total_steps": 5})
        assert (run.schedule.warmup_steps, run.schedule.total_steps) == (4, 5)
        assert config.parse_run_config({"total_steps": 0}).total_steps == 0

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            config.parse_run_config({"spec": {"widht": 32}})
        assert info.value.path == "spec.widht"
        assert "unknown key" in str(info.value)

    def test_negative_lr_names_the_field(self):
        with pytest.raises(ConfigError) as info:
            config.parse_run_config({"schedule": {"max_lr": -0.1, "warmup_steps": 5}})
        assert info.value.path == "schedule.max_lr"

    @pytest.mark.parametrize("data,path", [
        ({"batch_size": "32"}, "batch_size"),
        ({"batch_size": True}, "batch_size"),
        ({"spec": {"mup_enabled": 1}}, "spec.mup_enabled"),
        ({"spec": []}, "spec"),
        ({"optimizer": "sgd"}, "optimizer"),
        ({"total_steps": 50, "schedule": {"max_lr": 0.01, "warmup_steps": 5, "total_steps": 60}}, "schedule"),
    ])
    def test_errors_carry_a_path(self, data, path):
        with pytest.raises(ConfigError) as info:
            config.parse_run_config(data)
        assert info.value.path == path
        assert str(info.value).startswith(f"{path}: ")

    def test_int_accepted_for_float(self):
        run = config.parse_run_config({"schedule": {"max_lr": 1, "warmup_steps": 0}})
        assert isinstance(run.schedule.max_lr, float)


class TestSweepAndTelescope:
    @pytest.mark.parametrize("data,path", [
        ({"batch_sizes": [4, 4]}, "batch_sizes"),
        ({"learning_rates": {"sgd": 0.1}}, "learning_rates"),
        ({"base": {"optimizer": "lion"}}, "base.optimizer"),
        ({"cost": {"kappa": 0, "fixed_overhead": 0}}, "cost.kappa"),
        ({"thresholds": [0.1, -1]}, "thresholds"),
    ])
    def test_sweep_errors(self, data, path):
        with pytest.raises(ConfigError) as info:
            config.parse_sweep_config(data)
        assert info.value.path == path

    def test_device_rule_is_nested_tuples(self):
        sweep = config.parse_sweep_config({"cost": {"device_rule": [[4, 1], [16, 2]], "overflow_devices": 4}})
        assert sweep.cost.device_rule == ((4, 1), (16, 2))
        assert sweep.cost.devices(8) == 2

    def test_telescope_steps_set_the_run_length(self):
        job = config.parse_telescope_job({"telescope": {"steps": 7}, "base": {"batch_size": 4}})
        assert job.base.total_steps == job.base.schedule.total_steps == 7
        assert job.base.batch_size == 4

    def test_telescope_errors(self):
        with pytest.raises(ConfigError) as info:
            config.parse_telescope_job({"telescope": {"points": 1}})
        assert info.value.path == "telescope.points"


class TestReadJson:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="file not found"):
            config.read_json(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"batch_size": 4,}')
        with pytest.raises(ConfigError, match="invalid JSON at line 1"):
            config.read_json(path)

    def test_top_level_must_be_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="top level"):
            config.read_json(path)
