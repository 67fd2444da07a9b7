import json
from dataclasses import replace
from pathlib import Path

import model
import workspace as store_module
from workspace import ENV_VAR, RunStore, WorkspaceLayout, config_hash


class TestLayout:
    def test_flag_wins(self, monkeypatch, tmp_path):
        monkeypatch.setenv(ENV_VAR, str(tmp_path / "env"))
        assert WorkspaceLayout.resolve(str(tmp_path / "flag")).root == tmp_path / "flag"

    def test_environment_then_default(self, monkeypatch, tmp_path):
        monkeypatch.setenv(ENV_VAR, str(tmp_path / "env"))
        assert WorkspaceLayout.resolve().root == tmp_path / "env"
        monkeypatch.delenv(ENV_VAR)
        assert WorkspaceLayout.resolve().root == Path("workspace")

    def test_ensure_creates_tree(self, workspace):
        layout = WorkspaceLayout(workspace).ensure()
        assert all(d.is_dir() for d in (layout.runs, layout.analysis, layout.configs))
        assert layout.trace_path("abc") == workspace / "runs" / "abc.jsonl"


class TestConfigHash:
    def test_stable_and_short(self, small_config):
        run_id = config_hash(small_config)
        assert run_id == config_hash(replace(small_config))
        assert len(run_id) == 16
        int(run_id, 16)

    def test_every_field_counts(self, small_config):
        ids = {
            config_hash(small_config),
            config_hash(replace(small_config, run_seed=1)),
            config_hash(replace(small_config, batch_size=16)),
            config_hash(model.with_lr(small_config, 0.02)),
        }
        assert len(ids) == 4


class TestRunStore:
    def test_save_and_lookup(self, workspace, small_config):
        store = RunStore(WorkspaceLayout(workspace))
        assert store.lookup(small_config) is None
        trace = model.train(small_config)
        saved = store.save(small_config, trace, 1.5)
        loaded = store.lookup(small_config)
        assert loaded.cached and not saved.cached
        assert loaded.run_id == saved.run_id
        assert loaded.trace.to_records() == trace.to_records()
        assert loaded.wall_time == 1.5

    def test_manifest(self, workspace, small_config):
        store = RunStore(WorkspaceLayout(workspace))
        record = store.save(small_config, model.train(small_config), 0.1)
        manifest = json.loads(store.layout.manifest_path(record.run_id).read_text())
        assert manifest["run_id"] == record.run_id
        assert manifest["config"]["batch_size"] == 8
        assert manifest["seeds"] == {"run_seed": 0, "teacher_seed": 0, "data_seed": 1}
        assert manifest["diverged"] is False

    def test_trace_without_manifest_is_a_miss(self, workspace, small_config):
        store = RunStore(WorkspaceLayout(workspace))
        record = store.save(small_config, model.train(small_config), 0.1)
        store.layout.manifest_path(record.run_id).unlink()
        assert store.lookup(small_config) is None

    def test_diverged_run_round_trips(self, workspace, small_config):
        config = model.with_lr(small_config, 1e200)
        store = RunStore(WorkspaceLayout(workspace))
        trace = model.train(config)
        store.save(config, trace, 0.1)
        loaded = store.lookup(config).trace
        assert loaded.diverged and loaded.diverged_at == trace.diverged_at

    def test_run_many_dedups_and_caches(self, workspace, small_config):
        store = RunStore(WorkspaceLayout(workspace))
        other = replace(small_config, run_seed=3)
        first = store.run_many([small_config, small_config, other])
        assert [r.run_id for r in first][:2] == [config_hash(small_config)] * 2
        assert not any(r.cached for r in first)
        second = store.run_many([other, small_config])
        assert all(r.cached for r in second)
        forced = store.run_many([other], force=True)
        assert not forced[0].cached
        assert forced[0].trace.to_records() == second[0].trace.to_records()

    def test_run_many_keeps_failures_in_place(self, workspace, small_config, monkeypatch):
        def explode(config):
            if config.run_seed == 9:
                raise RuntimeError("boom")
            return model.train(config), 0.0

        monkeypatch.setattr(store_module, "_execute", explode)
        store = RunStore(WorkspaceLayout(workspace))
        results = store.run_many([replace(small_config, run_seed=9), small_config])
        assert isinstance(results[0], RuntimeError)
        assert results[1].run_id == config_hash(small_config)
