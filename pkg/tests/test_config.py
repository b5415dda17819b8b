import pytest

from app.config import (
    PersistentPattern,
    PresetCatalog,
    TransientPattern,
    apply_overrides,
    catalog,
    dump_scenario,
    parse_override,
    parse_scenario,
    resolve_seed,
    validate_config,
)
from app.core import NodeId, Policy
from app.errors import ConfigurationError


def paths(violations):
    return {v.path: v.message for v in violations}


class TestValidation:
    def test_default_nd_config_is_valid(self):
        cfg = catalog.get_preset("nd-worker-si08").cfg
        assert (cfg.n_workers, cfg.n_servers, cfg.global_batch) == (20, 8, 81_920)
        assert cfg.detection.lambda_ == 1.5
        assert validate_config(cfg) == []

    def test_lambda_must_exceed_one(self, make_cfg):
        cfg = make_cfg(detection__lambda=1.0)
        assert paths(validate_config(cfg))["detection.lambda"] == "lambda must exceed 1"

    def test_no_samples(self, make_cfg):
        cfg = make_cfg(samples=0)
        assert paths(validate_config(cfg))["samples"] == "N ≥ B required"

    def test_windows_ordered(self, make_cfg):
        cfg = make_cfg(detection__window_transient=100.0)
        assert "detection.window_persistent" in paths(validate_config(cfg))

    def test_policy_consistency_mismatch(self, make_cfg):
        assert "policy" in paths(validate_config(make_cfg(consistency="asp")))
        assert "policy" in paths(validate_config(make_cfg(policy="asp_dds")))

    def test_backup_count(self, make_cfg):
        cfg = make_cfg(policy="backup_workers", backup_workers=4)
        assert "backup_workers" in paths(validate_config(cfg))

    def test_device_counts(self, make_cfg):
        cfg = make_cfg(architecture="all_reduce", n_servers=0,
                       devices=[{"name": "gpu", "count": 3, "speed": 10.0}])
        assert "devices" in paths(validate_config(cfg))

    def test_pattern_target_range(self, make_cfg):
        cfg = make_cfg(patterns=[{"kind": "persistent", "targets": [["server", 5]], "delay": 1.0}])
        assert "patterns.0.targets" in paths(validate_config(cfg))

    def test_unknown_field(self, make_cfg):
        data = dump_scenario(make_cfg())
        data["warp_speed"] = 9
        with pytest.raises(ConfigurationError) as info:
            parse_scenario(data)
        assert info.value.violations[0].path == "warp_speed"


class TestPatterns:
    def test_transient_delay(self):
        pattern = TransientPattern(sleep_duration=1.5, intensity=0.8)
        assert pattern.delay == pytest.approx(1.2)
        assert (pattern.on_period, pattern.cycle, pattern.probability) == (900.0, 1800.0, 0.3)

    def test_targets(self):
        pattern = PersistentPattern(delay=4.0, targets=[("server", 3)])
        assert pattern.applies_to(NodeId.server(3))
        assert not pattern.applies_to(NodeId.worker(3))
        assert TransientPattern(sleep_duration=1.0, intensity=1.0).applies_to(NodeId.worker(7))


class TestOverrides:
    def test_parse_override(self):
        assert parse_override("detection.lambda=1.5") == ("detection.lambda", 1.5)
        assert parse_override("policy=antdt_nd") == ("policy", "antdt_nd")
        assert parse_override("patterns=[]") == ("patterns", [])

    def test_missing_equals(self):
        with pytest.raises(ConfigurationError):
            parse_override("policy")

    def test_nested_and_indexed(self, make_cfg):
        cfg = make_cfg(patterns=[{"kind": "persistent", "delay": 1.0}])
        cfg = apply_overrides(cfg, ["patterns.0.delay=2.5", "detection.act_every=60"])
        assert cfg.patterns[0].delay == 2.5
        assert cfg.detection.act_every == 60.0

    def test_unknown_key(self, make_cfg):
        with pytest.raises(ConfigurationError, match="unknown override key: detection.lamda"):
            apply_overrides(make_cfg(), ["detection.lamda=2"])

    def test_seed_from_environment(self, make_cfg, monkeypatch):
        monkeypatch.setenv("ANTDT_SEED", "42")
        assert resolve_seed(make_cfg()).seed == 42
        monkeypatch.setenv("ANTDT_SEED", "")
        assert resolve_seed(make_cfg(seed=3)).seed == 3


class TestPresetCatalog:
    def test_every_preset_is_valid(self):
        presets = catalog.get_all_presets()
        assert len(presets) >= 9
        for preset in presets:
            assert validate_config(preset.cfg) == [], preset.id

    def test_intensity_presets(self):
        delays = {}
        for pid in ("nd-worker-si01", "nd-worker-si03", "nd-worker-si05", "nd-worker-si08"):
            cfg = catalog.get_preset(pid).cfg
            assert cfg.policy == Policy.ANTDT_ND
            delays[pid] = (cfg.patterns[0].intensity, cfg.patterns[1].delay)
        assert delays == {"nd-worker-si01": (0.1, 4.0), "nd-worker-si03": (0.3, 4.0),
                          "nd-worker-si05": (0.5, 4.0), "nd-worker-si08": (0.8, 4.0)}

    def test_intensity_sweep_varies_only_intensity(self):
        sweep = catalog.get_preset("nd-worker-si08").sweep
        assert sweep["axis"] == "patterns.0.intensity"
        assert "couple" not in sweep

    def test_unknown_preset(self):
        assert catalog.get_preset("nope") is None

    def test_duplicate_ids(self, tmp_path):
        (tmp_path / "base.json").write_text('{"n_workers": 1, "n_servers": 1, "global_batch": 1, "samples": 1}')
        (tmp_path / "config.yaml").write_text(
            "presets:\n"
            "  - {id: a, name: A, description: x, scenario_file: base.json}\n"
            "  - {id: a, name: B, description: y, scenario_file: base.json}\n"
        )
        with pytest.raises(ConfigurationError, match="duplicate preset id"):
            PresetCatalog(tmp_path / "config.yaml")

    def test_custom_catalog(self, tmp_path):
        (tmp_path / "base.json").write_text('{"n_workers": 2, "n_servers": 1, "global_batch": 8, "samples": 80}')
        (tmp_path / "config.yaml").write_text(
            "presets:\n"
            "  - id: tiny\n"
            "    name: Tiny\n"
            "    description: two workers\n"
            "    scenario_file: base.json\n"
            "    overrides: {seed: 5}\n"
        )
        custom = PresetCatalog(tmp_path / "config.yaml")
        assert [p.id for p in custom.get_all_presets()] == ["tiny"]
        assert custom.get_preset("tiny").cfg.seed == 5
