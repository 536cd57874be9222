"""End-to-end scenario runs: presets, transports, mitigation outcomes."""

import dataclasses
import json

import pytest

from mgshield.attack import AttackSpec
from mgshield.dms import EVENT_ATTACK_DETECTED, EVENT_RECONNECT, EVENT_SHED
from mgshield.errors import ConfigError, DataError
from mgshield.gru.dataset import SweepSpec, generate_dataset
from mgshield.gru.params import save_params
from mgshield.gru.train import TrainConfig, train
from mgshield.plant import BreakerStatus, PlantConfig
from mgshield.scenario import (ScenarioConfig, available_presets,
                               load_scenario, run_scenario)

GRID = BreakerStatus.GRID_CONNECTED
ISLANDED = BreakerStatus.ISLANDED

DEVICE_W = 4  # column of p_device_w in truth rows
FLAG = -1  # column of attack_flag in trace rows


@pytest.fixture(scope="module")
def trained_model(tmp_path_factory):
    ds = generate_dataset(PlantConfig(), SweepSpec(), seed=7)
    result = train(ds, TrainConfig(epochs=4, seed=7))
    path = tmp_path_factory.mktemp("model") / "model.json"
    save_params(result.params, result.stats, path)
    return str(path)


@pytest.fixture(scope="module")
def preset_runs(trained_model):
    runs = {}
    for name in ("scenario_a", "scenario_b"):
        for mitigation in (False, True):
            cfg = load_scenario(name)
            cfg.mitigation_enabled = mitigation
            cfg.model_path = trained_model
            runs[(name, mitigation)] = run_scenario(cfg, write_outputs=False)
    return runs


def event_kinds(report):
    return [e["kind"] for e in report.events]


class TestScenarioFiles:
    def test_presets_available(self):
        assert available_presets() == ["scenario_a", "scenario_b"]

    def test_preset_a_fields(self):
        cfg = load_scenario("scenario_a")
        assert cfg.initial_breaker is GRID
        assert cfg.initial_soc_pct == 35.74
        assert cfg.insolation == 500.0
        assert cfg.ctrl_load_connected is True
        assert cfg.bess_setpoint_w == 300.0
        assert cfg.attack.mode == "force"
        assert cfg.attack.forced_value is ISLANDED
        assert (cfg.attack.start_ms, cfg.attack.end_ms) == (10000, 61000)
        assert cfg.duration_s == 60.0 and cfg.include_soc

    def test_preset_b_fields(self):
        cfg = load_scenario("scenario_b")
        assert cfg.initial_breaker is ISLANDED
        assert cfg.initial_soc_pct == 38.81
        assert cfg.insolation == 500.0
        assert cfg.ctrl_load_connected is False
        assert cfg.attack.forced_value is GRID
        assert (cfg.attack.start_ms, cfg.attack.end_ms) == (10000, 61000)

    def test_load_by_path(self, tmp_path):
        path = tmp_path / "mini.yaml"
        path.write_text(
            "name: mini\nduration_s: 2.5\nseed: 9\n"
            "plant:\n  initial_breaker: islanded\n  initial_soc_pct: 70\n"
            "  overrides:\n    crit_load_w: 500\n"
            "attack:\n  mode: flip\n  start_ms: 100\n  end_ms: 900\n")
        cfg = load_scenario(path)
        assert cfg.name == "mini" and cfg.duration_s == 2.5 and cfg.seed == 9
        assert cfg.initial_breaker is ISLANDED
        assert cfg.plant_config().crit_load_w == 500
        assert cfg.attack.mode == "flip"

    def test_unknown_name_lists_presets(self):
        with pytest.raises(ConfigError, match="scenario_a"):
            load_scenario("no_such_scenario")

    def test_unknown_keys_rejected(self, tmp_path):
        for text in ("name: x\nbogus: 1\n",
                     "name: x\nplant:\n  bogus: 1\n",
                     "name: x\nattack:\n  bogus: 1\n"):
            path = tmp_path / "bad.yaml"
            path.write_text(text)
            with pytest.raises(ConfigError, match="bogus"):
                load_scenario(path)

    def test_unparsable_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("name: [unclosed\n")
        with pytest.raises(DataError):
            load_scenario(path)

    def test_breaker_spellings(self, tmp_path):
        for text, expected in (("grid", GRID), ("grid-connected", GRID),
                               ("0", GRID), ("islanded", ISLANDED), (1, ISLANDED)):
            path = tmp_path / "b.yaml"
            path.write_text(f"name: b\nplant:\n  initial_breaker: {text}\n")
            assert load_scenario(path).initial_breaker is expected

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ScenarioConfig(name="x", duration_s=0.0)
        with pytest.raises(ConfigError):
            ScenarioConfig(name="x", transport="carrier-pigeon")


class TestPresetOutcomes:
    def test_a_unmitigated_sheds_once(self, preset_runs):
        rep = preset_runs[("scenario_a", False)]
        assert event_kinds(rep) == [EVENT_SHED]
        assert rep.events[0]["t_ms"] == 10000
        assert len(rep.commands) == 1 and rep.commands[0]["connect"] is False
        assert rep.final_load_w == 600.0
        loads = [row[DEVICE_W] for row in rep.truth_rows]
        assert all(w == 1400.0 for (t, w) in
                   zip((r[0] for r in rep.truth_rows), loads) if t <= 10000)
        assert all(w == 600.0 for (t, w) in
                   zip((r[0] for r in rep.truth_rows), loads) if t >= 10100)
        assert rep.frames == 600 and rep.frames_falsified == 501
        assert rep.detection_latency_frames is None

    def test_a_mitigated_keeps_load(self, preset_runs):
        rep = preset_runs[("scenario_a", True)]
        assert EVENT_SHED not in event_kinds(rep)
        assert rep.commands == []
        assert all(row[DEVICE_W] == 1400.0 for row in rep.truth_rows)
        assert rep.detection_latency_frames == 3
        detected = [e for e in rep.events if e["kind"] == EVENT_ATTACK_DETECTED]
        assert len(detected) == 1 and detected[0]["t_ms"] == 10200
        flags = {row[0]: row[FLAG] for row in rep.trace_rows}
        assert flags[10100] == 0 and flags[10200] == 1 and flags[60000] == 1

    def test_b_unmitigated_reconnects_once(self, preset_runs):
        rep = preset_runs[("scenario_b", False)]
        assert event_kinds(rep) == [EVENT_RECONNECT]
        assert rep.events[0]["t_ms"] == 10000
        assert len(rep.commands) == 1 and rep.commands[0]["connect"] is True
        assert rep.commands[0]["setpoint_w"] == 800.0
        assert rep.final_load_w == 1400.0
        loads = {row[0]: row[DEVICE_W] for row in rep.truth_rows}
        assert loads[10000] == 600.0 and loads[10100] == 1400.0

    def test_b_mitigated_stays_shed(self, preset_runs):
        rep = preset_runs[("scenario_b", True)]
        assert EVENT_RECONNECT not in event_kinds(rep)
        assert rep.commands == []
        assert all(row[DEVICE_W] == 600.0 for row in rep.truth_rows)
        assert rep.detection_latency_frames == 3
        assert rep.soc_end_pct > rep.soc_start_pct  # PV charges the battery

    def test_b_attack_drains_strictly_faster(self, preset_runs):
        off = preset_runs[("scenario_b", False)]
        on = preset_runs[("scenario_b", True)]
        drain_off = (off.soc_start_pct - off.soc_end_pct) / off.duration_s
        drain_on = (on.soc_start_pct - on.soc_end_pct) / on.duration_s
        assert drain_off > drain_on

    def test_power_balance_all_runs(self, preset_runs):
        for rep in preset_runs.values():
            assert rep.max_power_residual_w < 1e-9
            assert rep.blackout_frames == 0

    def test_soc_extremes_consistent(self, preset_runs):
        for rep in preset_runs.values():
            socs = [row[7] for row in rep.truth_rows]
            assert rep.soc_end_pct == socs[-1]
            assert rep.soc_min_pct == min(socs)
            assert rep.soc_max_pct == max(socs)


class TestScenarioMechanics:
    def test_clean_stream_never_flags(self, trained_model):
        cfg = load_scenario("scenario_a")
        cfg.attack = AttackSpec()
        cfg.duration_s = 5.0
        cfg.mitigation_enabled = True
        cfg.model_path = trained_model
        rep = run_scenario(cfg, write_outputs=False)
        assert rep.frames_falsified == 0
        assert rep.events == [] and rep.commands == []
        assert all(row[FLAG] == 0 for row in rep.trace_rows)

    def test_same_config_same_run(self, trained_model):
        reports = []
        for _ in range(2):
            cfg = load_scenario("scenario_a")
            cfg.mitigation_enabled = True
            cfg.model_path = trained_model
            cfg.duration_s = 8.0
            reports.append(run_scenario(cfg, write_outputs=False))
        a, b = reports
        assert a.trace_rows == b.trace_rows
        assert a.truth_rows == b.truth_rows
        assert a.commands == b.commands and a.events == b.events

    def test_tcp_transport_equivalent(self, trained_model):
        reports = {}
        for transport in ("memory", "tcp"):
            cfg = load_scenario("scenario_a")
            cfg.mitigation_enabled = True
            cfg.model_path = trained_model
            cfg.duration_s = 6.0
            cfg.attack = dataclasses.replace(cfg.attack, start_ms=2000,
                                             end_ms=7000)
            cfg.transport = transport
            reports[transport] = run_scenario(cfg, write_outputs=False)
        mem, tcp = reports["memory"], reports["tcp"]
        assert mem.trace_rows == tcp.trace_rows
        assert mem.truth_rows == tcp.truth_rows
        assert mem.commands == tcp.commands and mem.events == tcp.events
        assert tcp.detection_latency_frames == 3

    def test_missing_model_is_startup_error(self, tmp_path):
        cfg = load_scenario("scenario_a")
        cfg.mitigation_enabled = True
        cfg.out_dir = str(tmp_path / "nothing_here")
        with pytest.raises(ConfigError):
            run_scenario(cfg)
        assert not (tmp_path / "nothing_here").exists()  # no partial outputs

    def test_outputs_written(self, trained_model, tmp_path):
        cfg = load_scenario("scenario_b")
        cfg.mitigation_enabled = True
        cfg.model_path = trained_model
        cfg.duration_s = 4.0
        cfg.out_dir = str(tmp_path / "out")
        rep = run_scenario(cfg)
        assert set(rep.outputs) == {"trace_csv", "truth_csv", "events_csv",
                                    "report_json"}
        with open(rep.outputs["report_json"]) as fh:
            assert json.load(fh) == rep.to_dict()
        with open(rep.outputs["trace_csv"]) as fh:
            assert len(fh.read().splitlines()) == 1 + rep.frames
        with open(rep.outputs["truth_csv"]) as fh:
            assert len(fh.read().splitlines()) == 1 + rep.frames


def rich_scenario(attack: AttackSpec) -> ScenarioConfig:
    """Islanded start with the load still on and the battery near the
    reconnect threshold: the truthful rule sheds immediately, then the
    charging battery crosses 50% mid-run and reconnects — two commands for
    an equivalence check to chew on."""
    return ScenarioConfig(name="rich", duration_s=8.0, seed=11,
                          initial_breaker=ISLANDED, initial_soc_pct=49.5,
                          insolation=1000.0, ctrl_load_connected=True,
                          attack=attack)


class TestOracleEquivalence:
    def _commands(self, attack, mitigation, detector=None):
        cfg = rich_scenario(attack)
        cfg.mitigation_enabled = mitigation
        rep = run_scenario(cfg, detector=detector, write_outputs=False)
        return rep

    def test_truthful_baseline_has_both_commands(self):
        rep = self._commands(AttackSpec(), mitigation=False)
        kinds = event_kinds(rep)
        assert kinds == [EVENT_SHED, EVENT_RECONNECT]

    @pytest.mark.parametrize("mode,forced", [("force", GRID), ("flip", None)])
    def test_oracle_matches_truthful_commands(self, mode, forced):
        truthful = self._commands(AttackSpec(), mitigation=False)
        attack = AttackSpec(mode=mode, forced_value=forced,
                            start_ms=2000, end_ms=9000)
        attacked = self._commands(attack, mitigation=True, detector="oracle")
        assert attacked.commands == truthful.commands
        rule_events = [e for e in attacked.events
                       if e["kind"] in (EVENT_SHED, EVENT_RECONNECT)]
        truthful_rule_events = [e for e in truthful.events
                                if e["kind"] in (EVENT_SHED, EVENT_RECONNECT)]
        assert rule_events == truthful_rule_events
        assert attacked.truth_rows == truthful.truth_rows

    def test_unprotected_run_differs_under_attack(self):
        # sanity: the attack genuinely changes behavior without the oracle
        truthful = self._commands(AttackSpec(), mitigation=False)
        attack = AttackSpec(mode="force", forced_value=GRID,
                            start_ms=2000, end_ms=9000)
        attacked = self._commands(attack, mitigation=False)
        assert attacked.commands != truthful.commands
