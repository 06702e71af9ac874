import json
import pathlib

import numpy as np
import pytest

from teamwire import sample_data
from teamwire.config import Config
from teamwire.harness import RunReport
from teamwire.harness import _check_bounds
from teamwire.harness import compare_golden
from teamwire.harness import load_scenario
from teamwire.harness import replay_transcript
from teamwire.harness import run_scenario
from teamwire.harness import scenario_from_dict
from teamwire.protocol import SERVER_SENDER
from teamwire.protocol import MessageKind
from teamwire.protocol import decode_message
from teamwire.protocol import encode_message
from teamwire.protocol import make_message
from teamwire.utils import ExpectationFailed
from teamwire.utils import MalformedLog
from teamwire.utils import ScenarioInvalid

CONFIG = Config(deadline=30.0)


def _scenario(**overrides):
    obj = {
        "task": {"goal": "g", "initiator": "A"},
        "agents": [
            {
                "profile": {
                    "agent_name": "A",
                    "agent_type": "Assistant",
                    "agent_description": "does things",
                },
                "integrated_agent": "echo",
                "script": [{"goal": "g", "action": "launch", "team_members": None}],
            }
        ],
    }
    obj.update(overrides)
    return obj


class TestBundledScenarios:

    @pytest.mark.parametrize(
        "name",
        ["arith_trio", "nested_pdf", "solo", "forced_conclusion", "pause_trigger"],
    )
    def test_passes(self, name):
        path = sample_data.SCENARIOS[name]()
        report = run_scenario(path, config=CONFIG)
        assert report.passed
        assert report.violations == []
        assert report.conclusion == load_scenario(path).expectations["final_conclusion"]

    def test_arith_trio_metrics(self):
        report = run_scenario(sample_data.arith_trio(), config=CONFIG)
        assert report.metrics["conversation_turns"] == 4
        assert report.metrics["total_frames"] == 7
        assert report.metrics["frames_per_kind"]["task_result"] == 1
        assert report.tree["members"] == ["A", "B", "C"]
        assert report.tree["children"] == []

    def test_nested_tree(self):
        report = run_scenario(sample_data.nested_pdf(), config=CONFIG)
        assert report.metrics["edges_nested"] == 4
        assert report.metrics["edges_full_flat"] == 6
        assert len(report.tree["children"]) == 1
        child = report.tree["children"][0]
        assert child["members"] == ["c2", "c6"]
        assert child["depth"] == 1
        assert len(report.transcripts) == 2

    def test_forced_conclusion_notice(self):
        report = run_scenario(sample_data.forced_conclusion(), config=CONFIG)
        (lines,) = report.transcripts.values()
        notices = [json.loads(line) for line in lines if SERVER_SENDER in line]
        assert notices[-1]["payload"]["content"] == "conclude: turn budget spent"
        assert notices[-1]["payload"]["next_speaker"] == ["A"]

    def test_pause_metrics(self):
        report = run_scenario(sample_data.pause_trigger(), config=CONFIG)
        assert report.metrics["triggers_fired"] == 1
        assert report.metrics["async_tasks"] == 1

    def test_illegal_step_fails(self, tmp_path):
        report_path = tmp_path / "report.json"
        with pytest.raises(ExpectationFailed) as info:
            run_scenario(
                sample_data.illegal_step(), report_path=str(report_path), config=CONFIG
            )
        assert "IllegalDecision@A" in info.value.report.violations
        written = json.loads(report_path.read_text())
        assert "IllegalDecision@A" in written["outcome"]["violations"]

    def test_report_written(self, tmp_path):
        report_path = tmp_path / "report.json"
        run_scenario(sample_data.solo(), report_path=str(report_path), config=CONFIG)
        written = json.loads(report_path.read_text())
        assert written["scenario"] == "solo"
        assert written["mode"] == "in_process"
        assert written["outcome"]["conclusion"] == "hello"

    def test_wrong_conclusion(self, tmp_path):
        obj = json.loads(pathlib.Path(sample_data.solo()).read_text())
        obj["expectations"]["final_conclusion"] = "goodbye"
        path = tmp_path / "solo.json"
        path.write_text(json.dumps(obj))
        with pytest.raises(ExpectationFailed, match="goodbye"):
            run_scenario(str(path), config=CONFIG)

    def test_processes(self, tmp_path):
        config = Config(deadline=60.0, data_dir=str(tmp_path / "agents"))
        report = run_scenario(sample_data.solo(), processes=True, config=config)
        assert report.mode == "processes"
        assert report.conclusion == "hello"
        assert (tmp_path / "agents" / "A" / "status.json").is_file()


class TestGolden:

    def test_written_then_compared(self, tmp_path):
        with pytest.warns(UserWarning, match="Golden transcript not found"):
            run_scenario(
                sample_data.arith_trio(), golden_dir=str(tmp_path), config=CONFIG
            )
        golden = tmp_path / "arith_trio.ndjson"
        assert golden.is_file()
        run_scenario(
            sample_data.arith_trio(), golden_dir=str(tmp_path), config=CONFIG
        )

    def test_mismatch(self, tmp_path):
        path = str(tmp_path / "g.ndjson")
        with pytest.warns(UserWarning):
            assert compare_golden(["a", "b"], path) == []
        assert compare_golden(["a", "b"], path) == []
        differs = compare_golden(["a", "c"], path)
        assert differs == ["golden transcript differs at line 2"]
        shorter = compare_golden(["a"], path)
        assert shorter == ["golden transcript has 2 lines, run has 1"]

    def test_ids_normalized(self, tmp_path):
        with pytest.warns(UserWarning):
            first = run_scenario(
                sample_data.solo(), golden_dir=str(tmp_path), config=CONFIG
            )
        second = run_scenario(sample_data.solo(), config=CONFIG)
        assert first.transcripts != second.transcripts
        assert first.normalized_transcript == second.normalized_transcript


class TestBounds:

    def test_exact_and_range(self):
        metrics = {"a": 1, "b": 5}
        assert _check_bounds(metrics, {"a": 1, "b": [0, 9]}) == []
        assert _check_bounds(metrics, {"a": 2}) == ["a = 1, expected 2"]
        assert _check_bounds(metrics, {"b": [6, 9]}) == ["b = 5, expected [6, 9]"]

    def test_unknown_metric(self):
        assert _check_bounds({}, {"speed": 1}) == ["unknown metric 'speed'"]

    def test_report_check(self):
        report = RunReport("s", {}, None, {}, None, [], failures=["x"])
        assert not report.passed
        with pytest.raises(ExpectationFailed) as info:
            report.check()
        assert info.value.report is report


class TestScenarioValidation:

    def test_valid(self):
        scenario = scenario_from_dict(_scenario())
        assert scenario.name == "scenario"
        assert scenario.agent("A").integrated_agent == "echo"
        assert scenario.max_turns == 20
        with pytest.raises(KeyError):
            scenario.agent("Z")

    @pytest.mark.parametrize(
        "overrides",
        [
            {"task": {"goal": "g"}},
            {"task": {"goal": "g", "initiator": "Z"}},
            {"task": {"goal": "g", "initiator": "A", "max_turns": 0}},
            {"agents": 5},
            {"agents": [{"profile": {"agent_name": "A"}}]},
        ],
    )
    def test_invalid_documents(self, overrides):
        with pytest.raises(ScenarioInvalid):
            scenario_from_dict(_scenario(**overrides))

    def test_unknown_integrated_agent(self):
        obj = _scenario()
        obj["agents"][0]["integrated_agent"] = "oracle"
        with pytest.raises(ScenarioInvalid, match="oracle"):
            scenario_from_dict(obj)

    def test_duplicate_names(self):
        obj = _scenario()
        obj["agents"].append(obj["agents"][0])
        with pytest.raises(ScenarioInvalid, match="unique"):
            scenario_from_dict(obj)

    def test_launch_with_strangers(self):
        obj = _scenario()
        launch = {"goal": "g", "action": "launch", "team_members": ["Q"]}
        obj["agents"][0]["script"] = [launch]
        with pytest.raises(ScenarioInvalid, match="unknown agents"):
            scenario_from_dict(obj)

    def test_bad_script(self):
        obj = _scenario()
        obj["agents"][0]["script"] = [{"goal": "g", "action": "dance"}]
        with pytest.raises(ScenarioInvalid):
            scenario_from_dict(obj)

    def test_load_errors(self, tmp_path):
        with pytest.raises(ScenarioInvalid):
            load_scenario(str(tmp_path / "missing.json"))
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")
        with pytest.raises(ScenarioInvalid, match="not valid JSON"):
            load_scenario(str(broken))
        listed = tmp_path / "listed.json"
        listed.write_text("[]")
        with pytest.raises(ScenarioInvalid, match="object"):
            load_scenario(str(listed))

    def test_processes_need_a_file(self):
        with pytest.raises(ScenarioInvalid):
            run_scenario(scenario_from_dict(_scenario()), processes=True, config=CONFIG)


def _frames(second_sender="B"):
    notice = make_message(
        SERVER_SENDER,
        "g0",
        MessageKind.SYSTEM_NOTICE,
        ["A"],
        content="group formed",
        goal="g",
        team_members=("A", "B", "C"),
        team_up_depth=0,
        max_turns=20,
    )
    return [
        notice.with_seq(0),
        make_message("A", "g0", "discussion", ["B"], content="over to B").with_seq(1),
        make_message(second_sender, "g0", "discussion", ["A"], content="b").with_seq(2),
        make_message("A", "g0", "conclusion", content="done").with_seq(3),
    ]


def _write_log(path, frames):
    with open(path, "wb") as f:
        for msg in frames:
            f.write(encode_message(msg))
    return str(path)


class TestReplayTranscript:

    def test_clean(self, tmp_path):
        assert replay_transcript(_write_log(tmp_path / "g0.ndjson", _frames())) == []

    def test_wrong_speaker(self, tmp_path):
        log = _write_log(tmp_path / "g0.ndjson", _frames(second_sender="C"))
        violations = replay_transcript(log)
        assert [str(v) for v in violations][0] == "NotYourTurn@2"

    def test_gap(self, tmp_path):
        frames = _frames()
        del frames[2]
        violations = replay_transcript(_write_log(tmp_path / "g0.ndjson", frames))
        assert "SeqGap@3" in [str(v) for v in violations]

    def test_missing_log(self, tmp_path):
        with pytest.raises(MalformedLog):
            replay_transcript(str(tmp_path / "nothing.ndjson"))

    def test_bad_frame(self, tmp_path):
        path = tmp_path / "g0.ndjson"
        path.write_text('{"header": {}}\n')
        with pytest.raises(MalformedLog):
            replay_transcript(str(path))


BUNDLED = ["arith_trio", "nested_pdf", "solo", "forced_conclusion", "pause_trigger"]


def _normalized(name, **kwargs):
    kwargs.setdefault("config", CONFIG)
    try:
        report = run_scenario(sample_data.SCENARIOS[name](), **kwargs)
    except ExpectationFailed as e:
        report = e.report
    return report.normalized_transcript


class TestDeterminism:

    @pytest.mark.parametrize("name", BUNDLED + ["illegal_step"])
    def test_repeated_runs_identical(self, name):
        first = _normalized(name)
        assert first
        for _ in range(4):
            assert _normalized(name) == first

    @pytest.mark.parametrize("name", BUNDLED)
    def test_processes_match_in_process(self, name):
        config = Config(deadline=60.0)
        in_process = _normalized(name, config=config)
        assert _normalized(name, processes=True, config=config) == in_process


def _trigger_scenario(seed):
    """Async rounds, each closed by a pause, with failing workers mixed in."""
    rng = np.random.default_rng(seed)
    goal = "background checks"
    workers = [f"W{i}" for i in range(int(rng.integers(1, 5)))]
    script = [{"goal": goal, "action": "launch", "team_members": workers}]
    for round_ in range(int(rng.integers(1, 3))):
        assigned = set()
        for i in range(int(rng.integers(1, 4))):
            size = int(rng.integers(1, len(workers) + 1))
            names = [str(n) for n in rng.choice(workers, size=size, replace=False)]
            assigned.update(names)
            script.append({
                "goal": goal,
                "action": "say",
                "kind": "async_task_assignment",
                "content": f"check {round_}.{i}",
                "next_speakers": names,
            })
        awaited = sorted(assigned)
        count = int(rng.integers(1, len(awaited) + 1))
        script.append({
            "goal": goal,
            "action": "say",
            "kind": "pause_and_trigger",
            "content": "waiting",
            "triggers": [
                str(n) for n in rng.choice(awaited, size=count, replace=False)
            ],
        })
    script.append({"goal": goal, "action": "say", "kind": "conclusion", "content": ""})
    script.append({"goal": goal, "action": "conclude", "text": "done: {result}"})

    agents = [{
        "profile": {
            "agent_name": "A",
            "agent_type": "Coordinator",
            "agent_description": "hands out background checks",
        },
        "integrated_agent": "none",
        "script": script,
    }]
    for name in workers:
        agents.append({
            "profile": {
                "agent_name": name,
                "agent_type": "Worker",
                "agent_description": f"checker {name}",
            },
            "integrated_agent": str(rng.choice(["echo", "echo", "fail", "none"])),
            "latency": round(float(rng.uniform(0.0, 0.1)), 3),
            "script": [],
        })
    return scenario_from_dict({
        "name": f"triggers_{seed}",
        "task": {"goal": goal, "initiator": "A", "max_turns": 20},
        "agents": agents,
    })


def _check_pauses(lines):
    frames = [decode_message(line + "\n") for line in lines]
    results = MessageKind.TASK_RESULT
    for at, msg in enumerate(frames):
        if msg.kind is not MessageKind.PAUSE_AND_TRIGGER:
            continue
        finished = {m.payload.task_id for m in frames[:at] if m.kind is results}
        waiting = set(msg.payload.triggers) - finished
        for later in frames[at + 1:]:
            if not waiting:
                break
            assert not later.kind.is_conversation
            if later.kind is results:
                waiting.discard(later.payload.task_id)
        assert not waiting


class TestTriggerLiveness:

    @pytest.mark.parametrize("seed", range(100))
    def test_groups_always_resume(self, seed):
        report = run_scenario(_trigger_scenario(seed), config=CONFIG)
        assert report.passed
        assert report.conclusion.startswith("done: ")
        assert report.metrics["triggers_fired"] >= 1
        (lines,) = report.transcripts.values()
        _check_pauses(lines)
        last = decode_message(lines[-1] + "\n")
        assert last.kind in (MessageKind.CONCLUSION, MessageKind.TASK_RESULT)
