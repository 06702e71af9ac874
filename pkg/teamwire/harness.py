"""Scenario runner.

A scenario (one JSON document) lists agents with their profiles,
integrated agents, and policy scripts, the task the initiator forms a team
for, and the expectations of the run. :func:`run_scenario` boots a hub and
one client per agent, either in this process or as separate processes
connected over TCP, plays the scenario until every group has concluded
with no task outstanding, and checks the outcome.
"""

import asyncio
import collections
import dataclasses
import json
import logging
import os
import signal
import subprocess
import sys
import tempfile
import threading
import time
import warnings

from teamwire.agents import make_agent
from teamwire.client import AgentClient
from teamwire.client import DataStore
from teamwire.config import Config
from teamwire.fsm import Conversation
from teamwire.fsm import replay
from teamwire.io import FileLog
from teamwire.io import canonical_json
from teamwire.network import LocalLink
from teamwire.network import TcpLink
from teamwire.policy import ScriptedPolicy
from teamwire.protocol import MessageKind
from teamwire.protocol import encode_message
from teamwire.protocol import message_from_dict
from teamwire.protocol import task_ids_of
from teamwire.registry import AgentProfile
from teamwire.server import Hub
from teamwire.server import HubServer
from teamwire.teaming import TeamTree
from teamwire.teaming import edges_full
from teamwire.teaming import edges_nested
from teamwire.utils import Deadline
from teamwire.utils import ExpectationFailed
from teamwire.utils import MalformedLog
from teamwire.utils import ScenarioInvalid
from teamwire.utils import TeamwireError
from teamwire.utils import normalize_ids

logger = logging.getLogger(__name__)

INTEGRATED_AGENTS = ("echo", "arith", "fail", "none")
POLL = 0.02


@dataclasses.dataclass(frozen=True)
class AgentSpec:
    profile: AgentProfile
    integrated_agent: str = "none"
    latency: float = 0.0
    script: tuple = ()

    @property
    def name(self):
        return self.profile.agent_name

    def build(self, config, data_dir=None):
        """A fresh client for this agent."""
        return AgentClient(
            self.profile,
            ScriptedPolicy(self.script),
            make_agent(self.integrated_agent, latency=self.latency),
            config=config,
            data_dir=data_dir,
        )


@dataclasses.dataclass(frozen=True)
class Scenario:
    name: str
    agents: tuple
    goal: str
    initiator: str
    max_turns: int = 20
    max_depth: int = 2
    expectations: dict = dataclasses.field(default_factory=dict)
    path: str | None = None

    def agent(self, name):
        for spec in self.agents:
            if spec.name == name:
                return spec
        raise KeyError(name)

    @property
    def golden_path(self):
        golden = self.expectations.get("transcript_golden")
        if golden is None or self.path is None:
            return golden
        return os.path.join(os.path.dirname(self.path), golden)

    def config(self, base=None):
        return dataclasses.replace(
            base or Config(), max_turns=self.max_turns, max_team_up_depth=self.max_depth
        )


def _invalid(path, detail):
    return ScenarioInvalid(f"{path or 'scenario'}: {detail}")


def _stem(path):
    return os.path.splitext(os.path.basename(path or "scenario"))[0]


def scenario_from_dict(obj, path=None):
    """Validate a scenario document.

    Raises
    ------
    ScenarioInvalid
        Missing fields, unknown agents or integrated agents, malformed
        scripts, or scripts naming agents that are not in the scenario.
    """
    try:
        task = obj["task"]
        agents = []
        for entry in obj["agents"]:
            kind = entry.get("integrated_agent", "none")
            if kind not in INTEGRATED_AGENTS:
                raise _invalid(path, f"unknown integrated agent {kind!r}")
            script = tuple(entry.get("script") or ())
            ScriptedPolicy(script)
            agents.append(AgentSpec(
                profile=AgentProfile.from_dict(entry["profile"]),
                integrated_agent=kind,
                latency=float(entry.get("latency", 0.0)),
                script=script,
            ))
        scenario = Scenario(
            name=obj.get("name") or _stem(path),
            agents=tuple(agents),
            goal=task["goal"],
            initiator=task["initiator"],
            max_turns=int(task.get("max_turns", 20)),
            max_depth=int(task.get("max_depth", 2)),
            expectations=dict(obj.get("expectations") or {}),
            path=path,
        )
    except ScenarioInvalid:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise _invalid(path, f"{type(e).__name__}: {e}") from e

    names = [spec.name for spec in scenario.agents]
    if len(set(names)) != len(names):
        raise _invalid(path, "agent names must be unique")
    if scenario.initiator not in names:
        raise _invalid(path, f"initiator {scenario.initiator!r} is not an agent")
    if scenario.max_turns < 1 or scenario.max_depth < 0:
        raise _invalid(path, "max_turns must be positive and max_depth non-negative")
    for spec in scenario.agents:
        for record in spec.script:
            if record["action"] != "launch":
                continue
            strangers = [n for n in record.get("team_members") or () if n not in names]
            if strangers:
                raise _invalid(
                    path, f"{spec.name} launches with unknown agents {strangers}"
                )
    return scenario


def load_scenario(path):
    """Load and validate the scenario file at `path`."""
    try:
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
    except OSError as e:
        raise _invalid(path, str(e)) from e
    except ValueError as e:
        raise _invalid(path, f"not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise _invalid(path, "the document must be an object")
    return scenario_from_dict(obj, path=os.fspath(path))


@dataclasses.dataclass
class RunReport:
    """Outcome of one scenario run."""

    scenario: str
    transcripts: dict
    tree: dict | None
    metrics: dict
    conclusion: str | None
    violations: list
    failures: list = dataclasses.field(default_factory=list)
    mode: str = "in_process"

    @property
    def passed(self):
        return not self.violations and not self.failures

    @property
    def normalized_transcript(self):
        lines = [line for frames in self.transcripts.values() for line in frames]
        return normalize_ids(lines)

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "mode": self.mode,
            "transcripts": self.transcripts,
            "tree": self.tree,
            "metrics": self.metrics,
            "outcome": {
                "conclusion": self.conclusion,
                "violations": list(self.violations),
                "failures": list(self.failures),
            },
        }

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")

    def check(self):
        """Raise :obj:`~teamwire.utils.ExpectationFailed` unless passed."""
        if self.passed:
            return
        err = ExpectationFailed(
            f"{self.scenario}: violations {self.violations}, failures {self.failures}"
        )
        err.report = self
        raise err


def compute_metrics(ordered_frames, tree):
    """Message accounting over the groups of one run.

    Parameters
    ----------
    ordered_frames : :obj:`dict` of comm_id to list of routed messages
    tree : :obj:`~teamwire.teaming.TeamTree` or None
    """
    per_kind = collections.Counter()
    metrics = collections.Counter()
    for frames in ordered_frames.values():
        seen_contents = set()
        conversation = None
        for msg in frames:
            per_kind[msg.kind.value] += 1
            metrics["total_frames"] += 1
            kind = msg.kind
            if kind.is_conversation:
                metrics["conversation_turns"] += 1
                content = msg.payload.content
                if content and content in seen_contents:
                    metrics["repeated_contents"] += 1
                if content:
                    seen_contents.add(content)
                if (
                    kind is MessageKind.DISCUSSION
                    and conversation is not None
                    and conversation.machine.open_async_tasks
                ):
                    metrics["async_open_discussion_turns"] += 1
            if kind is MessageKind.SYNC_TASK_ASSIGNMENT:
                metrics["sync_tasks"] += len(task_ids_of(msg))
            elif kind is MessageKind.ASYNC_TASK_ASSIGNMENT:
                metrics["async_tasks"] += len(task_ids_of(msg))
            elif kind is MessageKind.PAUSE_AND_TRIGGER:
                metrics["triggers_fired"] += len(msg.payload.triggers)
            try:
                if conversation is None:
                    conversation = Conversation.from_setup(msg)
                conversation, _ = conversation.accept(msg)
            except (TeamwireError, ValueError):
                pass
    out = {
        name: metrics[name]
        for name in (
            "conversation_turns",
            "total_frames",
            "sync_tasks",
            "async_tasks",
            "triggers_fired",
            "repeated_contents",
            "async_open_discussion_turns",
        )
    }
    out["frames_per_kind"] = {kind.value: per_kind[kind.value] for kind in MessageKind}
    out["edges_nested"] = out["edges_full_flat"] = 0
    if tree is not None:
        out["edges_nested"] = edges_nested(tree)
        out["edges_full_flat"] = edges_full(len(tree.members_union))
    return out


def _check_bounds(metrics, bounds):
    failures = []
    for name, bound in bounds.items():
        value = metrics.get(name)
        if value is None:
            failures.append(f"unknown metric {name!r}")
            continue
        low, high = (bound, bound) if isinstance(bound, int) else bound
        if not low <= value <= high:
            failures.append(f"{name} = {value}, expected {bound}")
    return failures


def compare_golden(lines, path):
    """Compare normalized transcript `lines` with the golden file at `path`.

    A missing golden file is written instead, with a warning.

    Returns
    -------
    failures : :obj:`list` of :obj:`str`
    """
    if not os.path.isfile(path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.writelines(line + "\n" for line in lines)
        warnings.warn(
            "Golden transcript not found, writing a new one: %s" % path,
            UserWarning,
            stacklevel=2,
        )
        return []
    with open(path, encoding="utf-8") as f:
        golden = f.read().splitlines()
    if golden == lines:
        return []
    for number, (want, got) in enumerate(zip(golden, lines, strict=False), start=1):
        if want != got:
            return [f"golden transcript differs at line {number}"]
    return [f"golden transcript has {len(golden)} lines, run has {len(lines)}"]


def _encoded(msgs):
    return [encode_message(m).decode("utf-8").rstrip("\n") for m in msgs]


def _build_report(scenario, hub, member_transcripts, faults, golden_dir, mode):
    snapshot = hub.snapshot()
    roots = TeamTree.from_groups(snapshot["groups"])
    tree = roots[0] if roots else None
    order = [node.comm_id for root in roots for node in root.walk()]
    frames = {comm_id: hub.transcript(comm_id) for comm_id in order}
    transcripts = {comm_id: _encoded(msgs) for comm_id, msgs in frames.items()}

    violations = []
    for comm_id, msgs in frames.items():
        _, found = replay(msgs)
        violations.extend(str(v) for v in found)
        routed = transcripts[comm_id]
        for name in snapshot["groups"][comm_id]["team_members"]:
            local = member_transcripts.get(name, {}).get(comm_id, [])
            if _encoded(local) != routed:
                violations.append(f"TranscriptDivergence@{name}")
    for name, found in faults.items():
        violations.extend(f"{fault['code']}@{name}" for fault in found)

    conclusion = None
    if tree is not None:
        for msg in frames[tree.comm_id]:
            if msg.kind is MessageKind.CONCLUSION:
                conclusion = msg.payload.content

    report = RunReport(
        scenario=scenario.name,
        transcripts=transcripts,
        tree=tree.to_dict() if tree is not None else None,
        metrics=compute_metrics(frames, tree),
        conclusion=conclusion,
        violations=violations,
        mode=mode,
    )
    expected = scenario.expectations.get("final_conclusion")
    if expected is not None and conclusion != expected:
        report.failures.append(f"conclusion {conclusion!r}, expected {expected!r}")
    bounds = scenario.expectations.get("metric_bounds", {})
    report.failures.extend(_check_bounds(report.metrics, bounds))
    golden_paths = [p for p in (scenario.golden_path,) if p]
    if golden_dir is not None:
        golden_paths.append(os.path.join(golden_dir, scenario.name + ".ndjson"))
    for path in golden_paths:
        report.failures.extend(compare_golden(report.normalized_transcript, path))
    return report


def _wait(hub, is_idle, has_faults, deadline, settle):
    quiet_since = None
    frames = -1
    while True:
        if has_faults():
            return
        now = time.monotonic()
        if hub.is_quiescent() and is_idle() and hub.total_frames == frames:
            quiet_since = quiet_since or now
            if now - quiet_since >= settle:
                return
        else:
            quiet_since = None
        frames = hub.total_frames
        if now > deadline:
            raise Deadline("the scenario did not settle before its deadline")
        time.sleep(POLL)


def _run_in_process(scenario, config):
    hub = Hub(config)
    clients = {spec.name: spec.build(config) for spec in scenario.agents}
    for client in clients.values():
        client.connect(LocalLink(hub))
        client.start()
    try:
        initiator = clients[scenario.initiator]
        initiator.start_task(scenario.goal, max_turns=scenario.max_turns)
        _wait(
            hub,
            lambda: all(c.idle for c in clients.values()),
            lambda: any(c.faults for c in clients.values()),
            time.monotonic() + config.deadline,
            settle=POLL * 2,
        )
    finally:
        for client in clients.values():
            client.stop()
    member_transcripts = {
        name: {comm_id: list(g.transcript) for comm_id, g in c.groups.items()}
        for name, c in clients.items()
    }
    faults = {name: c.faults for name, c in clients.items() if c.faults}
    return hub, member_transcripts, faults


class ServerThread(threading.Thread):
    """A :obj:`~teamwire.server.HubServer` on its own event loop thread."""

    def __init__(self, hub, host="127.0.0.1", port=0):
        super().__init__(name="hub-server", daemon=True)
        self.server = HubServer(hub, host, port)
        self.ready = threading.Event()
        self.loop = None
        self.error = None

    @property
    def address(self):
        return self.server.address

    def run(self):
        self.loop = asyncio.new_event_loop()
        asyncio.set_event_loop(self.loop)
        try:
            self.loop.run_until_complete(self.server.start())
        except OSError as e:
            self.error = e
            self.ready.set()
            return
        self.ready.set()
        try:
            self.loop.run_forever()
        finally:
            self.loop.run_until_complete(self.server.close())
            self.loop.close()

    def start(self):
        super().start()
        self.ready.wait()
        if self.error is not None:
            raise self.error
        return self.address

    def stop(self):
        if self.loop is not None and self.is_alive():
            self.loop.call_soon_threadsafe(self.loop.stop)
            self.join(timeout=5)


def _read_status(data_dir):
    try:
        with open(os.path.join(data_dir, "status.json"), encoding="utf-8") as f:
            return json.load(f)
    except (OSError, ValueError):
        return {}


def _run_processes(scenario, config, workdir):
    hub = Hub(config)
    for spec in scenario.agents:
        hub.register_agent(spec.profile)
    server = ServerThread(hub)
    host, port = server.start()
    package_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    env = dict(os.environ)
    paths = (package_root, env.get("PYTHONPATH"))
    env["PYTHONPATH"] = os.pathsep.join(p for p in paths if p)
    dirs = {spec.name: os.path.join(workdir, spec.name) for spec in scenario.agents}
    procs = {}
    deadline = time.monotonic() + config.deadline

    def spawn(name, start=False):
        cmd = [
            sys.executable, "-m", "teamwire", "agent",
            "--server", f"{host}:{port}",
            "--token", config.auth_token,
            "--scenario", scenario.path,
            "--name", name,
            "--data-dir", dirs[name],
        ]
        if start:
            cmd.append("--start")
        procs[name] = subprocess.Popen(cmd, env=env)

    try:
        for spec in scenario.agents:
            if spec.name != scenario.initiator:
                spawn(spec.name)
        while not all(
            name in hub.sessions and hub.sessions[name].online
            for name in procs
        ):
            if time.monotonic() > deadline:
                raise Deadline("agent processes did not connect in time")
            time.sleep(POLL)
        spawn(scenario.initiator, start=True)
        _wait(
            hub,
            lambda: all(p.poll() is None for p in procs.values()),
            lambda: any(_read_status(d).get("faults") for d in dirs.values()),
            deadline,
            settle=0.5,
        )
    finally:
        for proc in procs.values():
            if proc.poll() is None:
                proc.send_signal(signal.SIGTERM)
        for proc in procs.values():
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
        server.stop()
    member_transcripts = {name: DataStore(d).transcripts() for name, d in dirs.items()}
    faults = {}
    for name, d in dirs.items():
        found = _read_status(d).get("faults")
        if found:
            faults[name] = found
    return hub, member_transcripts, faults


def run_scenario(
    scenario, processes=False, golden_dir=None, report_path=None, config=None
):
    """Play a scenario to the end and check it.

    Parameters
    ----------
    scenario : :obj:`str` or :obj:`Scenario`
        A scenario file path, or a loaded scenario.
    processes : :obj:`bool`
        Run every agent as a separate process talking to the hub over TCP.
        Requires a scenario loaded from a file.
    golden_dir : :obj:`str`, optional
        Directory of golden transcripts (``<name>.ndjson``), compared after
        renaming ids, and written when missing.
    report_path : :obj:`str`, optional
        Where to write the report as JSON.
    config : :obj:`~teamwire.config.Config`, optional

    Returns
    -------
    report : :obj:`RunReport`

    Raises
    ------
    ScenarioInvalid
    Deadline
        The run did not settle in ``config.deadline`` seconds.
    ExpectationFailed
        Violations or unmet expectations; the report is attached as
        ``.report`` and written first.
    """
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    config = scenario.config(config)
    if processes:
        if scenario.path is None:
            raise ScenarioInvalid("process mode needs a scenario file")
        if config.data_dir is not None:
            os.makedirs(config.data_dir, exist_ok=True)
            hub, members, faults = _run_processes(
                scenario, dataclasses.replace(config, data_dir=None), config.data_dir
            )
        else:
            with tempfile.TemporaryDirectory(prefix="teamwire-") as workdir:
                hub, members, faults = _run_processes(scenario, config, workdir)
    else:
        hub, members, faults = _run_in_process(scenario, config)
    mode = "processes" if processes else "in_process"
    report = _build_report(scenario, hub, members, faults, golden_dir, mode)
    logger.info(
        "%s finished: conclusion %r, %d violations",
        scenario.name,
        report.conclusion,
        len(report.violations),
    )
    if report_path is not None:
        report.write(report_path)
    report.check()
    return report


def replay_transcript(log_path):
    """Check a group transcript log.

    Parameters
    ----------
    log_path : :obj:`str`
        NDJSON file with one routed frame per line.

    Returns
    -------
    violations : :obj:`list` of :obj:`~teamwire.fsm.Violation`
        Empty exactly when the transcript is legal.

    Raises
    ------
    MalformedLog
        The file is missing, or a line is not a valid frame.
    """
    if not os.path.isfile(log_path):
        raise MalformedLog(f"no such log: {log_path}")
    try:
        records = FileLog(log_path).records
        frames = [message_from_dict(record) for record in records]
    except (ValueError, TeamwireError) as e:
        raise MalformedLog(f"{log_path}: {e}") from e
    _, violations = replay(frames)
    return violations


def run_agent(server, token, scenario_path, name, data_dir, start=False):
    """Run one scenario agent as a standalone process until SIGTERM.

    The client's transcripts are kept in `data_dir`; ``status.json`` there
    lists its faults and is refreshed whenever a new fault appears.
    """
    scenario = load_scenario(scenario_path)
    spec = scenario.agent(name)
    config = scenario.config(Config(auth_token=token))
    client = spec.build(config, data_dir=data_dir)
    host, _, port = server.rpartition(":")
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())

    def write_status():
        status = {
            "agent": name,
            "faults": client.faults,
            "tool_calls": {
                comm_id: len(calls) for comm_id, calls in client.tool_calls.items()
            },
        }
        path = os.path.join(data_dir, "status.json")
        with open(path + ".tmp", "w", encoding="utf-8") as f:
            f.write(canonical_json(status))
        os.replace(path + ".tmp", path)

    client.connect(TcpLink(host, int(port)))
    client.start()
    write_status()
    try:
        if start:
            try:
                client.start_task(scenario.goal, max_turns=scenario.max_turns)
            except TeamwireError as e:
                client.faults.append(
                    {"code": e.code, "comm_id": None, "detail": str(e)}
                )
        written = 0
        while not stop.wait(0.1):
            if len(client.faults) != written:
                written = len(client.faults)
                write_status()
    finally:
        client.stop()
        write_status()
