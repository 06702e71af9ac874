"""Client runtime: the wrapper around one integrated agent.

An :obj:`AgentClient` keeps three data blocks (contacts, group info, and
tasks, see :obj:`DataStore`), forms teams, and runs one dispatch loop that
handles incoming frames strictly in arrival order. For every group it
keeps a mirror :obj:`~teamwire.fsm.Conversation`, folded from the routed
frames with the same code the hub runs, and acts on a frame only when it
is named as a next speaker *and* its mirror lists it as an expected
speaker.

Assigned tasks run on worker threads; their results go back through the
client's single link.
"""

import concurrent.futures
import dataclasses
import enum
import logging
import os
import queue
import threading
import time

from teamwire.agents import COMPLETION
from teamwire.agents import FAILURE
from teamwire.config import Config
from teamwire.fsm import Conversation
from teamwire.io import open_log
from teamwire.protocol import MessageKind
from teamwire.protocol import decode_message
from teamwire.protocol import make_message
from teamwire.protocol import message_from_dict
from teamwire.protocol import message_to_dict
from teamwire.protocol import task_ids_of
from teamwire.protocol import validate_message
from teamwire.teaming import form_team
from teamwire.teaming import spawn_subgroup
from teamwire.utils import AgentFailure
from teamwire.utils import DepthExceeded
from teamwire.utils import GroupConcluded
from teamwire.utils import IllegalDecision
from teamwire.utils import PolicyFailure
from teamwire.utils import StaleSeq
from teamwire.utils import TaskTimeout
from teamwire.utils import TeamwireError
from teamwire.utils import UnknownGroup
from teamwire.utils import abstract_of

logger = logging.getLogger(__name__)

ERROR_PREFIX = "ERROR:"


class TaskMode(str, enum.Enum):
    SYNC = "sync"
    ASYNC = "async"


class TaskStatus(str, enum.Enum):
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"


_STATUS_ORDER = {
    TaskStatus.PENDING: 0,
    TaskStatus.IN_PROGRESS: 1,
    TaskStatus.COMPLETED: 2,
}


@dataclasses.dataclass(frozen=True)
class ContactEntry:
    agent_name: str
    description: str
    notes: str = ""


@dataclasses.dataclass(frozen=True)
class TaskRecord:
    """A task assigned to this client.

    Status only moves forward (pending, in progress, completed); a
    completed task always has a conclusion and a non-empty abstract.
    """

    task_id: str
    task_desc: str
    assignee: str
    mode: TaskMode
    comm_id: str
    status: TaskStatus = TaskStatus.PENDING
    conclusion: str | None = None
    task_abstract: str = ""
    is_trigger: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", TaskMode(self.mode))
        object.__setattr__(self, "status", TaskStatus(self.status))
        completed = self.status is TaskStatus.COMPLETED
        if completed != (self.conclusion is not None):
            raise ValueError("a task has a conclusion exactly when it is completed")
        if completed and not self.task_abstract:
            raise ValueError("a completed task needs an abstract")

    def advance(self, status, conclusion=None):
        """Copy of the task moved forward to `status`."""
        status = TaskStatus(status)
        if _STATUS_ORDER[status] <= _STATUS_ORDER[self.status]:
            raise ValueError(
                f"task {self.task_id} cannot go"
                f" from {self.status.value} to {status.value}"
            )
        abstract = ""
        if status is TaskStatus.COMPLETED:
            abstract = abstract_of(conclusion) or "(empty)"
        return dataclasses.replace(
            self, status=status, conclusion=conclusion, task_abstract=abstract
        )

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["mode"] = self.mode.value
        out["status"] = self.status.value
        return out


class GroupInfo:
    """Local view of one group chat: the mirrored conversation, the
    transcript so far, and the conclusion once there is one."""

    def __init__(self, conversation, parent_task=None):
        self.conversation = conversation
        self.transcript = []
        self.conclusion = None
        self.parent_task = parent_task

    @classmethod
    def from_setup(cls, notice, parent_task=None):
        return cls(Conversation.from_setup(notice), parent_task=parent_task)

    comm_id = property(lambda self: self.conversation.comm_id)
    goal = property(lambda self: self.conversation.goal)
    team_members = property(lambda self: self.conversation.members)
    initiator = property(lambda self: self.conversation.initiator)
    team_up_depth = property(lambda self: self.conversation.team_up_depth)
    fsm_state = property(lambda self: self.conversation.state)
    expected_speakers = property(lambda self: self.conversation.expected)
    next_seq = property(lambda self: self.conversation.next_seq)
    max_turns = property(lambda self: self.conversation.machine.max_turns)
    turn_count = property(lambda self: self.conversation.machine.turn_count)


class DataStore:
    """Contacts, groups, and tasks of one client.

    Each block is folded from its own event log (``contacts``, ``groups``,
    and ``tasks``), kept under `directory` when given.
    """

    def __init__(self, directory=None):
        self.directory = directory
        self.contacts_log = open_log(directory, "contacts")
        self.groups_log = open_log(directory, "groups")
        self.tasks_log = open_log(directory, "tasks")
        self.contacts = {}
        self.tasks = {}
        self.groups = {}
        self.conclusions = {}
        for record in self.contacts_log.records:
            entry = ContactEntry(**record)
            self.contacts[entry.agent_name] = entry
        for record in self.tasks_log.records:
            task = TaskRecord(**record)
            self.tasks[task.task_id] = task
        for record in self.groups_log.records:
            if record["event"] == "conclusion":
                self.conclusions[record["comm_id"]] = record["conclusion"]

    def save_contact(self, entry):
        self.contacts_log.append(dataclasses.asdict(entry))
        self.contacts[entry.agent_name] = entry

    def save_task(self, task):
        self.tasks_log.append(task.to_dict())
        self.tasks[task.task_id] = task

    def record_frame(self, msg):
        self.groups_log.append({"event": "frame", "message": message_to_dict(msg)})

    def record_conclusion(self, comm_id, conclusion):
        self.groups_log.append(
            {"event": "conclusion", "comm_id": comm_id, "conclusion": conclusion}
        )
        self.conclusions[comm_id] = conclusion

    def transcripts(self):
        """Frames recorded in the groups log, by comm_id, in seq order."""
        out = {}
        for record in self.groups_log.records:
            if record["event"] == "frame":
                msg = message_from_dict(record["message"])
                out.setdefault(msg.comm_id, []).append(msg)
        return out


class AgentClient:
    """One agent: profile, policy, integrated agent, and runtime state.

    Parameters
    ----------
    profile : :obj:`~teamwire.registry.AgentProfile`
    policy : :obj:`~teamwire.policy.Policy`
    agent : :obj:`~teamwire.agents.IntegratedAgent`, optional
        Tasks assigned to a client without one fail with an error result.
    config : :obj:`~teamwire.config.Config`, optional
    data_dir : :obj:`str`, optional
        Where the client's event logs are kept; in memory when None.

    Examples
    --------

    .. code::

        client = AgentClient(profile, ScriptedPolicy(records), ArithAgent())
        client.connect(LocalLink(hub))
        client.start()
        comm_id = client.start_task("add two numbers")
    """

    def __init__(self, profile, policy, agent=None, config=None, data_dir=None):
        self.profile = profile
        self.name = profile.agent_name
        self.policy = policy
        self.agent = agent
        self.config = config or Config()
        if data_dir is not None:
            os.makedirs(data_dir, exist_ok=True)
        self.store = DataStore(data_dir)
        self.link = None
        self.faults = []
        self.tool_calls = {}
        self._subgroups = {}
        self._inbox = queue.Queue()
        self._pending_frames = 0
        self._futures = set()
        self._lock = threading.Lock()
        self._task_lock = threading.Lock()
        self._stopped = threading.Event()
        self._thread = None
        self._executor = concurrent.futures.ThreadPoolExecutor(
            max_workers=4, thread_name_prefix=f"{self.name}-task"
        )

    # lifecycle
    def connect(self, link):
        """Open `link` as this agent (registering the profile if needed)."""
        link.open(
            self.name, self.config.auth_token, self._deliver, profile=self.profile
        )
        self.link = link

    def start(self):
        self._thread = threading.Thread(
            target=self._dispatch_loop, name=f"{self.name}-dispatch", daemon=True
        )
        self._thread.start()

    def stop(self):
        self._stopped.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._executor.shutdown(wait=False, cancel_futures=True)
        if self.link is not None:
            try:
                self.link.close()
            except TeamwireError as e:
                logger.info("%s: closing link failed: %s", self.name, e)

    @property
    def idle(self):
        """Whether no frame is waiting and no task is running."""
        with self._lock:
            return self._pending_frames == 0 and all(f.done() for f in self._futures)

    @property
    def groups(self):
        return self.store.groups

    @property
    def tasks(self):
        return self.store.tasks

    @property
    def contacts(self):
        return self.store.contacts

    def _deliver(self, frame):
        with self._lock:
            self._pending_frames += 1
        self._inbox.put(frame)

    def _dispatch_loop(self):
        while not self._stopped.is_set():
            try:
                frame = self._inbox.get(timeout=0.05)
            except queue.Empty:
                continue
            try:
                self.process_frame(frame)
            finally:
                with self._lock:
                    self._pending_frames -= 1

    def _fault(self, error, comm_id=None):
        logger.warning("%s: %s in %s: %s", self.name, error.code, comm_id, error)
        self.faults.append(
            {"code": error.code, "comm_id": comm_id, "detail": str(error)}
        )

    def process_frame(self, frame):
        """Decode and handle one frame, recording any failure as a fault."""
        try:
            msg = decode_message(frame)
        except TeamwireError as e:
            self._fault(e)
            return []
        try:
            try:
                return self.handle_incoming(msg)
            except (StaleSeq, UnknownGroup) as e:
                logger.info("%s: %s; resyncing %s", self.name, e.code, msg.comm_id)
                return self.resync(msg.comm_id)
        except TeamwireError as e:
            self._fault(e, msg.comm_id)
            return []

    # team formation
    def start_task(self, goal, max_turns=None):
        """Form a team for `goal` and launch its group chat.

        Returns
        -------
        comm_id : :obj:`str`
        """
        calls = []
        comm_id = form_team(
            goal,
            self.policy,
            self.link,
            self.config,
            contacts=list(self.store.contacts.values()),
            max_turns=max_turns,
            calls=calls,
        )
        self.tool_calls[comm_id] = calls
        return comm_id

    # communication
    def handle_incoming(self, msg):
        """Apply one routed frame and react to it.

        Returns
        -------
        sent : :obj:`list` of :obj:`~teamwire.protocol.AgentMessage`
            Frames sent from the dispatch loop in reaction (task results of
            worker threads are not included).

        Raises
        ------
        UnknownGroup
            The frame belongs to a group this client has no record of.
        StaleSeq
            Frames are missing before this one; the client must resync.
        """
        group = self.store.groups.get(msg.comm_id)
        if group is None:
            if msg.kind is not MessageKind.SYSTEM_NOTICE or msg.seq != 0:
                raise UnknownGroup(f"{self.name} has no group {msg.comm_id}")
            parent_task = self._subgroups.get(msg.comm_id)
            group = GroupInfo.from_setup(msg, parent_task=parent_task)
            self.store.groups[msg.comm_id] = group
        if msg.seq < group.next_seq:
            logger.debug("%s: duplicate seq %d in %s", self.name, msg.seq, msg.comm_id)
            return []
        if msg.seq > group.next_seq:
            raise StaleSeq(
                f"{msg.comm_id}: expected seq {group.next_seq}, got {msg.seq}"
            )

        group.conversation, prompt = group.conversation.accept(msg)
        group.transcript.append(msg)
        self.store.record_frame(msg)
        return self._react(group, msg, prompt)

    def _react(self, group, msg, prompt=None):
        kind, payload = msg.kind, msg.payload
        if kind is MessageKind.CONCLUSION:
            group.conclusion = payload.content
            self.store.record_conclusion(group.comm_id, payload.content)
            self.update_contacts(group)
            if group.parent_task is not None and group.initiator == self.name:
                return self._report_to_parent(group)
            return []
        if kind is MessageKind.PAUSE_AND_TRIGGER:
            with self._task_lock:
                for task_id in payload.triggers:
                    task = self.store.tasks.get(task_id)
                    if task is not None and not task.is_trigger:
                        self.store.save_task(dataclasses.replace(task, is_trigger=True))
        if self.name not in payload.next_speaker:
            return []
        if kind.is_assignment:
            try:
                task = self.extract_task(group, msg)
            except PolicyFailure as e:
                self._fault(e, group.comm_id)
                task = self._record_task(group, msg, "(no description)")
                return self._fail(task, f"PolicyFailure: {e}")
            return self._start(group, task)
        # a server notice follows this frame; the floor is taken on the notice
        if prompt is not None:
            return []
        if self.name in group.expected_speakers:
            return [self.take_turn(group)]
        return []

    def take_turn(self, group):
        """Speak while holding the floor of `group`.

        Raises
        ------
        IllegalDecision
            The policy chose a move the group's rules do not allow; nothing
            is sent.
        """
        conversation = group.conversation
        if conversation.forced:
            return self.conclude_group(group)
        decision = self.policy.decide_utterance(
            list(group.transcript), conversation.state, conversation.members
        )
        decision.check(conversation.state, conversation.members)
        if decision.kind is MessageKind.CONCLUSION:
            return self.conclude_group(group)
        msg = make_message(
            self.name,
            group.comm_id,
            decision.kind,
            decision.next_speakers,
            content=decision.content,
            triggers=decision.triggers,
        )
        return self._send(group, msg, firewall=True)

    def _send(self, group, msg, firewall=False):
        problems = validate_message(msg)
        if problems:
            raise IllegalDecision("; ".join(problems))
        try:
            group.conversation.check(msg)
        except TeamwireError as e:
            if not firewall:
                raise
            raise IllegalDecision(f"{e.code}: {e}") from e
        self.link.route(msg)
        return msg

    def conclude_group(self, group):
        """Send the conclusion of `group`.

        The parent task of a sub-group is completed when the conclusion
        frame comes back (see :meth:`handle_incoming`).

        Raises
        ------
        PolicyFailure
            The policy produced an empty conclusion.
        GroupConcluded
            The group has already concluded.
        """
        if group.conversation.concluded:
            raise GroupConcluded(f"{group.comm_id} has concluded")
        text = self.policy.conclude(list(group.transcript))
        if not text:
            raise PolicyFailure(f"empty conclusion for {group.comm_id}")
        msg = make_message(
            self.name, group.comm_id, MessageKind.CONCLUSION, content=text
        )
        self._send(group, msg)
        group.conclusion = text
        return msg

    def _report_to_parent(self, group):
        parent_comm_id, task_id = group.parent_task
        task = self.store.tasks.get(task_id)
        if task is None:
            error = UnknownGroup(f"no parent task {task_id} in {parent_comm_id}")
            self._fault(error, group.comm_id)
            return []
        result = self._finish(task, group.conclusion)
        return [result] if result is not None else []

    def update_contacts(self, group):
        """Refresh the contact entries of every teammate of a concluded group."""
        entries = []
        transcript = list(group.transcript)
        for name in group.team_members:
            if name == self.name:
                continue
            known = self.store.contacts.get(name)
            try:
                description = self.link.get_profile(name).agent_description
            except TeamwireError:
                description = known.description if known else ""
            notes = self.policy.evaluate_teammate(name, transcript)
            entry = ContactEntry(name, description, notes)
            self.store.save_contact(entry)
            entries.append(entry)
        return entries

    def resync(self, comm_id):
        """Fetch and apply the frames of `comm_id` this client is missing."""
        group = self.store.groups.get(comm_id)
        since = group.next_seq if group is not None else 0
        sent = []
        for msg in self.link.transcript(comm_id, since):
            sent.extend(self.handle_incoming(msg))
        return sent

    # tasks
    def _record_task(self, group, msg, task_desc):
        task_id = dict((name, tid) for tid, name in task_ids_of(msg))[self.name]
        if msg.kind is MessageKind.SYNC_TASK_ASSIGNMENT:
            mode = TaskMode.SYNC
        else:
            mode = TaskMode.ASYNC
        task = TaskRecord(
            task_id=task_id,
            task_desc=task_desc,
            assignee=self.name,
            mode=mode,
            comm_id=group.comm_id,
        )
        self.store.save_task(task)
        return task

    def extract_task(self, group, msg):
        """Turn an assignment naming this client into a pending task.

        Raises
        ------
        ValueError
            `msg` does not assign anything to this client.
        PolicyFailure
            The policy gave an empty description.
        """
        if not msg.kind.is_assignment or self.name not in msg.payload.next_speaker:
            raise ValueError(
                f"{msg.kind.value} frame does not assign a task to {self.name}"
            )
        task_desc = self.policy.summarize_task(list(group.transcript), msg, self.name)
        if not task_desc or not task_desc.strip():
            raise PolicyFailure(f"empty task description in {group.comm_id}")
        return self._record_task(group, msg, task_desc)

    def _start(self, group, task):
        if self.policy.wants_team(task.task_desc):
            calls = []
            try:
                child = spawn_subgroup(
                    group, task, self.policy, self.link, self.config,
                    contacts=list(self.store.contacts.values()), calls=calls,
                )
            except DepthExceeded as e:
                return self._fail(task, f"DepthExceeded: {e}")
            except TeamwireError as e:
                self._fault(e, group.comm_id)
                return self._fail(task, f"{e.code}: {e}")
            self._subgroups[child] = (group.comm_id, task.task_id)
            self.tool_calls[child] = calls
            self._update_task(task.task_id, TaskStatus.IN_PROGRESS)
            return []
        if self.agent is None:
            return self._fail(
                task, f"AgentFailure: {self.name} has no integrated agent"
            )
        future = self._executor.submit(self.execute_assigned_task, task, self.agent)
        with self._lock:
            self._futures = {f for f in self._futures if not f.done()} | {future}
        return []

    def _update_task(self, task_id, status, conclusion=None):
        with self._task_lock:
            task = self.store.tasks[task_id].advance(status, conclusion)
            self.store.save_task(task)
            return task

    def execute_assigned_task(self, task, agent):
        """Run `task` on `agent` and send its result.

        Failures and timeouts still complete the task, with a conclusion
        starting with ``ERROR:``.

        Returns
        -------
        result : :obj:`~teamwire.protocol.AgentMessage` or None
            The task_result frame, None if the task had already completed.
        """
        self._update_task(task.task_id, TaskStatus.IN_PROGRESS)
        try:
            run_id = agent.run(task.task_desc)
            conclusion = self._await_run(agent, run_id)
        except TaskTimeout as e:
            conclusion = f"{ERROR_PREFIX} TaskTimeout: {e}"
        except AgentFailure as e:
            conclusion = f"{ERROR_PREFIX} AgentFailure: {e}"
        except Exception as e:
            conclusion = f"{ERROR_PREFIX} AgentFailure: {type(e).__name__}: {e}"
        return self._finish(task, conclusion)

    def _await_run(self, agent, run_id):
        deadline = time.monotonic() + self.config.task_timeout
        while True:
            time.sleep(self.config.poll_interval)
            records = agent.read_memory(run_id)
            if records and records[-1]["type"] == COMPLETION:
                return records[-1]["text"]
            if records and records[-1]["type"] == FAILURE:
                raise AgentFailure(records[-1]["text"])
            if time.monotonic() > deadline:
                raise TaskTimeout(f"no result within {self.config.task_timeout} s")

    def _fail(self, task, reason):
        result = self._finish(task, f"{ERROR_PREFIX} {reason}")
        return [result] if result is not None else []

    def _finish(self, task, conclusion):
        with self._task_lock:
            current = self.store.tasks[task.task_id]
            if current.status is TaskStatus.COMPLETED:
                return None
            done = current.advance(TaskStatus.COMPLETED, conclusion)
            self.store.save_task(done)
        msg = make_message(
            self.name,
            done.comm_id,
            MessageKind.TASK_RESULT,
            task_id=done.task_id,
            task_conclusion=conclusion,
            task_abstract=done.task_abstract,
        )
        try:
            self.link.route(msg)
        except TeamwireError as e:
            self._fault(e, done.comm_id)
        logger.info("%s finished task %s in %s", self.name, done.task_id, done.comm_id)
        return msg
