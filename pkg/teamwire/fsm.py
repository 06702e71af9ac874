"""Group chat finite state machine and floor control.

A group chat moves between five states. Legal moves are listed in
:data:`TRANSITIONS`; everything else is an
:obj:`~teamwire.utils.IllegalTransition`.

.. code::

    discussion --discussion--------------> discussion
    discussion --async_task_assignment---> discussion (tasks recorded)
    discussion --sync_task_assignment----> sync_assignment
    discussion --pause_and_trigger-------> pause_trigger
    discussion --conclusion--------------> conclusion (terminal)
    sync_assignment --all sync tasks complete--> discussion
    pause_trigger   --all triggers complete----> discussion

:obj:`ChatMachine` is the bare machine (state, turn accounting, open task
sets). :obj:`Conversation` adds the floor: who is a member, who may speak
next, and which server notice must follow a frame. The server, every
client's local mirror, and :func:`replay` run the same code.
"""

import dataclasses
import enum

from teamwire.protocol import ASSIGNMENT_KINDS
from teamwire.protocol import SERVER_SENDER
from teamwire.protocol import MessageKind
from teamwire.protocol import task_ids_of
from teamwire.utils import GroupConcluded
from teamwire.utils import IllegalTransition
from teamwire.utils import NotMember
from teamwire.utils import NotYourTurn
from teamwire.utils import StaleSeq
from teamwire.utils import TeamwireError
from teamwire.utils import TurnBudgetExhausted
from teamwire.utils import UnknownGroup
from teamwire.utils import UnknownMember
from teamwire.utils import UnknownTask


class ConversationState(str, enum.Enum):
    DISCUSSION = "discussion"
    SYNC_ASSIGNMENT = "sync_assignment"
    ASYNC_ASSIGNMENT = "async_assignment"
    PAUSE_TRIGGER = "pause_trigger"
    CONCLUSION = "conclusion"


class CompletionEvent(str, enum.Enum):
    ALL_SYNC_TASKS_COMPLETE = "all_sync_tasks_complete"
    ALL_TRIGGERS_COMPLETE = "all_triggers_complete"


_D = ConversationState.DISCUSSION
_S = ConversationState.SYNC_ASSIGNMENT
_P = ConversationState.PAUSE_TRIGGER
_C = ConversationState.CONCLUSION

INITIAL_STATE = _D
FINAL_STATES = frozenset({_C})

TRANSITIONS = {
    (_D, MessageKind.DISCUSSION): _D,
    (_D, MessageKind.SYNC_TASK_ASSIGNMENT): _S,
    (_D, MessageKind.ASYNC_TASK_ASSIGNMENT): _D,
    (_D, MessageKind.PAUSE_AND_TRIGGER): _P,
    (_D, MessageKind.CONCLUSION): _C,
    (_S, CompletionEvent.ALL_SYNC_TASKS_COMPLETE): _D,
    (_P, CompletionEvent.ALL_TRIGGERS_COMPLETE): _D,
}


def _as_input(value):
    if isinstance(value, (MessageKind, CompletionEvent)):
        return value
    for cls in (MessageKind, CompletionEvent):
        try:
            return cls(value)
        except ValueError:
            pass
    raise ValueError(f"not a message kind or completion event: {value!r}")


def allowed(state, event):
    """Next state for `event` in `state`.

    Parameters
    ----------
    state : :obj:`ConversationState` or :obj:`str`
    event : :obj:`~teamwire.protocol.MessageKind`, :obj:`CompletionEvent` or :obj:`str`

    Raises
    ------
    IllegalTransition
        When the pair is not in :data:`TRANSITIONS`.

    Examples
    --------

    >>> allowed("discussion", "conclusion").value
    'conclusion'
    >>> allowed("sync_assignment", "all_sync_tasks_complete").value
    'discussion'
    >>> allowed("conclusion", "discussion")
    Traceback (most recent call last):
    teamwire.utils.IllegalTransition: no transition from conclusion on discussion
    """
    state = ConversationState(state)
    event = _as_input(event)
    try:
        return TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(
            f"no transition from {state.value} on {event.value}"
        ) from None


@dataclasses.dataclass(frozen=True)
class ChatMachine:
    """Value object holding one group's machine position.

    Invariants: the state is ``sync_assignment`` exactly when sync tasks are
    open; the state is ``pause_trigger`` exactly when triggers are open;
    open triggers are always open async tasks.
    """

    state: ConversationState = INITIAL_STATE
    turn_count: int = 0
    max_turns: int = 20
    open_sync_tasks: frozenset = frozenset()
    open_async_tasks: frozenset = frozenset()
    open_triggers: frozenset = frozenset()
    assigned: frozenset = frozenset()
    owners: frozenset = frozenset()

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be positive")

    def assignee(self, task_id):
        """Agent a task of this group was assigned to, or None."""
        for owned, name in self.owners:
            if owned == task_id:
                return name
        return None


def _complete_task(machine, task_id):
    state = machine.state
    if task_id in machine.open_sync_tasks:
        remaining = machine.open_sync_tasks - {task_id}
        if state is _S and not remaining:
            state = allowed(state, CompletionEvent.ALL_SYNC_TASKS_COMPLETE)
        return dataclasses.replace(machine, state=state, open_sync_tasks=remaining)
    if task_id in machine.open_async_tasks:
        triggers = machine.open_triggers - {task_id}
        if state is _P and not triggers:
            state = allowed(state, CompletionEvent.ALL_TRIGGERS_COMPLETE)
        return dataclasses.replace(
            machine,
            state=state,
            open_async_tasks=machine.open_async_tasks - {task_id},
            open_triggers=triggers,
        )
    raise UnknownTask(f"task {task_id} is not open")


def advance(machine, item):
    """Apply one message or completion event.

    Parameters
    ----------
    machine : :obj:`ChatMachine`
    item : :obj:`~teamwire.protocol.AgentMessage` or :obj:`CompletionEvent`
        Assignment messages must be routed (``seq`` set), since their task
        ids derive from it.

    Returns
    -------
    machine : :obj:`ChatMachine`
        A new machine; the input is never modified.

    Raises
    ------
    IllegalTransition
        The input has no edge from the current state.
    TurnBudgetExhausted
        The turn budget is spent and the input is not a conclusion.
    UnknownTask
        A task result or trigger names a task that is not open.
    """
    if isinstance(item, (CompletionEvent, str)):
        event = CompletionEvent(item)
        if event is CompletionEvent.ALL_SYNC_TASKS_COMPLETE and machine.open_sync_tasks:
            raise IllegalTransition("sync tasks are still open")
        if event is CompletionEvent.ALL_TRIGGERS_COMPLETE and machine.open_triggers:
            raise IllegalTransition("triggers are still open")
        return dataclasses.replace(machine, state=allowed(machine.state, event))

    kind = item.kind
    if kind is MessageKind.SYSTEM_NOTICE:
        return machine
    if kind is MessageKind.TASK_RESULT:
        return _complete_task(machine, item.payload.task_id)

    if machine.state in FINAL_STATES:
        raise IllegalTransition(f"the conversation has concluded; got {kind.value}")
    state = allowed(machine.state, kind)
    if machine.turn_count >= machine.max_turns and kind is not MessageKind.CONCLUSION:
        raise TurnBudgetExhausted(
            f"turn budget of {machine.max_turns} spent; only conclusion is allowed"
        )

    changes = {"state": state, "turn_count": machine.turn_count + 1}
    if kind in ASSIGNMENT_KINDS:
        pairs = frozenset(task_ids_of(item))
        ids = frozenset(task_id for task_id, _ in pairs)
        changes["assigned"] = machine.assigned | ids
        changes["owners"] = machine.owners | pairs
        if kind is MessageKind.SYNC_TASK_ASSIGNMENT:
            changes["open_sync_tasks"] = machine.open_sync_tasks | ids
        else:
            changes["open_async_tasks"] = machine.open_async_tasks | ids
    elif kind is MessageKind.PAUSE_AND_TRIGGER:
        triggers = frozenset(item.payload.triggers)
        unknown = triggers - machine.assigned
        if unknown:
            raise UnknownTask(f"triggers name unassigned tasks {sorted(unknown)}")
        # triggers on tasks that already finished are released immediately
        outstanding = triggers & machine.open_async_tasks
        changes["open_triggers"] = outstanding
        if not outstanding:
            changes["state"] = allowed(state, CompletionEvent.ALL_TRIGGERS_COMPLETE)
    return dataclasses.replace(machine, **changes)


def is_quiescent(machine):
    """Whether the machine has concluded and owes no task results.

    Examples
    --------

    >>> is_quiescent(ChatMachine())
    False
    >>> is_quiescent(ChatMachine(state=ConversationState.CONCLUSION))
    True
    """
    return (
        machine.state in FINAL_STATES
        and not machine.open_sync_tasks
        and not machine.open_async_tasks
        and not machine.open_triggers
    )


@dataclasses.dataclass(frozen=True)
class Prompt:
    """Server notice that must follow the frame just accepted.

    ``reason`` is ``"resume"`` (the floor returns to `speaker`) or
    ``"conclude"`` (turn budget spent, `speaker` must conclude).
    """

    reason: str
    speaker: str


@dataclasses.dataclass(frozen=True)
class Conversation:
    """One group chat: machine plus floor control.

    Parameters
    ----------
    comm_id, goal, initiator : :obj:`str`
    members : :obj:`tuple` of :obj:`str`
    team_up_depth : :obj:`int`
    machine : :obj:`ChatMachine`
    expected : :obj:`frozenset`
        Agents allowed to send the next conversation frame.
    resume_speaker : :obj:`str` or None
        Who gets the floor back when a sync assignment or pause releases.
    next_seq : :obj:`int`
        Sequence number the next routed frame receives.
    forced : :obj:`bool`
        Whether the forced-conclusion notice has been issued.
    """

    comm_id: str
    goal: str
    initiator: str
    members: tuple
    team_up_depth: int
    machine: ChatMachine
    expected: frozenset
    resume_speaker: str | None = None
    next_seq: int = 0
    forced: bool = False

    @classmethod
    def create(cls, comm_id, goal, members, initiator, team_up_depth, max_turns):
        """Fresh conversation; the initiator holds the floor."""
        members = tuple(dict.fromkeys(members))
        if initiator not in members:
            raise ValueError("the initiator must be a member")
        return cls(
            comm_id=comm_id,
            goal=goal,
            initiator=initiator,
            members=members,
            team_up_depth=team_up_depth,
            machine=ChatMachine(max_turns=max_turns),
            expected=frozenset({initiator}),
        )

    @classmethod
    def from_setup(cls, notice):
        """Rebuild a conversation from its seq-0 setup notice.

        The notice is not applied; call :meth:`accept` with it next.
        """
        payload = notice.payload
        if (
            notice.kind is not MessageKind.SYSTEM_NOTICE
            or payload.team_members is None
            or payload.max_turns is None
            or len(payload.next_speaker) != 1
        ):
            raise ValueError("frame is not a group setup notice")
        return cls.create(
            comm_id=notice.comm_id,
            goal=payload.goal or "",
            members=payload.team_members,
            initiator=payload.next_speaker[0],
            team_up_depth=payload.team_up_depth or 0,
            max_turns=payload.max_turns,
        )

    @property
    def state(self):
        return self.machine.state

    @property
    def concluded(self):
        return self.machine.state in FINAL_STATES

    def check(self, msg):
        """Raise if `msg` would be rejected, without applying it."""
        self.accept(msg)

    def accept(self, msg):
        """Apply one routed frame.

        Parameters
        ----------
        msg : :obj:`~teamwire.protocol.AgentMessage`
            ``seq`` may be unset (it is then taken as :attr:`next_seq`).

        Returns
        -------
        conversation : :obj:`Conversation`
        prompt : :obj:`Prompt` or None
            The notice the router must send after this frame.
        """
        seq = self.next_seq if msg.seq is None else msg.seq
        if seq != self.next_seq:
            raise StaleSeq(f"expected seq {self.next_seq}, got {seq}")
        if msg.comm_id != self.comm_id:
            raise UnknownGroup(f"frame for {msg.comm_id} applied to {self.comm_id}")
        msg = msg.with_seq(seq)
        kind, sender = msg.kind, msg.sender

        if kind is MessageKind.SYSTEM_NOTICE:
            if sender != SERVER_SENDER:
                raise IllegalTransition("system_notice is reserved for the server")
            return dataclasses.replace(self, next_seq=seq + 1), None
        if sender not in self.members:
            raise NotMember(f"{sender} is not a member of {self.comm_id}")
        if kind.is_conversation:
            if self.concluded:
                raise GroupConcluded(f"{self.comm_id} has concluded")
            if sender not in self.expected:
                raise NotYourTurn(
                    f"{sender} may not speak; expected {sorted(self.expected)}"
                )
            strangers = [n for n in msg.payload.next_speaker if n not in self.members]
            if strangers:
                raise UnknownMember(
                    f"next_speaker names non-members of {self.comm_id}: {strangers}"
                )
        elif kind is MessageKind.TASK_RESULT:
            owner = self.machine.assignee(msg.payload.task_id)
            if owner is not None and owner != sender:
                raise NotYourTurn(
                    f"task {msg.payload.task_id} is assigned to {owner}, not {sender}"
                )

        machine = advance(self.machine, msg)
        expected, resume, prompt = self.expected, self.resume_speaker, None

        if kind is MessageKind.TASK_RESULT:
            released = self.machine.state in (_S, _P) and machine.state is _D
            if released:
                expected, prompt = frozenset({resume}), Prompt("resume", resume)
        elif kind is MessageKind.DISCUSSION:
            if msg.payload.next_speaker:
                expected = frozenset(msg.payload.next_speaker)
            else:
                expected = frozenset({self.initiator})
                prompt = Prompt("resume", self.initiator)
        elif kind is MessageKind.SYNC_TASK_ASSIGNMENT:
            expected, resume = frozenset(), sender
        elif kind is MessageKind.ASYNC_TASK_ASSIGNMENT:
            expected, prompt = frozenset({sender}), Prompt("resume", sender)
        elif kind is MessageKind.PAUSE_AND_TRIGGER:
            resume = sender
            if machine.state is _P:
                expected = frozenset()
            else:
                expected, prompt = frozenset({sender}), Prompt("resume", sender)
        elif kind is MessageKind.CONCLUSION:
            expected = frozenset()

        forced = self.forced
        if (
            not forced
            and machine.state is _D
            and machine.turn_count >= machine.max_turns
        ):
            forced = True
            expected = frozenset({self.initiator})
            prompt = Prompt("conclude", self.initiator)
        elif forced and prompt is not None:
            # after the forced notice the floor stays with the initiator
            expected, prompt = frozenset({self.initiator}), None

        new = dataclasses.replace(
            self,
            machine=machine,
            expected=expected,
            resume_speaker=resume,
            next_seq=seq + 1,
            forced=forced,
        )
        return new, prompt


@dataclasses.dataclass(frozen=True)
class Violation:
    """One transcript rule broken at one frame."""

    code: str
    seq: int | None
    detail: str = ""

    def __str__(self):
        return f"{self.code}@{self.seq}"


def replay(frames):
    """Fold a group transcript and collect every rule violation.

    Checks gapless ordering, sequential speaking, membership, the legal
    transition table, the turn budget and trace bound, and pause
    discipline. A violating frame is reported and skipped, and the fold
    continues with the next one.

    Parameters
    ----------
    frames : sequence of :obj:`~teamwire.protocol.AgentMessage`
        Routed frames (``seq`` set), starting with the setup notice.

    Returns
    -------
    conversation : :obj:`Conversation` or None
        Final fold state, None when the setup notice is missing.
    violations : :obj:`list` of :obj:`Violation`
    """
    frames = list(frames)
    violations = []
    if not frames:
        return None, [Violation("MissingSetup", None, "empty transcript")]
    try:
        conversation = Conversation.from_setup(frames[0])
    except ValueError as e:
        return None, [Violation("MissingSetup", frames[0].seq, str(e))]

    conversation_frames = 0
    for msg in frames:
        if msg.seq != conversation.next_seq:
            violations.append(
                Violation("SeqGap", msg.seq, f"expected {conversation.next_seq}")
            )
            if msg.seq is None or msg.seq < conversation.next_seq:
                continue
            conversation = dataclasses.replace(conversation, next_seq=msg.seq)
        skip = None
        if msg.kind.is_conversation:
            conversation_frames += 1
            if conversation_frames > conversation.machine.max_turns + 1:
                skip = Violation("TraceBound", msg.seq, "too many conversation frames")
            elif conversation.state is _P:
                skip = Violation(
                    "PauseDiscipline", msg.seq, "conversation during pause"
                )
        if skip is None:
            try:
                conversation, _ = conversation.accept(msg)
                continue
            except TeamwireError as e:
                skip = Violation(e.code, msg.seq, str(e))
        violations.append(skip)
        conversation = dataclasses.replace(
            conversation, next_seq=conversation.next_seq + 1
        )
    return conversation, violations


def assigned_tasks(frames):
    """``(task_id, assignee, kind)`` for every assignment in a transcript."""
    out = []
    for msg in frames:
        for task_id, assignee in task_ids_of(msg) if msg.seq is not None else ():
            out.append((task_id, assignee, msg.kind))
    return out
