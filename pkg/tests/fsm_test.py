import dataclasses
import itertools

import pytest
from hypothesis import HealthCheck
from hypothesis import given
from hypothesis import settings
from hypothesis import strategies as st

from teamwire.fsm import TRANSITIONS
from teamwire.fsm import ChatMachine
from teamwire.fsm import CompletionEvent
from teamwire.fsm import Conversation
from teamwire.fsm import ConversationState
from teamwire.fsm import Prompt
from teamwire.fsm import advance
from teamwire.fsm import allowed
from teamwire.fsm import assigned_tasks
from teamwire.fsm import is_quiescent
from teamwire.fsm import replay
from teamwire.protocol import SERVER_SENDER
from teamwire.protocol import MessageKind
from teamwire.protocol import make_message
from teamwire.protocol import task_ids_of
from teamwire.utils import GroupConcluded
from teamwire.utils import IllegalTransition
from teamwire.utils import NotMember
from teamwire.utils import NotYourTurn
from teamwire.utils import StaleSeq
from teamwire.utils import TurnBudgetExhausted
from teamwire.utils import UnknownGroup
from teamwire.utils import UnknownMember
from teamwire.utils import UnknownTask

D = ConversationState.DISCUSSION
S = ConversationState.SYNC_ASSIGNMENT
P = ConversationState.PAUSE_TRIGGER
C = ConversationState.CONCLUSION

# the transition table written out longhand
EXPECTED_EDGES = {
    ("discussion", "discussion"): "discussion",
    ("discussion", "sync_task_assignment"): "sync_assignment",
    ("discussion", "async_task_assignment"): "discussion",
    ("discussion", "pause_and_trigger"): "pause_trigger",
    ("discussion", "conclusion"): "conclusion",
    ("sync_assignment", "all_sync_tasks_complete"): "discussion",
    ("pause_trigger", "all_triggers_complete"): "discussion",
}

MEMBERS = ("A", "B", "C")


def setup_notice(comm_id="g0", members=MEMBERS, initiator="A", max_turns=20):
    return make_message(
        SERVER_SENDER,
        comm_id,
        MessageKind.SYSTEM_NOTICE,
        [initiator],
        content="group formed",
        goal="goal",
        team_members=members,
        team_up_depth=0,
        max_turns=max_turns,
    ).with_seq(0)


class Group:
    """A conversation plus its routed transcript, prompts included."""

    def __init__(self, max_turns=20, members=MEMBERS):
        notice = setup_notice(members=members, max_turns=max_turns)
        self.conv = Conversation.from_setup(notice)
        self.frames = []
        self._apply(notice)

    def _apply(self, msg):
        msg = msg.with_seq(self.conv.next_seq)
        self.conv, prompt = self.conv.accept(msg)
        self.frames.append(msg)
        if prompt is not None:
            self._apply(
                make_message(
                    SERVER_SENDER,
                    self.conv.comm_id,
                    MessageKind.SYSTEM_NOTICE,
                    [prompt.speaker],
                    content=prompt.reason,
                )
            )
        return msg

    def say(self, sender, kind, next_speaker=(), **fields):
        if kind in ("discussion", "conclusion") and "content" not in fields:
            fields["content"] = "x"
        if kind.endswith("assignment"):
            fields.setdefault("content", "do it")
            fields.setdefault("task_desc", "task")
        return self._apply(make_message(sender, "g0", kind, next_speaker, **fields))

    def result(self, task_id, assignee, text="r"):
        return self._apply(
            make_message(
                assignee,
                "g0",
                "task_result",
                task_id=task_id,
                task_conclusion=text,
                task_abstract=text,
            )
        )


def _check_machine(machine):
    assert (machine.state is S) == bool(machine.open_sync_tasks)
    assert (machine.state is P) == bool(machine.open_triggers)
    assert machine.open_triggers <= machine.open_async_tasks
    assert machine.turn_count <= machine.max_turns + 1


class TestTable:

    def test_table_matches_longhand(self):
        got = {(s.value, e.value): t.value for (s, e), t in TRANSITIONS.items()}
        assert got == EXPECTED_EDGES

    @pytest.mark.parametrize(
        "state, event",
        itertools.product(
            [s.value for s in ConversationState],
            [k.value for k in MessageKind if k.is_conversation]
            + [e.value for e in CompletionEvent],
        ),
    )
    def test_allowed_brute_force(self, state, event):
        if (state, event) in EXPECTED_EDGES:
            assert allowed(state, event).value == EXPECTED_EDGES[(state, event)]
        else:
            with pytest.raises(IllegalTransition):
                allowed(state, event)

    def test_allowed_bad_input(self):
        with pytest.raises(ValueError):
            allowed("discussion", "gossip")

    def test_async_assignment_state_unreachable(self):
        targets = set(TRANSITIONS.values())
        assert ConversationState.ASYNC_ASSIGNMENT not in targets


class TestMachine:

    def test_max_turns_positive(self):
        with pytest.raises(ValueError):
            ChatMachine(max_turns=0)

    def test_completion_event_needs_closed_tasks(self):
        machine = ChatMachine(state=S, open_sync_tasks=frozenset({"t"}))
        with pytest.raises(IllegalTransition):
            advance(machine, CompletionEvent.ALL_SYNC_TASKS_COMPLETE)
        released = advance(ChatMachine(state=S), "all_sync_tasks_complete")
        assert released.state is D

    def test_notice_does_not_count(self):
        machine = ChatMachine()
        assert advance(machine, setup_notice()) is machine

    def test_unknown_task_result(self):
        msg = make_message(
            "B", "g0", "task_result", task_id="t", task_conclusion="", task_abstract=""
        )
        with pytest.raises(UnknownTask):
            advance(ChatMachine(), msg)

    def test_budget(self):
        machine = ChatMachine(turn_count=2, max_turns=2)
        with pytest.raises(TurnBudgetExhausted):
            advance(machine, make_message("A", "g0", "discussion", content="x"))
        done = advance(machine, make_message("A", "g0", "conclusion", content="x"))
        assert done.state is C and done.turn_count == 3

    def test_quiescence(self):
        assert not is_quiescent(ChatMachine())
        assert not is_quiescent(ChatMachine(state=C, open_async_tasks=frozenset({"t"})))
        assert is_quiescent(ChatMachine(state=C))


class TestFloor:

    def test_discussion_passes_floor(self):
        g = Group()
        g.say("A", "discussion", ["B"])
        assert g.conv.expected == {"B"}
        with pytest.raises(NotYourTurn):
            g.say("C", "discussion", ["A"])

    def test_discussion_without_speaker_resumes_initiator(self):
        g = Group()
        g.say("A", "discussion", ["B"])
        g.say("B", "discussion")
        assert g.conv.expected == {"A"}
        assert g.frames[-1].kind is MessageKind.SYSTEM_NOTICE
        assert g.frames[-1].payload.next_speaker == ("A",)

    def test_sync_assignment_blocks_until_results(self):
        g = Group()
        msg = g.say("A", "sync_task_assignment", ["B", "C"])
        assert g.conv.state is S and g.conv.expected == frozenset()
        (t_b, _), (t_c, _) = task_ids_of(msg)
        with pytest.raises(NotYourTurn):
            g.say("A", "discussion", ["B"])
        g.result(t_b, "B")
        assert g.conv.state is S
        g.result(t_c, "C")
        assert g.conv.state is D
        assert g.conv.expected == {"A"}
        assert g.frames[-1].payload.content == "resume"

    def test_async_assignment_keeps_floor(self):
        g = Group()
        msg = g.say("A", "async_task_assignment", ["B"])
        assert g.conv.state is D
        assert g.conv.expected == {"A"}
        (task, _), = task_ids_of(msg)
        assert g.conv.machine.open_async_tasks == {task}

    def test_pause_until_trigger(self):
        g = Group()
        msg = g.say("A", "async_task_assignment", ["B"])
        (task, _), = task_ids_of(msg)
        g.say("A", "pause_and_trigger", triggers=[task])
        assert g.conv.state is P and g.conv.expected == frozenset()
        g.result(task, "B")
        assert g.conv.state is D and g.conv.expected == {"A"}

    def test_pause_on_finished_task_releases(self):
        g = Group()
        msg = g.say("A", "async_task_assignment", ["B"])
        (task, _), = task_ids_of(msg)
        g.result(task, "B")
        g.say("A", "pause_and_trigger", triggers=[task])
        assert g.conv.state is D and g.conv.expected == {"A"}

    def test_pause_on_unknown_task(self):
        g = Group()
        with pytest.raises(UnknownTask):
            g.say("A", "pause_and_trigger", triggers=["nope"])

    def test_conclusion_is_terminal(self):
        g = Group()
        g.say("A", "conclusion")
        assert g.conv.concluded
        with pytest.raises(GroupConcluded):
            g.say("A", "discussion", ["B"])

    def test_results_after_conclusion(self):
        g = Group()
        msg = g.say("A", "async_task_assignment", ["B"])
        (task, _), = task_ids_of(msg)
        g.say("A", "conclusion")
        assert not is_quiescent(g.conv.machine)
        g.result(task, "B")
        assert is_quiescent(g.conv.machine)

    def test_forced_conclusion(self):
        g = Group(max_turns=3)
        g.say("A", "discussion", ["B"])
        g.say("B", "discussion", ["A"])
        g.say("A", "discussion", ["B"])
        assert g.conv.forced
        assert g.conv.expected == {"A"}
        assert g.frames[-1].payload.next_speaker == ("A",)
        with pytest.raises(TurnBudgetExhausted):
            g.say("A", "discussion", ["B"])
        g.say("A", "conclusion")
        assert g.conv.machine.turn_count == 4

    def test_non_member(self):
        g = Group()
        with pytest.raises(NotMember):
            g.say("Z", "discussion", ["A"])

    @pytest.mark.parametrize(
        "kind, speakers",
        [
            ("discussion", ["Z"]),
            ("sync_task_assignment", ["Z"]),
            ("sync_task_assignment", ["B", "Z"]),
            ("async_task_assignment", ["Z"]),
        ],
    )
    def test_next_speaker_outside_group(self, kind, speakers):
        g = Group()
        with pytest.raises(UnknownMember):
            g.say("A", kind, speakers)
        assert g.conv.expected == {"A"}
        assert g.conv.machine == ChatMachine()

    def test_result_from_wrong_member(self):
        g = Group()
        msg = g.say("A", "sync_task_assignment", ["B"])
        (task, _), = task_ids_of(msg)
        with pytest.raises(NotYourTurn, match="assigned to B"):
            g.result(task, "C")
        assert g.conv.machine.open_sync_tasks == {task}
        assert g.conv.machine.assignee(task) == "B"
        g.result(task, "B")
        assert g.conv.state is D

    def test_notice_from_agent(self):
        g = Group()
        with pytest.raises(IllegalTransition):
            g.say("A", "system_notice", ["B"], content="fake")

    def test_seq_and_comm_id_checks(self):
        g = Group()
        msg = make_message("A", "g0", "discussion", ["B"], content="x")
        with pytest.raises(StaleSeq):
            g.conv.accept(msg.with_seq(5))
        other = make_message("A", "g1", "discussion", ["B"], content="x")
        with pytest.raises(UnknownGroup):
            g.conv.accept(other)

    def test_check_does_not_apply(self):
        g = Group()
        before = g.conv
        g.conv.check(make_message("A", "g0", "discussion", ["B"], content="x"))
        assert g.conv is before

    def test_from_setup_rejects(self):
        with pytest.raises(ValueError):
            Conversation.from_setup(make_message("A", "g0", "discussion", content="x"))

    def test_create_needs_member_initiator(self):
        with pytest.raises(ValueError):
            Conversation.create("g0", "goal", ["B"], "A", 0, 5)

    def test_prompt_value(self):
        assert Prompt("resume", "A") == Prompt("resume", "A")


def _drive(data, max_turns):
    """Random legal play; returns the finished group."""
    g = Group(max_turns=max_turns)
    owners = {}
    while True:
        _check_machine(g.conv.machine)
        conv = g.conv
        machine = conv.machine
        if conv.concluded:
            if not machine.open_async_tasks and not machine.open_sync_tasks:
                return g
            task = data.draw(st.sampled_from(sorted(machine.open_async_tasks)))
            g.result(task, owners[task])
            continue
        if machine.state in (S, P):
            pending = machine.open_sync_tasks | machine.open_async_tasks
            task = data.draw(st.sampled_from(sorted(pending)))
            g.result(task, owners[task])
            continue
        speaker = data.draw(st.sampled_from(sorted(conv.expected)))
        if conv.forced:
            g.say(speaker, "conclusion")
            continue
        assigned_async = [
            t
            for t, _, k in assigned_tasks(g.frames)
            if k is MessageKind.ASYNC_TASK_ASSIGNMENT
        ]
        choices = ["discussion", "sync_task_assignment", "async_task_assignment"]
        choices.append("conclusion")
        if assigned_async:
            choices.append("pause_and_trigger")
        kind = data.draw(st.sampled_from(choices))
        if kind == "discussion":
            nxt = data.draw(st.lists(st.sampled_from(MEMBERS), max_size=1))
            g.say(speaker, kind, nxt)
        elif kind.endswith("assignment"):
            nxt = data.draw(
                st.lists(st.sampled_from(MEMBERS), min_size=1, max_size=3, unique=True)
            )
            msg = g.say(speaker, kind, nxt)
            owners.update(dict(task_ids_of(msg)))
        elif kind == "pause_and_trigger":
            triggers = data.draw(
                st.lists(
                    st.sampled_from(assigned_async), min_size=1, max_size=2, unique=True
                )
            )
            g.say(speaker, kind, triggers=triggers)
        else:
            g.say(speaker, kind)


class TestRandomPlay:

    @settings(max_examples=200, deadline=None)
    @given(st.data(), st.integers(min_value=1, max_value=8))
    def test_legal_play_replays_clean(self, data, max_turns):
        g = _drive(data, max_turns)
        assert is_quiescent(g.conv.machine)
        final, violations = replay(g.frames)
        assert violations == []
        assert final == g.conv
        assert [m.seq for m in g.frames] == list(range(len(g.frames)))
        turns = sum(1 for m in g.frames if m.kind.is_conversation)
        assert turns <= max_turns + 1

    @settings(max_examples=100, deadline=None)
    @given(st.data(), st.integers(min_value=2, max_value=6))
    def test_concluded_group_rejects_every_move(self, data, max_turns):
        g = _drive(data, max_turns)
        for kind in ("discussion", "sync_task_assignment", "conclusion"):
            speakers = [] if kind == "conclusion" else ["A"]
            for sender in MEMBERS:
                msg = make_message(
                    sender, "g0", kind, speakers, content="x", task_desc="t"
                )
                with pytest.raises(GroupConcluded):
                    g.conv.accept(msg)

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_moves_outside_the_table_rejected(self, data):
        g = Group()
        msg = g.say("A", "sync_task_assignment", ["B"])
        (task, _), = task_ids_of(msg)
        sender = data.draw(st.sampled_from(MEMBERS))
        kind = data.draw(
            st.sampled_from(["discussion", "async_task_assignment", "conclusion"])
        )
        speakers = [] if kind == "conclusion" else ["A"]
        bad = make_message(sender, "g0", kind, speakers, content="x", task_desc="t")
        with pytest.raises((IllegalTransition, NotYourTurn)):
            g.conv.accept(bad)
        g.result(task, "B")
        assert g.conv.state is D


class ReferenceMachine:
    """The edge table applied with plain sets, kept apart from ``advance``."""

    def __init__(self, max_turns):
        self.state = "discussion"
        self.turns = 0
        self.max_turns = max_turns
        self.sync = set()
        self.pending = set()
        self.triggers = set()
        self.assigned = set()

    def step(self, msg):
        """Apply `msg`; False (and no change) when it is illegal."""
        kind = msg.kind.value
        if kind == "system_notice":
            return True
        if kind == "task_result":
            task = msg.payload.task_id
            if task in self.sync:
                self.sync.remove(task)
                if self.state == "sync_assignment" and not self.sync:
                    self.state = EXPECTED_EDGES[(self.state, "all_sync_tasks_complete")]
                return True
            if task in self.pending:
                self.pending.remove(task)
                self.triggers.discard(task)
                if self.state == "pause_trigger" and not self.triggers:
                    self.state = EXPECTED_EDGES[(self.state, "all_triggers_complete")]
                return True
            return False

        target = EXPECTED_EDGES.get((self.state, kind))
        if target is None:
            return False
        if self.turns >= self.max_turns and kind != "conclusion":
            return False
        triggers = set(msg.payload.triggers or ())
        if kind == "pause_and_trigger" and not triggers <= self.assigned:
            return False

        self.turns += 1
        self.state = target
        if kind.endswith("assignment"):
            ids = {task for task, _ in task_ids_of(msg)}
            self.assigned |= ids
            if kind == "sync_task_assignment":
                self.sync |= ids
            else:
                self.pending |= ids
        elif kind == "pause_and_trigger":
            self.triggers = triggers & self.pending
            if not self.triggers:
                self.state = EXPECTED_EDGES[(self.state, "all_triggers_complete")]
        return True

    def agrees_with(self, machine):
        return (
            machine.state.value == self.state
            and machine.turn_count == self.turns
            and machine.open_sync_tasks == self.sync
            and machine.open_async_tasks == self.pending
            and machine.open_triggers == self.triggers
            and machine.assigned == self.assigned
        )


@st.composite
def moves(draw, assigned, seq):
    """Any kind with plausible fields; most moves are illegal where drawn."""
    kind = draw(st.sampled_from([k.value for k in MessageKind]))
    tasks = st.sampled_from(sorted(assigned) + ["unassigned"])
    speakers, fields = (), {"content": "x"}
    if kind == "task_result":
        fields.update(task_id=draw(tasks), task_conclusion="r", task_abstract="r")
    elif kind == "pause_and_trigger":
        fields["triggers"] = draw(st.lists(tasks, min_size=1, max_size=3, unique=True))
    elif kind.endswith("assignment"):
        speakers = draw(
            st.lists(st.sampled_from(MEMBERS), min_size=1, max_size=3, unique=True)
        )
        fields["task_desc"] = "t"
    elif kind == "discussion":
        speakers = draw(st.lists(st.sampled_from(MEMBERS), max_size=1))
    if kind == "system_notice":
        sender = SERVER_SENDER
    else:
        sender = draw(st.sampled_from(MEMBERS))
    return make_message(sender, "g0", kind, speakers, **fields).with_seq(seq)


class TestAgainstReference:

    @settings(
        max_examples=10_000,
        deadline=None,
        suppress_health_check=[HealthCheck.too_slow],
    )
    @given(st.data(), st.integers(min_value=1, max_value=6))
    def test_advance_matches_reference(self, data, max_turns):
        machine = ChatMachine(max_turns=max_turns)
        reference = ReferenceMachine(max_turns)
        length = data.draw(st.integers(min_value=1, max_value=16))
        for seq in range(1, length + 1):
            msg = data.draw(moves(reference.assigned, seq))
            if reference.step(msg):
                machine = advance(machine, msg)
            else:
                with pytest.raises(IllegalTransition):
                    advance(machine, msg)
            assert reference.agrees_with(machine)
            _check_machine(machine)


class TestReplay:

    def _clean(self):
        g = Group(max_turns=5)
        g.say("A", "discussion", ["B"])
        msg = g.say("B", "sync_task_assignment", ["C"])
        (task, _), = task_ids_of(msg)
        g.result(task, "C")
        g.say("B", "conclusion")
        return g.frames

    def test_clean(self):
        final, violations = replay(self._clean())
        assert violations == []
        assert final.concluded

    def test_empty(self):
        assert [v.code for v in replay([])[1]] == ["MissingSetup"]

    def test_missing_setup(self):
        frames = self._clean()[1:]
        final, violations = replay(frames)
        assert final is None
        assert violations[0].code == "MissingSetup"

    def test_wrong_speaker(self):
        frames = self._clean()
        forged = dataclasses.replace(
            frames[1], header=dataclasses.replace(frames[1].header, sender="C")
        )
        frames[1] = forged
        _, violations = replay(frames)
        assert str(violations[0]) == "NotYourTurn@1"

    def test_seq_gap(self):
        frames = self._clean()
        del frames[2]
        _, violations = replay(frames)
        assert violations[0].code == "SeqGap"

    def test_trace_bound(self):
        g = Group(max_turns=1)
        g.say("A", "discussion", ["B"])
        frames = list(g.frames)
        extra = make_message("A", "g0", "discussion", ["B"], content="again")
        for _ in range(2):
            frames.append(extra.with_seq(len(frames)))
        _, violations = replay(frames)
        assert "TraceBound" in {v.code for v in violations}

    def test_pause_discipline(self):
        g = Group()
        msg = g.say("A", "async_task_assignment", ["B"])
        (task, _), = task_ids_of(msg)
        g.say("A", "pause_and_trigger", triggers=[task])
        frames = list(g.frames)
        late = make_message("A", "g0", "discussion", ["B"], content="x")
        frames.append(late.with_seq(len(frames)))
        _, violations = replay(frames)
        assert [v.code for v in violations] == ["PauseDiscipline"]

    def test_assigned_tasks(self):
        frames = self._clean()
        tasks = assigned_tasks(frames)
        assert len(tasks) == 1
        assert tasks[0][1] == "C"
        assert tasks[0][2] is MessageKind.SYNC_TASK_ASSIGNMENT
