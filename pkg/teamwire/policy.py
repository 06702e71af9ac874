"""Decision policies: every choice a client makes about teams and talk.

A :obj:`Policy` decides which team formation tool to call, what to say
when the client holds the floor (one :obj:`UtteranceDecision` carries both
the next conversation state and the next speakers), how to summarize an
assigned task for the integrated agent, and how to conclude.

:obj:`ScriptedPolicy` replays decision records and is fully deterministic.
:obj:`RemotePolicy` asks a text generation service over HTTP.
"""

import abc
import collections
import dataclasses
import logging
import sys
import time

import requests

if sys.version_info >= (3, 12):  # pragma: no cover (PY12+)
    import importlib.resources as importlib_resources
else:  # pragma: no cover (<PY312)
    import importlib_resources

from teamwire.fsm import allowed
from teamwire.fsm import assigned_tasks
from teamwire.io import canonical_json
from teamwire.protocol import ASSIGNMENT_KINDS
from teamwire.protocol import MessageKind
from teamwire.protocol import message_to_dict
from teamwire.teaming import LaunchCall
from teamwire.teaming import SearchCall
from teamwire.utils import AdapterUnreachable
from teamwire.utils import IllegalDecision
from teamwire.utils import PolicyFailure
from teamwire.utils import ScriptExhausted
from teamwire.utils import TeamwireError

logger = logging.getLogger(__name__)

NO_RESULT = "NO RESULT"


@dataclasses.dataclass(frozen=True)
class UtteranceDecision:
    """What to say next: content, conversation kind, and next speakers.

    ``triggers`` lists task ids and is required exactly when the kind is
    ``pause_and_trigger``.
    """

    content: str
    kind: MessageKind
    next_speakers: tuple = ()
    triggers: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        object.__setattr__(self, "next_speakers", tuple(self.next_speakers))
        if self.triggers is not None:
            object.__setattr__(self, "triggers", tuple(self.triggers))

    def check(self, state, members):
        """Raise :obj:`~teamwire.utils.IllegalDecision` unless the decision
        is a legal move from `state` within the group `members`."""
        if not self.kind.is_conversation:
            raise IllegalDecision(f"{self.kind.value} is not a conversation move")
        try:
            allowed(state, self.kind)
        except TeamwireError as e:
            raise IllegalDecision(str(e)) from e
        strangers = [name for name in self.next_speakers if name not in members]
        if strangers:
            raise IllegalDecision(f"next speakers {strangers} are not members")
        if self.kind is MessageKind.DISCUSSION and len(self.next_speakers) > 1:
            raise IllegalDecision("a discussion names at most one next speaker")
        if self.kind in ASSIGNMENT_KINDS and not self.next_speakers:
            raise IllegalDecision(f"{self.kind.value} must name its assignees")
        if self.kind is MessageKind.CONCLUSION and self.next_speakers:
            raise IllegalDecision("a conclusion names no next speaker")
        if (self.kind is MessageKind.PAUSE_AND_TRIGGER) != bool(self.triggers):
            raise IllegalDecision("triggers are required exactly for pause_and_trigger")

    @classmethod
    def from_dict(cls, obj):
        return cls(
            content=obj.get("content", ""),
            kind=obj["kind"],
            next_speakers=obj.get("next_speakers") or (),
            triggers=obj.get("triggers"),
        )


def goal_of(transcript):
    """Goal announced by a transcript's setup notice ("" when unknown)."""
    if transcript and transcript[0].payload.goal is not None:
        return transcript[0].payload.goal
    return ""


def last_task_conclusion(transcript):
    for msg in reversed(transcript):
        if msg.kind is MessageKind.TASK_RESULT:
            return msg.payload.task_conclusion
    return None


class Policy(abc.ABC):
    """Base class for decision policies.

    .. note::

        A policy belongs to one client and is only called from that client's
        dispatch loop; it need not be thread safe.
    """

    @abc.abstractmethod
    def decide_team_action(self, task, search_results, contacts, calls_so_far):
        """Return a :obj:`~teamwire.teaming.SearchCall` or
        :obj:`~teamwire.teaming.LaunchCall`."""
        return

    @abc.abstractmethod
    def decide_utterance(self, transcript, state, membership):
        """Return an :obj:`UtteranceDecision` for the floor holder."""
        return

    @abc.abstractmethod
    def summarize_task(self, transcript, assignment, agent_name):
        """Task description for the integrated agent."""
        return

    @abc.abstractmethod
    def conclude(self, transcript):
        """Final answer to the group goal."""
        return

    def wants_team(self, task_desc):
        """Whether an assigned task should be handled by a sub-group."""
        return False

    def evaluate_teammate(self, agent_name, transcript):
        """Notes kept about a teammate after a group concludes."""
        return "collaborated"


_FAMILIES = {
    "search": "team",
    "launch": "team",
    "say": "say",
    "summarize": "summarize",
    "conclude": "conclude",
}


def _check_record(index, record):
    if not isinstance(record, dict):
        raise ValueError(f"script record {index} is not an object")
    if not isinstance(record.get("goal"), str):
        raise ValueError(f"script record {index} needs a goal")
    action = record.get("action")
    if action not in _FAMILIES:
        raise ValueError(f"script record {index} has unknown action {action!r}")
    if action == "search" and not record.get("characteristics"):
        raise ValueError(f"script record {index}: search needs characteristics")
    if action == "say":
        kind = MessageKind(record.get("kind"))
        if not kind.is_conversation:
            raise ValueError(f"script record {index}: {kind.value} cannot be said")
    if action in ("summarize", "conclude") and not isinstance(record.get("text"), str):
        raise ValueError(f"script record {index}: {action} needs text")


class ScriptedPolicy(Policy):
    """Policy replaying decision records.

    Records are grouped by the goal they apply to and consumed in order,
    separately for each family of decisions (team formation, utterances,
    summaries, conclusions). Decisions depend on the goal and the step only.

    Parameters
    ----------
    records : :obj:`list` of :obj:`dict`
        Each record has a ``goal`` and an ``action``:

        * ``search`` with ``characteristics`` (list of text)
        * ``launch`` with ``team_members`` (list of names, or null for solo)
        * ``say`` with ``kind``, ``content``, ``next_speakers``, and for a
          pause ``triggers``: the names of agents whose async tasks in the
          group are awaited
        * ``summarize`` with ``text``
        * ``conclude`` with ``text``, where ``{result}`` is replaced by the
          last task conclusion of the group

    Raises
    ------
    ValueError
        A record is malformed.

    Examples
    --------

    >>> policy = ScriptedPolicy([
    ...     {"goal": "g", "action": "search", "characteristics": ["coding"]},
    ...     {"goal": "g", "action": "launch", "team_members": ["Coder"]},
    ... ])
    >>> policy.decide_team_action("g", [], [], 0)
    SearchCall(characteristics=('coding',))
    >>> policy.decide_team_action("g", ["Coder"], [], 1).team_members
    ('Coder',)
    """

    def __init__(self, records=()):
        self._scripts = collections.defaultdict(list)
        self._cursor = collections.Counter()
        for index, record in enumerate(records):
            _check_record(index, record)
            family = _FAMILIES[record["action"]]
            self._scripts[(record["goal"], family)].append(dict(record))

    def has_script(self, goal, family):
        return bool(self._scripts.get((goal, family)))

    def _next(self, goal, family):
        key = (goal, family)
        step = self._cursor[key]
        script = self._scripts.get(key, [])
        if step >= len(script):
            raise ScriptExhausted(f"no {family} step {step} scripted for goal {goal!r}")
        self._cursor[key] += 1
        return step, script[step]

    def decide_team_action(self, task, search_results, contacts, calls_so_far):
        _, record = self._next(task, "team")
        if record["action"] == "search":
            return SearchCall(tuple(record["characteristics"]))
        return LaunchCall(record.get("team_members"))

    def decide_utterance(self, transcript, state, membership):
        goal = goal_of(transcript)
        step, record = self._next(goal, "say")
        kind = MessageKind(record["kind"])
        triggers = None
        if kind is MessageKind.PAUSE_AND_TRIGGER:
            names = set(record.get("triggers") or ())
            triggers = tuple(
                task_id
                for task_id, assignee, mode in assigned_tasks(transcript)
                if assignee in names and mode is MessageKind.ASYNC_TASK_ASSIGNMENT
            )
        decision = UtteranceDecision(
            content=record.get("content", ""),
            kind=kind,
            next_speakers=record.get("next_speakers") or (),
            triggers=triggers,
        )
        try:
            decision.check(state, membership)
        except IllegalDecision as e:
            raise IllegalDecision(f"say step {step} for goal {goal!r}: {e}") from e
        return decision

    def summarize_task(self, transcript, assignment, agent_name):
        goal = goal_of(transcript)
        if not self.has_script(goal, "summarize"):
            return assignment.payload.content or ""
        return self._next(goal, "summarize")[1]["text"]

    def conclude(self, transcript):
        goal = goal_of(transcript)
        if not self.has_script(goal, "conclude"):
            return NO_RESULT
        text = self._next(goal, "conclude")[1]["text"]
        return text.replace("{result}", last_task_conclusion(transcript) or "")

    def wants_team(self, task_desc):
        return self.has_script(task_desc, "team")


def load_prompt(name):
    """Text of the bundled prompt `name` (``teamwire/prompts/<name>.txt``)."""
    resource = importlib_resources.files("teamwire.prompts").joinpath(name + ".txt")
    return resource.read_text(encoding="utf-8")


class RemotePolicy(Policy):
    """Policy backed by a text generation service.

    Every decision is one ``POST`` of ``{system_prompt, messages,
    expected_schema}`` to `endpoint`; the response body is the decision as
    JSON.

    Parameters
    ----------
    endpoint : :obj:`str`
    timeout : :obj:`float`
        Seconds per request.
    retries : :obj:`int`
        Attempts on timeouts, connection errors, and 5xx responses.
    session : :obj:`requests.Session`, optional
    """

    def __init__(self, endpoint, timeout=30.0, retries=3, session=None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.session = session or requests.Session()

    def _call(self, prompt, messages, schema):
        payload = {
            "system_prompt": load_prompt(prompt),
            "messages": messages,
            "expected_schema": schema,
        }
        last_error = None
        for attempt in range(self.retries):
            try:
                response = self.session.post(
                    self.endpoint, json=payload, timeout=self.timeout
                )
            except (
                requests.exceptions.Timeout,
                requests.exceptions.ConnectionError,
            ) as e:
                last_error = e
            else:
                if response.status_code >= 500:
                    last_error = f"status {response.status_code}"
                elif response.status_code >= 400:
                    raise AdapterUnreachable(
                        f"{self.endpoint} answered"
                        f" {response.status_code}: {response.text}"
                    )
                else:
                    try:
                        reply = response.json()
                    except ValueError as e:
                        raise PolicyFailure(f"{prompt}: response is not JSON") from e
                    if not isinstance(reply, dict):
                        raise PolicyFailure(f"{prompt}: response is not an object")
                    return reply
            if attempt + 1 < self.retries:
                time.sleep(2**attempt * 0.1)
        raise AdapterUnreachable(
            f"{self.endpoint} failed after {self.retries} attempts: {last_error}"
        )

    @staticmethod
    def _messages(transcript):
        return [
            {"role": "user", "content": canonical_json(message_to_dict(msg))}
            for msg in transcript
        ]

    def decide_team_action(self, task, search_results, contacts, calls_so_far):
        reply = self._call(
            "team_action",
            [
                {"role": "user", "content": task},
                {"role": "user", "content": canonical_json({
                    "search_results": list(search_results),
                    "contacts": [c.agent_name for c in contacts],
                    "calls_so_far": calls_so_far,
                })},
            ],
            {"tool": ["search", "launch"], "characteristics": "list[str]",
             "team_members": "list[str] | null"},
        )
        if reply.get("tool") == "search":
            return SearchCall(tuple(reply["characteristics"]))
        if reply.get("tool") == "launch":
            return LaunchCall(reply.get("team_members"))
        raise PolicyFailure(f"unknown tool {reply.get('tool')!r}")

    def decide_utterance(self, transcript, state, membership):
        messages = self._messages(transcript)
        messages.append({"role": "user", "content": canonical_json({
            "state": state.value, "members": list(membership)})})
        reply = self._call(
            "utterance",
            messages,
            {"content": "str", "kind": "str", "next_speakers": "list[str]",
             "triggers": "list[str] | null"},
        )
        try:
            decision = UtteranceDecision.from_dict(reply)
        except (KeyError, ValueError) as e:
            raise PolicyFailure(f"unusable utterance: {e}") from e
        decision.check(state, membership)
        return decision

    def summarize_task(self, transcript, assignment, agent_name):
        messages = self._messages(transcript)
        messages.append({"role": "user", "content": f"You are {agent_name}."})
        return self._call("summarize", messages, {"text": "str"}).get("text", "")

    def conclude(self, transcript):
        reply = self._call("conclude", self._messages(transcript), {"text": "str"})
        text = reply.get("text")
        if not text:
            raise PolicyFailure("empty conclusion")
        return text

    def wants_team(self, task_desc):
        reply = self._call(
            "wants_team", [{"role": "user", "content": task_desc}], {"team": "bool"}
        )
        return bool(reply.get("team"))

    def evaluate_teammate(self, agent_name, transcript):
        messages = self._messages(transcript)
        messages.append({"role": "user", "content": f"Evaluate {agent_name}."})
        return self._call("evaluate", messages, {"text": "str"}).get("text", "")
