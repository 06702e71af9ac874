"""Agent message schema, canonical encoding, and per-kind validation.

Every frame exchanged between clients and the server is one
:obj:`AgentMessage`, encoded as a single line of canonical JSON (sorted
keys, compact separators, UTF-8) terminated by one newline. Optional fields
that are absent are omitted from the encoding, never written as ``null``,
so each message has exactly one byte representation.

A frame looks like::

    {"header":{"comm_id":"g0","sender":"A","state":"communication"},
     "payload":{"content":"hi","kind":"discussion","next_speaker":["B"]},
     "seq":3}

(shown wrapped here; on the wire it is a single line).
"""

import dataclasses
import enum
import json
import uuid

from teamwire.io import canonical_json
from teamwire.utils import MalformedFrame
from teamwire.utils import SchemaViolation
from teamwire.utils import ValidationFailed

SERVER_SENDER = "@server"

_TASK_NAMESPACE = uuid.UUID("5b0c1e4a-6a3d-4f67-9c1e-2d8f3b7a9e10")


class MessageKind(str, enum.Enum):
    """Kind of a message.

    The first five kinds are conversation moves; they advance the group
    state machine and consume one turn. ``task_result`` and
    ``system_notice`` are plumbing and never count as turns.
    """

    DISCUSSION = "discussion"
    SYNC_TASK_ASSIGNMENT = "sync_task_assignment"
    ASYNC_TASK_ASSIGNMENT = "async_task_assignment"
    PAUSE_AND_TRIGGER = "pause_and_trigger"
    CONCLUSION = "conclusion"
    TASK_RESULT = "task_result"
    SYSTEM_NOTICE = "system_notice"

    @property
    def is_conversation(self):
        return self not in PLUMBING_KINDS

    @property
    def is_assignment(self):
        return self in ASSIGNMENT_KINDS


PLUMBING_KINDS = frozenset({MessageKind.TASK_RESULT, MessageKind.SYSTEM_NOTICE})
ASSIGNMENT_KINDS = frozenset(
    {MessageKind.SYNC_TASK_ASSIGNMENT, MessageKind.ASYNC_TASK_ASSIGNMENT}
)
CONVERSATION_KINDS = frozenset(MessageKind) - PLUMBING_KINDS

# control envelope ops a connection may use before it connects as an agent
ANONYMOUS_OPS = frozenset({"register", "search", "profile"})


class HeaderState(str, enum.Enum):
    """Phase of the group chat a message belongs to."""

    TEAM_FORMATION = "team_formation"
    COMMUNICATION = "communication"


@dataclasses.dataclass(frozen=True)
class MessageHeader:
    sender: str
    state: HeaderState = HeaderState.COMMUNICATION
    comm_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "state", HeaderState(self.state))


_OPTIONAL_TEXT = ("goal", "content", "task_id", "task_desc", "task_conclusion",
                  "task_abstract")
_OPTIONAL_NAMES = ("team_members", "triggers")


@dataclasses.dataclass(frozen=True)
class MessagePayload:
    kind: MessageKind
    next_speaker: tuple = ()
    goal: str | None = None
    team_members: tuple | None = None
    team_up_depth: int | None = None
    max_turns: int | None = None
    content: str | None = None
    task_id: str | None = None
    task_desc: str | None = None
    task_conclusion: str | None = None
    task_abstract: str | None = None
    triggers: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        object.__setattr__(self, "next_speaker", tuple(self.next_speaker))
        for name in _OPTIONAL_NAMES:
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))


@dataclasses.dataclass(frozen=True)
class AgentMessage:
    """One frame: header, payload, and the server-assigned sequence number.

    ``seq`` is ``None`` until the server routes the message.
    """

    header: MessageHeader
    payload: MessagePayload
    seq: int | None = None

    @property
    def sender(self):
        return self.header.sender

    @property
    def comm_id(self):
        return self.header.comm_id

    @property
    def kind(self):
        return self.payload.kind

    def with_seq(self, seq):
        """Copy of this message with ``seq`` set."""
        return dataclasses.replace(self, seq=seq)


def make_message(sender, comm_id, kind, next_speaker=(), state=None, **fields):
    """Build a message from flat arguments.

    Examples
    --------

    >>> msg = make_message("A", "g0", "discussion", ["B"], content="hi")
    >>> msg.payload.next_speaker
    ('B',)
    """
    header = MessageHeader(
        sender=sender,
        state=state or HeaderState.COMMUNICATION,
        comm_id=comm_id,
    )
    payload = MessagePayload(kind=kind, next_speaker=next_speaker, **fields)
    return AgentMessage(header=header, payload=payload)


def validate_message(msg):
    """List every invariant `msg` violates.

    Parameters
    ----------
    msg : :obj:`AgentMessage`

    Returns
    -------
    violations : :obj:`list` of :obj:`str`
        Empty when the message is valid. Encoding and decoding succeed if
        and only if this list is empty.

    Examples
    --------

    >>> ok = make_message("A", "g0", "conclusion", content="done")
    >>> validate_message(ok)
    []
    >>> bad = make_message("A", "g0", "conclusion", ["B"], content="done")
    >>> validate_message(bad)
    ['conclusion must not name a next_speaker']
    """
    out = []
    header, payload = msg.header, msg.payload

    if not header.sender:
        out.append("header.sender must be non-empty")
    if header.state is HeaderState.COMMUNICATION and not header.comm_id:
        out.append("header.comm_id must be non-empty in the communication state")
    if msg.seq is not None and msg.seq < 0:
        out.append("seq must be non-negative")

    if any(not name for name in payload.next_speaker):
        out.append("next_speaker entries must be non-empty")
    if payload.team_up_depth is not None and payload.team_up_depth < 0:
        out.append("team_up_depth must be non-negative")
    if payload.max_turns is not None and payload.max_turns < 1:
        out.append("max_turns must be positive")

    kind = payload.kind
    if kind is MessageKind.DISCUSSION and len(payload.next_speaker) > 1:
        out.append("discussion may name at most one next_speaker")
    elif kind in ASSIGNMENT_KINDS and len(payload.next_speaker) < 1:
        out.append(f"{kind.value} must name at least one next_speaker")
    elif kind is MessageKind.PAUSE_AND_TRIGGER and not payload.triggers:
        out.append("pause_and_trigger must list at least one trigger")
    elif kind is MessageKind.CONCLUSION:
        if payload.next_speaker:
            out.append("conclusion must not name a next_speaker")
        if not payload.content:
            out.append("conclusion must carry non-empty content")
    elif kind is MessageKind.TASK_RESULT:
        for name in ("task_id", "task_conclusion", "task_abstract"):
            if getattr(payload, name) is None:
                out.append(f"task_result must carry {name}")
    return out


def message_to_dict(msg):
    """Plain `dict` form of a message, with absent optionals omitted."""
    header = {
        "comm_id": msg.header.comm_id,
        "sender": msg.header.sender,
        "state": msg.header.state.value,
    }
    payload = {
        "kind": msg.payload.kind.value,
        "next_speaker": list(msg.payload.next_speaker),
    }
    for field in dataclasses.fields(MessagePayload):
        if field.name in payload:
            continue
        value = getattr(msg.payload, field.name)
        if value is None:
            continue
        payload[field.name] = list(value) if isinstance(value, tuple) else value
    out = {"header": header, "payload": payload}
    if msg.seq is not None:
        out["seq"] = msg.seq
    return out


def _check_keys(where, obj, required, optional=()):
    if not isinstance(obj, dict):
        raise SchemaViolation(f"{where} must be a JSON object")
    missing = [key for key in required if key not in obj]
    extra = sorted(set(obj) - set(required) - set(optional))
    if missing:
        raise SchemaViolation(f"{where} is missing {missing}")
    if extra:
        raise SchemaViolation(f"{where} has unknown keys {extra}")
    nulls = sorted(key for key, value in obj.items() if value is None)
    if nulls:
        raise SchemaViolation(f"{where} has null values for {nulls}")


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _check_type(where, value, kind):
    if kind == "str":
        good = isinstance(value, str)
    elif kind == "int":
        good = _is_int(value)
    else:
        good = isinstance(value, list) and all(isinstance(v, str) for v in value)
    if not good:
        raise SchemaViolation(f"{where} has the wrong type")


_PAYLOAD_TYPES = {
    "kind": "str",
    "next_speaker": "names",
    "goal": "str",
    "team_members": "names",
    "team_up_depth": "int",
    "max_turns": "int",
    "content": "str",
    "task_id": "str",
    "task_desc": "str",
    "task_conclusion": "str",
    "task_abstract": "str",
    "triggers": "names",
}


def message_from_dict(obj):
    """Build a message from its `dict` form, enforcing the strict schema.

    Raises
    ------
    SchemaViolation
        Missing, unknown, null, or mistyped fields.
    ValidationFailed
        The message is well formed but breaks a kind/field rule.
    """
    _check_keys("frame", obj, ("header", "payload"), ("seq",))
    _check_keys("header", obj["header"], ("sender", "state", "comm_id"))
    _check_keys(
        "payload",
        obj["payload"],
        ("kind", "next_speaker"),
        tuple(set(_PAYLOAD_TYPES) - {"kind", "next_speaker"}),
    )
    for key in ("sender", "state", "comm_id"):
        _check_type(f"header.{key}", obj["header"][key], "str")
    for key, value in obj["payload"].items():
        _check_type(f"payload.{key}", value, _PAYLOAD_TYPES[key])
    if "seq" in obj:
        _check_type("seq", obj["seq"], "int")

    try:
        state = HeaderState(obj["header"]["state"])
    except ValueError as e:
        raise SchemaViolation(f"unknown header.state {obj['header']['state']!r}") from e
    try:
        kind = MessageKind(obj["payload"]["kind"])
    except ValueError as e:
        raise SchemaViolation(f"unknown payload.kind {obj['payload']['kind']!r}") from e

    fields = dict(obj["payload"])
    fields["kind"] = kind
    msg = AgentMessage(
        header=MessageHeader(
            sender=obj["header"]["sender"],
            state=state,
            comm_id=obj["header"]["comm_id"],
        ),
        payload=MessagePayload(**fields),
        seq=obj.get("seq"),
    )
    violations = validate_message(msg)
    if violations:
        raise ValidationFailed(violations)
    return msg


def encode_message(msg):
    """Encode a message as one canonical NDJSON frame.

    Parameters
    ----------
    msg : :obj:`AgentMessage`

    Returns
    -------
    frame : :obj:`bytes`
        One UTF-8 JSON object followed by a single ``\\n``.

    Raises
    ------
    ValidationFailed
        When :func:`validate_message` reports any violation.

    Examples
    --------

    >>> msg = make_message("A", "g0", "discussion", ["B"], content="hi")
    >>> frame = encode_message(msg)
    >>> frame[:64]
    b'{"header":{"comm_id":"g0","sender":"A","state":"communication"},'
    >>> frame[64:]
    b'"payload":{"content":"hi","kind":"discussion","next_speaker":["B"]}}\\n'
    """
    violations = validate_message(msg)
    if violations:
        raise ValidationFailed(violations)
    return (canonical_json(message_to_dict(msg)) + "\n").encode("utf-8")


def decode_message(frame):
    """Decode one NDJSON frame.

    Parameters
    ----------
    frame : :obj:`bytes` or :obj:`str`
        Exactly one JSON object terminated by exactly one newline.

    Raises
    ------
    MalformedFrame
        Not UTF-8, not newline terminated, or not valid JSON.
    SchemaViolation
        Missing, unknown, null, or mistyped fields.
    ValidationFailed
        The message breaks a kind/field coupling rule.
    """
    if isinstance(frame, str):
        try:
            frame = frame.encode("utf-8")
        except UnicodeEncodeError as e:
            raise MalformedFrame(f"frame is not valid UTF-8: {e}") from e
    if not isinstance(frame, (bytes, bytearray)):
        raise MalformedFrame("frame must be bytes")
    if not frame.endswith(b"\n") or frame.count(b"\n") != 1:
        raise MalformedFrame("frame must be a single newline terminated line")
    try:
        obj = json.loads(frame.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as e:
        raise MalformedFrame(f"frame is not valid JSON: {e}") from e
    return message_from_dict(obj)


def derive_task_id(comm_id, seq, assignee):
    """Task id implied by an assignment frame for one assignee.

    Every member can compute it from the routed frame alone, so the
    assigner, the assignee, the server, and transcript replay agree on the
    id without another round trip.

    Examples
    --------

    >>> derive_task_id("g0", 2, "C") == derive_task_id("g0", 2, "C")
    True
    >>> derive_task_id("g0", 2, "C") == derive_task_id("g0", 2, "B")
    False
    """
    return str(uuid.uuid5(_TASK_NAMESPACE, f"{comm_id}/{seq}/{assignee}"))


def task_ids_of(msg):
    """``(task_id, assignee)`` pairs defined by a routed assignment frame.

    Returns an empty list for every other kind.
    """
    if msg.kind not in ASSIGNMENT_KINDS:
        return []
    if msg.seq is None:
        raise ValueError("task ids are only defined once the server sets seq")
    return [
        (derive_task_id(msg.comm_id, msg.seq, name), name)
        for name in msg.payload.next_speaker
    ]
