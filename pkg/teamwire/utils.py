import re
import uuid

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")
_UUID_PATTERN = re.compile(
    r"[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}"
)


class TeamwireError(Exception):
    """Base class of every error raised by teamwire.

    Each subclass has a ``code``, which is the class name. The code is what
    travels on the wire in a failed reply envelope, and what appears in the
    violation lists produced by transcript replay.

    Parameters
    ----------
    detail : :obj:`str`, optional
        Human readable description of what went wrong.

    Examples
    --------

    >>> from teamwire.utils import NotYourTurn
    >>> err = NotYourTurn("B may not speak now")
    >>> err.code
    'NotYourTurn'
    >>> str(err)
    'B may not speak now'
    """

    def __init__(self, detail=""):
        """Documented in class docstring."""
        self.detail = detail
        super().__init__(detail)

    def __str__(self):
        # KeyError subclasses would otherwise repr() the detail
        return str(self.detail)

    @property
    def code(self):
        return type(self).__name__


# protocol
class MalformedFrame(TeamwireError, ValueError):
    """A frame is not a newline terminated UTF-8 JSON object."""


class SchemaViolation(TeamwireError, ValueError):
    """A frame has missing, extra, or wrongly typed fields."""


class ValidationFailed(TeamwireError, ValueError):
    """A message breaks one or more kind/field coupling rules.

    Parameters
    ----------
    violations : :obj:`list` of :obj:`str`
        The violated invariants, as returned by
        :func:`~teamwire.protocol.validate_message`.
    """

    def __init__(self, violations):
        """Documented in class docstring."""
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# registry
class DuplicateName(TeamwireError, KeyError):
    """An agent with this name is already registered."""


class NotFound(TeamwireError, KeyError):
    """No agent with this name is registered."""


# server
class AuthFailed(TeamwireError, PermissionError):
    """The connect token does not match the shared token."""


class UnknownAgent(TeamwireError, KeyError):
    """The connecting agent is not registered."""


class AlreadyConnected(TeamwireError):
    """The agent already has an online session."""


class NotConnected(TeamwireError):
    """The agent has no online session."""


class UnknownMember(TeamwireError, KeyError):
    """A requested team member is not registered."""


class DepthExceeded(TeamwireError, ValueError):
    """A group would be nested deeper than the configured maximum."""


class UnknownGroup(TeamwireError, KeyError):
    """No group chat has this comm_id."""


class NotMember(TeamwireError):
    """The sender is not a member of the group chat."""


class NotYourTurn(TeamwireError):
    """The sender is not among the expected speakers."""


class GroupConcluded(TeamwireError):
    """The group chat has already concluded."""


# conversation state machine
class IllegalTransition(TeamwireError, ValueError):
    """The input has no edge from the current conversation state."""


class TurnBudgetExhausted(IllegalTransition):
    """The turn budget is spent and the input is not a conclusion."""


class UnknownTask(IllegalTransition):
    """A task result or trigger names a task that is not open."""


# client
class StaleSeq(TeamwireError):
    """A delivered frame does not follow the local transcript."""


class PolicyFailure(TeamwireError):
    """The policy returned an unusable answer."""


class AgentFailure(TeamwireError):
    """The integrated agent raised or reported a failure."""


class TaskTimeout(TeamwireError, TimeoutError):
    """The integrated agent did not finish in time."""


# teaming
class ServerUnreachable(TeamwireError, ConnectionError):
    """The link to the server is closed or cannot be opened."""


class LaunchRejected(TeamwireError):
    """The server refused to set up the group chat."""


# policy
class ScriptExhausted(TeamwireError, LookupError):
    """A scripted policy ran past the end of its script."""


class IllegalDecision(TeamwireError, ValueError):
    """A policy decision is illegal for the current group state."""


class AdapterUnreachable(TeamwireError, ConnectionError):
    """The remote policy endpoint did not answer."""


# harness
class ScenarioInvalid(TeamwireError, ValueError):
    """A scenario document does not match the scenario schema."""


class Deadline(TeamwireError, TimeoutError):
    """A scenario did not reach quiescence before its deadline."""


class ExpectationFailed(TeamwireError, AssertionError):
    """A scenario run did not meet its expectations."""


class MalformedLog(TeamwireError, ValueError):
    """A transcript log cannot be read."""


def _all_error_classes():
    found = {}
    stack = [TeamwireError]
    while stack:
        cls = stack.pop()
        found[cls.__name__] = cls
        stack.extend(cls.__subclasses__())
    return found


def error_from_code(code, detail=""):
    """Rebuild an error from its wire code.

    Unknown codes come back as a plain :obj:`TeamwireError` so that a newer
    server never crashes an older client.

    Examples
    --------

    >>> err = error_from_code("UnknownGroup", "no such comm_id: g9")
    >>> type(err).__name__
    'UnknownGroup'
    """
    cls = _all_error_classes().get(code, TeamwireError)
    if cls is ValidationFailed:
        return cls([detail])
    return cls(detail)


def tokenize(text):
    """Split text into lowercase alphanumeric tokens.

    Empty tokens are dropped; there is no stemming and there are no
    stopwords.

    Examples
    --------

    >>> tokenize("Personal-finance & BUDGETING, 2024!")
    ['personal', 'finance', 'budgeting', '2024']
    """
    return [tok for tok in _TOKEN_SPLIT.split(text.lower()) if tok]


def new_id():
    """Return a fresh random identifier (UUIDv4 string)."""
    return str(uuid.uuid4())


def is_uuid(text):
    """Whether `text` is exactly one UUID string."""
    return isinstance(text, str) and _UUID_PATTERN.fullmatch(text) is not None


def normalize_ids(lines):
    """Rename every UUID in a sequence of text lines.

    Ids are renamed to ``<id-1>``, ``<id-2>``, ... in first-seen order, so
    two runs that differ only by their random ids produce identical text.
    The same id always gets the same name across all lines.

    Parameters
    ----------
    lines : iterable of :obj:`str`
        Transcript lines, typically encoded frames.

    Returns
    -------
    normalized : :obj:`list` of :obj:`str`

    Examples
    --------

    >>> a = "6f1c2d3e-0000-4000-8000-000000000001"
    >>> b = "6f1c2d3e-0000-4000-8000-000000000002"
    >>> normalize_ids([f"{a} {b}", f"{b}"])
    ['<id-1> <id-2>', '<id-2>']
    """
    names = {}

    def _rename(match):
        found = match.group(0)
        if found not in names:
            names[found] = f"<id-{len(names) + 1}>"
        return names[found]

    return [_UUID_PATTERN.sub(_rename, line) for line in lines]


def abstract_of(text, limit=200):
    """Single-line abstract: the first `limit` characters, whitespace folded.

    Examples
    --------

    >>> abstract_of("line one\\nline   two", limit=12)
    'line one lin'
    """
    return " ".join(text.split())[:limit]
