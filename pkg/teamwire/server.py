"""Central hub: sessions, group setup, and ordered message routing.

:class:`Hub` holds all server state and implements every server operation
without any transport. :class:`HubServer` exposes a hub on a TCP port,
speaking newline-delimited JSON envelopes:

* client to server: ``{"op": <name>, "id": <int>, ...arguments}``
* server to client: a routed frame (a bare agent message), or a reply
  ``{"reply": <id>, "ok": true, "result": ...}`` /
  ``{"reply": <id>, "ok": false, "error": <code>, "detail": <text>}``

The first envelope on a connection is normally ``connect``; only the
discovery ops of :data:`~teamwire.protocol.ANONYMOUS_OPS` work before it.
"""

import asyncio
import collections
import dataclasses
import enum
import json
import logging
import os
import threading

from teamwire.config import Config
from teamwire.fsm import Conversation
from teamwire.fsm import is_quiescent
from teamwire.io import FileLog
from teamwire.io import canonical_json
from teamwire.io import open_log
from teamwire.protocol import ANONYMOUS_OPS
from teamwire.protocol import SERVER_SENDER
from teamwire.protocol import MessageKind
from teamwire.protocol import decode_message
from teamwire.protocol import encode_message
from teamwire.protocol import make_message
from teamwire.protocol import message_from_dict
from teamwire.protocol import message_to_dict
from teamwire.protocol import validate_message
from teamwire.registry import AgentProfile
from teamwire.registry import Registry
from teamwire.registry import SearchQuery
from teamwire.utils import AlreadyConnected
from teamwire.utils import AuthFailed
from teamwire.utils import DepthExceeded
from teamwire.utils import MalformedFrame
from teamwire.utils import NotConnected
from teamwire.utils import NotMember
from teamwire.utils import SchemaViolation
from teamwire.utils import TeamwireError
from teamwire.utils import UnknownAgent
from teamwire.utils import UnknownGroup
from teamwire.utils import UnknownMember
from teamwire.utils import UnknownTask
from teamwire.utils import ValidationFailed
from teamwire.utils import new_id

logger = logging.getLogger(__name__)

NOTICE_FORMED = "group formed"
NOTICE_RESUME = "resume"
NOTICE_CONCLUDE = "conclude: turn budget spent"


class SessionStatus(str, enum.Enum):
    ONLINE = "online"
    OFFLINE = "offline"


class Session:
    """One agent's connection and its offline queue.

    Sends, queueing, and the flush on reconnect hold :attr:`lock`, so frames
    reach the channel in the order they were handed to the session.

    Parameters
    ----------
    agent_name : :obj:`str`
    cap : :obj:`int`
        Frames kept while offline; the oldest are dropped beyond this.
    """

    def __init__(self, agent_name, cap=1024):
        self.agent_name = agent_name
        self.channel = None
        self.status = SessionStatus.OFFLINE
        self.pending = collections.deque()
        self.cap = cap
        self.dropped = 0
        self.lock = threading.RLock()

    @property
    def online(self):
        return self.status is SessionStatus.ONLINE

    def attach(self, channel):
        """Go online on `channel`; queued frames are sent first.

        Returns
        -------
        flushed : :obj:`int`
            Queued frames delivered.
        """
        with self.lock:
            self.channel = channel
            self.status = SessionStatus.ONLINE
            return self.flush()

    def detach(self):
        with self.lock:
            self.channel = None
            self.status = SessionStatus.OFFLINE

    def deliver(self, frame):
        """Send `frame` or queue it.

        Returns
        -------
        outcome : :obj:`str`
            ``"delivered"``, ``"deferred"``, or ``"lost"`` (deferred, and
            the oldest queued frame was dropped to make room).
        """
        with self.lock:
            if self.online and not self.pending:
                try:
                    self.channel.send(frame)
                    return "delivered"
                except (ConnectionError, OSError):
                    logger.warning("channel of %s broke; queueing", self.agent_name)
                    self.detach()
            outcome = "deferred"
            if len(self.pending) >= self.cap:
                self.pending.popleft()
                self.dropped += 1
                logger.warning(
                    "offline queue of %s full; dropped oldest frame", self.agent_name
                )
                outcome = "lost"
            self.pending.append(frame)
            if self.online:
                self.flush()
            return outcome

    def flush(self):
        """Deliver queued frames in arrival order; returns how many."""
        count = 0
        with self.lock:
            while self.pending and self.online:
                try:
                    self.channel.send(self.pending[0])
                except (ConnectionError, OSError):
                    logger.warning("channel of %s broke; queueing", self.agent_name)
                    self.detach()
                    break
                self.pending.popleft()
                count += 1
        return count


@dataclasses.dataclass(frozen=True)
class DeliveryReport:
    """What happened to one routed frame.

    ``lost`` names members whose offline queue overflowed (a loss marker).
    ``notices`` holds the reports of server notices routed right after it.
    """

    comm_id: str
    seq: int
    delivered: tuple
    deferred: tuple = ()
    lost: tuple = ()
    notices: tuple = ()

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["notices"] = [n.to_dict() for n in self.notices]
        for key in ("delivered", "deferred", "lost"):
            out[key] = list(out[key])
        return out


class GroupRecord:
    """Server-side state of one group chat.

    The conversation (machine and floor) is replaced on every routed frame
    while :attr:`lock` is held, so sequence numbers and state updates of one
    group are serialized.
    """

    def __init__(self, conversation, parent_task=None, log=None):
        self.conversation = conversation
        self.parent_task = parent_task
        self.transcript = []
        self.lock = threading.Lock()
        self.log = log

    @property
    def comm_id(self):
        return self.conversation.comm_id

    @property
    def goal(self):
        return self.conversation.goal

    @property
    def team_members(self):
        return self.conversation.members

    @property
    def initiator(self):
        return self.conversation.initiator

    @property
    def fsm_state(self):
        return self.conversation.state

    @property
    def next_seq(self):
        return self.conversation.next_seq

    @property
    def expected_speakers(self):
        return self.conversation.expected

    @property
    def turn_count(self):
        return self.conversation.machine.turn_count

    @property
    def team_up_depth(self):
        return self.conversation.team_up_depth

    @property
    def max_turns(self):
        return self.conversation.machine.max_turns

    @property
    def machine(self):
        return self.conversation.machine

    def frames(self, since=0):
        return [decode_message(frame) for frame in self.transcript[since:]]


class Hub:
    """The server core: registry, sessions, groups, routing.

    Parameters
    ----------
    config : :obj:`~teamwire.config.Config`, optional
    registry : :obj:`~teamwire.registry.Registry`, optional
        Defaults to a registry persisted under ``config.data_dir`` (or kept
        in memory when there is no data directory).
    """

    def __init__(self, config=None, registry=None):
        self.config = config or Config()
        if registry is None:
            registry = Registry(log=open_log(self.config.data_dir, "registry"))
        self.registry = registry
        self.sessions = {}
        self.groups = {}
        self._table_lock = threading.RLock()

    # registry pass-through
    def register_agent(self, profile):
        return self.registry.register_agent(profile)

    def search_agents(self, query):
        return self.registry.search_agents(query)

    def get_profile(self, agent_name):
        return self.registry.get_profile(agent_name)

    # sessions
    def _session(self, agent_name):
        with self._table_lock:
            if agent_name not in self.sessions:
                self.sessions[agent_name] = Session(
                    agent_name, cap=self.config.offline_queue_cap
                )
            return self.sessions[agent_name]

    def connect(self, agent_name, auth_token, channel):
        """Bring an agent online and flush its queued frames.

        Raises
        ------
        AuthFailed, UnknownAgent, AlreadyConnected
        """
        if auth_token != self.config.auth_token:
            raise AuthFailed(f"bad token for {agent_name!r}")
        if agent_name not in self.registry:
            raise UnknownAgent(f"agent {agent_name!r} is not registered")
        with self._table_lock:
            session = self._session(agent_name)
            if session.online:
                raise AlreadyConnected(f"{agent_name!r} already has an online session")
            flushed = session.attach(channel)
        logger.info("%s connected (%d queued frames flushed)", agent_name, flushed)
        return session

    def disconnect(self, agent_name):
        with self._table_lock:
            session = self.sessions.get(agent_name)
            if session is None or not session.online:
                raise NotConnected(f"{agent_name!r} is not connected")
            session.detach()
        logger.info("%s disconnected", agent_name)
        return True

    # groups
    def group(self, comm_id):
        with self._table_lock:
            try:
                return self.groups[comm_id]
            except KeyError:
                raise UnknownGroup(f"no group {comm_id!r}") from None

    def setup_group(
        self,
        initiator,
        team_members,
        goal,
        team_up_depth=0,
        max_turns=None,
        parent_task=None,
    ):
        """Create a group chat and announce it to every member.

        Parameters
        ----------
        initiator : :obj:`str`
            Added to the members when absent; holds the first turn.
        team_members : :obj:`list` of :obj:`str`
        goal : :obj:`str`
        team_up_depth : :obj:`int`
        max_turns : :obj:`int`, optional
            Defaults to ``config.max_turns``.
        parent_task : ``(comm_id, task_id)``, optional
            Set for a sub-group spawned to handle a task of another group.

        Returns
        -------
        comm_id : :obj:`str`

        Raises
        ------
        UnknownMember
            A member (or the initiator) is not registered.
        DepthExceeded
            ``team_up_depth`` is beyond ``config.max_team_up_depth``.
        ValidationFailed
            ``team_up_depth`` is negative, or the setup notice is invalid.
        UnknownGroup, UnknownTask
            ``parent_task`` does not name an assigned task of a known group.
        """
        members = [initiator] + [m for m in team_members if m != initiator]
        unknown = [m for m in dict.fromkeys(members) if m not in self.registry]
        if unknown:
            raise UnknownMember(f"not registered: {unknown}")
        if team_up_depth < 0:
            raise ValidationFailed("team_up_depth must be non-negative")
        if team_up_depth > self.config.max_team_up_depth:
            raise DepthExceeded(
                f"depth {team_up_depth} exceeds maximum {self.config.max_team_up_depth}"
            )
        if parent_task is not None:
            parent_comm_id, task_id = parent_task
            parent = self.group(parent_comm_id)
            if task_id not in parent.machine.assigned:
                raise UnknownTask(f"no task {task_id!r} in group {parent_comm_id}")
            parent_task = (parent_comm_id, task_id)
        max_turns = max_turns or self.config.max_turns

        comm_id = new_id()
        conversation = Conversation.create(
            comm_id, goal, members, initiator, team_up_depth, max_turns
        )
        notice = make_message(
            SERVER_SENDER,
            comm_id,
            MessageKind.SYSTEM_NOTICE,
            [initiator],
            content=NOTICE_FORMED,
            goal=goal,
            team_members=conversation.members,
            team_up_depth=team_up_depth,
            max_turns=max_turns,
        )
        violations = validate_message(notice)
        if violations:
            raise ValidationFailed(violations)
        record = GroupRecord(
            conversation, parent_task, log=self._transcript_log(comm_id)
        )
        with record.lock:
            with self._table_lock:
                self.groups[comm_id] = record
            self._route_locked(record, notice)
        logger.info(
            "group %s formed by %s: %d members, depth %d",
            comm_id,
            initiator,
            len(conversation.members),
            team_up_depth,
        )
        return comm_id

    def _transcript_log(self, comm_id):
        if self.config.data_dir is None:
            return None
        directory = os.path.join(self.config.data_dir, "groups")
        os.makedirs(directory, exist_ok=True)
        return FileLog(os.path.join(directory, comm_id + ".ndjson"))

    def route(self, msg):
        """Order, record, and deliver one frame from a connected member.

        Returns
        -------
        report : :obj:`DeliveryReport`

        Raises
        ------
        ValidationFailed, UnknownGroup, NotConnected, NotMember, NotYourTurn,
        IllegalTransition, GroupConcluded
        """
        violations = validate_message(msg)
        if violations:
            raise ValidationFailed(violations)
        record = self.group(msg.comm_id)
        session = self.sessions.get(msg.sender)
        if session is None or not session.online:
            raise NotConnected(f"{msg.sender!r} is not connected")
        with record.lock:
            return self._route_locked(record, msg.with_seq(None))

    def _route_locked(self, record, msg):
        conversation, prompt = record.conversation.accept(msg)
        routed = msg.with_seq(record.next_seq)
        frame = encode_message(routed)
        record.conversation = conversation
        record.transcript.append(frame)
        if record.log is not None:
            record.log.append_line(frame.decode("utf-8"))

        outcomes = {"delivered": [], "deferred": [], "lost": []}
        for member in record.team_members:
            outcome = self._session(member).deliver(frame)
            outcomes[outcome].append(member)
            if outcome == "lost":
                outcomes["deferred"].append(member)
        logger.debug(
            "routed %s seq %d from %s to %s",
            routed.kind.value,
            routed.seq,
            routed.sender,
            record.comm_id,
        )

        notices = ()
        if prompt is not None:
            content = NOTICE_RESUME if prompt.reason == "resume" else NOTICE_CONCLUDE
            notice = make_message(
                SERVER_SENDER,
                record.comm_id,
                MessageKind.SYSTEM_NOTICE,
                [prompt.speaker],
                content=content,
            )
            notices = (self._route_locked(record, notice),)
        return DeliveryReport(
            comm_id=record.comm_id,
            seq=routed.seq,
            delivered=tuple(outcomes["delivered"]),
            deferred=tuple(outcomes["deferred"]),
            lost=tuple(outcomes["lost"]),
            notices=notices,
        )

    def transcript(self, comm_id, since=0):
        """Routed frames of a group from seq `since` on."""
        record = self.group(comm_id)
        with record.lock:
            return record.frames(since)

    def is_quiescent(self):
        """Whether groups exist and every one has concluded with no open task."""
        with self._table_lock:
            records = list(self.groups.values())
        return bool(records) and all(is_quiescent(r.machine) for r in records)

    @property
    def total_frames(self):
        with self._table_lock:
            return sum(len(r.transcript) for r in self.groups.values())

    def snapshot(self):
        """Plain-data summary of groups and sessions."""
        with self._table_lock:
            return {
                "groups": {
                    comm_id: {
                        "goal": r.goal,
                        "team_members": list(r.team_members),
                        "initiator": r.initiator,
                        "fsm_state": r.fsm_state.value,
                        "turn_count": r.turn_count,
                        "max_turns": r.max_turns,
                        "team_up_depth": r.team_up_depth,
                        "next_seq": r.next_seq,
                        "parent_task": list(r.parent_task) if r.parent_task else None,
                    }
                    for comm_id, r in self.groups.items()
                },
                "sessions": {
                    name: {"status": s.status.value, "pending": len(s.pending)}
                    for name, s in self.sessions.items()
                },
            }


class StreamChannel:
    """Channel writing frames to an asyncio stream."""

    def __init__(self, writer):
        self.writer = writer

    def send(self, frame):
        if self.writer.is_closing():
            raise ConnectionError("stream is closing")
        self.writer.write(frame)


def _reply(rid, result=None, error=None):
    if error is None:
        return {"reply": rid, "ok": True, "result": result}
    return {"reply": rid, "ok": False, "error": error.code, "detail": str(error)}


class HubServer:
    """A :obj:`Hub` served over TCP.

    Parameters
    ----------
    hub : :obj:`Hub`
    host, port : optional
        Default to ``hub.config.address``.

    Examples
    --------

    .. code::

        server = HubServer(Hub(load_config(listen="127.0.0.1:0")))
        await server.start()
        host, port = server.address
        ...
        await server.close()
    """

    def __init__(self, hub, host=None, port=None):
        self.hub = hub
        default_host, default_port = hub.config.address
        self.host = host or default_host
        self.port = default_port if port is None else port
        self.address = None
        self._server = None
        self._writers = set()

    async def start(self):
        self._server = await asyncio.start_server(
            self._handle, self.host, self.port, limit=2**22
        )
        self.address = self._server.sockets[0].getsockname()[:2]
        logger.info("hub listening on %s:%d", *self.address)
        return self.address

    async def close(self):
        if self._server is None:
            return
        self._server.close()
        for writer in list(self._writers):
            writer.close()
        await self._server.wait_closed()
        self._server = None

    async def serve_forever(self):
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def _handle(self, reader, writer):
        self._writers.add(writer)
        channel = StreamChannel(writer)
        state = {"agent": None}
        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                reply = self._handle_line(line, channel, state)
                writer.write((canonical_json(reply) + "\n").encode("utf-8"))
                await writer.drain()
                if reply.get("ok") and state.get("closing"):
                    break
        except (ConnectionError, asyncio.IncompleteReadError, ValueError):
            logger.info("connection of %s dropped", state["agent"])
        finally:
            self._writers.discard(writer)
            if state["agent"] is not None:
                session = self.hub.sessions.get(state["agent"])
                if session is not None and session.channel is channel:
                    self.hub.disconnect(state["agent"])
            writer.close()

    def _handle_line(self, line, channel, state):
        rid = None
        try:
            try:
                envelope = json.loads(line)
            except ValueError as e:
                raise MalformedFrame(f"envelope is not valid JSON: {e}") from e
            if not isinstance(envelope, dict) or "op" not in envelope:
                raise SchemaViolation("envelope must be an object with an 'op'")
            rid = envelope.get("id")
            return _reply(rid, self._dispatch(envelope, channel, state))
        except TeamwireError as e:
            return _reply(rid, error=e)
        except (KeyError, TypeError, ValueError) as e:
            return _reply(rid, error=SchemaViolation(f"bad arguments: {e}"))

    def _dispatch(self, env, channel, state):
        op, hub, agent = env["op"], self.hub, state["agent"]
        if op == "register":
            record = hub.register_agent(AgentProfile.from_dict(env["profile"]))
            return record.profile.to_dict()
        if op == "connect":
            if env.get("profile") and env["agent_name"] not in hub.registry:
                hub.register_agent(AgentProfile.from_dict(env["profile"]))
            hub.connect(env["agent_name"], env.get("auth_token", ""), channel)
            state["agent"] = env["agent_name"]
            return {"agent_name": env["agent_name"]}
        if agent is None and op not in ANONYMOUS_OPS:
            raise NotConnected(f"{op} needs a connected agent")

        if op == "search":
            query = SearchQuery(tuple(env["characteristics"]), env.get("limit", 10))
            return [
                {"profile": profile.to_dict(), "score": score}
                for profile, score in hub.search_agents(query)
            ]
        if op == "profile":
            return hub.get_profile(env["agent_name"]).to_dict()
        if op == "setup_group":
            if env.get("initiator", agent) != agent:
                raise AuthFailed("groups can only be set up by their initiator")
            return hub.setup_group(
                agent,
                env["team_members"],
                env["goal"],
                team_up_depth=env.get("team_up_depth", 0),
                max_turns=env.get("max_turns"),
                parent_task=env.get("parent_task"),
            )
        if op == "route":
            msg = message_from_dict(env["message"])
            if msg.sender != agent:
                raise AuthFailed(f"{agent!r} cannot send as {msg.sender!r}")
            return hub.route(msg).to_dict()
        if op == "transcript":
            record = hub.group(env["comm_id"])
            if agent not in record.team_members:
                raise NotMember(f"{agent!r} is not a member of {env['comm_id']}")
            frames = hub.transcript(env["comm_id"], env.get("since", 0))
            return [message_to_dict(m) for m in frames]
        if op == "disconnect":
            hub.disconnect(agent)
            state["agent"] = None
            state["closing"] = True
            return True
        raise SchemaViolation(f"unknown op {op!r}")
