"""Links between a client and the hub.

A link carries requests (register, search, group setup, routing, ...) to
the hub and hands every routed frame addressed to the client to a
delivery callback, as raw encoded bytes. Two implementations exist:

* :obj:`LocalLink` calls an in-process :obj:`~teamwire.server.Hub`.
* :obj:`TcpLink` speaks the newline-delimited JSON envelope protocol of
  :obj:`~teamwire.server.HubServer` over a socket. A reader thread
  separates replies from frames; requests are serialized by a write lock.

Both return the same plain values and raise the same error classes.
"""

import abc
import concurrent.futures
import itertools
import json
import logging
import socket
import threading

from teamwire.io import canonical_json
from teamwire.protocol import ANONYMOUS_OPS
from teamwire.protocol import message_from_dict
from teamwire.protocol import message_to_dict
from teamwire.registry import AgentProfile
from teamwire.registry import SearchQuery
from teamwire.utils import NotConnected
from teamwire.utils import ServerUnreachable
from teamwire.utils import error_from_code

logger = logging.getLogger(__name__)


class BaseLink(abc.ABC):
    """Base class for client-to-hub links.

    .. note::

        Subclasses implement :meth:`open` and :meth:`_request`. Every other
        operation is a thin wrapper building one request.
    """

    def __init__(self):
        self.agent_name = None

    @abc.abstractmethod
    def open(self, agent_name, auth_token, deliver, profile=None):
        """Connect as `agent_name`; `deliver(frame_bytes)` receives frames."""
        return

    @abc.abstractmethod
    def close(self):
        return

    @abc.abstractmethod
    def _request(self, op, **args):
        return

    @property
    def connected(self):
        return self.agent_name is not None

    def register(self, profile):
        reply = self._request("register", profile=profile.to_dict())
        return AgentProfile.from_dict(reply)

    def search(self, characteristics, limit=10):
        """Ranked ``(profile, score)`` pairs."""
        hits = self._request(
            "search", characteristics=list(characteristics), limit=limit
        )
        return [(AgentProfile.from_dict(h["profile"]), h["score"]) for h in hits]

    def get_profile(self, agent_name):
        return AgentProfile.from_dict(self._request("profile", agent_name=agent_name))

    def setup_group(self, team_members, goal, team_up_depth=0, max_turns=None,
                    parent_task=None):
        return self._request(
            "setup_group",
            initiator=self.agent_name,
            team_members=list(team_members),
            goal=goal,
            team_up_depth=team_up_depth,
            max_turns=max_turns,
            parent_task=list(parent_task) if parent_task else None,
        )

    def route(self, msg):
        """Send one message; returns the delivery report as a `dict`."""
        return self._request("route", message=message_to_dict(msg))

    def transcript(self, comm_id, since=0):
        frames = self._request("transcript", comm_id=comm_id, since=since)
        return [message_from_dict(f) for f in frames]


class _LocalChannel:
    def __init__(self, deliver):
        self.deliver = deliver

    def send(self, frame):
        self.deliver(frame)


class LocalLink(BaseLink):
    """Link to a :obj:`~teamwire.server.Hub` in the same process.

    Parameters
    ----------
    hub : :obj:`~teamwire.server.Hub`
    """

    def __init__(self, hub):
        super().__init__()
        self.hub = hub

    def open(self, agent_name, auth_token, deliver, profile=None):
        if profile is not None and agent_name not in self.hub.registry:
            self.hub.register_agent(profile)
        self.hub.connect(agent_name, auth_token, _LocalChannel(deliver))
        self.agent_name = agent_name

    def close(self):
        if self.agent_name is not None:
            self.hub.disconnect(self.agent_name)
            self.agent_name = None

    def _request(self, op, **args):
        if op == "register":
            record = self.hub.register_agent(AgentProfile.from_dict(args["profile"]))
            return record.profile.to_dict()
        if not self.connected and op not in ANONYMOUS_OPS:
            raise NotConnected("link is not open")
        if op == "search":
            query = SearchQuery(tuple(args["characteristics"]), args["limit"])
            return [
                {"profile": p.to_dict(), "score": s}
                for p, s in self.hub.search_agents(query)
            ]
        if op == "profile":
            return self.hub.get_profile(args["agent_name"]).to_dict()
        if op == "setup_group":
            return self.hub.setup_group(
                args["initiator"],
                args["team_members"],
                args["goal"],
                team_up_depth=args["team_up_depth"],
                max_turns=args["max_turns"],
                parent_task=args["parent_task"],
            )
        if op == "route":
            return self.hub.route(message_from_dict(args["message"])).to_dict()
        if op == "transcript":
            frames = self.hub.transcript(args["comm_id"], args["since"])
            return [message_to_dict(m) for m in frames]
        raise ValueError(f"unknown op {op!r}")


class TcpLink(BaseLink):
    """Link to a :obj:`~teamwire.server.HubServer` over TCP.

    Parameters
    ----------
    host : :obj:`str`
    port : :obj:`int`
    timeout : :obj:`float`
        Seconds to wait for a connection and for each reply.
    """

    def __init__(self, host, port, timeout=30.0):
        super().__init__()
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock = None
        self._reader = None
        self._deliver = None
        self._write_lock = threading.Lock()
        self._pending = {}
        self._ids = itertools.count(1)

    def dial(self, deliver=None):
        """Open the socket without connecting as an agent.

        Only the ops in :data:`~teamwire.protocol.ANONYMOUS_OPS` can be used
        until :meth:`open` is called.
        """
        if self._sock is not None:
            return
        try:
            self._sock = socket.create_connection(
                (self.host, self.port), timeout=self.timeout
            )
        except OSError as e:
            raise ServerUnreachable(f"cannot reach {self.host}:{self.port}: {e}") from e
        self._sock.settimeout(None)
        self._deliver = deliver
        self._reader = threading.Thread(
            target=self._read_loop, name="link-reader", daemon=True
        )
        self._reader.start()

    def open(self, agent_name, auth_token, deliver, profile=None):
        self.dial()
        self._deliver = deliver
        args = {"agent_name": agent_name, "auth_token": auth_token}
        if profile is not None:
            args["profile"] = profile.to_dict()
        self._send("connect", args)
        self.agent_name = agent_name

    def close(self):
        if self._sock is None:
            return
        if self.agent_name is not None:
            try:
                self._request("disconnect")
            except (ServerUnreachable, NotConnected):
                pass
        self.agent_name = None
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._sock = None

    def _request(self, op, **args):
        if self._sock is None or (not self.connected and op not in ANONYMOUS_OPS):
            raise NotConnected("link is not open")
        return self._send(op, args)

    def _send(self, op, args):
        rid = next(self._ids)
        future = concurrent.futures.Future()
        self._pending[rid] = future
        line = canonical_json({"op": op, "id": rid, **args}) + "\n"
        try:
            with self._write_lock:
                self._sock.sendall(line.encode("utf-8"))
            reply = future.result(timeout=self.timeout)
        except (OSError, concurrent.futures.TimeoutError) as e:
            raise ServerUnreachable(f"{op} failed: {e}") from e
        finally:
            self._pending.pop(rid, None)
        if not reply["ok"]:
            raise error_from_code(reply["error"], reply.get("detail", ""))
        return reply.get("result")

    def _read_loop(self):
        stream = self._sock.makefile("rb")
        try:
            for line in stream:
                obj = json.loads(line)
                if "reply" in obj:
                    future = self._pending.get(obj["reply"])
                    if future is not None:
                        future.set_result(obj)
                elif self._deliver is not None:
                    self._deliver(line)
        except (OSError, ValueError) as e:
            logger.info("link of %s closed: %s", self.agent_name, e)
        finally:
            for future in list(self._pending.values()):
                if not future.done():
                    future.set_exception(ConnectionError("connection closed"))
