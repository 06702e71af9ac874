import dataclasses
import os

import yaml

ENV_POLICY_ENDPOINT = "TEAMWIRE_POLICY_ENDPOINT"


@dataclasses.dataclass
class Config:
    """Settings shared by the server, the clients, and the harness.

    Parameters
    ----------
    listen : :obj:`str`
        ``host:port`` the server listens on. Port ``0`` picks a free port.
    auth_token : :obj:`str`
        Shared token every client must present on connect.
    max_team_up_depth : :obj:`int`
        Deepest allowed nesting of sub-groups (the root group is depth 0).
    max_turns : :obj:`int`
        Default turn budget of a group chat.
    offline_queue_cap : :obj:`int`
        Frames kept for an offline member before the oldest are dropped.
    data_dir : :obj:`str`, optional
        Where event logs and transcripts are written. In memory when None.
    task_timeout : :obj:`float`
        Seconds an integrated agent may take for one task.
    poll_interval : :obj:`float`
        Seconds between two reads of an integrated agent's memory.
    tool_call_cap : :obj:`int`
        Team formation tool calls before a launch is forced.
    forced_launch_size : :obj:`int`
        Teammates kept (best score first) in a forced launch.
    policy_endpoint : :obj:`str`, optional
        URL of the remote policy adapter.
    deadline : :obj:`float`
        Seconds a scenario may run before it is aborted.
    """

    listen: str = "127.0.0.1:7733"
    auth_token: str = "teamwire"
    max_team_up_depth: int = 2
    max_turns: int = 20
    offline_queue_cap: int = 1024
    data_dir: str | None = None
    task_timeout: float = 60.0
    poll_interval: float = 0.05
    tool_call_cap: int = 10
    forced_launch_size: int = 5
    policy_endpoint: str | None = None
    deadline: float = 120.0

    def __post_init__(self):
        if self.max_team_up_depth < 0:
            raise ValueError("max_team_up_depth must be non-negative")
        for name in ("max_turns", "offline_queue_cap", "tool_call_cap",
                     "forced_launch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("task_timeout", "poll_interval", "deadline"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.address  # validates listen

    @property
    def address(self):
        """``(host, port)`` parsed from :attr:`listen`."""
        host, sep, port = self.listen.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"listen must look like host:port, got {self.listen!r}")
        return host, int(port)


def load_config(path=None, **overrides):
    """Load a :obj:`Config`.

    Parameters
    ----------
    path : :obj:`str`, optional
        YAML or JSON file with any subset of the :obj:`Config` fields.

    **overrides
        Field values that win over the file, typically command line flags.
        Values of ``None`` are ignored.

    Raises
    ------
    ValueError
        Unknown keys, or values that fail validation.

    Examples
    --------

    >>> load_config(max_turns=5).max_turns
    5
    """
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must hold a mapping")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})

    known = {field.name for field in dataclasses.fields(Config)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    if values.get("policy_endpoint") is None and os.environ.get(ENV_POLICY_ENDPOINT):
        values["policy_endpoint"] = os.environ[ENV_POLICY_ENDPOINT]
    return Config(**values)
