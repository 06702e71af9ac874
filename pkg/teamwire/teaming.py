"""Team formation, nested sub-groups, and communication metrics.

A client forms a team through a short tool loop: its policy either
searches the registry or launches a group chat. The loop is capped; when
the policy has not launched by the last allowed call, a launch is forced
with the best agents found so far.

Sub-groups nest: an agent handling an assigned task may spawn a child
group one level deeper, whose conclusion flows back to the parent task.
The resulting tree of groups is a :obj:`TeamTree`. Its edge count
(:func:`edges_nested`) is never larger than that of one flat group of all
agents (:func:`edges_full`) when every child shares only its initiator
with its ancestors.
"""

import dataclasses
import itertools
import logging

from teamwire.utils import DepthExceeded
from teamwire.utils import LaunchRejected
from teamwire.utils import ServerUnreachable
from teamwire.utils import TeamwireError

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class SearchCall:
    characteristics: tuple

    def __post_init__(self):
        object.__setattr__(self, "characteristics", tuple(self.characteristics))
        if not self.characteristics:
            raise ValueError("a search needs at least one characteristic")


@dataclasses.dataclass(frozen=True)
class LaunchCall:
    """Launch a group chat. ``team_members=None`` means a solo group."""

    team_members: tuple | None = None
    forced: bool = False

    def __post_init__(self):
        if self.team_members is not None:
            object.__setattr__(self, "team_members", tuple(self.team_members))


ToolCall = SearchCall | LaunchCall


def _forced_members(found, agent_name, size):
    ranked = sorted(
        ((name, score) for name, score in found.items() if name != agent_name),
        key=lambda item: (-item[1], item[0]),
    )
    return tuple(name for name, _ in ranked[:size]) or None


def form_team(
    task,
    policy,
    link,
    config,
    contacts=(),
    team_up_depth=0,
    parent_task=None,
    max_turns=None,
    calls=None,
):
    """Run the team formation tool loop and launch a group chat.

    Parameters
    ----------
    task : :obj:`str`
        Goal of the group to form.
    policy : :obj:`~teamwire.policy.Policy`
    link : :obj:`~teamwire.network.BaseLink`
        An open link; the launching agent is its :attr:`agent_name`.
    config : :obj:`~teamwire.config.Config`
        Supplies ``tool_call_cap`` and ``forced_launch_size``.
    contacts : sequence of :obj:`~teamwire.client.ContactEntry`
    team_up_depth : :obj:`int`
    parent_task : ``(comm_id, task_id)``, optional
    max_turns : :obj:`int`, optional
    calls : :obj:`list`, optional
        Every tool call made, the launch included, is appended here.

    Returns
    -------
    comm_id : :obj:`str`

    Raises
    ------
    ServerUnreachable
        The hub could not be reached.
    LaunchRejected
        The hub refused the group setup.
    """
    calls = [] if calls is None else calls
    agent_name = link.agent_name
    found = {}
    launch = None
    while len(calls) < config.tool_call_cap - 1:
        action = policy.decide_team_action(
            task, sorted(found), list(contacts), len(calls)
        )
        calls.append(action)
        if isinstance(action, LaunchCall):
            launch = action
            break
        for profile, score in link.search(action.characteristics):
            if profile.agent_name != agent_name:
                best = found.get(profile.agent_name, 0.0)
                found[profile.agent_name] = max(score, best)
        logger.debug(
            "%s searched %s: %d agents so far",
            agent_name,
            action.characteristics,
            len(found),
        )
    if launch is None:
        launch = LaunchCall(
            _forced_members(found, agent_name, config.forced_launch_size), forced=True
        )
        calls.append(launch)
        logger.info("%s forced to launch after %d tool calls", agent_name, len(calls))

    members = list(launch.team_members or ())
    try:
        comm_id = link.setup_group(
            members,
            task,
            team_up_depth=team_up_depth,
            max_turns=max_turns,
            parent_task=parent_task,
        )
    except ServerUnreachable:
        raise
    except TeamwireError as e:
        raise LaunchRejected(f"{e.code}: {e}") from e
    logger.info(
        "%s launched %s with %s", agent_name, comm_id, members or "no teammates"
    )
    return comm_id


def spawn_subgroup(parent, subtask, policy, link, config, contacts=(), calls=None):
    """Form a child group to handle `subtask` of the `parent` group.

    Parameters
    ----------
    parent : :obj:`~teamwire.client.GroupInfo`
    subtask : :obj:`~teamwire.client.TaskRecord`
        A task of the parent group assigned to this link's agent.

    Returns
    -------
    comm_id : :obj:`str`

    Raises
    ------
    DepthExceeded
        The parent is already at the deepest allowed level.
    """
    if subtask.assignee != link.agent_name:
        raise ValueError(f"task {subtask.task_id} is not assigned to {link.agent_name}")
    if parent.team_up_depth >= config.max_team_up_depth:
        raise DepthExceeded(
            f"group {parent.comm_id} is at depth {parent.team_up_depth}, "
            f"the maximum is {config.max_team_up_depth}"
        )
    return form_team(
        subtask.task_desc,
        policy,
        link,
        config,
        contacts=contacts,
        team_up_depth=parent.team_up_depth + 1,
        parent_task=(parent.comm_id, subtask.task_id),
        calls=calls,
    )


@dataclasses.dataclass
class TeamTree:
    """A group chat and, recursively, the sub-groups spawned from it."""

    comm_id: str
    members: tuple
    depth: int = 0
    parent_task: tuple | None = None
    children: list = dataclasses.field(default_factory=list)

    @classmethod
    def from_groups(cls, groups):
        """Build the trees described by group summaries.

        Parameters
        ----------
        groups : mapping of comm_id to `dict`
            Each value has ``team_members``, ``team_up_depth``, and
            ``parent_task`` (``[comm_id, task_id]`` or None), as in
            :meth:`~teamwire.server.Hub.snapshot`. Children keep the order
            of the mapping.

        Returns
        -------
        roots : :obj:`list` of :obj:`TeamTree`

        Raises
        ------
        ValueError
            A parent is missing, or a child is not exactly one level deeper.
        """
        nodes = {
            comm_id: cls(
                comm_id=comm_id,
                members=tuple(g["team_members"]),
                depth=g["team_up_depth"],
                parent_task=tuple(g["parent_task"]) if g.get("parent_task") else None,
            )
            for comm_id, g in groups.items()
        }
        roots = []
        for node in nodes.values():
            if node.parent_task is None:
                roots.append(node)
                continue
            parent = nodes.get(node.parent_task[0])
            if parent is None:
                raise ValueError(f"parent of {node.comm_id} is unknown")
            if node.depth != parent.depth + 1:
                raise ValueError(
                    f"{node.comm_id} at depth {node.depth} under depth {parent.depth}"
                )
            parent.children.append(node)
        return roots

    def walk(self):
        """Yield every node, parents before children."""
        yield self
        for child in self.children:
            yield from child.walk()

    @property
    def height(self):
        return 1 + max((child.height for child in self.children), default=0)

    @property
    def members_union(self):
        union = set()
        for node in self.walk():
            union.update(node.members)
        return union

    def to_dict(self):
        return {
            "comm_id": self.comm_id,
            "members": list(self.members),
            "depth": self.depth,
            "parent_task": list(self.parent_task) if self.parent_task else None,
            "edges": edges_full(len(self.members)),
            "children": [child.to_dict() for child in self.children],
        }


def edges_full(n):
    """Communication edges of one fully connected group of `n` agents.

    Examples
    --------

    >>> [edges_full(n) for n in (0, 1, 2, 5)]
    [0, 0, 1, 10]
    """
    if n < 0:
        raise ValueError("a group cannot have a negative size")
    return n * (n - 1) // 2


def edges_nested(tree):
    """Sum of :func:`edges_full` over every group of `tree`, root included."""
    return sum(edges_full(len(node.members)) for node in tree.walk())


def brute_force_pairs(members):
    """Count unordered pairs of distinct members by enumeration."""
    return sum(1 for _ in itertools.combinations(sorted(set(members)), 2))
