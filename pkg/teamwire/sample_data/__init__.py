"""Bundled scenarios.

Each function returns the path of a scenario file shipped with the
package, ready for :func:`~teamwire.harness.run_scenario`.
"""

import sys

if sys.version_info >= (3, 12):  # pragma: no cover (PY12+)
    import importlib.resources as importlib_resources
else:  # pragma: no cover (<PY312)
    import importlib_resources


def _path(name):
    data = importlib_resources.files("teamwire.sample_data")
    return str(data.joinpath(name + ".json"))


def arith_trio():
    """Three agents; one synchronous assignment of ``compute 2+3``.

    A coordinator hands the floor to a manager, who assigns the sum to a
    calculator agent. The conclusion is ``5`` after four turns.
    """
    return _path("arith_trio")


def nested_pdf():
    """A group of three spawns a sub-group of two for one of its tasks.

    The team tree has 4 communication edges, against 6 for one flat group
    of the same 4 agents.
    """
    return _path("nested_pdf")


def solo():
    """One agent assigns a task to itself and concludes."""
    return _path("solo")


def forced_conclusion():
    """Two agents that never conclude on their own, with a budget of 3 turns."""
    return _path("forced_conclusion")


def pause_trigger():
    """An async assignment followed by a pause until its result arrives."""
    return _path("pause_trigger")


def illegal_step():
    """A script that assigns a task to a non-member; the run must fail."""
    return _path("illegal_step")


SCENARIOS = {
    "arith_trio": arith_trio,
    "nested_pdf": nested_pdf,
    "solo": solo,
    "forced_conclusion": forced_conclusion,
    "pause_trigger": pause_trigger,
    "illegal_step": illegal_step,
}

__all__ = tuple(SCENARIOS)
