"""Integrated agents: the capabilities a client wraps.

A client reaches its integrated agent through two calls only:
:meth:`IntegratedAgent.run` starts work and returns a fresh run id at once;
:meth:`IntegratedAgent.read_memory` returns the run's history. The run is
finished when the last memory record is a ``completion`` (carrying the
result text) or a ``failure`` (carrying the error text).
"""

import abc
import ast
import logging
import operator
import threading
import time
import warnings

from teamwire.utils import NotFound
from teamwire.utils import new_id

logger = logging.getLogger(__name__)

PROGRESS = "progress"
COMPLETION = "completion"
FAILURE = "failure"
FINAL_RECORDS = (COMPLETION, FAILURE)


class IntegratedAgent(abc.ABC):
    """Base class every integrated agent inherits from.

    .. note::

        This is an abstract class and cannot be instantiated directly.
        Implement :meth:`run` and :meth:`read_memory`, or subclass
        :obj:`ThreadedAgent` and implement only :meth:`ThreadedAgent.solve`.
    """

    name = None

    @abc.abstractmethod
    def run(self, task_desc):
        """Start a run on `task_desc`; return its run id without blocking."""
        return

    @abc.abstractmethod
    def read_memory(self, run_id):
        """Ordered ``{"type", "text"}`` records of one run.

        Raises
        ------
        NotFound
            `run_id` was never returned by :meth:`run`.
        """
        return


class ThreadedAgent(IntegratedAgent):
    """Integrated agent running :meth:`solve` on a worker thread per run.

    Parameters
    ----------
    latency : :obj:`float`, optional
        Seconds to wait before solving. Scenarios use it to make the order
        of concurrent task results reproducible.
    """

    def __init__(self, latency=0.0):
        self.latency = latency
        self._memory = {}
        self._lock = threading.Lock()

    @abc.abstractmethod
    def solve(self, task_desc):
        """Return the result text, or raise."""
        return

    def run(self, task_desc):
        run_id = new_id()
        with self._lock:
            self._memory[run_id] = [{"type": PROGRESS, "text": "started"}]
        worker = threading.Thread(
            target=self._work,
            args=(run_id, task_desc),
            name=f"{self.name}-{run_id[:8]}",
            daemon=True,
        )
        worker.start()
        return run_id

    def _work(self, run_id, task_desc):
        if self.latency:
            time.sleep(self.latency)
        try:
            record = {"type": COMPLETION, "text": str(self.solve(task_desc))}
        except Exception as e:
            logger.info("%s failed on %r: %s", self.name, task_desc, e)
            record = {"type": FAILURE, "text": f"{type(e).__name__}: {e}"}
        with self._lock:
            self._memory[run_id].append(record)

    def read_memory(self, run_id):
        with self._lock:
            try:
                return list(self._memory[run_id])
            except KeyError:
                raise NotFound(f"no run {run_id!r}") from None


class EchoAgent(ThreadedAgent):
    """Returns the task description unchanged."""

    name = "echo"

    def solve(self, task_desc):
        return task_desc


_OPERATORS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
}


def _truncating_div(a, b):
    if b == 0:
        raise ZeroDivisionError("division by zero")
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


def evaluate(expression):
    """Evaluate an integer arithmetic expression.

    Supports ``+ - * /`` (also ``×`` and ``÷``), parentheses, and unary
    minus, with the usual precedence. Division truncates toward zero.

    Examples
    --------

    >>> evaluate("2+3")
    5
    >>> evaluate("7 ÷ -2")
    -3
    >>> evaluate("(1 + 2) × 4")
    12
    """
    text = expression.replace("×", "*").replace("÷", "/")
    tree = ast.parse(text.strip(), mode="eval")
    return _eval_node(tree.body)


def _eval_node(node):
    if isinstance(node, ast.Constant) and type(node.value) is int:
        return node.value
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        value = _eval_node(node.operand)
        return -value if isinstance(node.op, ast.USub) else value
    if isinstance(node, ast.BinOp):
        left, right = _eval_node(node.left), _eval_node(node.right)
        if isinstance(node.op, ast.Div):
            return _truncating_div(left, right)
        if type(node.op) in _OPERATORS:
            return _OPERATORS[type(node.op)](left, right)
    raise ValueError(f"unsupported expression element: {ast.dump(node)}")


class ArithAgent(ThreadedAgent):
    """Evaluates the arithmetic expression in a task description.

    A leading ``compute`` (any case) is ignored, so ``"compute 2+3"`` gives
    ``"5"``.
    """

    name = "arith"

    def solve(self, task_desc):
        text = task_desc.strip()
        if text.lower().startswith("compute"):
            text = text[len("compute"):]
        return str(evaluate(text))


class FailAgent(ThreadedAgent):
    """Always fails."""

    name = "fail"

    def solve(self, task_desc):
        raise RuntimeError(f"refusing {task_desc!r}")


class SyncAdapter(IntegratedAgent):
    """Wraps a legacy blocking ``run(task_desc) -> str`` callable.

    The call happens inside :meth:`run`; the memory of a run holds a single
    completion (or failure) record.
    """

    name = "sync"

    def __init__(self, func):
        warnings.warn(
            "Wrapping a synchronous integrated agent; run() will block.",
            UserWarning,
            stacklevel=2,
        )
        self.func = func
        self._memory = {}

    def run(self, task_desc):
        run_id = new_id()
        try:
            record = {"type": COMPLETION, "text": str(self.func(task_desc))}
        except Exception as e:
            record = {"type": FAILURE, "text": f"{type(e).__name__}: {e}"}
        self._memory[run_id] = [record]
        return run_id

    def read_memory(self, run_id):
        try:
            return list(self._memory[run_id])
        except KeyError:
            raise NotFound(f"no run {run_id!r}") from None


_KINDS = {cls.name: cls for cls in (EchoAgent, ArithAgent, FailAgent)}


def make_agent(kind, latency=0.0):
    """Build a bundled integrated agent by kind name.

    Parameters
    ----------
    kind : :obj:`str`
        ``"echo"``, ``"arith"``, ``"fail"``, or ``"none"`` (returns None).
    """
    if kind in (None, "none"):
        return None
    try:
        return _KINDS[kind](latency=latency)
    except KeyError:
        raise ValueError(f"unknown integrated agent {kind!r}") from None
