"""Command line interface.

.. code::

    python -m teamwire serve --listen 127.0.0.1:7733 --data-dir ./hub
    python -m teamwire run-scenario arith_trio --golden ./golden --report run.json
    python -m teamwire search --server 127.0.0.1:7733 --query "pdf reading"
    python -m teamwire replay ./hub/groups/<comm_id>.ndjson

Exit codes: 0 pass, 1 expectation failure, 2 invalid input, 3 runtime
fault.
"""

import argparse
import asyncio
import logging
import os
import sys

from teamwire._version import __version__
from teamwire.config import load_config
from teamwire.harness import run_agent
from teamwire.harness import replay_transcript
from teamwire.harness import run_scenario
from teamwire.network import TcpLink
from teamwire.sample_data import SCENARIOS
from teamwire.server import Hub
from teamwire.server import HubServer
from teamwire.utils import ExpectationFailed
from teamwire.utils import MalformedLog
from teamwire.utils import ScenarioInvalid
from teamwire.utils import TeamwireError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2
EXIT_FAULT = 3


def _serve(args):
    config = load_config(
        args.config,
        listen=args.listen,
        auth_token=args.token,
        max_team_up_depth=args.max_depth,
        max_turns=args.max_turns,
        data_dir=args.data_dir,
    )
    server = HubServer(Hub(config))
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def _run_scenario(args):
    path = args.scenario
    if not os.path.exists(path) and path in SCENARIOS:
        path = SCENARIOS[path]()
    config = load_config(args.config, deadline=args.deadline, data_dir=args.data_dir)
    try:
        report = run_scenario(
            path,
            processes=args.processes,
            golden_dir=args.golden,
            report_path=args.report,
            config=config,
        )
    except ExpectationFailed as e:
        print(f"FAILED: {e}", file=sys.stderr)
        return EXIT_FAILED
    print(f"passed: {report.scenario} concluded {report.conclusion!r}")
    return EXIT_OK


def _search(args):
    host, _, port = args.server.rpartition(":")
    link = TcpLink(host, int(port))
    link.dial()
    try:
        hits = link.search(args.query, limit=args.limit)
    finally:
        link.close()
    for profile, score in hits:
        print(f"{score:8.4f}  {profile.agent_name}  {profile.agent_description}")
    return EXIT_OK


def _replay(args):
    violations = replay_transcript(args.log)
    for violation in violations:
        print(violation)
    return EXIT_FAILED if violations else EXIT_OK


def _agent(args):
    run_agent(
        args.server,
        args.token,
        args.scenario,
        args.name,
        args.data_dir,
        start=args.start,
    )
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="teamwire",
        description="Multi-agent group chat hub, clients, and scenario runner.",
    )
    parser.add_argument(
        "--version", action="version", version=f"teamwire {__version__}"
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG"
    )
    parser.add_argument("--config", help="YAML or JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run a standalone hub")
    serve.add_argument("--listen", help="host:port to listen on")
    serve.add_argument("--token", help="shared auth token")
    serve.add_argument("--max-depth", type=int, help="deepest sub-group level")
    serve.add_argument("--max-turns", type=int, help="default turn budget")
    serve.add_argument("--data-dir", help="where to keep the registry and transcripts")
    serve.set_defaults(func=_serve)

    run = sub.add_parser("run-scenario", help="play a scenario and check it")
    run.add_argument(
        "scenario", help="scenario file, or the name of a bundled scenario"
    )
    run.add_argument("--golden", help="directory of golden transcripts")
    run.add_argument("--report", help="write the run report (JSON) here")
    run.add_argument(
        "--processes", action="store_true", help="one OS process per agent"
    )
    run.add_argument("--deadline", type=float, help="seconds before the run is aborted")
    run.add_argument("--data-dir", help="keep agent data here (process mode)")
    run.set_defaults(func=_run_scenario)

    search = sub.add_parser("search", help="query a running hub's registry")
    search.add_argument("--server", required=True, help="host:port of the hub")
    search.add_argument("--query", required=True, nargs="+", help="characteristics")
    search.add_argument("--limit", type=int, default=10)
    search.set_defaults(func=_search)

    replay = sub.add_parser("replay", help="check a group transcript log")
    replay.add_argument("log")
    replay.set_defaults(func=_replay)

    agent = sub.add_parser("agent", help=argparse.SUPPRESS)
    agent.add_argument("--server", required=True)
    agent.add_argument("--token", required=True)
    agent.add_argument("--scenario", required=True)
    agent.add_argument("--name", required=True)
    agent.add_argument("--data-dir", required=True)
    agent.add_argument("--start", action="store_true")
    agent.set_defaults(func=_agent)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(
        level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except (ScenarioInvalid, MalformedLog, FileNotFoundError, ValueError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except TeamwireError as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        return EXIT_FAULT
