"""Parent process: one fresh worker per request, with a hard deadline.

Each request is served by a brand-new child process, so candidates cannot
observe or poison each other.  The parent collects the worker's streamed
verdicts until all tests are answered, the worker exits, or the request's
wall-clock deadline passes; at the deadline the worker's whole process
group is killed and unanswered tests are reported as timeouts.
"""

from __future__ import annotations

import json
import os
import queue
import signal
import subprocess
import sys
import threading
import time

from .protocol import ERROR, PROTOCOL_VERSION, TIMEOUT, ProtocolError, validate_request

KILL_GRACE = 0.5


def _drain(stream, events: queue.Queue) -> None:
    for line in stream:
        events.put(line)
    events.put(None)


def _kill_group(child: subprocess.Popen) -> None:
    try:
        os.killpg(child.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        child.kill()
    try:
        child.wait(timeout=KILL_GRACE)
    except subprocess.TimeoutExpired:
        pass


def serve(request: dict, python: str | None = None) -> dict:
    """Execute one validated request in a fresh child process."""
    request = validate_request(request)
    tests = request["tests"]
    response = {"v": PROTOCOL_VERSION, "verdicts": [], "imports_added": []}
    if not tests:
        return response
    child = subprocess.Popen(
        [python or sys.executable, "-m", "sandbox_runner.worker"],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        text=True,
        start_new_session=True,
    )
    statuses: dict[int, tuple[str, str]] = {}
    imports_added: list[str] = []
    deadline = time.monotonic() + request["timeout"]
    events: queue.Queue = queue.Queue()
    reader = threading.Thread(target=_drain, args=(child.stdout, events), daemon=True)
    reader.start()
    worker_exited = False
    try:
        child.stdin.write(json.dumps(request) + "\n")
        child.stdin.flush()
        child.stdin.close()
    except (BrokenPipeError, OSError):
        worker_exited = True
    while not worker_exited and len(statuses) < len(tests):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            break
        try:
            line = events.get(timeout=remaining)
        except queue.Empty:
            break
        if line is None:
            worker_exited = True
            break
        try:
            event = json.loads(line)
        except json.JSONDecodeError:
            continue
        if event.get("kind") == "verdict":
            statuses[int(event["index"])] = (
                str(event["status"]), str(event.get("detail", ""))
            )
        elif event.get("kind") == "import":
            imports_added.append(str(event["module"]))
    timed_out = len(statuses) < len(tests) and not worker_exited
    _kill_group(child)
    for index in range(len(tests)):
        if index in statuses:
            status, detail = statuses[index]
        elif timed_out:
            status, detail = TIMEOUT, f"no verdict within {request['timeout']}s"
        else:
            status, detail = ERROR, "worker exited before answering"
        response["verdicts"].append(
            {"test": tests[index], "status": status, "detail": detail}
        )
    response["imports_added"] = imports_added
    return response


def run(stdin=None, stdout=None, python: str | None = None) -> int:
    """Serve requests line by line; non-zero only on a protocol violation."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        if not line.strip():
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            print(f"protocol violation: undecodable request: {exc}", file=sys.stderr)
            return 1
        try:
            response = serve(request, python=python)
        except ProtocolError as exc:
            print(f"protocol violation: {exc}", file=sys.stderr)
            return 1
        stdout.write(json.dumps(response) + "\n")
        stdout.flush()
    return 0


def script_main() -> None:
    sys.exit(run())
