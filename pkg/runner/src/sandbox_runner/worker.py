"""Child process: executes one candidate's tests and streams verdicts.

The worker reads a single request line on stdin and writes one JSON event
per line: ``import`` events when a missing module is brought in, and one
``verdict`` event per test, in order.  Candidate code runs with stdout and
stdin pointed at the null device so stray prints cannot corrupt the event
stream; the parent enforces the wall-clock deadline by killing this process.
"""

from __future__ import annotations

import importlib
import json
import os
import sys
import traceback

from .protocol import ERROR, FAIL, MAX_AUTO_IMPORTS, PASS


def missing_module_name(exc: BaseException) -> str | None:
    """The module a NameError/ModuleNotFoundError complains about, if any."""
    name = getattr(exc, "name", None)
    if isinstance(name, str) and name.isidentifier():
        return name
    return None


def run_test(test: str, namespace: dict, imported: dict, auto_import: bool):
    """Execute one assertion, retrying after recoverable missing imports.

    ``imported`` maps module name to the module (or None for a failed
    attempt) and persists across the request so each module is imported at
    most once and at most MAX_AUTO_IMPORTS distinct modules are added.
    Returns (status, detail, newly_imported_modules).
    """
    added: list[str] = []
    while True:
        try:
            exec(compile(test, "<test>", "exec"), namespace)
            return PASS, "", added
        except AssertionError:
            return FAIL, "assertion failed", added
        except (NameError, ModuleNotFoundError) as exc:
            module = missing_module_name(exc)
            recoverable = (
                auto_import
                and module is not None
                and module not in imported
                and sum(1 for m in imported.values() if m is not None)
                < MAX_AUTO_IMPORTS
            )
            if not recoverable:
                return ERROR, f"{type(exc).__name__}: {exc}", added
            try:
                imported[module] = importlib.import_module(module)
            except ImportError:
                imported[module] = None
                return ERROR, f"{type(exc).__name__}: {exc}", added
            namespace[module] = imported[module]
            added.append(module)
        except SyntaxError as exc:
            return ERROR, f"test does not parse: {exc}", added
        except BaseException as exc:
            return ERROR, f"{type(exc).__name__}: {exc}", added


def execute(request: dict, emit) -> None:
    """Run every test of a validated request, emitting one verdict each."""
    tests = request["tests"]

    def all_verdicts(status: str, detail: str) -> None:
        for index in range(len(tests)):
            emit({"kind": "verdict", "index": index, "status": status,
                  "detail": detail})

    try:
        code = compile(request["source"], "<candidate>", "exec")
    except SyntaxError as exc:
        all_verdicts(ERROR, f"candidate does not parse: {exc}")
        return
    namespace: dict = {"__name__": "__candidate__"}
    try:
        exec(code, namespace)
    except BaseException as exc:
        all_verdicts(ERROR, f"candidate definition raised {type(exc).__name__}: {exc}")
        return
    if request["entry_point"] not in namespace:
        all_verdicts(ERROR, f"candidate defines no {request['entry_point']!r}")
        return
    imported: dict = {}
    for index, test in enumerate(tests):
        status, detail, added = run_test(
            test, namespace, imported, request["auto_import"]
        )
        for module in added:
            emit({"kind": "import", "module": module})
        emit({"kind": "verdict", "index": index, "status": status, "detail": detail})


def main() -> int:
    events = os.fdopen(os.dup(sys.stdout.fileno()), "w", buffering=1)
    devnull = open(os.devnull, "r+")
    sys.stdout = devnull
    sys.stdin, request_stream = devnull, sys.stdin

    def emit(event: dict) -> None:
        events.write(json.dumps(event) + "\n")
        events.flush()

    line = request_stream.readline()
    if not line.strip():
        return 1
    try:
        request = json.loads(line)
        execute(request, emit)
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
