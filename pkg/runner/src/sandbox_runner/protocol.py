"""Wire format shared by the runner parent and its worker children."""

from __future__ import annotations

PROTOCOL_VERSION = 1
MAX_AUTO_IMPORTS = 3
DEFAULT_TIMEOUT = 3.0

PASS = "pass"
FAIL = "fail"
ERROR = "error"
TIMEOUT = "timeout"


class ProtocolError(ValueError):
    """A request that violates the wire contract."""


def validate_request(request) -> dict:
    """Check a decoded request object and fill optional fields."""
    if not isinstance(request, dict):
        raise ProtocolError("request must be a JSON object")
    if request.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version: {request.get('v')!r}")
    if not isinstance(request.get("source"), str):
        raise ProtocolError("source must be a string")
    if not isinstance(request.get("entry_point"), str):
        raise ProtocolError("entry_point must be a string")
    tests = request.get("tests")
    if not isinstance(tests, list) or not all(isinstance(t, str) for t in tests):
        raise ProtocolError("tests must be a list of strings")
    timeout = request.get("timeout", DEFAULT_TIMEOUT)
    if not isinstance(timeout, (int, float)) or timeout <= 0:
        raise ProtocolError("timeout must be a positive number")
    return {
        "v": PROTOCOL_VERSION,
        "source": request["source"],
        "entry_point": request["entry_point"],
        "tests": list(tests),
        "timeout": float(timeout),
        "auto_import": bool(request.get("auto_import", True)),
    }
