"""Functional-correctness evaluation: pass@k, execution, and filters.

Candidates are scored by running hidden tests through an executor.  The
default executor talks newline-delimited JSON to an external sandbox
process; a static stand-in that only checks syntax keeps every orchestration
path runnable without one.  Filters shrink a candidate set using signals
available at generation time: embedded docstring tests, type probes, or a
bare parse check.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import re
import shlex
import string
import subprocess
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import signature_text

log = logging.getLogger(__name__)

RUNNER_ENV_VAR = "MINICODER_RUNNER"
DEFAULT_TEST_TIMEOUT = 3.0
PROTOCOL_VERSION = 1

PASS = "pass"
FAIL = "fail"
ERROR = "error"
TIMEOUT = "timeout"


@dataclass(frozen=True)
class Problem:
    task_id: str
    docstring: str
    signature: str
    entry_point: str
    tests: tuple[str, ...]
    canonical_solution: str | None = None


@dataclass
class TestVerdict:
    test: str
    status: str
    detail: str = ""


@dataclass
class ExecutionResult:
    verdicts: list[TestVerdict]
    imports_added: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.verdicts) and all(v.status == PASS for v in self.verdicts)


@dataclass
class EvalRecord:
    task_id: str
    n: int
    c: int
    passed: list[bool]

    def to_json(self) -> str:
        return json.dumps(
            {"task_id": self.task_id, "n": self.n, "c": self.c, "passed": self.passed}
        )


def pass_at_k(n: int, c: int, k: int) -> float:
    """Probability that at least one of k drawn samples is correct.

    Unbiased over the n generated samples of which c passed; computed as
    1 - prod_{i=n-c+1..n} (1 - k/i), which is exact and overflow-free.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds sample count n={n}")
    if not 0 <= c <= n:
        raise ValueError("need 0 <= c <= n")
    if n - c < k:
        return 1.0
    product = 1.0
    for i in range(n - c + 1, n + 1):
        product *= 1.0 - k / i
    return 1.0 - product


def _extract_assertions(test_field) -> tuple[str, ...]:
    if isinstance(test_field, (list, tuple)):
        return tuple(str(t).strip() for t in test_field if str(t).strip())
    lines = [line.strip() for line in str(test_field).split("\n")]
    return tuple(line for line in lines if line.startswith("assert"))


def load_problems(path: str) -> list[Problem]:
    """Read a problems file of JSON lines.

    Each row carries ``task_id``, ``prompt`` (a function header with its
    docstring), ``entry_point``, ``test`` (a list of assertion statements,
    or text whose assert lines are used), and optionally
    ``canonical_solution``.
    """
    problems: list[Problem] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            row = json.loads(line)
            docstring, signature = parse_prompt(row["prompt"], row["entry_point"])
            problems.append(
                Problem(
                    task_id=row["task_id"],
                    docstring=docstring,
                    signature=signature,
                    entry_point=row["entry_point"],
                    tests=_extract_assertions(row["test"]),
                    canonical_solution=row.get("canonical_solution"),
                )
            )
    return problems


def parse_prompt(prompt: str, entry_point: str) -> tuple[str, str]:
    """Split a prompt into (docstring, signature) for the entry function."""
    tree = ast.parse(prompt)
    for node in ast.walk(tree):
        if (
            isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef))
            and node.name == entry_point
        ):
            return ast.get_docstring(node) or "", signature_text(node)
    raise ValueError(f"prompt defines no function named {entry_point!r}")


def candidate_source(problem: Problem, completion: str) -> str:
    """Full program text for a completion: the signature plus its body."""
    body = completion if completion.endswith("\n") else completion + "\n"
    return problem.signature + "\n" + body


# A doctest-style call, or a bare "call(args) == expected" / "= expected" line.
_DOCTEST_RE = re.compile(r"^\s*>>>\s*(?P<call>\w+\s*\(.*\))\s*$")
_EQUATION_RE = re.compile(r"^\s*(?P<call>\w+\s*\(.*\))\s*={1,2}\s*(?P<expected>.+?)\s*$")


def partition_docstring(docstring: str) -> tuple[list[str], list[str]]:
    """Separate prose lines from embedded test assertions.

    Recognizes doctest pairs (a ``>>> call(...)`` line followed by the
    expected value) and single-line ``call(args) == expected`` equations
    (a single ``=`` is accepted too).  Returns (prose lines, assertions).
    """
    lines = docstring.split("\n")
    prose: list[str] = []
    tests: list[str] = []
    i = 0
    while i < len(lines):
        line = lines[i]
        doctest = _DOCTEST_RE.match(line)
        if doctest:
            if i + 1 < len(lines):
                expected = lines[i + 1].strip()
                if expected and not expected.startswith(">>>"):
                    tests.append(f"assert {doctest.group('call')} == {expected}")
                    i += 2
                    continue
            i += 1
            continue
        equation = _EQUATION_RE.match(line)
        if equation:
            tests.append(
                f"assert {equation.group('call')} == {equation.group('expected')}"
            )
            i += 1
            continue
        prose.append(line)
        i += 1
    return prose, tests


class MockExecutor:
    """Scripted executor for tests: a callable decides each verdict."""

    def __init__(self, script):
        self.script = script
        self.calls: list[tuple[str, str]] = []

    def run(self, source, entry_point, tests, timeout=DEFAULT_TEST_TIMEOUT):
        verdicts = []
        for test in tests:
            self.calls.append((source, test))
            verdicts.append(TestVerdict(test=test, status=self.script(source, test)))
        return ExecutionResult(verdicts=verdicts)


class StaticExecutor:
    """Deterministic stand-in: a candidate passes if its source parses.

    Useful for exercising pipelines without running any code; results are
    not correctness signals.
    """

    def run(self, source, entry_point, tests, timeout=DEFAULT_TEST_TIMEOUT):
        try:
            ast.parse(source)
            status = PASS
        except SyntaxError:
            status = ERROR
        return ExecutionResult(
            verdicts=[TestVerdict(test=t, status=status) for t in tests]
        )


class SubprocessExecutor:
    """Client for the external sandbox runner (newline-delimited JSON).

    The runner command comes from the constructor or the MINICODER_RUNNER
    environment variable.  One persistent runner process serves requests
    sequentially; each request is executed in a fresh child on the runner's
    side.
    """

    def __init__(self, command: Sequence[str] | None = None):
        if command is None:
            raw = os.environ.get(RUNNER_ENV_VAR)
            if not raw:
                raise ValueError(
                    f"no runner command: set {RUNNER_ENV_VAR} or pass one explicitly"
                )
            command = shlex.split(raw)
        self.command = list(command)
        self._proc: subprocess.Popen | None = None

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except Exception:
                self._proc.kill()
        self._proc = None

    def run(self, source, entry_point, tests, timeout=DEFAULT_TEST_TIMEOUT):
        request = {
            "v": PROTOCOL_VERSION,
            "source": source,
            "entry_point": entry_point,
            "tests": list(tests),
            "timeout": timeout,
            "auto_import": True,
        }
        proc = self._ensure_process()
        try:
            proc.stdin.write(json.dumps(request) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            self.close()
            raise RuntimeError(f"runner process failed: {exc}") from exc
        if not line:
            self.close()
            raise RuntimeError("runner process closed its output stream")
        response = json.loads(line)
        if response.get("v") != PROTOCOL_VERSION:
            raise RuntimeError(f"unsupported runner protocol: {response.get('v')}")
        verdicts = [
            TestVerdict(
                test=v["test"], status=v["status"], detail=v.get("detail", "")
            )
            for v in response["verdicts"]
        ]
        return ExecutionResult(
            verdicts=verdicts, imports_added=response.get("imports_added", [])
        )


def evaluate_problem(
    problem: Problem,
    completions: Sequence[str],
    executor,
    timeout: float = DEFAULT_TEST_TIMEOUT,
) -> EvalRecord:
    """Run every completion against the problem's hidden tests."""
    if not problem.tests:
        raise ValueError(f"problem {problem.task_id} has no tests")
    passed: list[bool] = []
    for completion in completions:
        result = executor.run(
            candidate_source(problem, completion),
            problem.entry_point,
            list(problem.tests),
            timeout=timeout,
        )
        passed.append(result.passed)
    return EvalRecord(
        task_id=problem.task_id, n=len(passed), c=sum(passed), passed=passed
    )


def summarize(records: Sequence[EvalRecord], ks: Sequence[int]) -> dict[str, float]:
    """Mean pass@k over the problems with at least k samples each."""
    summary: dict[str, float] = {"problems": len(records)}
    for k in ks:
        usable = [r for r in records if r.n >= k]
        skipped = len(records) - len(usable)
        if skipped:
            log.warning("pass@%d: skipping %d problems with fewer samples", k, skipped)
        if not usable:
            summary[f"pass@{k}"] = float("nan")
            continue
        summary[f"pass@{k}"] = float(
            np.mean([pass_at_k(r.n, r.c, k) for r in usable])
        )
    return summary


def filter_syntax(problem: Problem, completions: Sequence[str]) -> list[int]:
    """Indices of completions whose assembled source parses."""
    survivors = []
    for i, completion in enumerate(completions):
        try:
            ast.parse(candidate_source(problem, completion))
            survivors.append(i)
        except SyntaxError:
            pass
    return survivors


def filter_unit_tests(
    problem: Problem,
    completions: Sequence[str],
    executor,
    timeout: float = DEFAULT_TEST_TIMEOUT,
) -> list[int] | None:
    """Indices passing the tests embedded in the docstring.

    Returns None when the docstring embeds no tests (filter inapplicable).
    """
    _, embedded = partition_docstring(problem.docstring)
    if not embedded:
        return None
    survivors = []
    for i, completion in enumerate(completions):
        result = executor.run(
            candidate_source(problem, completion),
            problem.entry_point,
            embedded,
            timeout=timeout,
        )
        if result.passed:
            survivors.append(i)
    return survivors


def signature_annotations(signature: str):
    """Argument and return annotations of a signature, as source strings."""
    tree = ast.parse(signature + "\n    pass")
    node = tree.body[0]
    args = [
        (a.arg, ast.unparse(a.annotation) if a.annotation else None)
        for a in node.args.posonlyargs + node.args.args
    ]
    returns = ast.unparse(node.returns) if node.returns else None
    return args, returns


_PROBE_TYPES = {
    "int": "int",
    "float": "float",
    "str": "str",
    "bool": "bool",
    "list[int]": "list",
    "list[float]": "list",
    "list[str]": "list",
    "List[int]": "list",
    "List[float]": "list",
    "List[str]": "list",
}


def _probe_value(annotation: str, rng: np.random.Generator):
    if annotation == "int":
        return int(rng.integers(-100, 101))
    if annotation == "float":
        return round(float(rng.uniform(-100, 100)), 3)
    if annotation == "bool":
        return bool(rng.integers(0, 2))
    if annotation == "str":
        letters = string.ascii_lowercase
        return "".join(
            letters[int(j)] for j in rng.integers(0, 26, size=int(rng.integers(1, 9)))
        )
    if annotation.startswith(("list[", "List[")):
        inner = annotation[annotation.index("[") + 1 : -1]
        return [_probe_value(inner, rng) for _ in range(int(rng.integers(1, 5)))]
    raise ValueError(f"unsupported annotation: {annotation}")


def typing_probes(problem: Problem, seed: int = 0, n_probes: int = 5) -> list[str] | None:
    """Seeded type-conformance assertions, or None when not derivable.

    Needs a return annotation and fully annotated arguments of supported
    types.  Probe inputs are random, so a correct candidate with stricter
    input preconditions can still fail them; treat survivors as a heuristic
    subset.
    """
    try:
        args, returns = signature_annotations(problem.signature)
    except SyntaxError:
        return None
    if returns is None or returns not in _PROBE_TYPES:
        return None
    if not args or any(a[1] is None or a[1] not in _PROBE_TYPES for a in args):
        return None
    digest = hashlib.md5(problem.task_id.encode("utf-8")).digest()
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, int.from_bytes(digest[:8], "big")])
    )
    probes = []
    for _ in range(n_probes):
        values = [repr(_probe_value(annotation, rng)) for _, annotation in args]
        call = f"{problem.entry_point}({', '.join(values)})"
        probes.append(f"assert isinstance({call}, {_PROBE_TYPES[returns]})")
    return probes


def filter_typing(
    problem: Problem,
    completions: Sequence[str],
    executor,
    seed: int = 0,
    n_probes: int = 5,
    timeout: float = DEFAULT_TEST_TIMEOUT,
) -> list[int] | None:
    """Indices whose return values satisfy the annotated types on probes.

    Returns None when the signature does not support probe synthesis.
    """
    probes = typing_probes(problem, seed=seed, n_probes=n_probes)
    if probes is None:
        return None
    survivors = []
    for i, completion in enumerate(completions):
        result = executor.run(
            candidate_source(problem, completion),
            problem.entry_point,
            probes,
            timeout=timeout,
        )
        if result.passed:
            survivors.append(i)
    return survivors


def filter_report(
    problems: Sequence[Problem],
    completions_by_task: dict[str, list[str]],
    executor,
    ks: Sequence[int],
    filter_names: Sequence[str] = ("unit_test", "typing", "syntax"),
    seed: int = 0,
    timeout: float = DEFAULT_TEST_TIMEOUT,
) -> dict:
    """Baseline vs. filtered pass@k, each on the filter's applicable subset.

    For filtered rates, a problem counts 0 when no candidate survives and is
    excluded from pass@k when fewer than k candidates survive.
    """
    base_records = {
        p.task_id: evaluate_problem(
            p, completions_by_task[p.task_id], executor, timeout=timeout
        )
        for p in problems
        if p.task_id in completions_by_task
    }
    report: dict = {"filters": {}}
    for name in filter_names:
        applicable: list[str] = []
        filtered_records: list[EvalRecord] = []
        for p in problems:
            if p.task_id not in completions_by_task:
                continue
            completions = completions_by_task[p.task_id]
            if name == "syntax":
                survivors = filter_syntax(p, completions)
            elif name == "unit_test":
                survivors = filter_unit_tests(p, completions, executor, timeout=timeout)
            elif name == "typing":
                survivors = filter_typing(
                    p, completions, executor, seed=seed, timeout=timeout
                )
            else:
                raise ValueError(f"unknown filter: {name}")
            if survivors is None:
                continue
            applicable.append(p.task_id)
            base = base_records[p.task_id]
            filtered_records.append(
                EvalRecord(
                    task_id=p.task_id,
                    n=len(survivors),
                    c=sum(base.passed[i] for i in survivors),
                    passed=[base.passed[i] for i in survivors],
                )
            )
        entry = {"applicable": len(applicable), "task_ids": applicable}
        baseline = [base_records[t] for t in applicable]
        for k in ks:
            usable_base = [r for r in baseline if r.n >= k]
            entry[f"baseline_pass@{k}"] = (
                float(np.mean([pass_at_k(r.n, r.c, k) for r in usable_base]))
                if usable_base
                else float("nan")
            )
            values = []
            for r in filtered_records:
                if r.n == 0:
                    values.append(0.0)
                elif r.n >= k:
                    values.append(pass_at_k(r.n, r.c, k))
            entry[f"filtered_pass@{k}"] = (
                float(np.mean(values)) if values else float("nan")
            )
            entry[f"filtered_evaluable@{k}"] = len(values)
        report["filters"][name] = entry
    return report
