"""Tests for pass@k, problem loading, execution plumbing, and filters."""

import itertools
import json
import math
import shlex
import sys

import numpy as np
import pytest

from minicoder import evaluation as ev


def exhaustive_pass_at_k(n: int, c: int, k: int) -> float:
    subsets = list(itertools.combinations(range(n), k))
    wins = sum(1 for s in subsets if any(i < c for i in s))
    return wins / len(subsets)


class TestPassAtK:
    def test_matches_exhaustive_enumeration(self):
        for n in range(1, 13):
            for c in range(n + 1):
                for k in range(1, n + 1):
                    expected = exhaustive_pass_at_k(n, c, k)
                    assert ev.pass_at_k(n, c, k) == pytest.approx(expected, abs=1e-12)

    def test_pass_at_one_is_success_rate(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 201))
            c = int(rng.integers(0, n + 1))
            assert ev.pass_at_k(n, c, 1) == pytest.approx(c / n, abs=1e-12)

    def test_reference_value(self):
        assert ev.pass_at_k(10, 3, 2) == pytest.approx(1 - 21 / 45, abs=1e-12)

    def test_large_n_matches_binomial_form(self):
        n = 200
        for c, k in [(137, 100), (3, 100), (199, 1), (0, 200), (200, 17)]:
            got = ev.pass_at_k(n, c, k)
            if n - c < k:
                assert got == 1.0
            else:
                exact = 1 - math.comb(n - c, k) / math.comb(n, k)
                assert got == pytest.approx(exact, abs=1e-12)
            assert 0.0 <= got <= 1.0

    def test_k_larger_than_n_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            ev.pass_at_k(5, 2, 6)

    def test_guaranteed_hit_when_failures_fewer_than_k(self):
        assert ev.pass_at_k(10, 9, 2) == 1.0


GCD_PROMPT = (
    "def greatest_common_divisor(a: int, b: int) -> int:\n"
    '    """Return a greatest common divisor of two integers a and b"""\n'
)


def write_problems(path, rows):
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")


class TestProblems:
    def test_load_parses_prompt(self, tmp_path):
        path = tmp_path / "problems.jsonl"
        write_problems(
            path,
            [
                {
                    "task_id": "t/0",
                    "prompt": GCD_PROMPT,
                    "entry_point": "greatest_common_divisor",
                    "test": ["assert greatest_common_divisor(3, 5) == 1"],
                    "canonical_solution": "    while b:\n        a, b = b, a % b\n    return a\n",
                }
            ],
        )
        problems = ev.load_problems(str(path))
        assert len(problems) == 1
        p = problems[0]
        assert p.docstring == "Return a greatest common divisor of two integers a and b"
        assert p.signature == "def greatest_common_divisor(a: int, b: int) -> int:"
        assert p.tests == ("assert greatest_common_divisor(3, 5) == 1",)

    def test_string_test_field_keeps_assert_lines(self, tmp_path):
        path = tmp_path / "problems.jsonl"
        write_problems(
            path,
            [
                {
                    "task_id": "t/1",
                    "prompt": "def f(x):\n    \"\"\"Add one.\"\"\"\n",
                    "entry_point": "f",
                    "test": "# checks\nassert f(1) == 2\n\nassert f(2) == 3\n",
                }
            ],
        )
        (problem,) = ev.load_problems(str(path))
        assert problem.tests == ("assert f(1) == 2", "assert f(2) == 3")

    def test_missing_entry_point_rejected(self):
        with pytest.raises(ValueError, match="no function named"):
            ev.parse_prompt("def g():\n    pass\n", "f")

    def test_candidate_source_layout(self):
        problem = ev.Problem(
            task_id="t/2",
            docstring="d",
            signature="def f(x):",
            entry_point="f",
            tests=("assert f(0) == 0",),
        )
        assert ev.candidate_source(problem, "    return x") == (
            "def f(x):\n    return x\n"
        )


class TestPartitionDocstring:
    def test_doctest_pairs_become_assertions(self):
        doc = "Return gcd.\n>>> gcd(3, 5)\n1\nDone."
        prose, tests = ev.partition_docstring(doc)
        assert prose == ["Return gcd.", "Done."]
        assert tests == ["assert gcd(3, 5) == 1"]

    def test_equation_lines_single_or_double_equals(self):
        doc = "gcd(25, 15) = 5\ngcd(4, 2) == 2"
        prose, tests = ev.partition_docstring(doc)
        assert prose == []
        assert tests == [
            "assert gcd(25, 15) == 5",
            "assert gcd(4, 2) == 2",
        ]

    def test_doctest_without_expected_value_is_dropped(self):
        doc = "Intro.\n>>> gcd(3, 5)\n\nOutro."
        prose, tests = ev.partition_docstring(doc)
        assert prose == ["Intro.", "", "Outro."]
        assert tests == []

    def test_plain_prose_untouched(self):
        doc = "Adds a == b comparisons and such.\nSecond line."
        prose, tests = ev.partition_docstring(doc)
        assert prose == doc.split("\n")
        assert tests == []


def make_problem(task_id="t/0", docstring="Add one.", tests=("assert f(1) == 2",),
                 signature="def f(x: int) -> int:"):
    return ev.Problem(
        task_id=task_id,
        docstring=docstring,
        signature=signature,
        entry_point="f",
        tests=tuple(tests),
    )


class TestEvaluateProblem:
    def test_counts_passing_candidates(self):
        problem = make_problem(tests=("assert f(1) == 2", "assert f(0) == 1"))
        executor = ev.MockExecutor(
            lambda source, test: ev.PASS if "return x + 1" in source else ev.FAIL
        )
        record = ev.evaluate_problem(
            problem, ["    return x + 1", "    return x", "    return x + 1"], executor
        )
        assert (record.n, record.c) == (3, 2)
        assert record.passed == [True, False, True]

    def test_candidate_fails_if_any_test_fails(self):
        problem = make_problem(tests=("assert f(1) == 2", "assert f(2) == 3"))
        executor = ev.MockExecutor(
            lambda source, test: ev.FAIL if "f(2)" in test else ev.PASS
        )
        record = ev.evaluate_problem(problem, ["    return x + 1"], executor)
        assert (record.n, record.c) == (1, 0)

    def test_problem_without_tests_rejected(self):
        problem = make_problem(tests=())
        with pytest.raises(ValueError, match="no tests"):
            ev.evaluate_problem(problem, ["    return x"], ev.StaticExecutor())

    def test_summarize_skips_small_problems(self, caplog):
        records = [
            ev.EvalRecord(task_id="a", n=4, c=2, passed=[1, 1, 0, 0]),
            ev.EvalRecord(task_id="b", n=2, c=0, passed=[0, 0]),
        ]
        with caplog.at_level("WARNING"):
            summary = ev.summarize(records, ks=(1, 4))
        assert summary["pass@1"] == pytest.approx((0.5 + 0.0) / 2)
        assert summary["pass@4"] == pytest.approx(ev.pass_at_k(4, 2, 4))
        assert "skipping 1 problems" in caplog.text


class TestExecutors:
    def test_static_executor_checks_syntax_only(self):
        ok = ev.StaticExecutor().run("def f(x):\n    return x\n", "f", ["assert True"])
        bad = ev.StaticExecutor().run("def f(x:\n", "f", ["assert True"])
        assert ok.passed
        assert not bad.passed
        assert bad.verdicts[0].status == ev.ERROR

    def test_subprocess_executor_round_trip(self):
        fake_runner = (
            "import sys, json\n"
            "for line in sys.stdin:\n"
            "    req = json.loads(line)\n"
            "    verdicts = [{'test': t, 'status': 'pass'} for t in req['tests']]\n"
            "    out = {'v': 1, 'verdicts': verdicts, 'imports_added': ['math']}\n"
            "    sys.stdout.write(json.dumps(out) + '\\n')\n"
            "    sys.stdout.flush()\n"
        )
        executor = ev.SubprocessExecutor([sys.executable, "-c", fake_runner])
        try:
            result = executor.run("def f():\n    pass\n", "f", ["assert True", "assert 1"])
        finally:
            executor.close()
        assert result.passed
        assert [v.test for v in result.verdicts] == ["assert True", "assert 1"]
        assert result.imports_added == ["math"]

    def test_subprocess_executor_env_var(self, monkeypatch):
        monkeypatch.delenv(ev.RUNNER_ENV_VAR, raising=False)
        with pytest.raises(ValueError, match=ev.RUNNER_ENV_VAR):
            ev.SubprocessExecutor()
        fake = "import sys\nfor _ in sys.stdin: pass\n"
        monkeypatch.setenv(ev.RUNNER_ENV_VAR, shlex.join([sys.executable, "-c", fake]))
        executor = ev.SubprocessExecutor()
        assert executor.command == [sys.executable, "-c", fake]


class TestFilters:
    def test_syntax_filter_drops_unparseable(self):
        problem = make_problem()
        survivors = ev.filter_syntax(
            problem, ["    return x + 1", "    return (", "    pass"]
        )
        assert survivors == [0, 2]

    def test_unit_test_filter_inapplicable_without_embedded_tests(self):
        problem = make_problem(docstring="Add one to x.")
        assert ev.filter_unit_tests(problem, ["    return x"], ev.StaticExecutor()) is None

    def test_unit_test_filter_runs_embedded_tests(self):
        problem = make_problem(docstring="Add one.\n>>> f(1)\n2")
        executor = ev.MockExecutor(
            lambda source, test: ev.PASS if "+ 1" in source else ev.FAIL
        )
        survivors = ev.filter_unit_tests(
            problem, ["    return x + 1", "    return x - 1"], executor
        )
        assert survivors == [0]
        assert all(test == "assert f(1) == 2" for _, test in executor.calls)

    def test_typing_probes_from_annotations(self):
        probes = ev.typing_probes(make_problem(), seed=1)
        assert probes is not None and len(probes) == 5
        for probe in probes:
            assert probe.startswith("assert isinstance(f(")
            assert probe.endswith(", int)")
        assert probes == ev.typing_probes(make_problem(), seed=1)
        assert probes != ev.typing_probes(make_problem(), seed=2)

    def test_typing_probes_need_full_annotations(self):
        assert ev.typing_probes(make_problem(signature="def f(x):")) is None
        assert ev.typing_probes(make_problem(signature="def f(x: int):")) is None
        assert (
            ev.typing_probes(make_problem(signature="def f(x: Weird) -> int:")) is None
        )

    def test_typing_filter_keeps_type_correct_candidates(self):
        problem = make_problem()
        executor = ev.MockExecutor(
            lambda source, test: ev.PASS if "int(" in source else ev.FAIL
        )
        survivors = ev.filter_typing(
            problem, ["    return int(x)", "    return str(x)"], executor
        )
        assert survivors == [0]

    def test_list_annotations_supported(self):
        problem = make_problem(signature="def f(xs: list[int]) -> list[int]:")
        probes = ev.typing_probes(problem, seed=0)
        assert probes is not None
        assert all(probe.endswith(", list)") for probe in probes)


class TestFilterReport:
    def test_subset_rules(self):
        problems = [
            make_problem("t/0", docstring="Add.\n>>> f(1)\n2"),
            make_problem("t/1", docstring="No examples here."),
        ]
        completions = {
            "t/0": ["    return x + 1", "    return x - 1", "    return ("],
            "t/1": ["    return x + 1", "    return ("],
        }

        def script(source, test):
            try:
                compile(source, "<c>", "exec")
            except SyntaxError:
                return ev.ERROR
            return ev.PASS if "+ 1" in source else ev.FAIL

        report = ev.filter_report(
            problems,
            completions,
            ev.MockExecutor(script),
            ks=(1, 2),
            filter_names=("unit_test", "syntax"),
        )
        unit = report["filters"]["unit_test"]
        assert unit["task_ids"] == ["t/0"]
        assert unit["baseline_pass@1"] == pytest.approx(ev.pass_at_k(3, 1, 1))
        # Only the correct candidate survives its embedded test: pass@1 is 1.
        assert unit["filtered_pass@1"] == pytest.approx(1.0)
        # A single survivor cannot support pass@2.
        assert unit["filtered_evaluable@2"] == 0
        syntax = report["filters"]["syntax"]
        assert syntax["applicable"] == 2
        assert syntax["filtered_pass@1"] == pytest.approx((0.5 + 1.0) / 2)

    def test_zero_survivors_count_as_failure(self):
        problems = [make_problem("t/0", docstring="f(1) == 2")]
        completions = {"t/0": ["    return x - 1", "    return x * 2"]}
        report = ev.filter_report(
            problems,
            completions,
            ev.MockExecutor(lambda source, test: ev.FAIL),
            ks=(1,),
            filter_names=("unit_test",),
        )
        unit = report["filters"]["unit_test"]
        assert unit["filtered_pass@1"] == 0.0
        assert unit["filtered_evaluable@1"] == 1
