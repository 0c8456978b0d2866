"""Process-isolating candidate-test runner.

Reads one JSON request per line on stdin, executes the candidate's tests in
a fresh child process with a hard wall-clock deadline, and answers with one
JSON response per line on stdout.
"""

__version__ = "0.1.0"
