"""Test execution contract and the local subprocess executor.

The grading pipeline never runs student code in-process. An Executor
compiles a materialized project directory and runs one named test at a time,
reporting a raw outcome with durations and captured output. The local
executor enforces a CPU budget through RLIMIT_CPU on the child and a
wall-clock budget through a watchdog that kills the whole process group, so
neither spawned threads nor grandchild processes escape the limits.

Stronger isolation (network cut-off, filesystem jails, containers) is an
adapter concern: implement this module's Executor protocol on top of the
sandbox of your choice and hand it to the grading pipeline unchanged.
"""

from __future__ import annotations

import math
import os
import resource
import signal
import subprocess
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence


class ExecutorError(Exception):
    """Raised when the executor itself cannot run (bad command, OS failure)."""


class TestStatus(Enum):
    PASS = "pass"
    FAIL = "fail"
    CPU_TIMEOUT = "cpu_timeout"
    WALL_TIMEOUT = "wall_timeout"
    FORBIDDEN = "forbidden"
    SKIPPED = "skipped"
    ERROR = "error"


@dataclass(frozen=True)
class RawResult:
    """Outcome of one test-process run, before grading semantics apply."""

    status: TestStatus  # PASS, FAIL, CPU_TIMEOUT or WALL_TIMEOUT
    exit_code: int | None
    term_signal: int | None
    cpu_seconds: float
    wall_seconds: float
    output: str


class Executor(Protocol):
    def compile(self, workdir: Path) -> tuple[bool, str]:
        """Build the project; returns (ok, compiler message)."""
        ...

    def run_test(self, workdir: Path, test_id: str, cpu_timeout: float | None,
                 wall_timeout: float | None) -> RawResult: ...


_OUTPUT_CAP = 10_000  # characters of captured output kept per run
_SAFETY_WALL_CAP = 300.0  # seconds; bounds runs that configure no wall limit


def _truncate(text: str) -> str:
    if len(text) <= _OUTPUT_CAP:
        return text
    return "... (output truncated) ...\n" + text[-_OUTPUT_CAP:]


@dataclass(frozen=True)
class _RunOutcome:
    exit_code: int | None
    term_signal: int | None
    cpu_seconds: float
    wall_seconds: float
    output: str
    watchdog_fired: bool


def _run_limited(cmd: Sequence[str], cwd: Path, cpu_limit: float | None,
                 wall_limit: float) -> _RunOutcome:
    def set_limits() -> None:
        if cpu_limit is not None:
            soft = max(1, math.ceil(cpu_limit))
            resource.setrlimit(resource.RLIMIT_CPU, (soft, soft + 1))

    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            list(cmd), cwd=str(cwd), stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
            start_new_session=True, preexec_fn=set_limits)
    except OSError as exc:
        raise ExecutorError(f"cannot launch {cmd[0]!r}: {exc}") from exc

    fired = threading.Event()

    def kill_group() -> None:
        fired.set()
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass

    watchdog = threading.Timer(wall_limit, kill_group)
    watchdog.daemon = True
    watchdog.start()

    chunks: list[bytes] = []

    def drain() -> None:
        assert proc.stdout is not None
        chunks.append(proc.stdout.read())

    reader = threading.Thread(target=drain, daemon=True)
    reader.start()
    try:
        _, status, rusage = os.wait4(proc.pid, 0)
    finally:
        watchdog.cancel()
    wall = time.monotonic() - start
    reader.join(timeout=5)
    if proc.stdout is not None:
        proc.stdout.close()

    exit_code: int | None = None
    term_signal: int | None = None
    if os.WIFSIGNALED(status):
        term_signal = os.WTERMSIG(status)
    elif os.WIFEXITED(status):
        exit_code = os.WEXITSTATUS(status)
    # the child is already reaped via wait4; keep Popen from waiting again
    proc.returncode = exit_code if exit_code is not None else -(term_signal or 1)
    cpu = rusage.ru_utime + rusage.ru_stime
    output = _truncate(b"".join(chunks).decode("utf-8", errors="replace"))
    return _RunOutcome(exit_code, term_signal, cpu, wall, output, fired.is_set())


class LocalProcessExecutor:
    """Runs compile and test commands as subprocesses of this machine.

    ``test_command`` must contain the literal placeholder ``{test_id}``,
    substituted per run. Both commands execute with the project directory as
    working directory; exit status zero means success.
    """

    def __init__(self, compile_command: Sequence[str] | None,
                 test_command: Sequence[str] | None):
        if test_command is not None \
                and not any("{test_id}" in arg for arg in test_command):
            raise ExecutorError("test_command must reference {test_id}")
        self.compile_command = tuple(compile_command) if compile_command else None
        self.test_command = tuple(test_command) if test_command else None

    def compile(self, workdir: Path) -> tuple[bool, str]:
        if self.compile_command is None:
            return True, ""
        run = _run_limited(self.compile_command, Path(workdir), None,
                           _SAFETY_WALL_CAP)
        if run.watchdog_fired:
            return False, f"compile step killed after {_SAFETY_WALL_CAP:.0f}s"
        return run.exit_code == 0, run.output

    def run_test(self, workdir: Path, test_id: str, cpu_timeout: float | None,
                 wall_timeout: float | None) -> RawResult:
        if self.test_command is None:
            raise ExecutorError("no test_command configured for this course")
        cmd = [arg.replace("{test_id}", test_id) for arg in self.test_command]
        run = _run_limited(cmd, Path(workdir), cpu_timeout,
                           wall_timeout if wall_timeout else _SAFETY_WALL_CAP)

        if run.watchdog_fired and wall_timeout:
            status = TestStatus.WALL_TIMEOUT
        elif cpu_timeout is not None and (
                run.term_signal == signal.SIGXCPU
                or run.cpu_seconds >= math.ceil(cpu_timeout)):
            status = TestStatus.CPU_TIMEOUT
        elif run.watchdog_fired:
            status = TestStatus.FAIL  # safety cap with no configured wall limit
        elif run.exit_code == 0:
            status = TestStatus.PASS
        else:
            status = TestStatus.FAIL
        output = run.output
        if run.watchdog_fired and not wall_timeout:
            output = (output + f"\n[killed: exceeded the {_SAFETY_WALL_CAP:.0f}s "
                               f"safety cap]").strip()
        return RawResult(status, run.exit_code, run.term_signal,
                         run.cpu_seconds, run.wall_seconds, output)
