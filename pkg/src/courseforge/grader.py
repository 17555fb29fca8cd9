"""Secure grading pipeline: weighted manifests, isolated runs, grade ledger.

Grading a task walks seven steps: fetch the student, template and teacher
repositories; require the template head to be an ancestor of the student
head (staleness is feedback, not execution); archive the marked submission
files; assemble a grading tree where every replaced path comes from the
teacher and sensitive files are gone; then compile and run the manifest's
tests through an Executor, aggregating a weighted grade with feedback.

Student code never runs when the repository is stale, and tampering with a
replaced path cannot affect the grade because the teacher's bytes win.
"""

from __future__ import annotations

import json
import re
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import yaml

from courseforge.config import CourseConfig, TaskDef
from courseforge.executor import Executor, TestStatus
from courseforge.repomodel import (
    Repo,
    Snapshot,
    is_ancestor,
    snapshot_to_dir,
)


class GraderError(Exception):
    """Raised for manifest problems, misconfiguration, or pipeline failures."""


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradedTest:
    """One graded test declaration."""

    test_id: str
    weight: float = 1.0
    cpu_timeout: float | None = None
    wall_timeout: float | None = None
    feedback_on_fail: str | None = None
    forbidden: tuple[str, ...] = ()
    depends_on: str | None = None

    def __post_init__(self) -> None:
        if not self.test_id:
            raise GraderError("test id must be non-empty")
        if self.weight < 0:
            raise GraderError(f"test '{self.test_id}': weight must be >= 0")
        for name, value in (("cpu_timeout", self.cpu_timeout),
                            ("wall_timeout", self.wall_timeout)):
            if value is not None and value <= 0:
                raise GraderError(f"test '{self.test_id}': {name} must be > 0")


@dataclass(frozen=True)
class GradeManifest:
    suite_max: float = 1.0
    tests: tuple[GradedTest, ...] = ()

    def __post_init__(self) -> None:
        if self.suite_max <= 0:
            raise GraderError("suite_max must be > 0")
        ids = [t.test_id for t in self.tests]
        if len(ids) != len(set(ids)):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise GraderError(f"duplicate test id '{dup}'")
        known = set(ids)
        for t in self.tests:
            if t.depends_on is not None and t.depends_on not in known:
                raise GraderError(
                    f"test '{t.test_id}' depends on unknown test '{t.depends_on}'")
        # single-predecessor chains: a cycle is a chain that revisits a node
        next_of = {t.test_id: t.depends_on for t in self.tests}
        for start in ids:
            seen = set()
            node: str | None = start
            while node is not None:
                if node in seen:
                    raise GraderError(f"dependency cycle through '{start}'")
                seen.add(node)
                node = next_of[node]

    def test(self, test_id: str) -> GradedTest:
        for t in self.tests:
            if t.test_id == test_id:
                return t
        raise GraderError(f"unknown test '{test_id}'")


_TEST_KEYS = {"id", "weight", "cpu_timeout", "wall_timeout", "feedback_on_fail",
              "forbidden", "depends_on"}


def parse_manifest(text: str, source: str = "<manifest>") -> GradeManifest:
    """Parse a manifest file; schema documented in ``docs/formats.md``."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise GraderError(f"{source}: YAML parse error: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise GraderError(f"{source}: top level must be a mapping")
    unknown = set(data) - {"suite_max", "tests"}
    if unknown:
        raise GraderError(f"{source}: unknown keys: {', '.join(sorted(unknown))}")
    suite_max = data.get("suite_max", 1)
    if not isinstance(suite_max, (int, float)) or isinstance(suite_max, bool):
        raise GraderError(f"{source}: suite_max must be a number")
    entries = data.get("tests", [])
    if not isinstance(entries, list):
        raise GraderError(f"{source}: 'tests' must be a list")
    tests = []
    for i, entry in enumerate(entries):
        where = f"{source}: tests[{i}]"
        if not isinstance(entry, dict):
            raise GraderError(f"{where}: test must be a mapping")
        unknown = set(entry) - _TEST_KEYS
        if unknown:
            raise GraderError(f"{where}: unknown keys: {', '.join(sorted(unknown))}")
        test_id = entry.get("id")
        if not isinstance(test_id, str) or not test_id:
            raise GraderError(f"{where}: 'id' must be a non-empty string")
        kwargs: dict = {}
        for key in ("weight", "cpu_timeout", "wall_timeout"):
            if key in entry and entry[key] is not None:
                value = entry[key]
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise GraderError(f"{where}: '{key}' must be a number")
                kwargs[key] = float(value)
        if entry.get("feedback_on_fail") is not None:
            if not isinstance(entry["feedback_on_fail"], str):
                raise GraderError(f"{where}: 'feedback_on_fail' must be a string")
            kwargs["feedback_on_fail"] = entry["feedback_on_fail"]
        if entry.get("forbidden") is not None:
            forb = entry.get("forbidden", [])
            if isinstance(forb, str):
                forb = [forb]
            if not isinstance(forb, list) or not all(isinstance(p, str) and p
                                                     for p in forb):
                raise GraderError(f"{where}: 'forbidden' must be a list of "
                                  f"non-empty strings")
            kwargs["forbidden"] = tuple(forb)
        if entry.get("depends_on") is not None:
            if not isinstance(entry["depends_on"], str):
                raise GraderError(f"{where}: 'depends_on' must be a string")
            kwargs["depends_on"] = entry["depends_on"]
        tests.append(GradedTest(test_id, **kwargs))
    return GradeManifest(float(suite_max), tuple(tests))


def load_manifest(teacher_snap: Snapshot, task: TaskDef) -> GradeManifest:
    data = teacher_snap.get(task.manifest_path)
    if data is None:
        raise GraderError(
            f"manifest for task '{task.task_id}' not found at "
            f"{task.manifest_path!r} in the teacher repository")
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise GraderError(f"manifest {task.manifest_path!r} is not UTF-8") from None
    return parse_manifest(text, source=task.manifest_path)


# ---------------------------------------------------------------------------
# Outcomes and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestOutcome:
    test_id: str
    status: TestStatus
    duration_wall: float
    duration_cpu: float | None
    detail: str = ""


@dataclass(frozen=True)
class GradeReport:
    task_id: str
    commit_id: str
    outcomes: tuple[TestOutcome, ...]
    earned: float
    maximum: float
    messages: tuple[str, ...]
    up_to_date: bool


def aggregate_grade(manifest: GradeManifest, outcomes: list[TestOutcome] |
                    tuple[TestOutcome, ...], *, task_id: str = "",
                    commit_id: str = "", up_to_date: bool = True) -> GradeReport:
    """Weighted aggregation of one run's outcomes into a report.

    earned = suite_max * (sum of weights of PASS tests) / (sum of all
    weights); an all-zero weight table earns 0. Feedback messages collect
    ``feedback_on_fail`` for every declared test that did not pass.

    The outcomes must cover the manifest's tests exactly, in any order; the
    single compile-failure ERROR outcome is the one allowed exception.

    Raises:
        GraderError: when outcomes and manifest do not line up.
    """
    outcomes = tuple(outcomes)
    expected = [t.test_id for t in manifest.tests]
    got = [o.test_id for o in outcomes]
    compile_error = (len(outcomes) == 1
                     and outcomes[0].status is TestStatus.ERROR
                     and outcomes[0].test_id not in expected)
    if not compile_error and sorted(got) != sorted(expected):
        raise GraderError(
            f"outcomes do not match the manifest: expected {sorted(expected)}, "
            f"got {sorted(got)}")

    messages: list[str] = []
    earned = 0.0
    if not compile_error:
        by_id = {o.test_id: o for o in outcomes}
        total = sum(t.weight for t in manifest.tests)
        passed = sum(t.weight for t in manifest.tests
                     if by_id[t.test_id].status is TestStatus.PASS)
        earned = manifest.suite_max * passed / total if total > 0 else 0.0
        for t in manifest.tests:
            if t.feedback_on_fail and by_id[t.test_id].status is not TestStatus.PASS:
                messages.append(t.feedback_on_fail)
    return GradeReport(task_id, commit_id, outcomes, earned,
                       manifest.suite_max, tuple(messages), up_to_date)


def render_report(report: GradeReport) -> str:
    """Human-readable report block: one line per test, feedback, total."""
    lines = [f"task: {report.task_id}",
             f"commit: {report.commit_id}",
             f"up to date: {'yes' if report.up_to_date else 'NO'}"]
    for o in report.outcomes:
        status = o.status.name.ljust(12)
        lines.append(f"  {status} {o.test_id}  ({o.duration_wall:.2f}s)")
    if report.messages:
        lines.append("feedback:")
        lines.extend(f"  - {m}" for m in report.messages)
    lines.append(f"grade: {report.earned:g} / {report.maximum:g}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Pipeline steps
# ---------------------------------------------------------------------------

def check_up_to_date(student: Repo, template: Repo) -> tuple[bool, str]:
    """Step 2: is the template head an ancestor of the student head?

    Returns (flag, remediation); the remediation text spells out the fetch
    and merge commands a student needs when the flag is false.
    """
    template_head = template.head()
    if template_head is None:
        return True, ""
    student_head = student.head()
    ok = (student_head is not None
          and template_head in student.commits
          and is_ancestor(student, template_head, student_head))
    if ok:
        return True, ""
    branch = template.default_branch
    remediation = (
        f"Your repository does not contain the latest template commit "
        f"({template_head[:12]}). Integrate the update, then push and "
        f"submit again:\n"
        f"    git fetch template\n"
        f"    git merge template/{branch}\n"
        f"Resolve any conflicts, commit, and push before resubmitting.")
    return False, remediation


def assemble_grading_project(student_snap: Snapshot, teacher_snap: Snapshot,
                             config: CourseConfig) -> Snapshot:
    """Step 4 and 5: teacher files win on replaced paths, secrets drop out.

    Every path matching ``replaced_paths`` is taken from the teacher tree
    (hidden tests included, whether or not the student has the path), and
    every path matching ``sensitive_patterns`` is removed.

    Raises:
        GraderError: when a replaced-path pattern matches nothing in the
            teacher tree, which indicates a misconfigured course.
    """
    replaced = config.replaced
    unmatched = replaced.unmatched_patterns(teacher_snap.paths())
    if unmatched:
        raise GraderError(
            "replaced_paths pattern(s) match nothing in the teacher "
            "repository: " + ", ".join(sorted(unmatched)))
    entries = {p: d for p, d in student_snap.items() if not replaced.matches(p)}
    entries.update((p, d) for p, d in teacher_snap.items() if replaced.matches(p))
    sensitive = config.sensitive
    entries = {p: d for p, d in entries.items() if not sensitive.matches(p)}
    return Snapshot(entries)


def archive_submission(student: Repo, commit_id: str, config: CourseConfig,
                       store: str | Path, *, task_id: str) -> str:
    """Step 3: persist the marked files of a submission for later analysis.

    The archive key is ``task/username/commit``; re-archiving an existing
    key is a no-op. The username is recovered from the repository name.

    Returns the archive key.
    """
    snap = student.get_commit(commit_id).snapshot
    username = student.name
    prefix = f"{config.course_id}-"
    if username.startswith(prefix):
        username = username[len(prefix):]
    key = f"{task_id}/{username}/{commit_id}"
    target = Path(store) / task_id / username / commit_id
    if target.exists():
        return key
    archived = config.archived
    tmp = target.with_name(target.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        for path, data in snap.items():
            if not archived.matches(path):
                continue
            dest = tmp / "files" / path
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(data)
        meta = {"username": username, "task_id": task_id,
                "commit_id": commit_id, "archived_at": int(time.time())}
        (tmp / "meta.json").write_text(
            json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
        tmp.rename(target)
    except OSError:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return key


def export_archives(store: str | Path, task_id: str,
                    dest: str | Path) -> list[Path]:
    """Materialize each student's newest archived submission for one task.

    Produces one directory per student under ``dest`` (layout a plagiarism
    checker can consume directly). Returns the created directories.
    """
    task_dir = Path(store) / task_id
    created: list[Path] = []
    if not task_dir.is_dir():
        return created
    for user_dir in sorted(p for p in task_dir.iterdir() if p.is_dir()):
        best: tuple[int, str] | None = None
        for commit_dir in user_dir.iterdir():
            meta_path = commit_dir / "meta.json"
            if not meta_path.is_file():
                continue
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            rank = (int(meta.get("archived_at", 0)), commit_dir.name)
            if best is None or rank > best:
                best = rank
        if best is None:
            continue
        src = user_dir / best[1] / "files"
        out = Path(dest) / user_dir.name
        if out.exists():
            shutil.rmtree(out)
        if src.is_dir():
            shutil.copytree(src, out)
        else:
            out.mkdir(parents=True)
        created.append(out)
    return created


@dataclass(frozen=True)
class ForbiddenViolation:
    path: str
    line: int
    prefix: str
    reference: str

    def __str__(self) -> str:
        return (f"{self.path}:{self.line}: forbidden dependency "
                f"{self.reference!r} (prefix {self.prefix!r})")


_NAME_RE = re.compile(r"[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)*")


def scan_forbidden(snapshot: Snapshot, test: GradedTest,
                   config: CourseConfig) -> list[ForbiddenViolation]:
    """Static check of one test's forbidden dependency prefixes.

    Only student-authored source files count: paths matching replaced_paths
    are the teacher's and are skipped, as are files without a dialect or
    that are not text. A reference is any dotted-name token whose spelling
    starts with a forbidden prefix.
    """
    if not test.forbidden:
        return []
    replaced = config.replaced
    violations: list[ForbiddenViolation] = []
    for path, data in snapshot.items():
        if replaced.matches(path) or config.dialect_for(path) is None:
            continue
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError:
            continue
        for line_no, line in enumerate(text.splitlines(), start=1):
            for m in _NAME_RE.finditer(line):
                token = m.group()
                for prefix in test.forbidden:
                    if token.startswith(prefix):
                        violations.append(
                            ForbiddenViolation(path, line_no, prefix, token))
                        break
    return violations


def run_graded_tests(project: Snapshot, manifest: GradeManifest,
                     executor: Executor,
                     config: CourseConfig | None = None) -> list[TestOutcome]:
    """Steps 6 and 7: compile, then run every manifest test in order.

    A compile failure stops everything and yields the single ERROR outcome
    (test id "compile") carrying the compiler's message. Tests whose
    dependency did not pass are SKIPPED without running; forbidden-dependency
    hits (scanned when a config is supplied) preempt execution with a
    FORBIDDEN outcome.
    """
    with tempfile.TemporaryDirectory(prefix="grading-") as tmp:
        workdir = Path(tmp)
        snapshot_to_dir(project, workdir)
        ok, message = executor.compile(workdir)
        if not ok:
            return [TestOutcome("compile", TestStatus.ERROR, 0.0, None, message)]
        outcomes: list[TestOutcome] = []
        status_of: dict[str, TestStatus] = {}
        for test in manifest.tests:
            if test.depends_on is not None \
                    and status_of.get(test.depends_on) is not TestStatus.PASS:
                outcome = TestOutcome(
                    test.test_id, TestStatus.SKIPPED, 0.0, None,
                    f"dependency '{test.depends_on}' did not pass")
            else:
                hits = (scan_forbidden(project, test, config)
                        if config is not None else [])
                if hits:
                    detail = "\n".join(str(v) for v in hits)
                    outcome = TestOutcome(test.test_id, TestStatus.FORBIDDEN,
                                          0.0, None, detail)
                else:
                    raw = executor.run_test(workdir, test.test_id,
                                            test.cpu_timeout, test.wall_timeout)
                    outcome = TestOutcome(test.test_id, raw.status,
                                          raw.wall_seconds, raw.cpu_seconds,
                                          raw.output)
            status_of[test.test_id] = outcome.status
            outcomes.append(outcome)
        return outcomes


# ---------------------------------------------------------------------------
# Grade ledger
# ---------------------------------------------------------------------------

LEDGER_FORMAT = "grade-ledger"
LEDGER_VERSION = 1


@dataclass(frozen=True)
class GradeRecord:
    username: str
    task_id: str
    commit_id: str
    earned: float
    maximum: float
    authoritative: bool
    graded_at: int


class GradeLedger:
    """Append-only JSONL store of grading results; first line is a header."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, record: GradeRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps({
            "username": record.username,
            "task_id": record.task_id,
            "commit_id": record.commit_id,
            "earned": record.earned,
            "maximum": record.maximum,
            "authoritative": record.authoritative,
            "graded_at": record.graded_at,
        }, sort_keys=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            if fh.tell() == 0:
                fh.write(json.dumps({"format": LEDGER_FORMAT,
                                     "version": LEDGER_VERSION}) + "\n")
            fh.write(line + "\n")

    def records(self) -> list[GradeRecord]:
        if not self.path.exists():
            return []
        out: list[GradeRecord] = []
        with open(self.path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != LEDGER_FORMAT \
                    or header.get("version") != LEDGER_VERSION:
                raise GraderError(f"{self.path} is not a supported grade ledger")
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                out.append(GradeRecord(
                    d["username"], d["task_id"], d["commit_id"],
                    float(d["earned"]), float(d["maximum"]),
                    bool(d["authoritative"]), int(d["graded_at"])))
        return out

    def graded_commit_ids(self) -> set[str]:
        return {r.commit_id for r in self.records()}


# ---------------------------------------------------------------------------
# The full pipeline
# ---------------------------------------------------------------------------

def grade_task(hosting, username: str, task_id: str, config: CourseConfig,
               executor: Executor, *, ledger: GradeLedger | None = None,
               store: str | Path | None = None) -> GradeReport:
    """Run the whole grading pipeline for one student and task.

    A stale repository (template head not merged) short-circuits with
    up_to_date=False, earned 0, remediation feedback, and no student code
    executed or archived; its ledger record is flagged non-authoritative.

    Raises:
        GraderError: unknown user or task, missing manifest, misconfigured
            replaced paths.
    """
    from courseforge.enrollment import find_enrollment

    task = config.task(task_id)
    record = find_enrollment(config, username)
    if record is None:
        raise GraderError(f"user '{username}' is not enrolled")
    if ledger is None:
        ledger = GradeLedger(Path(config.state_dir) / "grades.jsonl")
    if store is None:
        store = Path(config.state_dir) / "archive"

    # step 1: retrieve the three repositories
    student = hosting.fetch(record.repo_name, config.bot_account)
    template = hosting.fetch(config.template_repo_name, config.bot_account)
    teacher = hosting.fetch(config.teacher_repo_name, config.bot_account)
    head = student.head()
    if head is None:
        raise GraderError(f"repository {record.repo_name} has no commits")
    teacher_snap = teacher.head_commit().snapshot
    manifest = load_manifest(teacher_snap, task)

    # step 2: up-to-date gate
    up_to_date, remediation = check_up_to_date(student, template)
    if not up_to_date:
        report = GradeReport(task_id, head, (), 0.0, manifest.suite_max,
                             (remediation,), False)
        ledger.append(GradeRecord(username, task_id, head, 0.0,
                                  manifest.suite_max, False, int(time.time())))
        return report

    # step 3: archive marked files for plagiarism tooling
    archive_submission(student, head, config, store, task_id=task_id)

    # steps 4-5: teacher files in, sensitive files out
    project = assemble_grading_project(student.get_commit(head).snapshot,
                                       teacher_snap, config)

    # steps 6-7: compile and test
    outcomes = run_graded_tests(project, manifest, executor, config)
    report = aggregate_grade(manifest, outcomes, task_id=task_id,
                             commit_id=head, up_to_date=True)
    ledger.append(GradeRecord(username, task_id, head, report.earned,
                              report.maximum, True, int(time.time())))
    return report
