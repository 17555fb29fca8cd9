"""Command-line entry point binding all pipelines.

Subcommands: strip, publish, enroll, grade, stats, archive-export. Exit
codes: 0 success (a stale-repository grade report is success: staleness is
feedback), 1 usage or configuration error, 2 pipeline failure (marker
violations, aborted publication, grading errors). The last stdout line of
every run is machine-parsable:

    RESULT <ok|error> cmd=<subcommand> [key=value ...]

The hosting backend is selected per invocation: ``memory:<statefile>`` runs
hermetically against the in-memory backend persisted to a state file, and
``remote:<url>`` talks to a hosting service over HTTP (credential via the
COURSEFORGE_TOKEN environment variable only).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import date
from pathlib import Path

from courseforge.analytics import (
    AnalyticsError,
    activity_table,
    commit_activity,
    grade_progress,
)
from courseforge.config import ConfigError, CourseConfig, load_config
from courseforge.enrollment import (
    EnrollmentError,
    enroll,
    enroll_roster,
    parse_roster,
)
from courseforge.executor import ExecutorError, LocalProcessExecutor
from courseforge.grader import (
    GradeLedger,
    GraderError,
    GradeReport,
    export_archives,
    grade_task,
    render_report,
)
from courseforge.publisher import (
    PublishError,
    PublishStatus,
    publish_template,
)
from courseforge.repomodel import (
    Commit,
    HostingError,
    HostingService,
    InMemoryHosting,
    RepoModelError,
    in_memory_hosting,
    snapshot_from_dir,
    snapshot_to_dir,
)
from courseforge.stripper import MarkerViolationError, strip_snapshot

log = logging.getLogger("courseforge")

REMOTE_URL_ENV = "COURSEFORGE_REMOTE_URL"

_PIPELINE_ERRORS = (MarkerViolationError, GraderError, PublishError,
                    HostingError, EnrollmentError, AnalyticsError,
                    RepoModelError, ExecutorError)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this tool reserves 2 for pipeline
    failures, so usage problems exit 1 instead."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _result(ok: bool, cmd: str, **fields) -> None:
    parts = [f"RESULT {'ok' if ok else 'error'}", f"cmd={cmd}"]
    parts.extend(f"{k}={v}" for k, v in fields.items())
    print(" ".join(parts))


def _open_backend(spec: str | None, config: CourseConfig):
    """Resolve --backend into (hosting, save-callback)."""
    if not spec:
        spec = "memory:" + str(Path(config.state_dir) / "hosting-state.json")
    kind, _, arg = spec.partition(":")
    if kind == "memory":
        path = Path(arg) if arg \
            else Path(config.state_dir) / "hosting-state.json"
        hosting = (InMemoryHosting.load_state(path) if path.exists()
                   else in_memory_hosting())

        def save() -> None:
            path.parent.mkdir(parents=True, exist_ok=True)
            hosting.save_state(path)

        return hosting, save
    if kind == "remote":
        url = arg or os.environ.get(REMOTE_URL_ENV, "")
        if not url:
            raise ConfigError(
                f"remote backend needs remote:<url> or {REMOTE_URL_ENV}")
        from courseforge.remote import RestHosting
        return RestHosting(url), lambda: None
    raise ConfigError(f"unknown backend {spec!r} "
                      f"(expected memory:<statefile> or remote:<url>)")


def _build_executor(config: CourseConfig) -> LocalProcessExecutor:
    return LocalProcessExecutor(config.compile_command, config.test_command)


def _report_to_doc(report: GradeReport) -> dict:
    return {
        "task_id": report.task_id,
        "commit_id": report.commit_id,
        "earned": report.earned,
        "maximum": report.maximum,
        "up_to_date": report.up_to_date,
        "messages": list(report.messages),
        "outcomes": [
            {"test_id": o.test_id, "status": o.status.name,
             "duration_wall": o.duration_wall, "duration_cpu": o.duration_cpu,
             "detail": o.detail}
            for o in report.outcomes
        ],
    }


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_strip(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    solution = snapshot_from_dir(args.input)
    template = strip_snapshot(solution, config)
    snapshot_to_dir(template, args.output)
    _result(True, "strip", files=len(template), out=args.output)
    return 0


def _ingest_teacher_dir(hosting: HostingService, directory: str,
                        config: CourseConfig) -> None:
    """Sync a checked-out solution working tree into the teacher repository.

    Creates a commit only when the tree differs from the current head, so a
    CI job can call publish unconditionally on every push.
    """
    snap = snapshot_from_dir(directory)
    hosting.create_repo(config.teacher_repo_name, config.bot_account, "private")
    teacher = hosting.fetch(config.teacher_repo_name, config.bot_account)
    head = teacher.head()
    if head is None:
        hosting.init_from_snapshot(config.teacher_repo_name, config.bot_account,
                                   snap, "Import solution", config.bot_account)
    elif teacher.get_commit(head).snapshot != snap:
        c = Commit.create((head,), snap, "Update solution",
                          config.bot_account, int(time.time()))
        hosting.push(config.teacher_repo_name, config.bot_account,
                     teacher.default_branch, c)


def _cmd_publish(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    hosting, save = _open_backend(args.backend, config)
    if args.teacher_dir:
        _ingest_teacher_dir(hosting, args.teacher_dir, config)
    else:
        hosting.create_repo(config.teacher_repo_name, config.bot_account,
                            "private")
    hosting.create_repo(config.template_repo_name, config.bot_account, "public")
    teacher = hosting.fetch(config.teacher_repo_name, config.bot_account)
    template = hosting.fetch(config.template_repo_name, config.bot_account)

    result = publish_template(hosting, teacher, template, config,
                              _build_executor(config))
    save()
    print(result.message)
    if result.status is PublishStatus.ABORTED:
        for test in result.failing_tests:
            print(f"failing: {test}", file=sys.stderr)
        _result(False, "publish", status=result.status.value,
                failing=len(result.failing_tests))
        return 2
    _result(True, "publish", status=result.status.value,
            commit=result.template_commit)
    return 0


def _cmd_enroll(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    hosting, save = _open_backend(args.backend, config)
    if args.user:
        records = [enroll(hosting, args.user, config)]
    else:
        roster_text = Path(args.roster).read_text(encoding="utf-8")
        records = enroll_roster(hosting, parse_roster(roster_text), config)
    save()
    for r in records:
        print(f"enrolled {r.username} -> {r.repo_name} "
              f"(template {r.template_commit[:12]})")
    _result(True, "enroll", count=len(records))
    return 0


def _cmd_grade(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    hosting, _ = _open_backend(args.backend, config)
    report = grade_task(hosting, args.user, args.task, config,
                        _build_executor(config))
    print(render_report(report))
    if args.json:
        Path(args.json).write_text(
            json.dumps(_report_to_doc(report), indent=2) + "\n",
            encoding="utf-8")
    _result(True, "grade", user=args.user, task=args.task,
            earned=f"{report.earned:g}", maximum=f"{report.maximum:g}",
            up_to_date=str(report.up_to_date).lower())
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    hosting, _ = _open_backend(args.backend, config)
    ledger = GradeLedger(Path(config.state_dir) / "grades.jsonl")
    series = commit_activity(hosting, ledger, config, args.start, args.end)
    print(activity_table(series))
    if args.json:
        doc = {
            "activity": [
                {"day": s.day.isoformat(), "commits_total": s.commits_total,
                 "commits_graded": s.commits_graded,
                 "merges_excluded": s.merges_excluded}
                for s in series
            ],
            "grade_progress": {
                task: {f"{earned:g}": count for earned, count in dist.items()}
                for task, dist in grade_progress(ledger, config).items()
            },
        }
        Path(args.json).write_text(json.dumps(doc, indent=2) + "\n",
                                   encoding="utf-8")
    _result(True, "stats", days=len(series))
    return 0


def _cmd_archive_export(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    store = args.store or str(Path(config.state_dir) / "archive")
    created = export_archives(store, args.task, args.dest)
    for path in created:
        print(path)
    _result(True, "archive-export", task=args.task, students=len(created))
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    base = _Parser(add_help=False)
    base.add_argument("--config", required=True, metavar="FILE",
                      help="course configuration file")
    base.add_argument("--verbose", action="store_true",
                      help="enable debug logging")
    backend = _Parser(add_help=False)
    backend.add_argument("--backend", metavar="SPEC",
                         help="hosting backend: memory:<statefile> or "
                              "remote:<url> (default: memory state file under "
                              "the course state directory)")

    parser = _Parser(prog="courseforge",
                     description="Classroom repository tooling: templates, "
                                 "per-student repos, grading, activity stats.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("strip", parents=[base],
                       help="materialize the student template from a "
                            "solution tree")
    p.add_argument("--in", dest="input", required=True, metavar="DIR",
                   help="solution working tree")
    p.add_argument("--out", dest="output", required=True, metavar="DIR",
                   help="where to write the stripped tree")
    p.set_defaults(handler=_cmd_strip)

    p = sub.add_parser("publish", parents=[base, backend],
                       help="strip, gate on the solution tests, and push the "
                            "template")
    p.add_argument("--teacher-dir", metavar="DIR",
                   help="sync this working tree into the teacher repository "
                        "first (CI checkout)")
    p.set_defaults(handler=_cmd_publish)

    p = sub.add_parser("enroll", parents=[base, backend],
                       help="create and initialize private student repos")
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--user", metavar="NAME", help="enroll one username")
    who.add_argument("--roster", metavar="FILE",
                     help="enroll every entry of a roster file")
    p.set_defaults(handler=_cmd_enroll)

    p = sub.add_parser("grade", parents=[base, backend],
                       help="run the grading pipeline for one student and task")
    p.add_argument("--user", required=True, metavar="NAME")
    p.add_argument("--task", required=True, metavar="ID")
    p.add_argument("--json", metavar="FILE",
                   help="also write the report as JSON")
    p.set_defaults(handler=_cmd_grade)

    p = sub.add_parser("stats", parents=[base, backend],
                       help="per-day commit activity table")
    p.add_argument("--from", dest="start", required=True,
                   type=date.fromisoformat, metavar="YYYY-MM-DD")
    p.add_argument("--to", dest="end", required=True,
                   type=date.fromisoformat, metavar="YYYY-MM-DD")
    p.add_argument("--json", metavar="FILE",
                   help="also write activity and grade distributions as JSON")
    p.set_defaults(handler=_cmd_stats)

    p = sub.add_parser("archive-export", parents=[base],
                       help="export newest archived submissions for one task")
    p.add_argument("--task", required=True, metavar="ID")
    p.add_argument("--dest", required=True, metavar="DIR")
    p.add_argument("--store", metavar="DIR",
                   help="archive store (default: <state>/archive)")
    p.set_defaults(handler=_cmd_archive_export)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        _result(False, cmd, code=1, reason="config")
        return 1
    except MarkerViolationError as exc:
        for violation in exc.violations:
            print(str(violation), file=sys.stderr)
        _result(False, cmd, code=2, reason="marker-violations",
                count=len(exc.violations))
        return 2
    except _PIPELINE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        _result(False, cmd, code=2, reason=type(exc).__name__)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _result(False, cmd, code=2, reason="io")
        return 2


def main() -> None:
    raise SystemExit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
