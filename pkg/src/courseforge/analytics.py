"""Course activity statistics from repository histories and the grade ledger.

Activity is reported as per-day averages across all student repositories:
how many commits landed, how many of those were submitted for grading, and
how many merge commits were excluded. Merges (two or more parents) are
template integrations, not authored work, so they stay out of the totals;
a commit counts as graded when its id appears in the grade ledger. Days are
bucketed in the course's configured timezone.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, datetime, timedelta
from zoneinfo import ZoneInfo

from courseforge.config import CourseConfig
from courseforge.grader import GradeLedger, GradeRecord
from courseforge.repomodel import HostingService, walk


class AnalyticsError(Exception):
    """Raised for invalid date ranges or unknown timezones."""


@dataclass(frozen=True)
class ActivitySeries:
    """One day's averages per student-repository."""

    day: date
    commits_total: float
    commits_graded: float
    merges_excluded: float


def _course_timezone(config: CourseConfig) -> ZoneInfo:
    try:
        return ZoneInfo(config.timezone)
    except KeyError:
        raise AnalyticsError(f"unknown timezone {config.timezone!r}") from None


def student_repos(hosting: HostingService, config: CourseConfig) -> list:
    """Every bot-owned course repository except the template and solution."""
    skip = {config.template_repo_name, config.teacher_repo_name}
    return [r for r in hosting.list_repos(config.bot_account)
            if r.name not in skip]


def commit_activity(hosting: HostingService, ledger: GradeLedger,
                    config: CourseConfig, start: date,
                    end: date) -> list[ActivitySeries]:
    """Per-day commit averages over [start, end], one row per day.

    Totals count single-parent (and root) commits; merge commits are tallied
    separately as excluded. Graded counts ledger-known commit ids whatever
    their shape. Every figure is divided by the number of student
    repositories, so one row reads as "the average student did this much
    that day". An empty course yields an empty list.
    """
    if end < start:
        raise AnalyticsError(f"empty date range: {start} to {end}")
    repos = [r for r in student_repos(hosting, config) if r.head() is not None]
    if not repos:
        return []
    graded_ids = ledger.graded_commit_ids()
    tz = _course_timezone(config)

    days = [start + timedelta(days=i) for i in range((end - start).days + 1)]
    totals = {d: 0 for d in days}
    graded = {d: 0 for d in days}
    merges = {d: 0 for d in days}
    for repo in repos:
        for c in walk(repo, repo.head()):
            day = datetime.fromtimestamp(c.timestamp, tz).date()
            if not start <= day <= end:
                continue
            if len(c.parents) >= 2:
                merges[day] += 1
            else:
                totals[day] += 1
            if c.commit_id in graded_ids:
                graded[day] += 1

    n = len(repos)
    return [ActivitySeries(d, totals[d] / n, graded[d] / n, merges[d] / n)
            for d in days]


def grade_progress(ledger: GradeLedger,
                   config: CourseConfig) -> dict[str, dict[float, int]]:
    """Per-task distribution of current grades.

    A student's current grade for a task is their newest authoritative
    ledger record (stale-submission records carry no grade and are skipped).
    Returns {task_id: {earned: student count}}.
    """
    current: dict[tuple[str, str], GradeRecord] = {}
    for record in ledger.records():  # file order is append order
        if record.authoritative:
            current[(record.username, record.task_id)] = record
    out: dict[str, dict[float, int]] = {}
    for record in current.values():
        bucket = out.setdefault(record.task_id, {})
        bucket[record.earned] = bucket.get(record.earned, 0) + 1
    return out


def activity_table(series: list[ActivitySeries]) -> str:
    """Render the activity series as a tab-separated table with a header."""
    lines = ["day\tcommits_total\tcommits_graded\tmerges_excluded"]
    for row in series:
        lines.append(f"{row.day.isoformat()}\t{row.commits_total:g}"
                     f"\t{row.commits_graded:g}\t{row.merges_excluded:g}")
    return "\n".join(lines)
