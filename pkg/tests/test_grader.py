"""Grading: manifests, weighted aggregation, pipeline steps, the full run."""

from __future__ import annotations

import itertools
import json
import random

import pytest

from courseforge.config import ConfigError, TaskDef
from courseforge.enrollment import enroll
from courseforge.executor import TestStatus
from courseforge.grader import (
    ForbiddenViolation,
    GradedTest,
    GradeLedger,
    GradeManifest,
    GradeRecord,
    GraderError,
    TestOutcome,
    aggregate_grade,
    archive_submission,
    assemble_grading_project,
    check_up_to_date,
    export_archives,
    grade_task,
    load_manifest,
    parse_manifest,
    render_report,
    run_graded_tests,
    scan_forbidden,
)
from courseforge.repomodel import (
    Commit,
    Repo,
    Snapshot,
    commit,
    in_memory_hosting,
)

from oracles import weighted_grade
from util import (
    MANIFEST_T1,
    SOLVED_COUNTER,
    ScriptedExecutor,
    make_config,
    merge_template_update,
    setup_course,
    solution_snapshot,
    student_commit,
)


def outcome(test_id: str, status: TestStatus, wall: float = 0.25) -> TestOutcome:
    return TestOutcome(test_id, status, wall, 0.1)


# ---------------------------------------------------------------------------
# Manifest parsing and validation
# ---------------------------------------------------------------------------

def test_manifest_defaults():
    m = parse_manifest("tests:\n  - id: only\n")
    assert m.suite_max == 1.0
    t = m.test("only")
    assert t.weight == 1.0
    assert t.cpu_timeout is None and t.wall_timeout is None
    assert t.feedback_on_fail is None and t.forbidden == () \
        and t.depends_on is None


def test_manifest_full_fields():
    m = parse_manifest(MANIFEST_T1, source="tasks/t1.yaml")
    assert m.suite_max == 1.0
    assert [t.test_id for t in m.tests] == ["mytest1", "mytest2", "hidden_prop"]
    one = m.test("mytest1")
    assert one.weight == 5.0 and one.cpu_timeout == 10.0
    assert one.forbidden == ("threading",)
    assert m.test("mytest2").feedback_on_fail \
        == "You forgot to consider this particular case"
    assert m.test("hidden_prop").weight == 0.0


def test_manifest_single_forbidden_string_becomes_tuple():
    m = parse_manifest("tests:\n  - id: t\n    forbidden: java.lang.Thread\n")
    assert m.test("t").forbidden == ("java.lang.Thread",)


def test_empty_manifest_is_valid():
    m = parse_manifest("")
    assert m == GradeManifest(1.0, ())


def test_manifest_rejects_bad_shapes():
    with pytest.raises(GraderError, match="top level must be a mapping"):
        parse_manifest("- 1\n- 2\n")
    with pytest.raises(GraderError, match="unknown keys: points"):
        parse_manifest("points: 3\n")
    with pytest.raises(GraderError, match="suite_max must be a number"):
        parse_manifest("suite_max: lots\n")
    with pytest.raises(GraderError, match="suite_max must be a number"):
        parse_manifest("suite_max: true\n")
    with pytest.raises(GraderError, match="'tests' must be a list"):
        parse_manifest("tests: nope\n")
    with pytest.raises(GraderError, match=r"tests\[0\]: test must be a mapping"):
        parse_manifest("tests:\n  - 12\n")
    with pytest.raises(GraderError, match=r"tests\[1\]: unknown keys: extra"):
        parse_manifest("tests:\n  - id: a\n  - id: b\n    extra: 1\n")
    with pytest.raises(GraderError, match="'id' must be a non-empty string"):
        parse_manifest("tests:\n  - weight: 1\n")
    with pytest.raises(GraderError, match="'weight' must be a number"):
        parse_manifest("tests:\n  - id: a\n    weight: heavy\n")
    with pytest.raises(GraderError, match="YAML parse error"):
        parse_manifest("tests: [unclosed\n")


def test_manifest_rejects_bad_semantics():
    with pytest.raises(GraderError, match="duplicate test id 'a'"):
        parse_manifest("tests:\n  - id: a\n  - id: a\n")
    with pytest.raises(GraderError, match="depends on unknown test 'ghost'"):
        parse_manifest("tests:\n  - id: a\n    depends_on: ghost\n")
    with pytest.raises(GraderError, match="dependency cycle"):
        parse_manifest("tests:\n"
                       "  - id: a\n    depends_on: b\n"
                       "  - id: b\n    depends_on: a\n")
    with pytest.raises(GraderError, match="dependency cycle"):
        parse_manifest("tests:\n  - id: a\n    depends_on: a\n")
    with pytest.raises(GraderError, match="weight must be >= 0"):
        GradedTest("a", weight=-1)
    with pytest.raises(GraderError, match="cpu_timeout must be > 0"):
        GradedTest("a", cpu_timeout=0)
    with pytest.raises(GraderError, match="suite_max must be > 0"):
        GradeManifest(0.0, ())


def test_load_manifest_from_teacher_snapshot():
    task = TaskDef("t1", "tasks/t1.yaml")
    m = load_manifest(solution_snapshot(), task)
    assert m.test("mytest1").weight == 5.0
    with pytest.raises(GraderError, match="not found at 'tasks/t9.yaml'"):
        load_manifest(solution_snapshot(), TaskDef("t9", "tasks/t9.yaml"))
    bad = Snapshot({"tasks/t1.yaml": bytes([0xFF, 0xFE, 0x00])})
    with pytest.raises(GraderError, match="not UTF-8"):
        load_manifest(bad, task)


# ---------------------------------------------------------------------------
# Weighted aggregation
# ---------------------------------------------------------------------------

LISTING = parse_manifest(
    "suite_max: 1\n"
    "tests:\n"
    "  - id: mytest1\n    weight: 5\n"
    "  - id: mytest2\n    weight: 3\n")


def test_two_test_grade_table_is_exact():
    cases = {
        (True, True): 1.0,
        (True, False): 0.625,
        (False, True): 0.375,
        (False, False): 0.0,
    }
    for (one, two), expected in cases.items():
        report = aggregate_grade(LISTING, [
            outcome("mytest1", TestStatus.PASS if one else TestStatus.FAIL),
            outcome("mytest2", TestStatus.PASS if two else TestStatus.FAIL),
        ])
        assert report.earned == expected
        assert report.maximum == 1.0


def test_every_pass_pattern_matches_weighted_oracle():
    rng = random.Random(1009)
    for _ in range(40):
        n = rng.randrange(1, 7)
        weights = [rng.randrange(0, 6) for _ in range(n)]
        suite_max = rng.choice([1, 2, 10, 20])
        manifest = GradeManifest(float(suite_max), tuple(
            GradedTest(f"t{i}", weight=float(w)) for i, w in enumerate(weights)))
        for pattern in itertools.product([False, True], repeat=n):
            outcomes = [outcome(f"t{i}", TestStatus.PASS if ok else TestStatus.FAIL)
                        for i, ok in enumerate(pattern)]
            rng.shuffle(outcomes)  # order must not matter
            report = aggregate_grade(manifest, outcomes)
            assert report.earned == weighted_grade(suite_max, weights,
                                                   list(pattern))
            assert 0.0 <= report.earned <= suite_max


def test_zero_weight_table_earns_zero():
    manifest = GradeManifest(5.0, (GradedTest("a", weight=0.0),
                                   GradedTest("b", weight=0.0)))
    report = aggregate_grade(manifest, [outcome("a", TestStatus.PASS),
                                        outcome("b", TestStatus.PASS)])
    assert report.earned == 0.0
    assert report.maximum == 5.0


def test_zero_weight_tests_do_not_move_the_grade():
    with_zero = parse_manifest(MANIFEST_T1)
    for hidden in (TestStatus.PASS, TestStatus.FAIL):
        report = aggregate_grade(with_zero, [
            outcome("mytest1", TestStatus.PASS),
            outcome("mytest2", TestStatus.FAIL),
            outcome("hidden_prop", hidden),
        ])
        assert report.earned == 0.625


def test_fixing_one_test_never_lowers_the_grade():
    rng = random.Random(77)
    weights = [3, 0, 5, 1, 2]
    manifest = GradeManifest(10.0, tuple(
        GradedTest(f"t{i}", weight=float(w)) for i, w in enumerate(weights)))
    for _ in range(50):
        pattern = [rng.random() < 0.5 for _ in weights]
        flip = rng.randrange(len(weights))
        if pattern[flip]:
            continue
        before = aggregate_grade(manifest, [
            outcome(f"t{i}", TestStatus.PASS if ok else TestStatus.FAIL)
            for i, ok in enumerate(pattern)]).earned
        pattern[flip] = True
        after = aggregate_grade(manifest, [
            outcome(f"t{i}", TestStatus.PASS if ok else TestStatus.FAIL)
            for i, ok in enumerate(pattern)]).earned
        assert after >= before


def test_only_pass_counts_toward_the_grade():
    manifest = GradeManifest(8.0, (GradedTest("a", weight=1.0),
                                   GradedTest("b", weight=1.0),
                                   GradedTest("c", weight=1.0),
                                   GradedTest("d", weight=1.0)))
    report = aggregate_grade(manifest, [
        outcome("a", TestStatus.PASS),
        outcome("b", TestStatus.CPU_TIMEOUT),
        outcome("c", TestStatus.FORBIDDEN),
        outcome("d", TestStatus.SKIPPED),
    ])
    assert report.earned == 2.0


def test_feedback_collected_for_each_non_passing_declared_test():
    manifest = GradeManifest(1.0, (
        GradedTest("a", feedback_on_fail="check empty input"),
        GradedTest("b", feedback_on_fail="mind the overflow"),
        GradedTest("c", feedback_on_fail="unused, test passed"),
    ))
    report = aggregate_grade(manifest, [
        outcome("a", TestStatus.FAIL),
        outcome("b", TestStatus.WALL_TIMEOUT),
        outcome("c", TestStatus.PASS),
    ])
    assert report.messages == ("check empty input", "mind the overflow")


def test_outcome_coverage_must_match_manifest_exactly():
    with pytest.raises(GraderError, match="outcomes do not match"):
        aggregate_grade(LISTING, [outcome("mytest1", TestStatus.PASS)])
    with pytest.raises(GraderError, match="outcomes do not match"):
        aggregate_grade(LISTING, [outcome("mytest1", TestStatus.PASS),
                                  outcome("mytest2", TestStatus.PASS),
                                  outcome("stranger", TestStatus.PASS)])
    with pytest.raises(GraderError, match="outcomes do not match"):
        aggregate_grade(LISTING, [outcome("mytest1", TestStatus.PASS),
                                  outcome("mytest1", TestStatus.PASS)])


def test_single_compile_error_outcome_is_the_allowed_exception():
    errored = TestOutcome("compile", TestStatus.ERROR, 0.0, None,
                          "SyntaxError: invalid syntax")
    report = aggregate_grade(LISTING, [errored], task_id="t1", commit_id="c0")
    assert report.earned == 0.0
    assert report.maximum == 1.0
    assert report.outcomes == (errored,)
    assert report.messages == ()
    # an ERROR on a declared test is not the compile escape hatch
    with pytest.raises(GraderError, match="outcomes do not match"):
        aggregate_grade(LISTING, [outcome("mytest1", TestStatus.ERROR)])


def test_render_report_layout():
    report = aggregate_grade(LISTING, [
        outcome("mytest1", TestStatus.PASS, wall=0.5),
        outcome("mytest2", TestStatus.FAIL, wall=1.0),
    ], task_id="t1", commit_id="abc123", up_to_date=True)
    manifest_with_feedback = GradeManifest(1.0, (
        GradedTest("mytest1", weight=5.0),
        GradedTest("mytest2", weight=3.0,
                   feedback_on_fail="You forgot to consider this particular case"),
    ))
    report = aggregate_grade(manifest_with_feedback, report.outcomes,
                             task_id="t1", commit_id="abc123")
    text = render_report(report)
    assert text == (
        "task: t1\n"
        "commit: abc123\n"
        "up to date: yes\n"
        "  PASS         mytest1  (0.50s)\n"
        "  FAIL         mytest2  (1.00s)\n"
        "feedback:\n"
        "  - You forgot to consider this particular case\n"
        "grade: 0.625 / 1"
    )


def test_render_report_flags_stale_submission():
    report = aggregate_grade(GradeManifest(2.0, ()), [], task_id="t1",
                             commit_id="c", up_to_date=False)
    text = render_report(report)
    assert "up to date: NO" in text
    assert text.endswith("grade: 0 / 2")


# ---------------------------------------------------------------------------
# Pipeline steps
# ---------------------------------------------------------------------------

def _two_repos(with_update: bool) -> tuple[Repo, Repo]:
    template = Repo("cs101-template", "bot", "public")
    c1 = commit(template, "main", Snapshot({"a.py": b"x = 1\n"}), "v1", "bot", 1)
    student = Repo("cs101-alice", "bot")
    student.add_commit(c1)
    student.set_branch("main", c1.commit_id)
    commit(student, "main", Snapshot({"a.py": b"x = 2\n"}), "work", "alice", 5)
    if with_update:
        commit(template, "main", Snapshot({"a.py": b"x = 1\n", "b.py": b"\n"}),
               "v2", "bot", 10)
    return student, template


def test_up_to_date_when_student_contains_template_head():
    student, template = _two_repos(with_update=False)
    ok, remediation = check_up_to_date(student, template)
    assert ok and remediation == ""


def test_stale_when_template_advanced():
    student, template = _two_repos(with_update=True)
    ok, remediation = check_up_to_date(student, template)
    assert not ok
    assert template.head()[:12] in remediation
    assert "git fetch template" in remediation
    assert "git merge template/main" in remediation


def test_merging_the_update_restores_up_to_date():
    student, template = _two_repos(with_update=True)
    update = template.head_commit()
    student.add_commit(update)
    from courseforge.repomodel import merge
    merge(student, "main", update.commit_id, "alice", 20)
    ok, _ = check_up_to_date(student, template)
    assert ok


def test_empty_template_counts_as_up_to_date():
    student, _ = _two_repos(with_update=False)
    ok, _ = check_up_to_date(student, Repo("cs101-template", "bot"))
    assert ok


def test_unknown_template_head_is_stale_not_an_error():
    template = Repo("cs101-template", "bot")
    commit(template, "main", Snapshot({"a.py": b"x = 1\n"}), "v1", "bot", 1)
    stranger = Repo("cs101-alice", "bot")
    commit(stranger, "main", Snapshot({"mine.py": b"\n"}), "hi", "alice", 2)
    ok, remediation = check_up_to_date(stranger, template)
    assert not ok and "git fetch template" in remediation


def test_assemble_takes_teacher_tests_and_drops_secrets(tmp_path):
    config = make_config(tmp_path)
    teacher = solution_snapshot()
    student = Snapshot({
        "counter.py": SOLVED_COUNTER.encode(),
        "tests/mytest1.py": b"print('tampered to always pass')\n",
        "tests/extra_cheat.py": b"print('planted')\n",
        "secrets/token.txt": b"hunter2\n",
        "notes.md": b"my notes\n",
    })
    project = assemble_grading_project(student, teacher, config)
    # teacher wins on every replaced path, including ones the student planted
    assert project["tests/mytest1.py"] == teacher["tests/mytest1.py"]
    assert project["tests/hidden_prop.py"] == teacher["tests/hidden_prop.py"]
    assert "tests/extra_cheat.py" not in project
    # sensitive files never reach the grading tree
    assert "secrets/token.txt" not in project
    # everything else is the student's
    assert project["counter.py"] == SOLVED_COUNTER.encode()
    assert project["notes.md"] == b"my notes\n"
    assert "tasks/t1.yaml" not in project  # not replaced, student lacks it


def test_assemble_rejects_patterns_matching_nothing(tmp_path):
    config = make_config(tmp_path)
    teacher_without_tests = solution_snapshot().without(
        ["tests/mytest1.py", "tests/mytest2.py", "tests/hidden_prop.py"])
    with pytest.raises(GraderError,
                       match=r"match nothing in the teacher repository: tests/\*\*"):
        assemble_grading_project(Snapshot({"a.py": b"\n"}),
                                 teacher_without_tests, config)


def test_assemble_replaced_paths_random_property(tmp_path):
    config = make_config(tmp_path)
    teacher = solution_snapshot()
    rng = random.Random(31337)
    for _ in range(25):
        files = {}
        for i in range(rng.randrange(1, 8)):
            bucket = rng.choice(["tests", "secrets", "src", ""])
            name = f"f{i}.py"
            path = f"{bucket}/{name}" if bucket else name
            files[path] = f"# student {i}\n".encode()
        student = Snapshot(files)
        project = assemble_grading_project(student, teacher, config)
        for path in project:
            if config.replaced.matches(path):
                assert project[path] == teacher[path]
            assert not config.sensitive.matches(path)
        for path in student:
            if not config.replaced.matches(path) \
                    and not config.sensitive.matches(path):
                assert project[path] == student[path]


# ---------------------------------------------------------------------------
# Forbidden-dependency scan
# ---------------------------------------------------------------------------

def test_scan_reports_path_line_and_reference(tmp_path):
    config = make_config(tmp_path)
    test = GradedTest("t", forbidden=("threading",))
    snap = Snapshot({"counter.py": b"import math\nimport threading\n"})
    hits = scan_forbidden(snap, test, config)
    assert hits == [ForbiddenViolation("counter.py", 2, "threading", "threading")]
    assert str(hits[0]) \
        == "counter.py:2: forbidden dependency 'threading' (prefix 'threading')"


def test_scan_prefix_semantics_cover_dotted_names(tmp_path):
    config = make_config(tmp_path)
    test = GradedTest("t", forbidden=("java.lang.Thread",))
    snap = Snapshot({"Main.java": b"java.lang.Thread.sleep(100);\n"})
    hits = scan_forbidden(snap, test, config)
    assert [h.reference for h in hits] == ["java.lang.Thread.sleep"]
    # prefixes are spelling-based: a longer identifier still matches
    snap2 = Snapshot({"a.py": b"threading_tricks = 1\n"})
    hits2 = scan_forbidden(snap2, GradedTest("t", forbidden=("threading",)),
                           config)
    assert [h.reference for h in hits2] == ["threading_tricks"]


def test_scan_skips_teacher_files_binaries_and_prose(tmp_path):
    config = make_config(tmp_path)
    test = GradedTest("t", forbidden=("threading",))
    snap = Snapshot({
        "tests/mytest1.py": b"import threading\n",   # replaced: teacher's
        "logo.bin": bytes([0xFF, 0xFE]) + b"threading",  # not UTF-8
        "README.md": b"uses threading\n",            # no dialect for .md
        "ok.py": b"import math\n",
    })
    assert scan_forbidden(snap, test, config) == []


def test_scan_without_prefixes_is_free(tmp_path):
    config = make_config(tmp_path)
    snap = Snapshot({"a.py": b"import threading\n"})
    assert scan_forbidden(snap, GradedTest("t"), config) == []


def test_scan_counts_one_hit_per_token(tmp_path):
    config = make_config(tmp_path)
    test = GradedTest("t", forbidden=("threading", "thread"))
    snap = Snapshot({"a.py": b"import threading\n"})
    hits = scan_forbidden(snap, test, config)
    assert len(hits) == 1  # first matching prefix wins, no double report


# ---------------------------------------------------------------------------
# Running the suite (scripted executor)
# ---------------------------------------------------------------------------

def test_compile_failure_yields_single_error_outcome(tmp_path):
    ex = ScriptedExecutor(compile_ok=False,
                          compile_message="main.c:3: expected ';'")
    outcomes = run_graded_tests(Snapshot({"a.py": b"\n"}), LISTING, ex)
    assert len(outcomes) == 1
    only = outcomes[0]
    assert only.test_id == "compile"
    assert only.status is TestStatus.ERROR
    assert only.detail == "main.c:3: expected ';'"
    assert ex.test_calls == []


def test_tests_run_in_manifest_order(tmp_path):
    manifest = GradeManifest(1.0, tuple(
        GradedTest(f"t{i}") for i in (3, 1, 2)))
    ex = ScriptedExecutor()
    outcomes = run_graded_tests(Snapshot({"a.py": b"\n"}), manifest, ex)
    assert ex.test_calls == ["t3", "t1", "t2"]
    assert [o.test_id for o in outcomes] == ["t3", "t1", "t2"]
    assert all(o.status is TestStatus.PASS for o in outcomes)


def test_dependents_of_failures_are_skipped_without_running():
    manifest = GradeManifest(1.0, (
        GradedTest("base"),
        GradedTest("mid", depends_on="base"),
        GradedTest("leaf", depends_on="mid"),
    ))
    ex = ScriptedExecutor(results={"base": TestStatus.FAIL})
    outcomes = run_graded_tests(Snapshot({"a.py": b"\n"}), manifest, ex)
    assert [o.status for o in outcomes] \
        == [TestStatus.FAIL, TestStatus.SKIPPED, TestStatus.SKIPPED]
    assert outcomes[1].detail == "dependency 'base' did not pass"
    assert outcomes[2].detail == "dependency 'mid' did not pass"
    assert ex.test_calls == ["base"]


def test_forbidden_scan_preempts_execution(tmp_path):
    config = make_config(tmp_path)
    manifest = GradeManifest(1.0, (
        GradedTest("pure", forbidden=("threading",)),
        GradedTest("free"),
    ))
    project = Snapshot({"counter.py": b"import threading\n"})
    ex = ScriptedExecutor()
    outcomes = run_graded_tests(project, manifest, ex, config)
    assert outcomes[0].status is TestStatus.FORBIDDEN
    assert "counter.py:1" in outcomes[0].detail
    assert outcomes[1].status is TestStatus.PASS
    assert ex.test_calls == ["free"]


def test_forbidden_scan_needs_a_config():
    manifest = GradeManifest(1.0, (GradedTest("pure", forbidden=("threading",)),))
    project = Snapshot({"counter.py": b"import threading\n"})
    ex = ScriptedExecutor()
    outcomes = run_graded_tests(project, manifest, ex, None)
    assert outcomes[0].status is TestStatus.PASS
    assert ex.test_calls == ["pure"]


def test_dependency_check_wins_over_forbidden_scan(tmp_path):
    config = make_config(tmp_path)
    manifest = GradeManifest(1.0, (
        GradedTest("base"),
        GradedTest("strict", depends_on="base", forbidden=("threading",)),
    ))
    project = Snapshot({"counter.py": b"import threading\n"})
    ex = ScriptedExecutor(results={"base": TestStatus.FAIL})
    outcomes = run_graded_tests(project, manifest, ex, config)
    assert outcomes[1].status is TestStatus.SKIPPED


# ---------------------------------------------------------------------------
# Archive store
# ---------------------------------------------------------------------------

def _student_repo_with_commit() -> tuple[Repo, str]:
    repo = Repo("cs101-alice", "coursebot")
    c = commit(repo, "main", Snapshot({
        "counter.py": b"def f():\n    return 1\n",
        "helper.py": b"pass\n",
        "README.md": b"notes\n",
        "sub/dir.py": b"pass\n",
    }), "work", "alice", 42)
    return repo, c.commit_id


def test_archive_layout_and_key(tmp_path):
    config = make_config(tmp_path)
    repo, head = _student_repo_with_commit()
    store = tmp_path / "store"
    key = archive_submission(repo, head, config, store, task_id="t1")
    assert key == f"t1/alice/{head}"
    base = store / "t1" / "alice" / head
    files = sorted(p.relative_to(base).as_posix()
                   for p in base.rglob("*") if p.is_file())
    # archive_paths is ["*.py"]: top-level python files only
    assert files == ["files/counter.py", "files/helper.py", "meta.json"]
    meta = json.loads((base / "meta.json").read_text())
    assert meta["username"] == "alice"
    assert meta["task_id"] == "t1"
    assert meta["commit_id"] == head
    assert isinstance(meta["archived_at"], int)


def test_archive_is_idempotent(tmp_path):
    config = make_config(tmp_path)
    repo, head = _student_repo_with_commit()
    store = tmp_path / "store"
    archive_submission(repo, head, config, store, task_id="t1")
    sentinel = store / "t1" / "alice" / head / "sentinel"
    sentinel.write_text("left by first archive run")
    key = archive_submission(repo, head, config, store, task_id="t1")
    assert key == f"t1/alice/{head}"
    assert sentinel.exists()  # second call did not rewrite the directory


def test_export_picks_each_students_newest_submission(tmp_path):
    config = make_config(tmp_path)
    store = tmp_path / "store"
    dest = tmp_path / "export"

    def archive(user: str, content: bytes, ts: int) -> None:
        repo = Repo(f"cs101-{user}", "coursebot")
        c = commit(repo, "main", Snapshot({"counter.py": content}), "w", user, ts)
        key = archive_submission(repo, c.commit_id, config, store, task_id="t1")
        meta_path = store / "t1" / user / c.commit_id / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["archived_at"] = ts
        meta_path.write_text(json.dumps(meta, sort_keys=True) + "\n")

    archive("alice", b"# old\n", 100)
    archive("alice", b"# new\n", 200)
    archive("bob", b"# bob\n", 150)
    archive("carol", b"# carol\n", 150)

    created = export_archives(store, "t1", dest)
    assert [p.name for p in created] == ["alice", "bob", "carol"]
    assert (dest / "alice" / "counter.py").read_bytes() == b"# new\n"
    assert (dest / "bob" / "counter.py").read_bytes() == b"# bob\n"


def test_export_of_missing_task_returns_nothing(tmp_path):
    assert export_archives(tmp_path / "store", "t9", tmp_path / "out") == []


# ---------------------------------------------------------------------------
# Grade ledger
# ---------------------------------------------------------------------------

def test_ledger_starts_with_header_and_round_trips(tmp_path):
    path = tmp_path / "grades.jsonl"
    ledger = GradeLedger(path)
    r1 = GradeRecord("alice", "t1", "c" * 64, 0.625, 1.0, True, 1700000000)
    r2 = GradeRecord("bob", "t1", "d" * 64, 0.0, 1.0, False, 1700000100)
    ledger.append(r1)
    ledger.append(r2)
    lines = path.read_text().splitlines()
    assert json.loads(lines[0]) == {"format": "grade-ledger", "version": 1}
    assert len(lines) == 3
    assert GradeLedger(path).records() == [r1, r2]
    assert GradeLedger(path).graded_commit_ids() == {"c" * 64, "d" * 64}


def test_ledger_missing_file_reads_empty(tmp_path):
    assert GradeLedger(tmp_path / "none.jsonl").records() == []


def test_ledger_rejects_foreign_files(tmp_path):
    path = tmp_path / "odd.jsonl"
    path.write_text('{"format": "other", "version": 1}\n')
    with pytest.raises(GraderError, match="not a supported grade ledger"):
        GradeLedger(path).records()


# ---------------------------------------------------------------------------
# The full pipeline against in-memory hosting
# ---------------------------------------------------------------------------

def _graded_course(tmp_path, executor=None):
    config = make_config(tmp_path)
    hosting = in_memory_hosting()
    setup_course(hosting, config, timestamp=1700000000)
    enroll(hosting, "alice", config, timestamp=1700000100)
    return config, hosting


def test_grade_task_full_marks_for_passing_submission(tmp_path):
    config, hosting = _graded_course(tmp_path)
    head = student_commit(hosting, config, "alice",
                          {"counter.py": SOLVED_COUNTER.encode()},
                          timestamp=1700000200)
    ex = ScriptedExecutor()
    report = grade_task(hosting, "alice", "t1", config, ex)
    assert report.up_to_date
    assert report.commit_id == head
    assert report.earned == report.maximum == 1.0
    assert [o.test_id for o in report.outcomes] \
        == ["mytest1", "mytest2", "hidden_prop"]
    assert ex.test_calls == ["mytest1", "mytest2", "hidden_prop"]
    records = GradeLedger(f"{config.state_dir}/grades.jsonl").records()
    assert len(records) == 1
    assert records[0].authoritative
    assert records[0].commit_id == head
    assert records[0].earned == 1.0
    # the submission was archived for later plagiarism analysis
    archived = tmp_path / "state" / "archive" / "t1" / "alice" / head
    assert (archived / "files" / "counter.py").exists()


def test_grade_task_partial_credit_and_feedback(tmp_path):
    config, hosting = _graded_course(tmp_path)
    student_commit(hosting, config, "alice",
                   {"counter.py": SOLVED_COUNTER.encode()})
    ex = ScriptedExecutor(results={"mytest2": TestStatus.FAIL})
    report = grade_task(hosting, "alice", "t1", config, ex)
    assert report.earned == 0.625
    assert report.messages == ("You forgot to consider this particular case",)


def test_grade_task_flags_forbidden_dependency(tmp_path):
    config, hosting = _graded_course(tmp_path)
    student_commit(hosting, config, "alice",
                   {"counter.py": b"import threading\n" + SOLVED_COUNTER.encode()})
    ex = ScriptedExecutor()
    report = grade_task(hosting, "alice", "t1", config, ex)
    by_id = {o.test_id: o for o in report.outcomes}
    assert by_id["mytest1"].status is TestStatus.FORBIDDEN
    assert report.earned == 0.375
    assert "mytest1" not in ex.test_calls


def test_grade_task_stale_submission_runs_nothing(tmp_path):
    config, hosting = _graded_course(tmp_path)
    student_commit(hosting, config, "alice",
                   {"counter.py": SOLVED_COUNTER.encode()},
                   timestamp=1700000200)
    # teacher publishes an update the student never merges
    updated = solution_snapshot().with_files(
        {"README.md": b"# cs101 exercises (v2)\n"})
    setup_course(hosting, config, snapshot=updated, timestamp=1700000300)

    ex = ScriptedExecutor()
    report = grade_task(hosting, "alice", "t1", config, ex)
    assert not report.up_to_date
    assert report.earned == 0.0
    assert report.outcomes == ()
    assert len(report.messages) == 1
    assert "git fetch template" in report.messages[0]
    assert ex.compile_calls == [] and ex.test_calls == []
    records = GradeLedger(f"{config.state_dir}/grades.jsonl").records()
    assert [r.authoritative for r in records] == [False]
    assert not (tmp_path / "state" / "archive").exists()

    # merging the update makes the next run authoritative
    merge_template_update(hosting, config, "alice", timestamp=1700000400)
    report2 = grade_task(hosting, "alice", "t1", config, ex)
    assert report2.up_to_date
    assert report2.earned == 1.0
    records = GradeLedger(f"{config.state_dir}/grades.jsonl").records()
    assert [r.authoritative for r in records] == [False, True]


def test_grade_task_requires_enrollment_and_known_task(tmp_path):
    config, hosting = _graded_course(tmp_path)
    with pytest.raises(GraderError, match="user 'mallory' is not enrolled"):
        grade_task(hosting, "mallory", "t1", config, ScriptedExecutor())
    with pytest.raises(ConfigError, match="unknown task"):
        grade_task(hosting, "alice", "t99", config, ScriptedExecutor())


def test_grade_task_is_deterministic_for_identical_state(tmp_path):
    config, hosting = _graded_course(tmp_path)
    student_commit(hosting, config, "alice",
                   {"counter.py": SOLVED_COUNTER.encode()})
    one = grade_task(hosting, "alice", "t1", config,
                     ScriptedExecutor(results={"mytest1": TestStatus.FAIL}))
    two = grade_task(hosting, "alice", "t1", config,
                     ScriptedExecutor(results={"mytest1": TestStatus.FAIL}))
    assert one.earned == two.earned == 0.375
    assert one.commit_id == two.commit_id
    assert [o.status for o in one.outcomes] == [o.status for o in two.outcomes]
