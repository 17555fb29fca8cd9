"""Hosting-agnostic repository model: snapshots, commits, branches, merges.

A repository is a content-addressed DAG of commits. Each commit carries a
full snapshot of the tree (path to bytes), so history transfer and merging
never need delta reconstruction. Commit ids are SHA-256 over a canonical
byte encoding documented in ``docs/formats.md``; equal content yields equal
ids on every backend.

The module also defines the :class:`HostingService` contract every backend
implements, the thread-safe in-memory backend used by tests and hermetic CLI
runs, and adapters between snapshots and on-disk working directories.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
from dataclasses import dataclass
from difflib import SequenceMatcher
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Iterable, Iterator, Mapping, Protocol


class RepoModelError(Exception):
    """Raised for malformed snapshots, unknown commits, or bad pushes."""


class MergeConflict(RepoModelError):
    """Raised when a three-way merge cannot be resolved automatically."""

    def __init__(self, paths: Iterable[str], detail: str = ""):
        self.paths = tuple(sorted(set(paths)))
        msg = "merge conflict in: " + ", ".join(self.paths)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class HostingError(Exception):
    """Raised when a hosting operation is rejected or a backend misbehaves."""


def _netstr(tag: str, payload: bytes) -> bytes:
    return tag.encode("ascii") + b" " + str(len(payload)).encode("ascii") \
        + b":" + payload


def validate_repo_path(path: str) -> None:
    """Reject non-normalized repo paths. Raises RepoModelError."""
    if not path or path.startswith("/") or "\\" in path:
        raise RepoModelError(f"invalid repo path: {path!r}")
    for seg in path.split("/"):
        if seg in ("", ".", ".."):
            raise RepoModelError(f"invalid repo path: {path!r}")


class Snapshot:
    """An immutable tree: repo-relative paths mapped to file bytes.

    Paths are validated on construction; a path may not simultaneously be a
    file and a directory prefix of another file.
    """

    __slots__ = ("_entries", "_digest")

    def __init__(self, entries: Mapping[str, bytes] | None = None):
        items: dict[str, bytes] = {}
        for path, data in (entries or {}).items():
            validate_repo_path(path)
            if not isinstance(data, bytes):
                raise RepoModelError(f"file content must be bytes: {path!r}")
            items[path] = data
        dirs: set[str] = set()
        for path in items:
            parts = path.split("/")
            for i in range(1, len(parts)):
                dirs.add("/".join(parts[:i]))
        clash = dirs & set(items)
        if clash:
            raise RepoModelError(
                f"path is both a file and a directory: {sorted(clash)[0]!r}")
        self._entries: Mapping[str, bytes] = MappingProxyType(dict(sorted(items.items())))
        self._digest: bytes | None = None

    def paths(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def get(self, path: str, default: bytes | None = None) -> bytes | None:
        return self._entries.get(path, default)

    def __getitem__(self, path: str) -> bytes:
        try:
            return self._entries[path]
        except KeyError:
            raise RepoModelError(f"no such file in snapshot: {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterable[tuple[str, bytes]]:
        return self._entries.items()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Snapshot):
            return NotImplemented
        return dict(self._entries) == dict(other._entries)

    def __hash__(self) -> int:
        return hash(self.tree_digest())

    def __repr__(self) -> str:
        return f"Snapshot({len(self._entries)} files)"

    def tree_digest(self) -> bytes:
        if self._digest is None:
            h = hashlib.sha256()
            for path, data in self._entries.items():
                h.update(_netstr("entry", path.encode("utf-8") + b"\0" + data))
            self._digest = h.digest()
        return self._digest

    def with_files(self, updates: Mapping[str, bytes]) -> Snapshot:
        merged = dict(self._entries)
        merged.update(updates)
        return Snapshot(merged)

    def without(self, paths: Iterable[str]) -> Snapshot:
        drop = set(paths)
        return Snapshot({p: d for p, d in self._entries.items() if p not in drop})


EMPTY_SNAPSHOT = Snapshot()


def compute_commit_id(parents: tuple[str, ...], snapshot: Snapshot, message: str,
                      author: str, timestamp: int) -> str:
    h = hashlib.sha256()
    h.update(_netstr("tree", snapshot.tree_digest()))
    for p in parents:
        h.update(_netstr("parent", p.encode("ascii")))
    h.update(_netstr("author", author.encode("utf-8")))
    h.update(_netstr("time", str(timestamp).encode("ascii")))
    h.update(_netstr("message", message.encode("utf-8")))
    return h.hexdigest()


@dataclass(frozen=True)
class Commit:
    commit_id: str
    parents: tuple[str, ...]
    snapshot: Snapshot
    message: str
    author: str
    timestamp: int

    @staticmethod
    def create(parents: Iterable[str], snapshot: Snapshot, message: str,
               author: str, timestamp: int) -> Commit:
        parents = tuple(parents)
        cid = compute_commit_id(parents, snapshot, message, author, timestamp)
        return Commit(cid, parents, snapshot, message, author, timestamp)

    def verify(self) -> None:
        expect = compute_commit_id(self.parents, self.snapshot, self.message,
                                   self.author, self.timestamp)
        if expect != self.commit_id:
            raise RepoModelError(
                f"commit id mismatch: stored {self.commit_id[:12]}, "
                f"computed {expect[:12]}")


DEFAULT_BRANCH = "main"


class Repo:
    """A mutable repository: commit store plus branch pointers and metadata."""

    def __init__(self, name: str, owner: str, visibility: str = "private",
                 default_branch: str = DEFAULT_BRANCH):
        if visibility not in ("private", "public"):
            raise RepoModelError(f"visibility must be private or public: {visibility!r}")
        self.name = name
        self.owner = owner
        self.visibility = visibility
        self.default_branch = default_branch
        self.branches: dict[str, str] = {}
        self.collaborators: set[str] = set()
        self.commits: dict[str, Commit] = {}

    def __repr__(self) -> str:
        return (f"Repo({self.owner}/{self.name}, {self.visibility}, "
                f"{len(self.commits)} commits)")

    def head(self, branch: str | None = None) -> str | None:
        return self.branches.get(branch or self.default_branch)

    def head_commit(self, branch: str | None = None) -> Commit:
        head = self.head(branch)
        if head is None:
            raise RepoModelError(
                f"{self.owner}/{self.name} has no commits on "
                f"{branch or self.default_branch!r}")
        return self.get_commit(head)

    def get_commit(self, commit_id: str) -> Commit:
        try:
            return self.commits[commit_id]
        except KeyError:
            raise RepoModelError(
                f"unknown commit {commit_id[:12]} in {self.owner}/{self.name}"
            ) from None

    def add_commit(self, c: Commit) -> None:
        """Store a commit; its parents must already be present. Idempotent."""
        if c.commit_id in self.commits:
            return
        c.verify()
        missing = [p for p in c.parents if p not in self.commits]
        if missing:
            raise RepoModelError(
                f"commit {c.commit_id[:12]} has unknown parent {missing[0][:12]}")
        self.commits[c.commit_id] = c

    def set_branch(self, branch: str, commit_id: str) -> None:
        if commit_id not in self.commits:
            raise RepoModelError(f"cannot point branch at unknown commit "
                                 f"{commit_id[:12]}")
        self.branches[branch] = commit_id


def commit(repo: Repo, branch: str, snapshot: Snapshot, message: str,
           author: str, timestamp: int | None = None) -> Commit:
    """Append a commit on ``branch`` (creating it if absent) and advance it."""
    if timestamp is None:
        timestamp = int(time.time())
    head = repo.branches.get(branch)
    parents = (head,) if head else ()
    c = Commit.create(parents, snapshot, message, author, timestamp)
    repo.add_commit(c)
    repo.branches[branch] = c.commit_id
    return c


def walk(repo: Repo, head: str) -> Iterator[Commit]:
    """All commits reachable from ``head``, each yielded once."""
    seen: set[str] = set()
    stack = [head]
    while stack:
        cid = stack.pop()
        if cid in seen:
            continue
        seen.add(cid)
        c = repo.get_commit(cid)
        yield c
        stack.extend(c.parents)


def topo_order(repo: Repo, head: str) -> list[Commit]:
    """Reachable commits ordered parents-first (suitable for replay pushes)."""
    order: list[Commit] = []
    state: dict[str, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[str, bool]] = [(head, False)]
    while stack:
        cid, expanded = stack.pop()
        if expanded:
            state[cid] = 2
            order.append(repo.get_commit(cid))
            continue
        if state.get(cid):
            continue
        state[cid] = 1
        stack.append((cid, True))
        for p in repo.get_commit(cid).parents:
            if state.get(p) != 2:
                stack.append((p, False))
    return order


def is_ancestor(repo: Repo, ancestor_id: str, descendant_id: str) -> bool:
    """True when ``ancestor_id`` equals or is reachable from ``descendant_id``."""
    repo.get_commit(ancestor_id)
    if ancestor_id == descendant_id:
        return True
    seen: set[str] = set()
    stack = [descendant_id]
    while stack:
        cid = stack.pop()
        if cid == ancestor_id:
            return True
        if cid in seen:
            continue
        seen.add(cid)
        stack.extend(repo.get_commit(cid).parents)
    return False


def _ancestor_closure(repo: Repo, head: str) -> set[str]:
    seen: set[str] = set()
    stack = [head]
    while stack:
        cid = stack.pop()
        if cid in seen:
            continue
        seen.add(cid)
        stack.extend(repo.get_commit(cid).parents)
    return seen


def lowest_common_ancestors(repo: Repo, a: str, b: str) -> set[str]:
    """Common ancestors of ``a`` and ``b`` that no other common ancestor reaches.

    Both arguments count as their own ancestors, so for linear history this
    is simply the older of the two commits. Criss-cross histories can yield
    more than one candidate.
    """
    common = _ancestor_closure(repo, a) & _ancestor_closure(repo, b)
    if not common:
        return set()
    shed: set[str] = set()
    for cid in common:
        if cid in shed:
            continue
        for p in repo.get_commit(cid).parents:
            if p in common and p not in shed:
                shed |= _ancestor_closure(repo, p) & common
    return common - shed


# ---------------------------------------------------------------------------
# Three-way merging
# ---------------------------------------------------------------------------

def _match_map(a: list[str], b: list[str]) -> dict[int, int]:
    mapping: dict[int, int] = {}
    for i, j, size in SequenceMatcher(None, a, b, autojunk=False).get_matching_blocks():
        for k in range(size):
            mapping[i + k] = j + k
    return mapping


def merge_lines(base: list[str], ours: list[str],
                theirs: list[str]) -> list[str] | None:
    """Line-level three-way merge; None when any region conflicts."""
    mo = _match_map(base, ours)
    mt = _match_map(base, theirs)
    out: list[str] = []
    bi = oi = ti = 0

    def resolve(b_hi: int, o_hi: int, t_hi: int) -> bool:
        b_chunk = base[bi:b_hi]
        o_chunk = ours[oi:o_hi]
        t_chunk = theirs[ti:t_hi]
        if o_chunk == t_chunk:
            out.extend(o_chunk)
        elif o_chunk == b_chunk:
            out.extend(t_chunk)
        elif t_chunk == b_chunk:
            out.extend(o_chunk)
        else:
            return False
        return True

    for i in range(len(base)):
        if i in mo and i in mt:
            if not resolve(i, mo[i], mt[i]):
                return None
            out.append(base[i])
            bi, oi, ti = i + 1, mo[i] + 1, mt[i] + 1
    if not resolve(len(base), len(ours), len(theirs)):
        return None
    return out


def _merge_file(base: bytes, ours: bytes, theirs: bytes) -> bytes | None:
    try:
        b = base.decode("utf-8")
        o = ours.decode("utf-8")
        t = theirs.decode("utf-8")
    except UnicodeDecodeError:
        return None  # binary: no line-level merging
    merged = merge_lines(b.splitlines(keepends=True), o.splitlines(keepends=True),
                         t.splitlines(keepends=True))
    if merged is None:
        return None
    return "".join(merged).encode("utf-8")


def merge_snapshots(base: Snapshot, ours: Snapshot, theirs: Snapshot) -> Snapshot:
    """Three-way tree merge. Raises MergeConflict naming the losing paths."""
    out: dict[str, bytes] = {}
    conflicts: list[str] = []
    for path in sorted(set(base) | set(ours) | set(theirs)):
        b, o, t = base.get(path), ours.get(path), theirs.get(path)
        if o == t:
            winner = o
        elif o == b:
            winner = t
        elif t == b:
            winner = o
        elif o is None or t is None:
            # deleted on one side, modified on the other
            conflicts.append(path)
            continue
        else:
            merged = _merge_file(b if b is not None else b"", o, t)
            if merged is None:
                conflicts.append(path)
                continue
            winner = merged
        if winner is not None:
            out[path] = winner
    if conflicts:
        raise MergeConflict(conflicts)
    return Snapshot(out)


def merge(repo: Repo, branch: str, other_head: str, author: str,
          timestamp: int | None = None) -> Commit:
    """Merge ``other_head`` into ``branch`` and return the resulting head commit.

    When ``other_head`` is already contained in the branch this is a no-op
    returning the current head. Otherwise a two-parent commit is created
    whose snapshot is the three-way merge against the lowest common ancestor;
    with several equally low ancestors each is tried and all results must
    agree. Disjoint histories merge against an empty base.

    Raises:
        MergeConflict: when any file cannot be merged, or candidate merge
            bases disagree about the result.
        RepoModelError: for unknown branches or commits.
    """
    ours = repo.branches.get(branch)
    if ours is None:
        raise RepoModelError(f"unknown branch {branch!r}")
    repo.get_commit(other_head)
    if is_ancestor(repo, other_head, ours):
        return repo.get_commit(ours)

    bases = lowest_common_ancestors(repo, ours, other_head)
    base_snaps = ([repo.get_commit(b).snapshot for b in sorted(bases)]
                  if bases else [EMPTY_SNAPSHOT])
    ours_snap = repo.get_commit(ours).snapshot
    theirs_snap = repo.get_commit(other_head).snapshot
    results = [merge_snapshots(bs, ours_snap, theirs_snap) for bs in base_snaps]
    if any(r != results[0] for r in results[1:]):
        raise MergeConflict(
            sorted(set(ours_snap) | set(theirs_snap)),
            "merge bases disagree")

    if timestamp is None:
        timestamp = int(time.time())
    c = Commit.create((ours, other_head), results[0],
                      f"Merge {other_head[:12]} into {branch}", author, timestamp)
    repo.add_commit(c)
    repo.set_branch(branch, c.commit_id)
    return c


# ---------------------------------------------------------------------------
# Hosting-service contract
# ---------------------------------------------------------------------------

class HostingService(Protocol):
    """What a hosting backend must provide. All operations are synchronous.

    Contract invariants: ``create_repo`` is idempotent per (name, owner) and
    re-creation returns the existing repository unchanged; ``push`` rejects
    commits whose parents the target repository does not already hold.
    ``fetch`` and ``list_repos`` return detached copies that later mutations
    of hosting state never affect.
    """

    def create_repo(self, name: str, owner: str,
                    visibility: str = "private") -> Repo: ...

    def init_from_snapshot(self, name: str, owner: str, snapshot: Snapshot,
                           message: str, author: str,
                           timestamp: int | None = None) -> str: ...

    def invite_collaborator(self, name: str, owner: str, username: str) -> None: ...

    def push(self, name: str, owner: str, branch: str, commit: Commit) -> None: ...

    def fetch(self, name: str, owner: str) -> Repo: ...

    def list_repos(self, owner: str | None = None) -> list[Repo]: ...

    def repo_exists(self, name: str, owner: str) -> bool: ...


def _clone(repo: Repo) -> Repo:
    # Commits and snapshots are immutable, so sharing them is safe; only the
    # mutable containers need copying.
    out = Repo(repo.name, repo.owner, repo.visibility, repo.default_branch)
    out.branches = dict(repo.branches)
    out.collaborators = set(repo.collaborators)
    out.commits = dict(repo.commits)
    return out


STATE_FORMAT = "repo-state"
STATE_VERSION = 1


class InMemoryHosting:
    """Reference backend holding all repositories in process memory."""

    def __init__(self, clock: Callable[[], float] = time.time):
        self._repos: dict[tuple[str, str], Repo] = {}
        self._lock = threading.RLock()
        self._clock = clock

    def _get(self, name: str, owner: str) -> Repo:
        try:
            return self._repos[(owner, name)]
        except KeyError:
            raise HostingError(f"no such repository: {owner}/{name}") from None

    def create_repo(self, name: str, owner: str,
                    visibility: str = "private") -> Repo:
        with self._lock:
            existing = self._repos.get((owner, name))
            if existing is not None:
                return _clone(existing)
            repo = Repo(name, owner, visibility)
            self._repos[(owner, name)] = repo
            return _clone(repo)

    def init_from_snapshot(self, name: str, owner: str, snapshot: Snapshot,
                           message: str, author: str,
                           timestamp: int | None = None) -> str:
        with self._lock:
            repo = self._get(name, owner)
            if repo.commits:
                raise HostingError(f"repository {owner}/{name} is already initialized")
            if timestamp is None:
                timestamp = int(self._clock())
            c = Commit.create((), snapshot, message, author, timestamp)
            repo.add_commit(c)
            repo.set_branch(repo.default_branch, c.commit_id)
            return c.commit_id

    def invite_collaborator(self, name: str, owner: str, username: str) -> None:
        with self._lock:
            self._get(name, owner).collaborators.add(username)

    def push(self, name: str, owner: str, branch: str, commit: Commit) -> None:
        with self._lock:
            repo = self._get(name, owner)
            try:
                repo.add_commit(commit)
                repo.set_branch(branch, commit.commit_id)
            except RepoModelError as exc:
                raise HostingError(f"push rejected: {exc}") from exc

    def fetch(self, name: str, owner: str) -> Repo:
        with self._lock:
            return _clone(self._get(name, owner))

    def list_repos(self, owner: str | None = None) -> list[Repo]:
        with self._lock:
            return [_clone(r) for (o, _), r in sorted(self._repos.items())
                    if owner is None or o == owner]

    def repo_exists(self, name: str, owner: str) -> bool:
        with self._lock:
            return (owner, name) in self._repos

    # -- persistence --------------------------------------------------------

    def save_state(self, path: str | Path) -> None:
        """Write the entire backend state as canonical JSON (stable bytes)."""
        with self._lock:
            doc = {
                "format": STATE_FORMAT,
                "version": STATE_VERSION,
                "repos": [repo_to_doc(r) for _, r in sorted(self._repos.items())],
            }
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False) + "\n"
        Path(path).write_text(text, encoding="utf-8")

    @staticmethod
    def load_state(path: str | Path,
                   clock: Callable[[], float] = time.time) -> "InMemoryHosting":
        """Rebuild a backend from a state file, verifying every commit id."""
        try:
            raw = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise HostingError(f"cannot read state file {path}: {exc}") from exc
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise HostingError(f"state file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("format") != STATE_FORMAT:
            raise HostingError(f"state file {path} has unrecognized format")
        if doc.get("version") != STATE_VERSION:
            raise HostingError(
                f"state file {path} has unsupported version {doc.get('version')!r}")
        hosting = InMemoryHosting(clock=clock)
        try:
            for rdoc in doc["repos"]:
                repo = repo_from_doc(rdoc)
                hosting._repos[(repo.owner, repo.name)] = repo
        except (KeyError, TypeError, ValueError, RepoModelError) as exc:
            raise HostingError(f"state file {path} is corrupt: {exc}") from exc
        return hosting


def in_memory_hosting(clock: Callable[[], float] = time.time) -> InMemoryHosting:
    """A fresh HostingService whose state lives entirely in memory."""
    return InMemoryHosting(clock=clock)


def file_to_doc(path: str, data: bytes) -> dict:
    try:
        return {"path": path, "text": data.decode("utf-8")}
    except UnicodeDecodeError:
        return {"path": path, "base64": base64.b64encode(data).decode("ascii")}


def file_from_doc(fdoc: dict) -> tuple[str, bytes]:
    if "text" in fdoc:
        return fdoc["path"], fdoc["text"].encode("utf-8")
    return fdoc["path"], base64.b64decode(fdoc["base64"])


def commit_to_doc(c: Commit) -> dict:
    return {
        "id": c.commit_id,
        "parents": list(c.parents),
        "author": c.author,
        "timestamp": c.timestamp,
        "message": c.message,
        "files": [file_to_doc(p, d) for p, d in c.snapshot.items()],
    }


def commit_from_doc(cdoc: dict) -> Commit:
    snap = Snapshot(dict(file_from_doc(f) for f in cdoc["files"]))
    return Commit(cdoc["id"], tuple(cdoc["parents"]), snap, cdoc["message"],
                  cdoc["author"], int(cdoc["timestamp"]))


def repo_to_doc(repo: Repo) -> dict:
    emitted: set[str] = set()
    commit_docs: list[dict] = []
    for head in sorted(set(repo.branches.values())):
        for c in topo_order(repo, head):
            if c.commit_id in emitted:
                continue
            emitted.add(c.commit_id)
            commit_docs.append(commit_to_doc(c))
    return {
        "name": repo.name,
        "owner": repo.owner,
        "visibility": repo.visibility,
        "default_branch": repo.default_branch,
        "collaborators": sorted(repo.collaborators),
        "branches": dict(sorted(repo.branches.items())),
        "commits": commit_docs,
    }


def repo_from_doc(rdoc: dict) -> Repo:
    repo = Repo(rdoc["name"], rdoc["owner"], rdoc["visibility"],
                rdoc["default_branch"])
    for cdoc in rdoc["commits"]:
        repo.add_commit(commit_from_doc(cdoc))  # verifies id and parents
    for branch, head in rdoc["branches"].items():
        repo.set_branch(branch, head)
    repo.collaborators = set(rdoc["collaborators"])
    return repo


def push_missing(hosting: HostingService, name: str, owner: str, branch: str,
                 source: Repo, head: str) -> None:
    """Push every commit reachable from ``head`` that the remote lacks.

    Commits go over one at a time in parents-first order so the remote's
    unknown-parent check holds at each step; the branch ends at ``head``.
    """
    remote = hosting.fetch(name, owner)
    for c in topo_order(source, head):
        if c.commit_id not in remote.commits:
            hosting.push(name, owner, branch, c)
    if remote.branches.get(branch) != head:
        # ensure the branch points at head even when nothing was missing
        if head in remote.commits:
            hosting.push(name, owner, branch, source.get_commit(head))


# ---------------------------------------------------------------------------
# Working-directory adapters
# ---------------------------------------------------------------------------

def snapshot_to_dir(snapshot: Snapshot, root: str | Path) -> None:
    """Materialize a snapshot under ``root`` (created if needed)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for path, data in snapshot.items():
        target = root / path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)


def snapshot_from_dir(root: str | Path,
                      ignore: tuple[str, ...] = (".git", "__pycache__")) -> Snapshot:
    """Capture a working directory as a snapshot, skipping ignored dir names."""
    root = Path(root)
    if not root.is_dir():
        raise RepoModelError(f"not a directory: {root}")
    entries: dict[str, bytes] = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.is_symlink():
            continue
        rel = p.relative_to(root)
        if any(part in ignore for part in rel.parts):
            continue
        entries[rel.as_posix()] = p.read_bytes()
    return Snapshot(entries)
