"""Commit harvesting: walk repository history and apply the structural filter.

A commit survives iff it falls inside the configured time window, touches at
most max_files files, and every touched file is C++ source that is not a
test file.
"""

from __future__ import annotations

import logging
import re
import subprocess
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

from .errors import GitError, ShallowCloneError

log = logging.getLogger(__name__)

CHANGE_KINDS = ("added", "modified", "deleted", "renamed")

DEFAULT_CPP_EXTENSIONS = frozenset(
    {".cpp", ".cc", ".cxx", ".c++", ".hpp", ".hh", ".hxx", ".h", ".ipp", ".inl", ".tpp"}
)
DEFAULT_TEST_MARKERS = frozenset(
    {"test", "tests", "unittest", "unittests", "benchmark", "benchmarks", "gtest"}
)

DEFAULT_SINCE = datetime(2020, 1, 1, tzinfo=timezone.utc)
DEFAULT_UNTIL = datetime(2025, 12, 31, 23, 59, 59, tzinfo=timezone.utc)

RENAME_SIMILARITY = "-M50%"

_SHA_RE = re.compile(r"^[0-9a-f]{40}$")


class RejectReason(str, Enum):
    OUT_OF_WINDOW = "out_of_window"
    TOO_MANY_FILES = "too_many_files"
    NON_CPP_FILE = "non_cpp_file"
    TOUCHES_TESTS = "touches_tests"


class FileClass(str, Enum):
    CPP_SOURCE = "cpp_source"
    TEST_FILE = "test_file"
    OTHER = "other"


@dataclass(frozen=True)
class FileChange:
    """One file touched by a commit; path is the post-image path."""

    path: str
    change_kind: str
    old_path: Optional[str] = None
    lines_added: int = 0
    lines_deleted: int = 0

    def __post_init__(self) -> None:
        if self.change_kind not in CHANGE_KINDS:
            raise ValueError(f"unknown change_kind: {self.change_kind}")
        if (self.old_path is not None) != (self.change_kind == "renamed"):
            raise ValueError("old_path present iff change_kind is 'renamed'")
        if self.lines_added < 0 or self.lines_deleted < 0:
            raise ValueError("line counts must be non-negative")
        for p in (self.path, self.old_path):
            if p is not None and ("\\" in p or p.startswith("./")):
                raise ValueError(f"path not normalized: {p!r}")


@dataclass(frozen=True)
class CommitRecord:
    """One non-merge commit with parsed per-file diff metadata.

    parent_sha may be empty only for a root commit, which the history walk
    never yields; downstream stages reject such records up front.
    """

    sha: str
    parent_sha: str
    author_timestamp: datetime
    message: str
    linked_issue_text: Optional[str] = None
    changes: tuple[FileChange, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "changes", tuple(self.changes))
        if not _SHA_RE.match(self.sha):
            raise ValueError(f"sha is not 40-char lowercase hex: {self.sha!r}")
        if self.parent_sha and not _SHA_RE.match(self.parent_sha):
            raise ValueError(f"parent_sha is not 40-char lowercase hex: {self.parent_sha!r}")
        if self.author_timestamp.tzinfo is None:
            raise ValueError("author_timestamp must be timezone-aware")


@dataclass(frozen=True)
class HarvestConfig:
    since: datetime = DEFAULT_SINCE
    until: datetime = DEFAULT_UNTIL
    max_files: int = 20
    cpp_extensions: frozenset[str] = DEFAULT_CPP_EXTENSIONS
    test_path_markers: frozenset[str] = DEFAULT_TEST_MARKERS

    def __post_init__(self) -> None:
        if self.since >= self.until:
            raise ValueError("since must be before until")
        if self.max_files < 1:
            raise ValueError("max_files must be >= 1")
        object.__setattr__(self, "cpp_extensions", frozenset(e.lower() for e in self.cpp_extensions))
        object.__setattr__(
            self, "test_path_markers", frozenset(m.lower() for m in self.test_path_markers)
        )


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    reason: Optional[RejectReason] = None

    def __post_init__(self) -> None:
        if self.accepted == (self.reason is not None):
            raise ValueError("reason present iff rejected")


def normalize_path(path: str) -> str:
    path = path.replace("\\", "/")
    while path.startswith("./"):
        path = path[2:]
    return path


def _marker_matches(marker: str, text: str) -> bool:
    # word-boundary match: marker must not sit inside a larger alnum run,
    # so "test" hits "parser_test" but not "contest" or "latest"
    return re.search(rf"(?<![a-z0-9]){re.escape(marker)}(?![a-z0-9])", text) is not None


def classify_file(path: str, config: HarvestConfig) -> FileClass:
    """Classify a repo-relative path; total: every path gets exactly one label.

    Test markers are checked before the extension, so tests/data.txt is a
    test file rather than 'other'.
    """
    path = normalize_path(path).lower()
    segments = [s for s in path.split("/") if s]
    if not segments:
        return FileClass.OTHER
    filename = segments[-1]
    dot = filename.rfind(".")
    stem = filename[:dot] if dot > 0 else filename
    ext = filename[dot:] if dot > 0 else ""
    for marker in config.test_path_markers:
        if any(_marker_matches(marker, seg) for seg in segments[:-1]):
            return FileClass.TEST_FILE
        if _marker_matches(marker, stem):
            return FileClass.TEST_FILE
    if ext in config.cpp_extensions:
        return FileClass.CPP_SOURCE
    return FileClass.OTHER


def apply_structural_filter(commit: CommitRecord, config: HarvestConfig) -> FilterDecision:
    """Accept iff in-window, within max_files, and all-C++ non-test changes.

    Rejections carry the first violated criterion, checking the window,
    then the file count, then each file in diff order.
    """
    if not config.since <= commit.author_timestamp <= config.until:
        return FilterDecision(False, RejectReason.OUT_OF_WINDOW)
    if len(commit.changes) > config.max_files:
        return FilterDecision(False, RejectReason.TOO_MANY_FILES)
    for change in commit.changes:
        label = classify_file(change.path, config)
        if label is FileClass.TEST_FILE:
            return FilterDecision(False, RejectReason.TOUCHES_TESTS)
        if label is FileClass.OTHER:
            return FilterDecision(False, RejectReason.NON_CPP_FILE)
    return FilterDecision(True)


# ---------------------------------------------------------------------------
# git plumbing


def run_git(repo: Path | str, *args: str, check: bool = True) -> str:
    cmd = ["git", "-C", str(repo), *args]
    proc = subprocess.run(cmd, capture_output=True, text=True, errors="replace")
    if check and proc.returncode != 0:
        raise GitError(f"{' '.join(cmd)} failed ({proc.returncode}): {proc.stderr.strip()}")
    return proc.stdout


def _check_window_coverage(repo: Path | str, branch: str, since: datetime) -> None:
    shallow = run_git(repo, "rev-parse", "--is-shallow-repository").strip()
    if shallow != "true":
        return
    # shallow boundary commits masquerade as roots, so the only reliable
    # signal is the date of the oldest commit still reachable
    oldest = run_git(repo, "rev-list", "--first-parent", "--reverse", branch).split()
    if not oldest:
        raise GitError(f"no commits on {branch}")
    ts = int(run_git(repo, "show", "-s", "--format=%at", oldest[0]).strip())
    if datetime.fromtimestamp(ts, tz=timezone.utc) > since:
        raise ShallowCloneError(
            f"shallow clone starts at {oldest[0][:12]}, after the window start; "
            "re-clone with more depth or --unshallow"
        )


def _parse_name_status(blob: str) -> list[tuple[str, str, Optional[str]]]:
    """Parse `git diff-tree --name-status -z` output into (kind, path, old_path)."""
    fields = blob.split("\0")
    out: list[tuple[str, str, Optional[str]]] = []
    i = 0
    while i < len(fields) and fields[i]:
        status = fields[i]
        code = status[0]
        if code == "R" or code == "C":
            old, new = fields[i + 1], fields[i + 2]
            i += 3
            kind = "renamed" if code == "R" else "added"
            out.append((kind, normalize_path(new), normalize_path(old) if code == "R" else None))
        else:
            path = fields[i + 1]
            i += 2
            kind = {"A": "added", "M": "modified", "D": "deleted", "T": "modified"}.get(code)
            if kind is None:
                kind = "modified"
            out.append((kind, normalize_path(path), None))
    return out


def _parse_numstat(blob: str) -> dict[str, tuple[int, int]]:
    """Parse `git diff-tree --numstat -z` output into {post path: (added, deleted)}."""
    fields = blob.split("\0")
    counts: dict[str, tuple[int, int]] = {}
    i = 0
    while i < len(fields) and fields[i]:
        head = fields[i]
        parts = head.split("\t")
        added = 0 if parts[0] == "-" else int(parts[0])
        deleted = 0 if parts[1] == "-" else int(parts[1])
        path = parts[2] if len(parts) > 2 else ""
        if path:
            i += 1
        else:
            # rename/copy: two NUL-separated paths follow (old, new)
            path = fields[i + 2]
            i += 3
        counts[normalize_path(path)] = (added, deleted)
    return counts


def parse_commit_changes(repo: Path | str, parent_sha: str, sha: str) -> tuple[FileChange, ...]:
    """Diff one parent/child pair with rename detection at 50% similarity."""
    status_blob = run_git(
        repo, "diff-tree", "-r", RENAME_SIMILARITY, "-z", "--no-commit-id",
        "--name-status", parent_sha, sha,
    )
    numstat_blob = run_git(
        repo, "diff-tree", "-r", RENAME_SIMILARITY, "-z", "--no-commit-id",
        "--numstat", parent_sha, sha,
    )
    counts = _parse_numstat(numstat_blob)
    changes = []
    for kind, path, old_path in _parse_name_status(status_blob):
        added, deleted = counts.get(path, (0, 0))
        changes.append(
            FileChange(
                path=path,
                change_kind=kind,
                old_path=old_path,
                lines_added=added,
                lines_deleted=deleted,
            )
        )
    return tuple(changes)


def commit_diff_text(repo: Path | str, commit: CommitRecord) -> str:
    """Full unified diff of the commit against its parent (for phase 2)."""
    return run_git(repo, "diff", RENAME_SIMILARITY, f"{commit.parent_sha}..{commit.sha}")


def walk_history(
    repo: Path | str,
    config: HarvestConfig,
    branch: str = "HEAD",
) -> Iterator[CommitRecord]:
    """Yield first-parent, non-merge, in-window commits, oldest first.

    Each record carries a fully parsed diff against its single parent.
    Commits with an empty parsed diff are skipped: they cannot satisfy the
    non-empty-changes invariant and would trivially pass the file filters.
    """
    _check_window_coverage(repo, branch, config.since)
    shas = run_git(repo, "rev-list", "--first-parent", "--reverse", branch).split()
    for sha in shas:
        header = run_git(repo, "show", "-s", "--format=%H%x00%P%x00%at%x00%B", sha)
        full_sha, parents_blob, ts_blob, message = header.split("\0", 3)
        parents = parents_blob.split()
        if len(parents) != 1:
            continue  # root or merge commit
        ts = datetime.fromtimestamp(int(ts_blob), tz=timezone.utc)
        if not config.since <= ts <= config.until:
            continue
        changes = parse_commit_changes(repo, parents[0], full_sha)
        if not changes:
            log.debug("skipping empty-diff commit %s", full_sha[:12])
            continue
        yield CommitRecord(
            sha=full_sha,
            parent_sha=parents[0],
            author_timestamp=ts,
            message=message.rstrip("\n"),
            changes=changes,
        )


# ---------------------------------------------------------------------------
# linked issues

_ISSUE_REF = re.compile(r"(?:^|[\s(])#(\d+)\b")
_ISSUE_URL = re.compile(r"github\.com/([\w.-]+)/([\w.-]+)/(?:issues|pull)/(\d+)")


def resolve_linked_issue(
    commit: CommitRecord,
    owner: str,
    name: str,
    fetch_issue: Optional[Callable[[str, str, int], Optional[str]]],
) -> CommitRecord:
    """Attach the linked issue body when the message references one.

    Absent or unresolvable references leave the record unchanged; this
    never raises for fetch failures.
    """
    if fetch_issue is None:
        return commit
    ref: Optional[tuple[str, str, int]] = None
    m = _ISSUE_URL.search(commit.message)
    if m:
        ref = (m.group(1), m.group(2), int(m.group(3)))
    else:
        m = _ISSUE_REF.search(commit.message)
        if m:
            ref = (owner, name, int(m.group(1)))
    if ref is None:
        return commit
    try:
        body = fetch_issue(*ref)
    except Exception as exc:  # best-effort enrichment only
        log.debug("issue lookup failed for %s#%s: %s", ref[0], ref[2], exc)
        return commit
    if not body:
        return commit
    return replace(commit, linked_issue_text=body)
