"""Benchmark store: one JSON manifest plus one patch file per mined commit.

Layout under a store directory:

    entries/<patch_id>.json    the manifest (schema below)
    patches/<patch_id>.patch   the ground-truth unified diff

Writes are atomic (write to a temp file, then rename), manifests are
dumped with sorted keys and UTF-8 so regenerated stores diff cleanly,
and the reader is strict: unknown schema versions and internally
inconsistent manifests are rejected rather than repaired.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

from .classifier import ClassificationVerdict, verdict_from_dict, verdict_to_dict
from .discovery import HeadTestsState, RepoDescriptor
from .errors import ReviewError, SchemaError, StoreError
from .harvest import CommitRecord, FileChange
from .orchestrator import BuildPlan
from .stats import SignificanceResult, StatConfig, TimingSeries

SCHEMA_VERSION = 1
SUITE_INVOCATION = "whole_suite"
VERIFIED_STATES = ("unreviewed", "accepted", "rejected")
ENTRIES_SUBDIR = "entries"
PATCHES_SUBDIR = "patches"


def make_patch_id(owner: str, name: str, sha: str) -> str:
    return f"{owner}__{name}__{sha}"


def series_digest(series: TimingSeries) -> str:
    canonical = json.dumps(
        {"test_name": series.test_name, "pre_ms": list(series.pre_ms),
         "post_ms": list(series.post_ms)},
        sort_keys=True,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TimingEvidence:
    """One test's timing samples and the significance judgment on them."""

    series: TimingSeries
    result: SignificanceResult

    @property
    def digest(self) -> str:
        return series_digest(self.series)


@dataclass(frozen=True)
class RunSummary:
    """Run metadata kept in the manifest (samples live in the timing block)."""

    version: str
    runs_requested: int
    runs_recorded: int
    suite_wall_times_ms: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "runs_requested": self.runs_requested,
            "runs_recorded": self.runs_recorded,
            "suite_wall_times_ms": list(self.suite_wall_times_ms),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RunSummary":
        return cls(
            version=payload["version"],
            runs_requested=payload["runs_requested"],
            runs_recorded=payload["runs_recorded"],
            suite_wall_times_ms=tuple(payload.get("suite_wall_times_ms", ())),
        )


@dataclass(frozen=True)
class BenchmarkEntry:
    patch_id: str
    repo: RepoDescriptor
    commit: CommitRecord
    classification: ClassificationVerdict
    build_plan: BuildPlan
    image: str
    runs: tuple[RunSummary, ...]
    timing: tuple[TimingEvidence, ...]
    stat_config: StatConfig = field(default_factory=StatConfig)
    verified: str = "unreviewed"
    reviewer_note: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        expected = make_patch_id(self.repo.owner, self.repo.name, self.commit.sha)
        if self.patch_id != expected:
            raise SchemaError(
                f"patch_id {self.patch_id!r} does not match repo/commit ({expected!r})"
            )
        if self.verified not in VERIFIED_STATES:
            raise SchemaError(f"verified must be one of {VERIFIED_STATES}")
        if self.schema_version != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {self.schema_version}")
        if not self.image:
            raise SchemaError("entry must reference an image")
        if (self.reviewer_note is not None) and self.verified == "unreviewed":
            raise SchemaError("reviewer_note requires a review decision")

    @property
    def has_significant_test(self) -> bool:
        return any(evidence.result.significant for evidence in self.timing)

    @property
    def multi_file(self) -> bool:
        return len(self.commit.changes) > 1

    @property
    def repo_full_name(self) -> str:
        return self.repo.full_name


# ---------------------------------------------------------------------------
# serialization


def _repo_to_dict(repo: RepoDescriptor) -> dict:
    return {
        "owner": repo.owner,
        "name": repo.name,
        "stars": repo.stars,
        "primary_language": repo.primary_language,
        "default_branch": repo.default_branch,
        "head_sha": repo.head_sha,
        "has_root_cmake": repo.has_root_cmake,
        "has_cmake_tests": repo.has_cmake_tests,
        "head_tests_pass": repo.head_tests_pass.value,
    }


def _repo_from_dict(payload: dict) -> RepoDescriptor:
    return RepoDescriptor(
        owner=payload["owner"],
        name=payload["name"],
        stars=payload["stars"],
        primary_language=payload["primary_language"],
        default_branch=payload["default_branch"],
        head_sha=payload.get("head_sha", ""),
        has_root_cmake=payload.get("has_root_cmake", False),
        has_cmake_tests=payload.get("has_cmake_tests", False),
        head_tests_pass=HeadTestsState(payload.get("head_tests_pass", "untested")),
    )


def _commit_to_dict(commit: CommitRecord, patch_file: str) -> dict:
    return {
        "sha": commit.sha,
        "parent_sha": commit.parent_sha,
        "author_timestamp": commit.author_timestamp.isoformat(),
        "message": commit.message,
        "linked_issue_text": commit.linked_issue_text,
        "patch_file": patch_file,
        "changes": [
            {
                "path": c.path,
                "change_kind": c.change_kind,
                "old_path": c.old_path,
                "lines_added": c.lines_added,
                "lines_deleted": c.lines_deleted,
            }
            for c in commit.changes
        ],
    }


def _commit_from_dict(payload: dict) -> CommitRecord:
    return CommitRecord(
        sha=payload["sha"],
        parent_sha=payload["parent_sha"],
        author_timestamp=datetime.fromisoformat(payload["author_timestamp"]),
        message=payload["message"],
        linked_issue_text=payload.get("linked_issue_text"),
        changes=tuple(
            FileChange(
                path=c["path"],
                change_kind=c["change_kind"],
                old_path=c.get("old_path"),
                lines_added=c.get("lines_added", 0),
                lines_deleted=c.get("lines_deleted", 0),
            )
            for c in payload.get("changes", ())
        ),
    )


def timing_to_dict(evidence: TimingEvidence) -> dict:
    return {
        "test_name": evidence.series.test_name,
        "digest": evidence.digest,
        "pre_ms": list(evidence.series.pre_ms),
        "post_ms": list(evidence.series.post_ms),
        "result": {
            "u_statistic": evidence.result.u_statistic,
            "p_value": evidence.result.p_value,
            "relative_improvement": evidence.result.relative_improvement,
            "significant": evidence.result.significant,
            "method": evidence.result.method,
        },
    }


def timing_from_dict(payload: dict) -> TimingEvidence:
    series = TimingSeries(
        test_name=payload["test_name"],
        pre_ms=tuple(payload["pre_ms"]),
        post_ms=tuple(payload["post_ms"]),
    )
    result_payload = payload["result"]
    result = SignificanceResult(
        u_statistic=result_payload["u_statistic"],
        p_value=result_payload["p_value"],
        relative_improvement=result_payload["relative_improvement"],
        significant=result_payload["significant"],
        method=result_payload["method"],
    )
    evidence = TimingEvidence(series=series, result=result)
    stored = payload.get("digest")
    if stored is not None and stored != evidence.digest:
        raise SchemaError(f"timing digest mismatch for test {series.test_name!r}")
    return evidence


def entry_to_dict(entry: BenchmarkEntry) -> dict:
    patch_file = f"{PATCHES_SUBDIR}/{entry.patch_id}.patch"
    return {
        "schema_version": entry.schema_version,
        "patch_id": entry.patch_id,
        "repo": _repo_to_dict(entry.repo),
        "commit": _commit_to_dict(entry.commit, patch_file),
        "classification": verdict_to_dict(entry.classification),
        "build": {
            "plan": entry.build_plan.to_dict(),
            "image": entry.image,
            "suite_invocation": SUITE_INVOCATION,
            "runs": [run.to_dict() for run in entry.runs],
        },
        "timing": [timing_to_dict(t) for t in entry.timing],
        "stats_decisions": {
            "delta": entry.stat_config.delta,
            "alpha": entry.stat_config.alpha,
            "exact_threshold": entry.stat_config.exact_threshold,
            "improvement_metric": "relative_median",
            "alternative": "post_stochastically_smaller",
            "warmup_discarded": True,
        },
        "has_significant_test": entry.has_significant_test,
        "verified": entry.verified,
        "reviewer_note": entry.reviewer_note,
    }


def entry_from_dict(payload: dict) -> BenchmarkEntry:
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r}")
    decisions = payload.get("stats_decisions", {})
    entry = BenchmarkEntry(
        patch_id=payload["patch_id"],
        repo=_repo_from_dict(payload["repo"]),
        commit=_commit_from_dict(payload["commit"]),
        classification=verdict_from_dict(payload["classification"]),
        build_plan=BuildPlan.from_dict(payload["build"]["plan"]),
        image=payload["build"]["image"],
        runs=tuple(RunSummary.from_dict(r) for r in payload["build"].get("runs", ())),
        timing=tuple(timing_from_dict(t) for t in payload.get("timing", ())),
        stat_config=StatConfig(
            delta=decisions.get("delta", 0.05),
            alpha=decisions.get("alpha", 0.05),
            exact_threshold=decisions.get("exact_threshold", 10000),
        ),
        verified=payload.get("verified", "unreviewed"),
        reviewer_note=payload.get("reviewer_note"),
        schema_version=version,
    )
    if payload.get("has_significant_test") != entry.has_significant_test:
        raise SchemaError(
            f"{entry.patch_id}: stored has_significant_test contradicts timing results"
        )
    return entry


# ---------------------------------------------------------------------------
# filesystem operations


def entry_path(store_dir: str | Path, patch_id: str) -> Path:
    return Path(store_dir) / ENTRIES_SUBDIR / f"{patch_id}.json"


def patch_path(store_dir: str | Path, patch_id: str) -> Path:
    return Path(store_dir) / PATCHES_SUBDIR / f"{patch_id}.patch"


def _atomic_write(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_entry(
    entry: BenchmarkEntry, store_dir: str | Path, *, diff_text: str | None = None
) -> Path:
    """Write the manifest (and, when given, the patch file) atomically.

    The ground-truth diff lives next to the manifest, never inline; pass
    ``diff_text`` on first write and omit it when rewriting a manifest
    whose patch file already exists.
    """
    store_dir = Path(store_dir)
    target = entry_path(store_dir, entry.patch_id)
    patch_target = patch_path(store_dir, entry.patch_id)
    if diff_text is not None:
        _atomic_write(patch_target, diff_text)
    elif not patch_target.is_file():
        raise StoreError(f"no diff_text given and {patch_target} does not exist")
    payload = json.dumps(entry_to_dict(entry), indent=2, sort_keys=True, ensure_ascii=False)
    _atomic_write(target, payload + "\n")
    return target


def read_entry(store_dir: str | Path, patch_id: str) -> BenchmarkEntry:
    target = entry_path(store_dir, patch_id)
    if not target.is_file():
        raise StoreError(f"no entry named {patch_id!r} under {store_dir}")
    try:
        payload = json.loads(target.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise SchemaError(f"{target} is not valid JSON: {exc}") from exc
    return entry_from_dict(payload)


def read_ground_truth_diff(store_dir: str | Path, patch_id: str) -> str:
    target = patch_path(store_dir, patch_id)
    if not target.is_file():
        raise StoreError(f"no patch file for {patch_id!r} under {store_dir}")
    return target.read_text(encoding="utf-8")


@dataclass(frozen=True)
class EntryFilter:
    repo: str | None = None  # "owner/name"
    multi_file: bool | None = None
    has_significant_test: bool | None = None
    verified: str | None = None

    def matches(self, entry: BenchmarkEntry) -> bool:
        if self.repo is not None and entry.repo_full_name != self.repo:
            return False
        if self.multi_file is not None and entry.multi_file != self.multi_file:
            return False
        if (
            self.has_significant_test is not None
            and entry.has_significant_test != self.has_significant_test
        ):
            return False
        if self.verified is not None and entry.verified != self.verified:
            return False
        return True


@dataclass(frozen=True)
class QueryResult:
    entries: tuple[BenchmarkEntry, ...]
    errors: tuple[tuple[str, str], ...]  # (file path, message)


def query(store_dir: str | Path, entry_filter: EntryFilter | None = None) -> QueryResult:
    """Scan every manifest; malformed files are reported, not fatal."""
    entries_dir = Path(store_dir) / ENTRIES_SUBDIR
    if not entries_dir.is_dir():
        return QueryResult((), ())
    entry_filter = entry_filter or EntryFilter()
    found = []
    errors = []
    for path in sorted(entries_dir.glob("*.json")):
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            entry = entry_from_dict(payload)
        except (ValueError, KeyError, TypeError, SchemaError) as exc:
            errors.append((str(path), str(exc)))
            continue
        if entry_filter.matches(entry):
            found.append(entry)
    found.sort(key=lambda e: e.patch_id)
    return QueryResult(tuple(found), tuple(errors))


def mark_verified(
    store_dir: str | Path, patch_id: str, decision: str, note: str | None = None
) -> BenchmarkEntry:
    """One-way review: unreviewed entries move to accepted or rejected, once."""
    if decision not in ("accepted", "rejected"):
        raise ReviewError(f"decision must be accepted or rejected, got {decision!r}")
    entry = read_entry(store_dir, patch_id)
    if entry.verified != "unreviewed":
        raise ReviewError(f"{patch_id} was already reviewed as {entry.verified}")
    updated = replace(entry, verified=decision, reviewer_note=note)
    write_entry(updated, store_dir)
    return updated
