"""End-to-end mining: discovery output to populated benchmark store.

One public entry point per concern: ``gate_with_runtime`` builds the
head-version tester used by repository gating, ``mine_repository`` walks
one gated repository's history and stores every commit that survives
filtering, classification, building, and timing, and ``MineResult``
carries the funnel counts the CLI reports.

Failures of individual commits are recorded and skipped; only
configuration, credential, or runtime-reachability problems abort a run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from .backends import ChatBackend
from .classifier import BackendConfig, classify_commit, verdict_to_dict
from .discovery import HeadCheck, HeadTester, RepoDescriptor, gate_repository
from .errors import (
    BackendError,
    ContractViolation,
    GitError,
    PerfMineError,
    RuntimeUnavailableError,
    UnparseableResponseError,
)
from .harvest import (
    HarvestConfig,
    apply_structural_filter,
    commit_diff_text,
    resolve_linked_issue,
    run_git,
    walk_history,
)
from .orchestrator import (
    BuildPlan,
    ORIGINAL_DIR,
    PATCHED_DIR,
    RunOutcome,
    build_with_repair,
    prepare_environment,
    run_tests_repeatedly,
    select_base_image,
    snapshot_image,
)
from .runtime import ContainerRuntime
from .stats import StatConfig, TimingSeries, judge
from .store import (
    BenchmarkEntry,
    RunSummary,
    TimingEvidence,
    make_patch_id,
    write_entry,
)

log = logging.getLogger("perfmine")

_WIDE_SINCE = datetime(1970, 1, 1, tzinfo=timezone.utc)
_WIDE_UNTIL = datetime(2100, 1, 1, tzinfo=timezone.utc)


@dataclass
class FunnelCounts:
    """The staged counts printed after a mine run."""

    scanned: int = 0
    structurally_accepted: int = 0
    classified_positive: int = 0
    built: int = 0
    stored: int = 0

    def line(self) -> str:
        return (
            f"funnel: scanned={self.scanned} "
            f"structurally_accepted={self.structurally_accepted} "
            f"classified_positive={self.classified_positive} "
            f"built={self.built} stored={self.stored}"
        )

    def merged(self, other: "FunnelCounts") -> "FunnelCounts":
        return FunnelCounts(
            scanned=self.scanned + other.scanned,
            structurally_accepted=self.structurally_accepted + other.structurally_accepted,
            classified_positive=self.classified_positive + other.classified_positive,
            built=self.built + other.built,
            stored=self.stored + other.stored,
        )


@dataclass
class MineResult:
    funnel: FunnelCounts = field(default_factory=FunnelCounts)
    stored_patch_ids: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (sha, reason)

    def skip(self, sha: str, reason: str) -> None:
        self.skipped.append((sha, reason))
        log.info("skip %s: %s", sha[:10], reason)


def head_sha_of(worktree: str | Path) -> str:
    return run_git(worktree, "rev-parse", "HEAD").strip()


def local_descriptor(path: str | Path, owner: str, name: str) -> RepoDescriptor:
    """Descriptor for a repository mined from a local checkout."""
    return RepoDescriptor(
        owner=owner,
        name=name,
        stars=0,
        primary_language="C++",
        default_branch="HEAD",
        head_sha=head_sha_of(path),
    )


def gate_with_runtime(
    repo: RepoDescriptor,
    worktree: str | Path,
    runtime: ContainerRuntime,
    *,
    cpus: float | None = None,
    memory: str | None = None,
) -> RepoDescriptor:
    """Gate a repository by building and running its head inside the runtime."""

    def tester(tree: Path) -> HeadCheck:
        cmake_text = (tree / "CMakeLists.txt").read_text(encoding="utf-8")
        base_image, _ = select_base_image(cmake_text)
        session = runtime.start_session(base_image, cpus=cpus, memory=memory)
        try:
            head_dir = "/work/head"
            session.clone_at(str(tree), head_dir, head_sha_of(tree))
            build = session.configure_and_build(head_dir, f"{head_dir}-build", ())
            if not build.ok:
                return HeadCheck(has_tests=False, tests_pass=False)
            tests = session.list_tests(f"{head_dir}-build")
            if not tests:
                return HeadCheck(has_tests=False, tests_pass=False)
            suite = session.run_suite(f"{head_dir}-build")
            passed = bool(suite.results) and all(r.passed for r in suite.results)
            return HeadCheck(has_tests=True, tests_pass=passed)
        finally:
            session.close()

    return gate_repository(repo, worktree, tester)


@dataclass(frozen=True)
class MiningLimits:
    runs: int = 31
    max_repair_rounds: int = 3
    container_cpus: float | None = None
    container_memory: str | None = None

    def __post_init__(self) -> None:
        if self.runs < 2:
            raise ValueError("runs must be at least 2 (one warm-up plus one recorded)")
        if self.max_repair_rounds < 1:
            raise ValueError("max_repair_rounds must be positive")


def mine_repository(
    repo: RepoDescriptor,
    clone_path: str | Path,
    *,
    harvest_config: HarvestConfig,
    backend_config: BackendConfig,
    stat_config: StatConfig,
    limits: MiningLimits,
    runtime: ContainerRuntime,
    backend: ChatBackend,
    out_dir: str | Path,
    issue_fetcher=None,
) -> MineResult:
    """Walk one repository's history and store every surviving commit.

    The walk itself uses a maximally wide time window so commits outside
    the configured window are still counted as scanned; the structural
    filter then enforces the real window. That keeps the scanned count
    meaningful as the funnel's denominator.
    """
    result = MineResult()
    wide = replace(harvest_config, since=_WIDE_SINCE, until=_WIDE_UNTIL)
    for commit in walk_history(clone_path, wide):
        result.funnel.scanned += 1
        decision = apply_structural_filter(commit, harvest_config)
        if not decision.accepted:
            result.skip(commit.sha, f"filtered: {decision.reason.value}")
            continue
        result.funnel.structurally_accepted += 1

        if issue_fetcher is not None:
            commit = resolve_linked_issue(commit, repo.owner, repo.name, issue_fetcher)
        try:
            verdict = classify_commit(
                commit,
                lambda c: commit_diff_text(clone_path, c),
                backend_config,
                backend,
            )
        except (UnparseableResponseError, BackendError) as exc:
            result.skip(commit.sha, f"classifier error: {exc}")
            continue
        if verdict.final != "positive":
            result.skip(commit.sha, f"classified negative in phase {verdict.decided_in_phase}")
            continue
        result.funnel.classified_positive += 1

        try:
            _build_measure_store(
                repo, commit, verdict, clone_path,
                stat_config=stat_config, limits=limits, runtime=runtime,
                backend=backend, backend_config=backend_config,
                out_dir=Path(out_dir), result=result,
            )
        except (RuntimeUnavailableError, ContractViolation):
            raise
        except (PerfMineError, GitError, OSError) as exc:
            result.skip(commit.sha, f"orchestration error: {exc}")
    return result


def _build_measure_store(
    repo, commit, verdict, clone_path, *, stat_config, limits, runtime,
    backend, backend_config, out_dir, result,
):
    try:
        cmake_text = run_git(clone_path, "show", f"{commit.sha}:CMakeLists.txt")
    except GitError:
        cmake_text = ""
    base_image, compiler_version = select_base_image(cmake_text)
    env = prepare_environment(
        commit, repo, runtime,
        source=str(clone_path), base_image=base_image,
        cpus=limits.container_cpus, memory=limits.container_memory,
    )
    session = env.session
    try:
        plan = BuildPlan(base_image=base_image, compiler_version=compiler_version)
        build_logs = {}
        for version, version_dir in (("original", ORIGINAL_DIR), ("patched", PATCHED_DIR)):
            attempt = build_with_repair(
                session, version_dir, plan,
                backend=backend, backend_model=backend_config.phase2_backend,
                max_rounds=limits.max_repair_rounds,
            )
            plan = attempt.plan
            build_logs[version] = attempt.log
            if not attempt.build_ok:
                result.skip(commit.sha, f"build failed for {version} "
                                        f"after {plan.repair_rounds_used} repair rounds")
                return
        result.funnel.built += 1

        outcomes = {}
        for version, version_dir in (("original", ORIGINAL_DIR), ("patched", PATCHED_DIR)):
            outcome = run_tests_repeatedly(
                session, version_dir, runs=limits.runs, version=version
            )
            if not outcome.qualified:
                result.skip(commit.sha, f"{version} version not consistently successful")
                return
            outcomes[version] = outcome

        timing = _judge_timings(outcomes["original"], outcomes["patched"], stat_config)
        if not timing:
            result.skip(commit.sha, "no common tests between versions")
            return

        patch_id = make_patch_id(repo.owner, repo.name, commit.sha)
        _persist_logs(session, out_dir, patch_id, build_logs, outcomes)
        image = snapshot_image(session, patch_id, runtime, list(outcomes.values()))

        entry = BenchmarkEntry(
            patch_id=patch_id,
            repo=repo,
            commit=commit,
            classification=verdict,
            build_plan=plan,
            image=image,
            runs=tuple(_summarize(o) for o in outcomes.values()),
            timing=timing,
            stat_config=stat_config,
        )
        write_entry(entry, out_dir, diff_text=commit_diff_text(clone_path, commit))
        result.stored_patch_ids.append(patch_id)
        result.funnel.stored += 1
    finally:
        session.close()


def _judge_timings(
    original: RunOutcome, patched: RunOutcome, config: StatConfig
) -> tuple[TimingEvidence, ...]:
    patched_by_name = {t.name: t for t in patched.tests}
    evidence = []
    for test in original.tests:
        match = patched_by_name.get(test.name)
        if match is None or not test.wall_times_ms or not match.wall_times_ms:
            continue
        series = TimingSeries(
            test_name=test.name, pre_ms=test.wall_times_ms, post_ms=match.wall_times_ms
        )
        evidence.append(TimingEvidence(series=series, result=judge(series, config)))
    return tuple(evidence)


def _summarize(outcome: RunOutcome) -> RunSummary:
    return RunSummary(
        version=outcome.version,
        runs_requested=outcome.runs_requested,
        runs_recorded=outcome.runs_recorded,
        suite_wall_times_ms=outcome.suite_wall_times_ms,
    )


def _persist_logs(session, out_dir: Path, patch_id: str, build_logs: dict, outcomes: dict):
    """Freeze logs into the container (snapshotted) and mirror them to the host."""
    host_dir = out_dir / "logs" / patch_id
    host_dir.mkdir(parents=True, exist_ok=True)
    for version, text in build_logs.items():
        session.write_file(f"/work/logs/build-{version}.log", text)
        (host_dir / f"build-{version}.log").write_text(text, encoding="utf-8")
    runs_payload = json.dumps(
        {version: outcome.to_dict() for version, outcome in outcomes.items()},
        indent=2, sort_keys=True,
    )
    session.write_file("/work/logs/runs.json", runs_payload)
    (host_dir / "runs.json").write_text(runs_payload, encoding="utf-8")
