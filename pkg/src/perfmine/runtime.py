"""Container runtime seam and its three implementations.

Everything the orchestrator and evaluator do to a container goes through
two small protocols: ``ContainerRuntime`` (start sessions, snapshot and
reopen images) and ``ContainerSession`` (clone, build, test, patch,
read/write files). Paths inside a session are POSIX strings under
``/work`` regardless of implementation.

Implementations:

* ``DockerCliRuntime`` drives a real daemon through the ``docker``
  executable. The process runner is injectable so unit tests can replay
  canned transcripts without a daemon.
* ``LocalProcessRuntime`` runs cmake and ctest directly on the host with
  a directory standing in for the container. Snapshots are directory
  copies. Package installation is unsupported by design.
* ``FakeRuntime`` is a deterministic in-process double. Clones are real
  git operations, but builds always succeed and test timings come from
  declarations planted in the source tree (see ``fake-timing`` below),
  so a fixture repository fully scripts its own measurements.

Fake timing declarations are comment lines inside any source file:

    // fake-timing: <test_name> base_ms=<float> step_ms=<float> [fail_run=<int>]

Each suite invocation k (0-based, counted per source tree within one
session) reports wall time ``base_ms + step_ms * k`` for that test, and
fails it when ``fail_run`` equals the 1-based invocation index. Because
the declaration travels with the tree, patched checkouts, snapshots, and
candidate copies all time themselves consistently.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import subprocess
import time
import uuid
import xml.etree.ElementTree as ET
from collections.abc import Callable, Sequence
from pathlib import Path, PurePosixPath
from typing import NamedTuple, Protocol

from .errors import ContractViolation, GitError, RuntimeUnavailableError

WORK_ROOT = "/work"
SHA_MARKER = ".perfmine-sha"
FAKE_TIMING_RE = re.compile(
    r"//\s*fake-timing:\s*(?P<name>\S+)\s+base_ms=(?P<base>[0-9.]+)"
    r"\s+step_ms=(?P<step>[0-9.]+)(?:\s+fail_run=(?P<fail>\d+))?"
)
_IMAGE_TAG_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


class BuildResult(NamedTuple):
    ok: bool
    log: str


class TestRun(NamedTuple):
    __test__ = False  # keep pytest from collecting this as a test class

    name: str
    passed: bool
    wall_time_ms: float


class SuiteRun(NamedTuple):
    """One invocation of the whole test suite."""

    results: tuple[TestRun, ...]
    wall_time_ms: float


class ContainerSession(Protocol):
    session_id: str

    def clone_at(self, source: str, dest: str, sha: str) -> None: ...

    def copy_tree(self, src: str, dest: str) -> None: ...

    def read_file(self, path: str) -> str: ...

    def write_file(self, path: str, content: str) -> None: ...

    def path_exists(self, path: str) -> bool: ...

    def configure_and_build(
        self, source_dir: str, build_dir: str, configure_args: Sequence[str]
    ) -> BuildResult:
        """Configure and compile, replacing any existing build directory.

        Starting from a clean cache matters twice over: a failed configure
        must not poison later repair rounds with cached NOTFOUND entries,
        and a snapshot reopened under a different filesystem root carries
        a cache whose absolute paths no longer resolve.
        """
        ...

    def list_tests(self, build_dir: str) -> list[str]: ...

    def run_suite(self, build_dir: str) -> SuiteRun: ...

    def install_packages(self, packages: Sequence[str]) -> BuildResult: ...

    def apply_patch(self, tree_dir: str, diff_text: str) -> BuildResult: ...

    def close(self) -> None: ...


class ContainerRuntime(Protocol):
    def available(self) -> bool: ...

    def describe_endpoint(self) -> str: ...

    def start_session(
        self, base_image: str, *, cpus: float | None = None, memory: str | None = None
    ) -> ContainerSession: ...

    def open_image(
        self, tag: str, *, cpus: float | None = None, memory: str | None = None
    ) -> ContainerSession: ...

    def snapshot(self, session: ContainerSession, tag: str) -> str: ...

    def has_image(self, tag: str) -> bool: ...

    def remove_image(self, tag: str) -> None: ...


# ---------------------------------------------------------------------------
# Docker via its CLI


class RunnerResult(NamedTuple):
    returncode: int
    stdout: str
    stderr: str


Runner = Callable[..., RunnerResult]


def _subprocess_runner(
    argv: Sequence[str], input_text: str | None = None, timeout: float = 3600.0
) -> RunnerResult:
    proc = subprocess.run(
        list(argv),
        input=input_text,
        capture_output=True,
        text=True,
        errors="replace",
        timeout=timeout,
    )
    return RunnerResult(proc.returncode, proc.stdout, proc.stderr)


class DockerCliRuntime:
    """Talks to an OCI daemon through the ``docker`` command line."""

    def __init__(self, runner: Runner | None = None, docker_bin: str = "docker") -> None:
        self._run = runner if runner is not None else _subprocess_runner
        self.docker_bin = docker_bin

    def describe_endpoint(self) -> str:
        return os.environ.get("DOCKER_HOST", "unix:///var/run/docker.sock")

    def available(self) -> bool:
        try:
            return self._run([self.docker_bin, "info"], None, 30.0).returncode == 0
        except (OSError, subprocess.SubprocessError):
            return False

    def start_session(
        self, base_image: str, *, cpus: float | None = None, memory: str | None = None
    ) -> "DockerSession":
        argv = [self.docker_bin, "run", "-d"]
        if cpus is not None:
            argv += ["--cpus", str(cpus)]
        if memory is not None:
            argv += ["--memory", memory]
        argv += [base_image, "sleep", "infinity"]
        result = self._run(argv, None, 600.0)
        if result.returncode != 0:
            raise RuntimeUnavailableError(
                f"could not start container from {base_image} via "
                f"{self.describe_endpoint()}: {result.stderr.strip()}"
            )
        container_id = result.stdout.strip()
        session = DockerSession(self, container_id)
        session.exec(["mkdir", "-p", WORK_ROOT, f"{WORK_ROOT}/logs"])
        return session

    def open_image(
        self, tag: str, *, cpus: float | None = None, memory: str | None = None
    ) -> "DockerSession":
        return self.start_session(tag, cpus=cpus, memory=memory)

    def snapshot(self, session: "DockerSession", tag: str) -> str:
        result = self._run([self.docker_bin, "commit", session.session_id, tag], None, 600.0)
        if result.returncode != 0:
            raise RuntimeUnavailableError(f"docker commit failed: {result.stderr.strip()}")
        return tag

    def has_image(self, tag: str) -> bool:
        result = self._run([self.docker_bin, "image", "inspect", tag], None, 60.0)
        return result.returncode == 0

    def remove_image(self, tag: str) -> None:
        self._run([self.docker_bin, "rmi", "-f", tag], None, 120.0)


_CTEST_LINE = re.compile(
    r"Test\s+#\d+:\s+(?P<name>\S+)\s+[.* ]*(?P<status>Passed|Failed|Timeout|Exception|Not Run)"
    r".*?(?P<secs>[0-9]+\.[0-9]+)\s+sec"
)


class DockerSession:
    def __init__(self, runtime: DockerCliRuntime, container_id: str) -> None:
        self._runtime = runtime
        self.session_id = container_id

    def exec(self, argv: Sequence[str], input_text: str | None = None) -> RunnerResult:
        full = [self._runtime.docker_bin, "exec"]
        if input_text is not None:
            full.append("-i")
        full.append(self.session_id)
        full += list(argv)
        return self._runtime._run(full, input_text, 3600.0)

    def clone_at(self, source: str, dest: str, sha: str) -> None:
        steps = (
            ["git", "clone", "--quiet", source, dest],
            ["git", "-C", dest, "checkout", "--quiet", sha],
        )
        for argv in steps:
            result = self.exec(argv)
            if result.returncode != 0:
                raise GitError(f"{' '.join(argv)} failed in container: {result.stderr.strip()}")
        self.write_file(str(PurePosixPath(dest) / SHA_MARKER), sha + "\n")

    def copy_tree(self, src: str, dest: str) -> None:
        result = self.exec(["cp", "-a", src, dest])
        if result.returncode != 0:
            raise RuntimeUnavailableError(f"copy {src} -> {dest} failed: {result.stderr}")

    def read_file(self, path: str) -> str:
        result = self.exec(["cat", path])
        if result.returncode != 0:
            raise FileNotFoundError(path)
        return result.stdout

    def write_file(self, path: str, content: str) -> None:
        result = self.exec(["sh", "-c", f"mkdir -p $(dirname {path}) && cat > {path}"], content)
        if result.returncode != 0:
            raise RuntimeUnavailableError(f"write to {path} failed: {result.stderr}")

    def path_exists(self, path: str) -> bool:
        return self.exec(["test", "-e", path]).returncode == 0

    def configure_and_build(
        self, source_dir: str, build_dir: str, configure_args: Sequence[str]
    ) -> BuildResult:
        self.exec(["rm", "-rf", build_dir])
        configure = self.exec(
            ["cmake", "-S", source_dir, "-B", build_dir, *configure_args]
        )
        if configure.returncode != 0:
            return BuildResult(False, configure.stdout + configure.stderr)
        build = self.exec(["cmake", "--build", build_dir, "--parallel"])
        log = configure.stdout + configure.stderr + build.stdout + build.stderr
        return BuildResult(build.returncode == 0, log)

    def list_tests(self, build_dir: str) -> list[str]:
        result = self.exec(["ctest", "--test-dir", build_dir, "--show-only=json-v1"])
        if result.returncode != 0:
            return []
        return _test_names_from_ctest_json(result.stdout)

    def run_suite(self, build_dir: str) -> SuiteRun:
        started = time.monotonic()
        result = self.exec(["ctest", "--test-dir", build_dir])
        elapsed_ms = (time.monotonic() - started) * 1000.0
        return SuiteRun(_parse_ctest_stdout(result.stdout), elapsed_ms)

    def install_packages(self, packages: Sequence[str]) -> BuildResult:
        if not packages:
            return BuildResult(True, "")
        update = self.exec(["sh", "-c", "apt-get update -qq || true"])
        install = self.exec(
            ["apt-get", "install", "-y", "--no-install-recommends", *packages]
        )
        log = update.stdout + install.stdout + install.stderr
        return BuildResult(install.returncode == 0, log)

    def apply_patch(self, tree_dir: str, diff_text: str) -> BuildResult:
        self.write_file("/tmp/candidate.patch", diff_text)
        result = self.exec(
            ["git", "-C", tree_dir, "apply", "--whitespace=nowarn", "/tmp/candidate.patch"]
        )
        return BuildResult(result.returncode == 0, result.stdout + result.stderr)

    def close(self) -> None:
        self._runtime._run([self._runtime.docker_bin, "rm", "-f", self.session_id], None, 120.0)


def _test_names_from_ctest_json(payload: str) -> list[str]:
    try:
        doc = json.loads(payload)
    except ValueError:
        return []
    return [t.get("name", "") for t in doc.get("tests", []) if t.get("name")]


def _parse_ctest_stdout(stdout: str) -> tuple[TestRun, ...]:
    runs = []
    for match in _CTEST_LINE.finditer(stdout):
        runs.append(
            TestRun(
                name=match.group("name"),
                passed=match.group("status") == "Passed",
                wall_time_ms=float(match.group("secs")) * 1000.0,
            )
        )
    return tuple(runs)


# ---------------------------------------------------------------------------
# Shared host-filesystem session base (local and fake runtimes)


def _run_host(argv: Sequence[str], cwd: Path | None = None,
              input_text: str | None = None) -> RunnerResult:
    proc = subprocess.run(
        list(argv), cwd=cwd, input=input_text, capture_output=True, text=True, errors="replace"
    )
    return RunnerResult(proc.returncode, proc.stdout, proc.stderr)


class _HostFsSession:
    """Session whose /work paths map onto a directory on the host."""

    def __init__(self, root: Path, session_id: str) -> None:
        self.root = root
        self.session_id = session_id
        (root / "work" / "logs").mkdir(parents=True, exist_ok=True)

    def host_path(self, path: str) -> Path:
        posix = PurePosixPath(path)
        if not posix.is_absolute():
            raise ValueError(f"session paths must be absolute POSIX paths: {path!r}")
        return self.root.joinpath(*posix.parts[1:])

    def clone_at(self, source: str, dest: str, sha: str) -> None:
        dest_host = self.host_path(dest)
        dest_host.parent.mkdir(parents=True, exist_ok=True)
        clone = _run_host(["git", "clone", "--quiet", source, str(dest_host)])
        if clone.returncode != 0:
            raise GitError(f"clone of {source} failed: {clone.stderr.strip()}")
        checkout = _run_host(["git", "-C", str(dest_host), "checkout", "--quiet", sha])
        if checkout.returncode != 0:
            raise GitError(f"checkout of {sha} failed: {checkout.stderr.strip()}")
        (dest_host / SHA_MARKER).write_text(sha + "\n", encoding="utf-8")

    def copy_tree(self, src: str, dest: str) -> None:
        shutil.copytree(self.host_path(src), self.host_path(dest), symlinks=True)

    def read_file(self, path: str) -> str:
        return self.host_path(path).read_text(encoding="utf-8")

    def write_file(self, path: str, content: str) -> None:
        host = self.host_path(path)
        host.parent.mkdir(parents=True, exist_ok=True)
        host.write_text(content, encoding="utf-8")

    def path_exists(self, path: str) -> bool:
        return self.host_path(path).exists()

    def apply_patch(self, tree_dir: str, diff_text: str) -> BuildResult:
        tree = self.host_path(tree_dir)
        result = _run_host(
            ["git", "apply", "--whitespace=nowarn", "-"], cwd=tree, input_text=diff_text
        )
        return BuildResult(result.returncode == 0, result.stdout + result.stderr)

    def close(self) -> None:
        pass


class _HostFsRuntimeBase:
    """Image store shared by the local and fake runtimes: plain directories."""

    def __init__(self, state_dir: str | Path) -> None:
        self.state_dir = Path(state_dir)
        self._session_counter = 0

    def _new_session_root(self) -> Path:
        self._session_counter += 1
        root = self.state_dir / "sessions" / f"s{self._session_counter}-{uuid.uuid4().hex[:8]}"
        root.mkdir(parents=True)
        return root

    def _image_dir(self, tag: str) -> Path:
        return self.state_dir / "images" / _IMAGE_TAG_SAFE.sub("_", tag)

    def has_image(self, tag: str) -> bool:
        return (self._image_dir(tag) / "meta.json").is_file()

    def remove_image(self, tag: str) -> None:
        shutil.rmtree(self._image_dir(tag), ignore_errors=True)

    def _store_snapshot(self, session: _HostFsSession, tag: str, meta: dict) -> str:
        image_dir = self._image_dir(tag)
        if image_dir.exists():
            shutil.rmtree(image_dir)
        image_dir.mkdir(parents=True)
        shutil.copytree(session.root / "work", image_dir / "work", symlinks=True)
        (image_dir / "meta.json").write_text(
            json.dumps({"tag": tag, **meta}, indent=2), encoding="utf-8"
        )
        return tag

    def _seed_from_image(self, tag: str, root: Path) -> dict:
        image_dir = self._image_dir(tag)
        if not self.has_image(tag):
            raise RuntimeUnavailableError(f"no stored image tagged {tag} under {image_dir}")
        shutil.rmtree(root / "work", ignore_errors=True)
        shutil.copytree(image_dir / "work", root / "work", symlinks=True)
        return json.loads((image_dir / "meta.json").read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Local runtime: real cmake/ctest on the host, no container


class LocalProcessRuntime(_HostFsRuntimeBase):
    """Runs builds and tests directly on this machine.

    Useful where no container daemon exists; the session root directory
    plays the part of the container filesystem. No isolation, no package
    installation.
    """

    def describe_endpoint(self) -> str:
        return "local host (no container daemon)"

    def available(self) -> bool:
        return shutil.which("cmake") is not None and shutil.which("ctest") is not None

    def start_session(
        self, base_image: str, *, cpus: float | None = None, memory: str | None = None
    ) -> "LocalSession":
        root = self._new_session_root()
        return LocalSession(root, f"local-{root.name}", base_image)

    def open_image(
        self, tag: str, *, cpus: float | None = None, memory: str | None = None
    ) -> "LocalSession":
        root = self._new_session_root()
        meta = self._seed_from_image(tag, root)
        return LocalSession(root, f"local-{root.name}", meta.get("base_image", ""))

    def snapshot(self, session: "LocalSession", tag: str) -> str:
        return self._store_snapshot(session, tag, {"base_image": session.base_image})


class LocalSession(_HostFsSession):
    def __init__(self, root: Path, session_id: str, base_image: str) -> None:
        super().__init__(root, session_id)
        self.base_image = base_image

    def configure_and_build(
        self, source_dir: str, build_dir: str, configure_args: Sequence[str]
    ) -> BuildResult:
        src, build = self.host_path(source_dir), self.host_path(build_dir)
        shutil.rmtree(build, ignore_errors=True)
        build.mkdir(parents=True)
        configure = _run_host(["cmake", "-S", str(src), "-B", str(build), *configure_args])
        if configure.returncode != 0:
            return BuildResult(False, configure.stdout + configure.stderr)
        compile_step = _run_host(["cmake", "--build", str(build), "--parallel"])
        log = configure.stdout + configure.stderr + compile_step.stdout + compile_step.stderr
        return BuildResult(compile_step.returncode == 0, log)

    def list_tests(self, build_dir: str) -> list[str]:
        result = _run_host(
            ["ctest", "--test-dir", str(self.host_path(build_dir)), "--show-only=json-v1"]
        )
        if result.returncode != 0:
            return []
        return _test_names_from_ctest_json(result.stdout)

    def run_suite(self, build_dir: str) -> SuiteRun:
        build = self.host_path(build_dir)
        junit = build / "perfmine-junit.xml"
        junit.unlink(missing_ok=True)
        started = time.monotonic()
        _run_host(["ctest", "--test-dir", str(build), "--output-junit", junit.name])
        elapsed_ms = (time.monotonic() - started) * 1000.0
        if not junit.is_file():
            return SuiteRun((), elapsed_ms)
        return SuiteRun(_parse_junit(junit.read_text(encoding="utf-8")), elapsed_ms)

    def install_packages(self, packages: Sequence[str]) -> BuildResult:
        return BuildResult(False, "package installation is unsupported on the local runtime")


def _parse_junit(xml_text: str) -> tuple[TestRun, ...]:
    root = ET.fromstring(xml_text)
    runs = []
    for case in root.iter("testcase"):
        status = case.get("status", "")
        failed = status in ("failed", "fail") or case.find("failure") is not None
        runs.append(
            TestRun(
                name=case.get("name", ""),
                passed=not failed and status != "notrun",
                wall_time_ms=float(case.get("time", "0") or 0) * 1000.0,
            )
        )
    return tuple(runs)


# ---------------------------------------------------------------------------
# Fake runtime: deterministic in-process double


class FakeTimingDecl(NamedTuple):
    name: str
    base_ms: float
    step_ms: float
    fail_run: int | None


def scan_fake_timings(tree: Path) -> list[FakeTimingDecl]:
    """Collect fake-timing declarations from a source tree, sorted by path."""
    decls: dict[str, FakeTimingDecl] = {}
    skip_dirs = {".git", "build", "__pycache__"}
    for path in sorted(tree.rglob("*")):
        if not path.is_file() or any(part in skip_dirs for part in path.parts):
            continue
        try:
            text = path.read_text(encoding="utf-8")
        except (UnicodeDecodeError, OSError):
            continue
        for match in FAKE_TIMING_RE.finditer(text):
            name = match.group("name")
            decls.setdefault(
                name,
                FakeTimingDecl(
                    name=name,
                    base_ms=float(match.group("base")),
                    step_ms=float(match.group("step")),
                    fail_run=int(match.group("fail")) if match.group("fail") else None,
                ),
            )
    return [decls[name] for name in sorted(decls)]


class FakeRuntime(_HostFsRuntimeBase):
    """In-process stand-in for a container daemon.

    Builds always succeed (unless scripted otherwise through
    ``build_failures``), and suite runs synthesize timings from the
    declarations found in the source tree, so the whole mining and
    evaluation flow runs deterministically in milliseconds.
    """

    def __init__(
        self,
        state_dir: str | Path,
        *,
        build_failures: dict[str, list[BuildResult]] | None = None,
        reachable: bool = True,
    ) -> None:
        super().__init__(state_dir)
        self.build_failures = build_failures or {}
        self.reachable = reachable

    def describe_endpoint(self) -> str:
        return f"fake runtime state at {self.state_dir}"

    def available(self) -> bool:
        return self.reachable

    def start_session(
        self, base_image: str, *, cpus: float | None = None, memory: str | None = None
    ) -> "FakeSession":
        if not self.reachable:
            raise RuntimeUnavailableError(
                f"container runtime unreachable at {self.describe_endpoint()}"
            )
        root = self._new_session_root()
        return FakeSession(self, root, f"fake-{root.name}", base_image)

    def open_image(
        self, tag: str, *, cpus: float | None = None, memory: str | None = None
    ) -> "FakeSession":
        session = self.start_session(tag)
        meta = self._seed_from_image(tag, session.root)
        session.base_image = meta.get("base_image", tag)
        session.installed_packages = list(meta.get("installed_packages", []))
        return session

    def snapshot(self, session: "FakeSession", tag: str) -> str:
        return self._store_snapshot(
            session,
            tag,
            {
                "base_image": session.base_image,
                "installed_packages": list(session.installed_packages),
            },
        )


class FakeSession(_HostFsSession):
    def __init__(self, runtime: FakeRuntime, root: Path, session_id: str,
                 base_image: str) -> None:
        super().__init__(root, session_id)
        self._runtime = runtime
        self.base_image = base_image
        self.installed_packages: list[str] = []
        self._source_for_build: dict[str, str] = {}
        self._invocations: dict[str, int] = {}

    def configure_and_build(
        self, source_dir: str, build_dir: str, configure_args: Sequence[str]
    ) -> BuildResult:
        if not self.path_exists(source_dir):
            return BuildResult(False, f"source directory {source_dir} does not exist")
        pending = self._runtime.build_failures.get(source_dir)
        if pending:
            # scripted failures are consumed one per attempt; builds succeed after
            return pending.pop(0)
        self.host_path(build_dir).mkdir(parents=True, exist_ok=True)
        self._source_for_build[build_dir] = source_dir
        return BuildResult(True, f"fake build of {source_dir} ok")

    def list_tests(self, build_dir: str) -> list[str]:
        source_dir = self._source_for_build.get(build_dir)
        if source_dir is None:
            return []
        return [d.name for d in scan_fake_timings(self.host_path(source_dir))]

    def run_suite(self, build_dir: str) -> SuiteRun:
        source_dir = self._source_for_build.get(build_dir)
        if source_dir is None:
            raise ContractViolation(f"run_suite before configure_and_build for {build_dir}")
        decls = scan_fake_timings(self.host_path(source_dir))
        k = self._invocations.get(source_dir, 0)
        self._invocations[source_dir] = k + 1
        results = tuple(
            TestRun(
                name=d.name,
                passed=(d.fail_run is None or d.fail_run != k + 1),
                wall_time_ms=d.base_ms + d.step_ms * k,
            )
            for d in decls
        )
        return SuiteRun(results, sum(r.wall_time_ms for r in results))

    def install_packages(self, packages: Sequence[str]) -> BuildResult:
        self.installed_packages.extend(p for p in packages if p not in self.installed_packages)
        return BuildResult(True, f"fake install: {' '.join(packages)}")
