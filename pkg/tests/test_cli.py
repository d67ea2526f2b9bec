"""The command line surface: flags, output, and exit codes."""

from __future__ import annotations

import io
import json
import shutil
from contextlib import redirect_stdout
from dataclasses import dataclass
from pathlib import Path

import pytest

from conftest import FixtureRepo

from perfmine.cli import (
    EXIT_AUTH,
    EXIT_BROKEN,
    EXIT_DATA,
    EXIT_FUNCTIONAL_ONLY,
    EXIT_OK,
    EXIT_UNAVAILABLE,
    EXIT_USAGE,
    main,
)
from perfmine.store import read_entry


def run_cli(*argv: str) -> tuple[int, str]:
    buffer = io.StringIO()
    with redirect_stdout(buffer):
        code = main(list(argv))
    return code, buffer.getvalue()


@dataclass
class CliStore:
    out_dir: Path
    stdout: str
    exit_code: int
    fixture: FixtureRepo

    @property
    def patch_id(self) -> str:
        return f"local__fixturerepo__{self.fixture.perf_sha}"

    @property
    def patch_file(self) -> Path:
        return self.out_dir / "patches" / f"{self.patch_id}.patch"


@pytest.fixture(scope="module")
def cli_store(tmp_path_factory, fixture_repo) -> CliStore:
    base = tmp_path_factory.mktemp("cli")
    script = base / "stub.json"
    script.write_text(json.dumps({fixture_repo.perf_sha: "Yes"}), encoding="utf-8")
    out_dir = base / "store"
    code, stdout = run_cli(
        "mine",
        "--local-repo", str(fixture_repo.path),
        "--out", str(out_dir),
        "--fake-runtime",
        "--stub-backends", str(script),
    )
    return CliStore(out_dir=out_dir, stdout=stdout, exit_code=code, fixture=fixture_repo)


# ---------------------------------------------------------------------------
# mine


def test_mine_succeeds_and_prints_the_funnel(cli_store):
    assert cli_store.exit_code == EXIT_OK
    assert (
        "funnel: scanned=5 structurally_accepted=1 "
        "classified_positive=1 built=1 stored=1"
    ) in cli_store.stdout
    assert f"stored {cli_store.patch_id}" in cli_store.stdout


def test_mine_echoes_the_effective_config(cli_store):
    stdout = cli_store.stdout
    assert "effective config:" in stdout
    assert "min_stars = 300" in stdout
    assert "window = 2020-01-01T00:00:00+00:00 .. 2025-12-31T23:59:59+00:00" in stdout
    assert "max_files = 20" in stdout
    assert "runs = 31" in stdout
    assert "delta = 0.05" in stdout
    assert "alpha = 0.05" in stdout
    assert "phase1_backends = qwen2.5:7b, qwen3:8b" in stdout
    assert "phase2_backend = qwen3:8b" in stdout
    assert "temperature = 0.0" in stdout
    assert "max_diff_bytes = 65536" in stdout
    assert "max_repair_rounds = 3" in stdout


def test_mined_manifest_passes_strict_load(cli_store):
    entry = read_entry(cli_store.out_dir, cli_store.patch_id)
    assert entry.has_significant_test
    assert entry.image == f"perfmine/{cli_store.patch_id}"
    assert cli_store.patch_file.is_file()


def test_mine_without_token_fails_auth_after_config_echo(tmp_path, monkeypatch):
    monkeypatch.delenv("GITHUB_TOKEN", raising=False)
    monkeypatch.chdir(tmp_path)
    code, stdout = run_cli("mine")
    assert code == EXIT_AUTH
    assert "effective config:" in stdout
    assert "min_stars = 300" in stdout
    assert "runs = 31" in stdout


def test_mine_semantic_config_error_exits_64(tmp_path):
    code, _ = run_cli(
        "mine", "--max-files", "0", "--out", str(tmp_path / "out"), "--fake-runtime"
    )
    assert code == EXIT_USAGE


def test_mine_rejects_window_reversal(tmp_path):
    code, _ = run_cli(
        "mine", "--since", "2025-01-01", "--until", "2020-01-01",
        "--out", str(tmp_path / "out"), "--fake-runtime",
    )
    assert code == EXIT_USAGE


def test_mine_rejects_non_git_local_repo(tmp_path):
    (tmp_path / "notgit").mkdir()
    code, _ = run_cli(
        "mine", "--local-repo", str(tmp_path / "notgit"),
        "--out", str(tmp_path / "out"), "--fake-runtime",
    )
    assert code == EXIT_USAGE


def test_argparse_rejects_bad_flag_values():
    with pytest.raises(SystemExit) as excinfo:
        main(["mine", "--runs", "notanumber"])
    assert excinfo.value.code == EXIT_USAGE


def test_unknown_subcommand_exits_64():
    with pytest.raises(SystemExit) as excinfo:
        main(["frobnicate"])
    assert excinfo.value.code == EXIT_USAGE


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_ground_truth_exits_0(cli_store):
    code, stdout = run_cli(
        "evaluate", "--store", str(cli_store.out_dir),
        "--patch-id", cli_store.patch_id,
        "--patch-file", str(cli_store.patch_file),
        "--fake-runtime",
    )
    assert code == EXIT_OK
    assert "verdict: improves" in stdout
    assert "significant" in stdout
    assert (cli_store.out_dir / f"{cli_store.patch_id}.eval.json").is_file()


def test_evaluate_empty_patch_exits_10(cli_store, tmp_path):
    empty = tmp_path / "empty.patch"
    empty.write_text("", encoding="utf-8")
    code, stdout = run_cli(
        "evaluate", "--store", str(cli_store.out_dir),
        "--patch-id", cli_store.patch_id,
        "--patch-file", str(empty),
        "--fake-runtime",
    )
    assert code == EXIT_FUNCTIONAL_ONLY
    assert "verdict: functional_only" in stdout


def test_evaluate_conflicting_patch_exits_20(cli_store, tmp_path):
    conflicting = tmp_path / "conflicting.patch"
    conflicting.write_text(
        "--- a/src/no_such_file.cpp\n"
        "+++ b/src/no_such_file.cpp\n"
        "@@ -1 +1 @@\n"
        "-int x = 1;\n"
        "+int x = 2;\n",
        encoding="utf-8",
    )
    code, stdout = run_cli(
        "evaluate", "--store", str(cli_store.out_dir),
        "--patch-id", cli_store.patch_id,
        "--patch-file", str(conflicting),
        "--fake-runtime",
    )
    assert code == EXIT_BROKEN
    assert "verdict: broken" in stdout


def test_evaluate_unknown_entry_exits_65(cli_store, tmp_path):
    empty = tmp_path / "empty.patch"
    empty.write_text("", encoding="utf-8")
    code, _ = run_cli(
        "evaluate", "--store", str(cli_store.out_dir),
        "--patch-id", "local__fixturerepo__" + "0" * 40,
        "--patch-file", str(empty),
        "--fake-runtime",
    )
    assert code == EXIT_DATA


def test_evaluate_without_image_exits_69(cli_store, tmp_path):
    orphan = tmp_path / "orphan-store"
    shutil.copytree(cli_store.out_dir / "entries", orphan / "entries")
    shutil.copytree(cli_store.out_dir / "patches", orphan / "patches")
    empty = tmp_path / "empty.patch"
    empty.write_text("", encoding="utf-8")
    code, _ = run_cli(
        "evaluate", "--store", str(orphan),
        "--patch-id", cli_store.patch_id,
        "--patch-file", str(empty),
        "--fake-runtime",
    )
    assert code == EXIT_UNAVAILABLE


def test_evaluate_missing_patch_file_exits_64(cli_store, tmp_path):
    code, _ = run_cli(
        "evaluate", "--store", str(cli_store.out_dir),
        "--patch-id", cli_store.patch_id,
        "--patch-file", str(tmp_path / "does-not-exist.patch"),
        "--fake-runtime",
    )
    assert code == EXIT_USAGE


# ---------------------------------------------------------------------------
# inspect


def test_inspect_lists_the_entry(cli_store):
    code, stdout = run_cli("inspect", "--store", str(cli_store.out_dir))
    assert code == EXIT_OK
    assert cli_store.patch_id in stdout
    assert "local/fixturerepo" in stdout
    assert "significant" in stdout
    assert "unreviewed" in stdout


def test_inspect_json_round_trips(cli_store):
    code, stdout = run_cli("inspect", "--store", str(cli_store.out_dir), "--json")
    assert code == EXIT_OK
    payload = json.loads(stdout)
    assert isinstance(payload, list) and len(payload) == 1
    assert payload[0]["patch_id"] == cli_store.patch_id
    assert payload[0]["has_significant_test"] is True


def test_inspect_filters(cli_store):
    code, stdout = run_cli(
        "inspect", "--store", str(cli_store.out_dir), "--repo", "local/fixturerepo"
    )
    assert code == EXIT_OK and cli_store.patch_id in stdout

    code, stdout = run_cli(
        "inspect", "--store", str(cli_store.out_dir), "--repo", "other/project"
    )
    assert code == EXIT_OK and "no entries" in stdout

    code, stdout = run_cli(
        "inspect", "--store", str(cli_store.out_dir), "--no-significant-test"
    )
    assert code == EXIT_OK and "no entries" in stdout

    code, stdout = run_cli(
        "inspect", "--store", str(cli_store.out_dir), "--single-file"
    )
    assert code == EXIT_OK and "no entries" in stdout  # the perf commit touches two files


def test_inspect_single_entry_by_patch_id(cli_store):
    code, stdout = run_cli(
        "inspect", "--store", str(cli_store.out_dir),
        "--patch-id", cli_store.patch_id, "--json",
    )
    assert code == EXIT_OK
    assert json.loads(stdout)[0]["patch_id"] == cli_store.patch_id


def test_inspect_missing_store_exits_65(tmp_path):
    code, _ = run_cli("inspect", "--store", str(tmp_path / "nowhere"))
    assert code == EXIT_DATA


def test_inspect_reports_malformed_entries_without_crashing(cli_store, capsys):
    junk = cli_store.out_dir / "entries" / ("a__b__" + "1" * 40 + ".json")
    junk.write_text("{not json", encoding="utf-8")
    try:
        code, stdout = run_cli("inspect", "--store", str(cli_store.out_dir))
        assert code == EXIT_OK
        assert cli_store.patch_id in stdout
        assert "warning" in capsys.readouterr().err
    finally:
        junk.unlink()


# ---------------------------------------------------------------------------
# verify


def test_verify_accepts_once_then_refuses(cli_store, tmp_path):
    review_store = tmp_path / "review-store"
    shutil.copytree(cli_store.out_dir / "entries", review_store / "entries")
    shutil.copytree(cli_store.out_dir / "patches", review_store / "patches")

    code, stdout = run_cli(
        "verify", "--store", str(review_store),
        "--patch-id", cli_store.patch_id,
        "--decision", "accepted", "--note", "timings look solid",
    )
    assert code == EXIT_OK
    assert "accepted" in stdout

    entry = read_entry(review_store, cli_store.patch_id)
    assert entry.verified == "accepted"
    assert entry.reviewer_note == "timings look solid"

    code, _ = run_cli(
        "verify", "--store", str(review_store),
        "--patch-id", cli_store.patch_id,
        "--decision", "rejected",
    )
    assert code == EXIT_DATA  # one-way review: no second decision

    code, stdout = run_cli(
        "inspect", "--store", str(review_store), "--verified", "accepted"
    )
    assert code == EXIT_OK and cli_store.patch_id in stdout
