from __future__ import annotations

import json
import subprocess
from pathlib import Path

import pytest

from gatework.clock import TickClock
from gatework.gitlayer import FakeGit
from gatework.model import AgentRole, WorkflowType, workflow_by_id
from gatework.orchestrator import ChannelMode, Orchestrator, RunReport, UserChannel, start_run
from gatework.rundir import RunDirectory
from gatework.runtime import AgentBackend, ScriptedBackend

TEST_SPEC_BODY = """\
# Test specification

Behavioral contracts, exact tolerances, edge cases.

- reference comparison tolerance: 1e-6
- empty-input and single-row edge cases must be covered
"""

AUDIT_BODY = """\
# Audit

| check | tolerance | result |
|---|---|---|
| reference comparison | 1e-6 | pass |
| edge cases | exact | pass |

All validation commands succeeded.
"""

LOG_ENTRY_BODY = """\
# Log entry

## What Changed
Implemented the requested change and revalidated the full suite.

## Validation Results
All checks green.

## Handoff Notes
### Prior Decisions
Kept the public interface unchanged.
"""


def _write(path: str, body: str) -> str:
    return f"write {path} <<EOF\n{body}EOF\n"


def planner_script(workflow: WorkflowType, holds: int = 0) -> str:
    roles = workflow.roles()
    steps = ""
    for _ in range(holds):
        steps += 'signal HOLD "which reference implementation should anchor the tests?"\n---\n'
    steps += _write("comprehension.md", "# Comprehension\n\nFully understood.\n")
    if AgentRole.BUILDER in roles:
        steps += _write("spec.md", "# Implementation specification\n\nBuild the estimator.\n")
    if AgentRole.TESTER in roles:
        steps += _write("test-spec.md", TEST_SPEC_BODY)
    if AgentRole.SIMULATOR in roles:
        steps += _write("sim-spec.md", "# Simulation specification\n\nDGP and scenario grid.\n")
    steps += "complete\n"
    return steps


def builder_script(reads: tuple[str, ...] = (), holds: int = 0) -> str:
    steps = ""
    for _ in range(holds):
        steps += 'signal HOLD "which covariance estimator variant?"\n---\n'
    for path in reads:
        steps += f"read {path}\n"
    steps += _write("implementation.md", "# Implementation\n\nFiles changed: core module.\n")
    steps += "complete\n"
    return steps


def tester_script(blocks: int = 0, audit_body: str = AUDIT_BODY) -> str:
    steps = ""
    for _ in range(blocks):
        steps += 'signal BLOCK "placebo test failure: no improvement over baseline"\n---\n'
    steps += "read test-spec.md\n"
    steps += _write("audit.md", audit_body)
    steps += "complete\n"
    return steps


def simulator_script() -> str:
    return _write("simulation.md", "# Simulation\n\nDGP results within acceptance bands.\n") + "complete\n"


def scriber_script() -> str:
    return (
        _write("Architecture.md", "# Architecture\n\nModule and data-flow diagrams.\n")
        + _write("log-entry.md", LOG_ENTRY_BODY)
        + _write("docs.md", "# Docs\n\nUpdated usage documentation.\n")
        + "complete\n"
    )


def reviewer_script(verdict: str = "PASS", stops: int = 0, stop_target: str = "scriber") -> str:
    steps = ""
    for _ in range(stops):
        steps += f'signal STOP <<EOF\ntarget: {stop_target}\nquality gate failed; rework needed\nEOF\n---\n'
    steps += _write("review.md", f"verdict: {verdict}\n\nCross-pipeline audit complete.\n")
    steps += "complete\n"
    return steps


def shipper_script() -> str:
    return _write("shipper.md", "# Shipper\n\nReady to stage and push.\n") + "complete\n"


def scripted_backends(workflow: WorkflowType, **kwargs) -> dict[AgentRole, AgentBackend]:
    texts = script_texts(workflow, **kwargs)
    return {role: ScriptedBackend.from_text(texts[role]) for role in workflow.roles()}


def script_texts(workflow: WorkflowType, **kwargs) -> dict[AgentRole, str]:
    """The raw scenario texts backing :func:`scripted_backends`."""
    return {
        AgentRole.PLANNER: planner_script(workflow, holds=kwargs.get("planner_holds", 0)),
        AgentRole.BUILDER: builder_script(
            reads=kwargs.get("builder_reads", ()), holds=kwargs.get("builder_holds", 0)
        ),
        AgentRole.TESTER: tester_script(
            blocks=kwargs.get("tester_blocks", 0),
            audit_body=kwargs.get("audit_body", AUDIT_BODY),
        ),
        AgentRole.SIMULATOR: simulator_script(),
        AgentRole.SCRIBER: scriber_script(),
        AgentRole.REVIEWER: reviewer_script(
            verdict=kwargs.get("reviewer_verdict", "PASS"),
            stops=kwargs.get("reviewer_stops", 0),
            stop_target=kwargs.get("stop_target", "scriber"),
        ),
        AgentRole.SHIPPER: shipper_script(),
    }


def write_backend_config(directory: Path, workflow_id: int, **kwargs) -> Path:
    """Write scenario files plus a backends.json for CLI-driven runs."""
    directory.mkdir(parents=True, exist_ok=True)
    workflow = workflow_by_id(workflow_id)
    texts = script_texts(workflow, **kwargs)
    entries = {}
    for role in workflow.roles():
        script_path = directory / f"{role.value}.script"
        script_path.write_text(texts[role], encoding="utf-8")
        entries[role.value] = {"kind": "scripted", "script": script_path.name}
    config_path = directory / "backends.json"
    config_path.write_text(json.dumps({"backends": entries}, indent=2), encoding="utf-8")
    return config_path


def init_git_repo(path: Path, *, remote: Path | None = None) -> Path:
    """Real git repository fixture (branch main, one seed commit)."""
    path.mkdir(parents=True, exist_ok=True)
    subprocess.run(["git", "init", "-q", "-b", "main", str(path)], check=True)
    for key, value in (("user.email", "dev@example.org"), ("user.name", "dev")):
        subprocess.run(["git", "-C", str(path), "config", key, value], check=True)
    (path / "pyproject.toml").write_text("[project]\nname = 'fixture'\n", encoding="utf-8")
    subprocess.run(["git", "-C", str(path), "add", "-A"], check=True)
    subprocess.run(["git", "-C", str(path), "commit", "-q", "-m", "seed"], check=True)
    if remote is not None:
        subprocess.run(["git", "init", "-q", "--bare", "-b", "main", str(remote)], check=True)
        subprocess.run(["git", "-C", str(path), "remote", "add", "origin", str(remote)], check=True)
        subprocess.run(["git", "-C", str(path), "push", "-q", "-u", "origin", "main"], check=True)
    return path


@pytest.fixture
def target_repo(tmp_path: Path) -> Path:
    repo = tmp_path / "target-repo"
    repo.mkdir()
    (repo / "pyproject.toml").write_text("[project]\nname = 'fixture'\n", encoding="utf-8")
    (repo / "README.md").write_text("fixture repo\n", encoding="utf-8")
    return repo


@pytest.fixture
def fake_git() -> FakeGit:
    return FakeGit()


def run_scripted_workflow(
    tmp_path: Path,
    workflow_id: int,
    *,
    target_repo: Path | None = None,
    git: FakeGit | None = None,
    answers: tuple[str, ...] = (),
    authorization: str | None = None,
    backends: dict[AgentRole, AgentBackend] | None = None,
    **backend_kwargs,
) -> tuple[RunReport, RunDirectory, Orchestrator]:
    """Run one workflow end to end with scripted backends and a fake git."""
    workflow = workflow_by_id(workflow_id)
    if target_repo is None:
        target_repo = tmp_path / "repo"
        target_repo.mkdir(parents=True, exist_ok=True)
        (target_repo / "pyproject.toml").write_text("[project]\n", encoding="utf-8")
    git = git or FakeGit()
    clock = TickClock()
    run_dir, request_id = start_run(
        runs_root=tmp_path / "runs",
        target_repo=target_repo,
        directive="scripted protocol exercise",
        workflow=workflow,
        git=git,
        clock=clock,
    )
    channel = UserChannel(mode=ChannelMode.SCRIPTED_ANSWERS, answers=answers, output_fn=lambda _: None)
    orchestrator = Orchestrator(
        run_dir=run_dir,
        request_id=request_id,
        workflow=workflow,
        backends=backends if backends is not None else scripted_backends(workflow, **backend_kwargs),
        channel=channel,
        target_repo=target_repo,
        git=git,
        clock=clock,
        directive="scripted protocol exercise",
    )
    report = orchestrator.run(authorization=authorization)
    return report, run_dir, orchestrator
