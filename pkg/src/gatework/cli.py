"""Terminal surface: start runs, answer pending questions, authorize
shipping, inspect run state, lint workspaces, and replay recorded runs.

Exit codes: 0 success, 2 gate violation, 3 escalation, 4 environment
failure. All output is mirrored to ``<run>/logs/cli.log``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

from gatework.clock import SystemClock, TickClock
from gatework.errors import (
    GateworkError,
    HoldUnanswered,
    MisconfigurationError,
)
from gatework.gitlayer import SubprocessGit
from gatework.model import workflow_by_id
from gatework.orchestrator import (
    ChannelMode,
    Orchestrator,
    UserChannel,
    select_workflow,
    ship,
    start_run,
)
from gatework.rundir import RunDirectory
from gatework.runtime import BackendKind, load_backends
from gatework.statemachine import reconstruct_run_state
from gatework.workspace import WorkspaceLayout, validate_workspace

WORKSPACE_ENV = "GATEWORK_WORKSPACE"

EXIT_OK = 0
EXIT_GATE = 2
EXIT_ESCALATION = 3
EXIT_ENVIRONMENT = 4


class _Console:
    """Print wrapper that mirrors everything to the run's cli.log."""

    def __init__(self) -> None:
        self.lines: list[str] = []

    def echo(self, message: str = "") -> None:
        self.lines.append(message)
        print(message)

    def flush_to(self, run_dir: RunDirectory | None) -> None:
        if run_dir is None or not run_dir.path.exists():
            return
        run_dir.logs_dir.mkdir(exist_ok=True)
        (run_dir.logs_dir / "cli.log").write_text("\n".join(self.lines) + "\n", encoding="utf-8")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatework", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="start a workflow run against a target repository")
    run.add_argument("--repo", required=True, help="target repository path")
    run.add_argument("--directive", default="", help="natural-language task directive")
    run.add_argument("--workflow", type=int, default=None, help="manual workflow override (1..10)")
    run.add_argument("--backends", required=True, help="backend config JSON path")
    run.add_argument("--answers", default=None, help="scripted answers file (one per line)")
    run.add_argument("--workspace", default=None, help=f"workspace root (or ${WORKSPACE_ENV})")
    run.add_argument("--runs-root", default=None, help="where run directories go (default: workspace runs/)")
    run.add_argument(
        "--deterministic",
        action="store_true",
        help="use a tick clock for byte-identical replays (default for all-scripted backends)",
    )

    answer = sub.add_parser("answer", help="answer a run's pending question and resume it")
    answer.add_argument("--run", required=True, help="run directory")
    answer.add_argument("text", help="the answer")

    authorize = sub.add_parser("authorize", help="authorize shipping for a READY_TO_SHIP run")
    authorize.add_argument("--run", required=True, help="run directory")
    authorize.add_argument("--yes", action="store_true", help="authorize without prompting")

    status = sub.add_parser("status", help="show a run's state, retries, and artifacts")
    status.add_argument("--run", required=True, help="run directory")

    validate = sub.add_parser("validate", help="lint a workspace repository layout")
    validate.add_argument("--workspace", default=None, help=f"workspace root (or ${WORKSPACE_ENV})")
    validate.add_argument("--repo-name", required=True, help="per-repo subdirectory to lint")

    replay = sub.add_parser("replay", help="re-run a recorded scripted run and compare reports")
    replay.add_argument("--run", required=True, help="run directory holding report.json + run-config.json")

    return parser


def _workspace_root(flag: str | None) -> Path | None:
    raw = flag or os.environ.get(WORKSPACE_ENV)
    return Path(raw).resolve() if raw else None


def _load_run_config(run_dir: RunDirectory) -> dict:
    config_path = run_dir.path / "run-config.json"
    if not config_path.exists():
        raise MisconfigurationError(f"no run-config.json in {run_dir.path}")
    return json.loads(config_path.read_text(encoding="utf-8"))


def _execute_run(
    console: _Console,
    *,
    repo: Path,
    directive: str,
    override: int | None,
    backends_path: Path,
    answers_path: Path | None,
    workspace_root: Path | None,
    runs_root: Path | None,
    deterministic: bool,
    resume_run_dir: RunDirectory | None = None,
    authorization: str | None = None,
) -> int:
    git = SubprocessGit()
    backends = load_backends(backends_path)
    all_scripted = bool(backends) and all(b.kind is BackendKind.SCRIPTED for b in backends.values())
    use_tick = deterministic or all_scripted
    clock = TickClock() if use_tick else SystemClock()

    answers: list[str] = []
    if answers_path is not None:
        answers = [line for line in answers_path.read_text(encoding="utf-8").splitlines() if line]
    if resume_run_dir is not None:
        answers_file = resume_run_dir.path / "answers"
        if answers_file.exists():
            answers = [line for line in answers_file.read_text(encoding="utf-8").splitlines() if line]
    mode = ChannelMode.SCRIPTED_ANSWERS if (answers or answers_path or all_scripted) else ChannelMode.INTERACTIVE
    channel = UserChannel(mode=mode, answers=answers, output_fn=console.echo)

    try:
        workflow = select_workflow(directive, override, channel=channel)
    except HoldUnanswered as exc:
        console.echo(f"[escalation] {exc.question}")
        return EXIT_ESCALATION

    workspace = None
    if workspace_root is not None:
        workspace = WorkspaceLayout(root=workspace_root, repo_name=Path(repo).name).ensure()

    resume = resume_run_dir is not None
    if resume:
        run_dir = resume_run_dir
        request_id = run_dir.path.name
    else:
        if runs_root is None:
            runs_root = workspace.runs_dir if workspace is not None else Path.cwd() / "runs"
        try:
            run_dir, request_id = start_run(
                runs_root=runs_root,
                target_repo=repo,
                directive=directive,
                workflow=workflow,
                git=git,
                clock=clock,
            )
        except GateworkError as exc:
            console.echo(f"[environment] {exc}")
            return EXIT_ENVIRONMENT
        run_config = {
            "directive": directive,
            "workflow_id": workflow.id,
            "target_repo": str(Path(repo).resolve()),
            "backends": str(Path(backends_path).resolve()),
            "workspace": str(workspace_root.resolve()) if workspace_root else None,
            "deterministic": use_tick,
            "answers": answers,
        }
        (run_dir.path / "run-config.json").write_text(
            json.dumps(run_config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    orchestrator = Orchestrator(
        run_dir=run_dir,
        request_id=request_id,
        workflow=workflow,
        backends=backends,
        channel=channel,
        target_repo=Path(repo),
        git=git,
        clock=clock,
        workspace=workspace,
        directive=directive,
    )
    report = orchestrator.run(authorization=authorization, resume=resume)
    console.echo(report.render_text().rstrip("\n"))
    console.flush_to(run_dir)
    return report.exit_code


def cmd_run(args: argparse.Namespace, console: _Console) -> int:
    if not args.directive and args.workflow is None:
        console.echo("run requires --directive or --workflow")
        return EXIT_GATE
    repo = Path(args.repo)
    if not repo.is_dir():
        console.echo(f"[environment] target repository not resolvable: {repo}")
        return EXIT_ENVIRONMENT
    return _execute_run(
        console,
        repo=repo.resolve(),
        directive=args.directive,
        override=args.workflow,
        backends_path=Path(args.backends).resolve(),
        answers_path=Path(args.answers).resolve() if args.answers else None,
        workspace_root=_workspace_root(args.workspace),
        runs_root=Path(args.runs_root).resolve() if args.runs_root else None,
        deterministic=args.deterministic,
    )


def cmd_answer(args: argparse.Namespace, console: _Console) -> int:
    run_dir = RunDirectory(Path(args.run))
    if not run_dir.path.is_dir():
        console.echo(f"[environment] no such run: {run_dir.path}")
        return EXIT_ENVIRONMENT
    pending = run_dir.path / "pending-hold.md"
    if not pending.exists():
        console.echo("answer requires an active run with a pending question")
        return EXIT_GATE
    answers_file = run_dir.path / "answers"
    existing = answers_file.read_text(encoding="utf-8") if answers_file.exists() else ""
    answers_file.write_text(existing + args.text + "\n", encoding="utf-8")
    pending.unlink()
    config = _load_run_config(run_dir)
    console.echo(f"answer recorded; resuming run {run_dir.path.name}")
    return _execute_run(
        console,
        repo=Path(config["target_repo"]),
        directive=config["directive"],
        override=config["workflow_id"],
        backends_path=Path(config["backends"]),
        answers_path=None,
        workspace_root=Path(config["workspace"]) if config.get("workspace") else None,
        runs_root=None,
        deterministic=config.get("deterministic", False),
        resume_run_dir=run_dir,
    )


def cmd_authorize(args: argparse.Namespace, console: _Console) -> int:
    run_dir = RunDirectory(Path(args.run))
    if not run_dir.path.is_dir():
        console.echo(f"[environment] no such run: {run_dir.path}")
        return EXIT_ENVIRONMENT
    if not args.yes:
        channel = UserChannel(mode=ChannelMode.INTERACTIVE, output_fn=console.echo)
        reply = channel.ask("Authorize shipping? (yes/no)")
        if reply is None or reply.strip().lower() not in ("y", "yes"):
            console.echo("shipping not authorized")
            return EXIT_GATE
    config = _load_run_config(run_dir)
    workflow = workflow_by_id(config["workflow_id"])
    git = SubprocessGit()
    clock = TickClock() if config.get("deterministic") else SystemClock()
    workspace = None
    if config.get("workspace"):
        workspace = WorkspaceLayout(
            root=Path(config["workspace"]), repo_name=Path(config["target_repo"]).name
        )
    backends = load_backends(Path(config["backends"]))
    report = ship(
        run_dir,
        "explicit-user-authorization",
        target_repo=Path(config["target_repo"]),
        workflow=workflow,
        backends=backends,
        git=git,
        clock=clock,
        workspace=workspace,
        slug=run_dir.path.name,
    )
    if report.shipped:
        console.echo("shipped: state advanced to DONE")
        console.flush_to(run_dir)
        return EXIT_OK
    console.echo(f"ship refused: {report.refusal}")
    console.flush_to(run_dir)
    return EXIT_GATE


def cmd_status(args: argparse.Namespace, console: _Console) -> int:
    run_dir = RunDirectory(Path(args.run))
    if not run_dir.path.is_dir():
        console.echo(f"[environment] no such run: {run_dir.path}")
        return EXIT_ENVIRONMENT
    try:
        config = _load_run_config(run_dir)
        workflow = workflow_by_id(config["workflow_id"])
    except (MisconfigurationError, KeyError):
        workflow = workflow_by_id(1)
    run_state = reconstruct_run_state(run_dir, workflow)
    console.echo(f"run: {run_dir.path.name}")
    console.echo(f"workflow: {workflow.id} ({workflow.name})")
    console.echo(f"state: {run_state.current.value}")
    console.echo(
        "retries: " + ", ".join(f"{k.value}={v}" for k, v in sorted(run_state.retries.items()))
    )
    pending = run_dir.path / "pending-hold.md"
    if pending.exists():
        console.echo(f"pending question: {pending.read_text(encoding='utf-8').strip()}")
    escalated = [e for e in run_state.history if "escalate" in e.cause]
    for entry in escalated:
        console.echo(f"escalation: {entry.cause}")
    names = sorted(k.filename for k in run_dir.present())
    console.echo("artifacts: " + (", ".join(names) or "(none)"))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, console: _Console) -> int:
    root = _workspace_root(args.workspace)
    if root is None or not root.is_dir():
        console.echo(f"[environment] workspace root not found: {root}")
        return EXIT_ENVIRONMENT
    layout = WorkspaceLayout(root=root, repo_name=args.repo_name)
    report = validate_workspace(layout, git=SubprocessGit())
    if report.ok:
        console.echo("workspace clean")
        return EXIT_OK
    for violation in report.violations:
        console.echo(f"violation: {violation}")
    return EXIT_GATE


def cmd_replay(args: argparse.Namespace, console: _Console) -> int:
    run_dir = RunDirectory(Path(args.run))
    if not run_dir.path.is_dir() or not run_dir.report_json_path.exists():
        console.echo(f"[environment] no recorded report under {run_dir.path}")
        return EXIT_ENVIRONMENT
    config = _load_run_config(run_dir)
    if not config.get("deterministic"):
        console.echo("[environment] run was not recorded deterministically; cannot replay")
        return EXIT_ENVIRONMENT
    recorded = json.loads(run_dir.report_json_path.read_text(encoding="utf-8"))
    with tempfile.TemporaryDirectory() as tmp:
        code = _execute_run(
            _Console(),  # replay output is not mirrored into the original run
            repo=Path(config["target_repo"]),
            directive=config["directive"],
            override=config["workflow_id"],
            backends_path=Path(config["backends"]),
            answers_path=None,
            workspace_root=None,
            runs_root=Path(tmp),
            deterministic=True,
        )
        replayed_dirs = sorted(Path(tmp).iterdir())
        if not replayed_dirs:
            console.echo("[environment] replay produced no run directory")
            return EXIT_ENVIRONMENT
        replayed = json.loads(
            RunDirectory(replayed_dirs[0]).report_json_path.read_text(encoding="utf-8")
        )
    if replayed == recorded:
        console.echo(f"replay identical (exit {code})")
        return EXIT_OK
    console.echo("replay DIFFERS from the recorded report")
    return EXIT_GATE


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    console = _Console()
    handlers = {
        "run": cmd_run,
        "answer": cmd_answer,
        "authorize": cmd_authorize,
        "status": cmd_status,
        "validate": cmd_validate,
        "replay": cmd_replay,
    }
    try:
        return handlers[args.command](args, console)
    except GateworkError as exc:
        console.echo(f"[error] {exc}")
        return EXIT_ENVIRONMENT


if __name__ == "__main__":
    sys.exit(main())
