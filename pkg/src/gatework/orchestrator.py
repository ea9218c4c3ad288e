"""The leader: compiles a workflow into a dispatch plan, executes its
stages with parallel dispatch, routes interrupt signals, runs the
mechanical half of the review, and gates shipping on the verdict plus
explicit user authorization.

The leader never performs specialist work: it writes only run-directory
bookkeeping, and git mutations happen solely on the ship path.
"""

from __future__ import annotations

import json
import re
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from gatework.barrier import (
    DEFAULT_ACCESS_MATRIX,
    AccessMatrix,
    AuditLog,
    Sandbox,
    audit_isolation,
    create_plain_sandbox,
    create_sandbox,
    merge_access_logs,
    parse_access_log,
)
from gatework.clock import Clock, SystemClock, TickClock
from gatework.errors import (
    AuditIncompleteness,
    BarrierError,
    ContractError,
    DispatchError,
    EnvironmentFailure,
    HoldUnanswered,
    MisconfigurationError,
    ProtocolError,
    VerdictError,
)
from gatework.gitlayer import GitAction, GitBackend, GitResult, git_ops
from gatework.model import (
    AccessEvent,
    AgentOutcome,
    AgentRole,
    ArtifactKind,
    IssueDescriptor,
    OutcomeStatus,
    Signal,
    SignalKind,
    WorkflowState,
    WorkflowType,
    block_pipeline_target,
    state_order,
    stop_routing_target,
    terminal_state,
    workflow_by_id,
)
from gatework.rundir import RunDirectory
from gatework.runtime import (
    DEFAULT_DEADLINE,
    AgentBackend,
    DispatchRequest,
    contracted_artifacts,
    dispatch,
)
from gatework.statemachine import (
    RunState,
    SignalDisposition,
    advance,
    check_preconditions,
    reconstruct_run_state,
    record_signal,
    required_for,
    write_status,
)
from gatework.workspace import (
    PROFILES,
    UNKNOWN_PROFILE,
    Language,
    LanguageProfile,
    WorkspaceLayout,
    detect_language,
    sync_workspace,
    validation_commands,
    write_context,
)

WORKTREE_ROLES = frozenset(
    {AgentRole.BUILDER, AgentRole.TESTER, AgentRole.SIMULATOR, AgentRole.SCRIBER}
)


# --- user channel -----------------------------------------------------------


class ChannelMode(str, Enum):
    INTERACTIVE = "INTERACTIVE"
    SCRIPTED_ANSWERS = "SCRIPTED_ANSWERS"


class UserChannel:
    """The single conduit between the leader and the user.

    Only leader code holds a reference to it; questions are strictly one
    at a time, and an unanswered question leaves the channel pending so
    the run can halt and be answered later.
    """

    def __init__(
        self,
        mode: ChannelMode = ChannelMode.INTERACTIVE,
        answers: Iterable[str] = (),
        input_fn: Callable[[str], str] | None = None,
        output_fn: Callable[[str], None] = print,
    ) -> None:
        self.mode = mode
        self.answers: deque[str] = deque(answers)
        self.input_fn = input_fn
        self.output_fn = output_fn
        self.pending: str | None = None
        self.transcript: list[tuple[str, str]] = []

    def ask(self, question: str) -> str | None:
        self.pending = question
        self.transcript.append(("question", question))
        if self.mode is ChannelMode.SCRIPTED_ANSWERS:
            answer = self.answers.popleft() if self.answers else None
        else:
            self.output_fn(f"[user input needed] {question}")
            prompt = self.input_fn if self.input_fn is not None else input
            try:
                answer = prompt("> ")
            except EOFError:
                answer = None
            if answer is not None and not answer.strip():
                answer = None
        if answer is None:
            return None
        self.pending = None
        self.transcript.append(("answer", answer))
        return answer

    def notify(self, message: str) -> None:
        self.transcript.append(("notice", message))
        self.output_fn(message)


# --- dispatch plan ----------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    index: int
    roles: tuple[AgentRole, ...]
    required_after: tuple[ArtifactKind, ...]


@dataclass(frozen=True)
class DispatchPlan:
    workflow: WorkflowType
    stages: tuple[Stage, ...]

    def stage_index_of(self, role: AgentRole) -> int:
        for stage in self.stages:
            if role in stage.roles:
                return stage.index
        raise MisconfigurationError(f"{role.value} is not dispatched by workflow {self.workflow.id}")


def compile_plan(workflow: WorkflowType) -> DispatchPlan:
    if not workflow.dag or any(not stage for stage in workflow.dag):
        raise MisconfigurationError(f"workflow {workflow.id} has an empty dag or stage")
    stages = []
    for index, roles in enumerate(workflow.dag):
        owed: set[ArtifactKind] = set()
        for role in roles:
            owed |= contracted_artifacts(role, workflow)
        stages.append(
            Stage(
                index=index,
                roles=tuple(roles),
                required_after=tuple(sorted(owed, key=lambda k: k.filename)),
            )
        )
    return DispatchPlan(workflow=workflow, stages=tuple(stages))


# --- workflow selection -----------------------------------------------------

_SELECTION_RULES: tuple[tuple[re.Pattern[str], int, int], ...] = (
    (re.compile(r"\bissue\s*#\d+|\bsingle issue\b|\bfix (the )?issue\b", re.I), 5, 3),
    (re.compile(r"\b(scan|patrol|triage)\b.{0,40}\bissues\b|\bissue patrol\b", re.I), 4, 3),
    (re.compile(r"\b(nightly|hourly|weekly|recurring|scheduled?)\b|\bevery (night|day|hour|week)\b", re.I), 8, 3),
    (re.compile(r"\bmonte carlo\b|\bsimulation stud(y|ies)\b|\bsimulat(e|ion|ions)\b|\bdgp\b", re.I), 10, 3),
    (re.compile(r"\bcode review\b|\breview\b.{0,30}\b(code|pull request|pr)\b", re.I), 7, 3),
    (re.compile(r"\bvalidate\b|\bvalidation\b|\b(run|rerun|check) (the )?tests?\b", re.I), 6, 2),
    (re.compile(r"\breadme\b|\bvignettes?\b|\bdocs\b|\bdocumentation\b|\bmanual\b|\btutorial\b|\bchangelog\b", re.I), 3, 2),
    (re.compile(r"\btypo\b|\bone-?lin(e|er)\b|\btrivial\b|\btiny\b", re.I), 9, 3),
    (re.compile(r"\bfix(es|ing)?\b|\bbug\b|\bfailing\b|\bbroken\b|\brepair\b", re.I), 2, 2),
    (re.compile(r"\badd(ing)?\b|\bimplement\b|\bbuild\b|\bcreate\b|\btranslate\b|\bport\b", re.I), 2, 1),
    (re.compile(r"\bfeature\b|\bpackage\b|\bship\b", re.I), 2, 1),
)

#: Minimum top score, and required lead over the runner-up, to select
#: without asking the user.
_MIN_CONFIDENT_SCORE = 2
_MIN_LEAD = 1


def classify_directive(directive: str) -> list[tuple[int, int]]:
    """Score every workflow id for a directive; descending (score, id)."""
    scores: dict[int, int] = {}
    for pattern, workflow_id, weight in _SELECTION_RULES:
        if pattern.search(directive):
            scores[workflow_id] = scores.get(workflow_id, 0) + weight
    # A directive asking for both a code change and a simulation study is
    # the full-workflow pattern and outranks either alone.
    if scores.get(2, 0) and scores.get(10, 0):
        scores[1] = scores[2] + scores[10] + 1
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return [(workflow_id, score) for workflow_id, score in ranked]


def select_workflow(
    directive: str, override: int | None = None, *, channel: UserChannel | None = None
) -> WorkflowType:
    """Resolve a directive to a workflow type.

    A manual override always wins. Otherwise the rule-based classifier
    picks the top-scoring type; below the confidence margin the leader
    asks the user, naming the top two candidates.
    """
    if override is not None:
        return workflow_by_id(override)
    if not directive.strip():
        raise MisconfigurationError("workflow selection needs a directive or an override")
    ranked = classify_directive(directive)
    top = ranked[0][1] if ranked else 0
    runner_up = ranked[1][1] if len(ranked) > 1 else 0
    if ranked and top >= _MIN_CONFIDENT_SCORE and top - runner_up >= _MIN_LEAD:
        return workflow_by_id(ranked[0][0])
    candidates = [workflow_by_id(workflow_id) for workflow_id, _ in ranked[:2]]
    if not candidates:
        candidates = [workflow_by_id(2), workflow_by_id(3)]
    names = ", ".join(f"{wf.id} ({wf.name})" for wf in candidates)
    question = f"Workflow selection is ambiguous. Reply with a workflow id. Top candidates: {names}"
    if channel is not None:
        answer = channel.ask(question)
        if answer is not None:
            try:
                return workflow_by_id(int(answer.strip()))
            except (ValueError, MisconfigurationError):
                pass
    raise HoldUnanswered(question)


# --- signal routing ---------------------------------------------------------


@dataclass(frozen=True)
class RoutingAction:
    """What the leader does with a recorded signal: sequential re-dispatch
    phases, an optional question to forward, and for STOP the stage index
    to rewind to (every stage at or after it re-runs)."""

    phases: tuple[tuple[AgentRole, ...], ...]
    forward_question: str | None = None
    rewind_to_stage: int | None = None


def route_signal(s: Signal, plan: DispatchPlan) -> RoutingAction:
    if s.kind is SignalKind.HOLD:
        return RoutingAction(phases=((s.raiser,),), forward_question=s.payload)
    if s.kind is SignalKind.BLOCK:
        target = block_pipeline_target(s)
        if target not in plan.workflow.roles():
            target = AgentRole.BUILDER
        phases: list[tuple[AgentRole, ...]] = []
        if target in plan.workflow.roles():
            phases.append((target,))
        phases.append((AgentRole.TESTER,))
        return RoutingAction(phases=tuple(phases))
    target = stop_routing_target(s)
    if target is None:
        raise ProtocolError(
            "STOP payload must name a routing target via a 'target:' line "
            "(planner, builder, simulator, or scriber)"
        )
    if target not in plan.workflow.roles():
        raise ProtocolError(
            f"STOP routed to {target.value}, which workflow {plan.workflow.id} does not dispatch"
        )
    return RoutingAction(phases=(), rewind_to_stage=plan.stage_index_of(target))


# --- mechanical review ------------------------------------------------------

_TOLERANCE_RE = re.compile(r"\b\d+(?:\.\d+)?[eE][-+]?\d+\b")
_TABLE_ROW_RE = re.compile(r"^\s*\|.+\|\s*$", re.M)


def extract_tolerances(text: str) -> list[tuple[str, float]]:
    """Tolerance tokens (e-notation literals) with their numeric values."""
    return [(token, float(token)) for token in _TOLERANCE_RE.findall(text)]


class CheckStatus(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    ATTESTED = "attested"  # delegated to the reviewer backend


@dataclass(frozen=True)
class MechanicalCheck:
    name: str
    status: CheckStatus
    detail: str = ""


@dataclass(frozen=True)
class MechanicalReviewReport:
    checks: tuple[MechanicalCheck, ...]

    @property
    def passed(self) -> bool:
        return all(check.status is not CheckStatus.FAIL for check in self.checks)

    def failures(self) -> tuple[MechanicalCheck, ...]:
        return tuple(check for check in self.checks if check.status is CheckStatus.FAIL)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "status": c.status.value, "detail": c.detail}
                for c in self.checks
            ],
        }


def mechanical_review(
    run_dir: RunDirectory,
    logs: Mapping[AgentRole, Sequence[AccessEvent]],
    plan: DispatchPlan,
    *,
    matrix: AccessMatrix = DEFAULT_ACCESS_MATRIX,
) -> MechanicalReviewReport:
    """The mechanically checkable subset of the reviewer's checks.

    Artifact presence, pipeline isolation, tolerance integrity, and
    validation-evidence completeness run here; the semantic checks are
    delegated to the reviewer backend and recorded as backend-attested.
    The engine refuses a PASS verdict when any mechanical check fails.
    """
    run_dir.check_readable()
    checks: list[MechanicalCheck] = []
    roles = plan.workflow.roles() - {AgentRole.SHIPPER}

    present = run_dir.present()
    missing: list[str] = []
    for role in sorted(roles, key=lambda r: r.value):
        for kind in sorted(contracted_artifacts(role, plan.workflow), key=lambda k: k.filename):
            if kind not in present:
                missing.append(f"{kind.filename} ({role.value})")
    checks.append(
        MechanicalCheck(
            name="artifact-presence",
            status=CheckStatus.FAIL if missing else CheckStatus.PASS,
            detail="missing: " + ", ".join(missing) if missing else "all contracted artifacts present",
        )
    )

    try:
        isolation = audit_isolation(logs, matrix=matrix, dispatched=frozenset(roles))
        if isolation.clean:
            checks.append(
                MechanicalCheck("pipeline-isolation", CheckStatus.PASS, "no cross-barrier access")
            )
        else:
            listed = "; ".join(
                f"{role.value} touched {kind.filename}" for role, kind, _ in isolation.violations
            )
            checks.append(MechanicalCheck("pipeline-isolation", CheckStatus.FAIL, listed))
    except AuditIncompleteness as exc:
        checks.append(MechanicalCheck("pipeline-isolation", CheckStatus.FAIL, str(exc)))

    for name in ("spec-cross-comparison", "output-convergence", "coverage-of-changes"):
        checks.append(MechanicalCheck(name, CheckStatus.ATTESTED, "delegated to reviewer backend"))

    if AgentRole.TESTER in roles:
        if ArtifactKind.TEST_SPEC in present and ArtifactKind.AUDIT in present:
            spec_tokens = extract_tolerances(run_dir.read(ArtifactKind.TEST_SPEC))
            audit_tokens = extract_tolerances(run_dir.read(ArtifactKind.AUDIT))
            spec_literals = {token for token, _ in spec_tokens}
            strictest = min((value for _, value in spec_tokens), default=None)
            flagged = sorted(
                {
                    token
                    for token, value in audit_tokens
                    if token not in spec_literals and strictest is not None and value > strictest
                }
            )
            checks.append(
                MechanicalCheck(
                    name="tolerance-integrity",
                    status=CheckStatus.FAIL if flagged else CheckStatus.PASS,
                    detail=(
                        "inflated tolerance(s): " + ", ".join(flagged)
                        if flagged
                        else "no inflation detected"
                    ),
                )
            )
        elif ArtifactKind.AUDIT in present and ArtifactKind.TEST_SPEC not in present:
            checks.append(
                MechanicalCheck(
                    "tolerance-integrity", CheckStatus.PASS, "no test specification to compare against"
                )
            )
        else:
            checks.append(
                MechanicalCheck("tolerance-integrity", CheckStatus.FAIL, "audit.md missing")
            )

        if ArtifactKind.AUDIT in present:
            audit_text = run_dir.read(ArtifactKind.AUDIT)
            has_table = len(_TABLE_ROW_RE.findall(audit_text)) >= 2
            checks.append(
                MechanicalCheck(
                    name="evidence-completeness",
                    status=CheckStatus.PASS if has_table else CheckStatus.FAIL,
                    detail="result table found" if has_table else "audit.md has no result table",
                )
            )
        else:
            checks.append(
                MechanicalCheck("evidence-completeness", CheckStatus.FAIL, "audit.md missing")
            )
    else:
        checks.append(
            MechanicalCheck("tolerance-integrity", CheckStatus.PASS, "no test pipeline in this workflow")
        )
        checks.append(
            MechanicalCheck("evidence-completeness", CheckStatus.PASS, "no test pipeline in this workflow")
        )

    return MechanicalReviewReport(checks=tuple(checks))


# --- run report -------------------------------------------------------------


@dataclass
class RunReport:
    request_id: str
    workflow_id: int
    workflow_name: str
    directive: str
    final_state: str = WorkflowState.CREDENTIALS_VERIFIED.value
    visited_states: list[str] = field(default_factory=list)
    history: list[str] = field(default_factory=list)
    retries: dict[str, int] = field(default_factory=dict)
    signals: list[dict] = field(default_factory=list)
    dispatch_counts: dict[str, int] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    diagnostics: dict[str, str] = field(default_factory=dict)
    gate_violation: str | None = None
    escalation: str | None = None
    pending: str | None = None
    mechanical: dict | None = None
    ship: dict | None = None

    @property
    def exit_code(self) -> int:
        if self.gate_violation:
            return 2
        if self.escalation:
            return 3
        if self.diagnostics:
            return 4
        return 0

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "workflow_id": self.workflow_id,
            "workflow_name": self.workflow_name,
            "directive": self.directive,
            "final_state": self.final_state,
            "visited_states": list(self.visited_states),
            "history": list(self.history),
            "retries": dict(sorted(self.retries.items())),
            "signals": list(self.signals),
            "dispatch_counts": dict(sorted(self.dispatch_counts.items())),
            "artifacts": sorted(self.artifacts),
            "diagnostics": dict(sorted(self.diagnostics.items())),
            "gate_violation": self.gate_violation,
            "escalation": self.escalation,
            "pending": self.pending,
            "mechanical": self.mechanical,
            "ship": self.ship,
            "exit_code": self.exit_code,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def render_text(self) -> str:
        lines = [
            f"run {self.request_id}: workflow {self.workflow_id} ({self.workflow_name})",
            f"final state: {self.final_state}",
            "visited: " + " -> ".join(self.visited_states),
            "retries: " + ", ".join(f"{k}={v}" for k, v in sorted(self.retries.items())),
            "dispatches: "
            + (
                ", ".join(f"{k}x{v}" for k, v in sorted(self.dispatch_counts.items()))
                or "(none)"
            ),
            "artifacts: " + (", ".join(sorted(self.artifacts)) or "(none)"),
        ]
        if self.gate_violation:
            lines.append(f"gate violation: {self.gate_violation}")
        if self.escalation:
            lines.append(f"escalated to user: {self.escalation}")
        if self.pending:
            lines.append(f"pending: {self.pending}")
        if self.diagnostics:
            for role, note in sorted(self.diagnostics.items()):
                lines.append(f"diagnostic [{role}]: {note}")
        if self.ship:
            lines.append(f"ship: {json.dumps(self.ship, sort_keys=True)}")
        return "\n".join(lines) + "\n"


# --- run bootstrap ----------------------------------------------------------


def start_run(
    *,
    runs_root: Path,
    target_repo: Path,
    directive: str,
    workflow: WorkflowType,
    git: GitBackend,
    clock: Clock,
    request_id: str | None = None,
) -> tuple[RunDirectory, str]:
    """Create the run directory and write the leader's four artifacts."""
    target_repo = Path(target_repo).resolve()
    if not target_repo.is_dir():
        raise EnvironmentFailure(f"target repository not resolvable: {target_repo}")
    if request_id is None:
        request_id = "req-" + clock.now().strftime("%Y%m%d-%H%M%S")
    run_dir = RunDirectory(Path(runs_root) / request_id).create()

    run_dir.write(
        ArtifactKind.REQUEST,
        (
            f"# Request {request_id}\n\n"
            f"- directive: {directive}\n"
            f"- target repository: {target_repo.name}\n"
            f"- workflow: {workflow.id} ({workflow.name})\n"
        ),
    )
    roles = ", ".join(sorted(r.value for r in workflow.roles()))
    run_dir.write(
        ArtifactKind.IMPACT,
        (
            "# Impact\n\n"
            f"- required agents: {roles}\n"
            f"- ships: {'yes' if workflow.ships else 'no'}\n"
        ),
    )
    verified = git.is_repo(target_repo)
    remote = git.remote_url(target_repo) if verified else None
    run_dir.write(
        ArtifactKind.CREDENTIALS,
        (
            "# Credentials\n\n"
            f"- repository access: {'verified' if verified else 'NOT verified'}\n"
            f"- remote: {remote or '(none)'}\n"
        ),
    )
    run_dir.write(ArtifactKind.STATUS, "")
    return run_dir, request_id


# --- orchestrator -----------------------------------------------------------


@dataclass(frozen=True)
class _StageHalt:
    reason: str  # "escalated" | "gate" | "backend" | "awaiting_authorization"
    detail: str


class Orchestrator:
    """Owns the run's control loop; all RunState mutation happens here."""

    def __init__(
        self,
        *,
        run_dir: RunDirectory,
        request_id: str,
        workflow: WorkflowType,
        backends: Mapping[AgentRole, AgentBackend],
        channel: UserChannel,
        target_repo: Path,
        git: GitBackend,
        clock: Clock | None = None,
        matrix: AccessMatrix = DEFAULT_ACCESS_MATRIX,
        workspace: WorkspaceLayout | None = None,
        directive: str = "",
        deadline: float = DEFAULT_DEADLINE,
    ) -> None:
        self.run_dir = run_dir
        self.request_id = request_id
        self.plan = compile_plan(workflow)
        self.backends = dict(backends)
        self.channel = channel
        self.target_repo = Path(target_repo).resolve()
        self.git = git
        self.clock = clock or SystemClock()
        self.matrix = matrix
        self.workspace = workspace
        self.directive = directive
        self.deadline = deadline
        self.profile: LanguageProfile = UNKNOWN_PROFILE
        self.run_state = RunState(workflow=workflow)
        self._attempts: dict[AgentRole, int] = {}
        self._extras: dict[AgentRole, list[str]] = {}
        self._logs: dict[AgentRole, list[AccessEvent]] = {}
        self._report = RunReport(
            request_id=request_id,
            workflow_id=workflow.id,
            workflow_name=workflow.name,
            directive=directive,
        )

    # -- helpers --

    @property
    def workflow(self) -> WorkflowType:
        return self.plan.workflow

    def _resolve_profile(self) -> None:
        try:
            self.profile = detect_language(self.target_repo)
        except FileNotFoundError as exc:
            raise EnvironmentFailure(str(exc)) from exc
        if self.profile.language is Language.UNKNOWN:
            answer = self.channel.ask(
                "No language profile detected in the target repository. "
                "Which language applies? (R, Python, TypeScript, Stata, Go, Rust, C, C++)"
            )
            if answer is None:
                raise HoldUnanswered("language profile needed for the target repository")
            by_name = {lang.value.lower(): lang for lang in Language}
            language = by_name.get(answer.strip().lower())
            if language is None or language is Language.UNKNOWN:
                raise HoldUnanswered(f"unrecognized language {answer!r}")
            self.profile = PROFILES[language]
        if self.workspace is not None:
            write_context(
                self.workspace, target_repo=self.target_repo, git=self.git, profile=self.profile
            )

    def _briefing(self, role: AgentRole, sandbox: Sandbox) -> str:
        lines = [
            f"role: {role.value}",
            f"workflow: {self.workflow.id} ({self.workflow.name})",
            f"directive: {self.directive}",
            "granted artifacts: "
            + (", ".join(sorted(k.filename for k in sandbox.visible_artifacts)) or "(none)"),
        ]
        if self.profile.language is not Language.UNKNOWN:
            lines.append(f"language profile: {self.profile.language.value}")
            if role is AgentRole.TESTER:
                lines.append("validation commands: " + "; ".join(validation_commands(self.profile)))
            if role in (AgentRole.BUILDER, AgentRole.SCRIBER):
                lines.append(f"documentation convention: {self.profile.doc_convention}")
        for extra in self._extras.get(role, []):
            lines.append(extra)
        return "\n".join(lines) + "\n"

    def _sandbox_clock(self) -> Clock:
        # Parallel dispatches must not interleave on one tick clock, or
        # replay timestamps would depend on thread scheduling.
        if isinstance(self.clock, TickClock):
            return TickClock(start=self.clock.start, step_seconds=self.clock.step_seconds)
        return self.clock

    def _make_sandbox(self, role: AgentRole, attempt: int) -> Sandbox:
        clock = self._sandbox_clock()
        if role in WORKTREE_ROLES:
            if attempt > 1:
                # free the role branch before checking it out again
                previous = self.run_dir.sandboxes_dir / f"{role.value}-{attempt - 1}"
                self.git.worktree_remove(self.target_repo, previous)
            return create_sandbox(
                role,
                self.target_repo,
                self.matrix,
                run_dir=self.run_dir,
                git=self.git,
                clock=clock,
                request_id=self.request_id,
                attempt=attempt,
                state=self.run_state.current,
            )
        return create_plain_sandbox(
            role,
            self.matrix,
            run_dir=self.run_dir,
            clock=clock,
            attempt=attempt,
            state=self.run_state.current,
        )

    def _dispatch_role(self, role: AgentRole) -> AgentOutcome:
        backend = self.backends.get(role)
        if backend is None:
            raise MisconfigurationError(f"no backend configured for {role.value}")
        attempt = self._attempts.get(role, 0) + 1
        self._attempts[role] = attempt
        sandbox = self._make_sandbox(role, attempt)
        req = DispatchRequest(
            role=role,
            sandbox=sandbox,
            briefing=self._briefing(role, sandbox),
            workflow=self.workflow,
            deadline=self.deadline,
            attempt=attempt,
        )
        log_path = self.run_dir.logs_dir / f"{role.value}.log"
        try:
            outcome = dispatch(req, backend, log_path=log_path)
        finally:
            sandbox.flush_audit()
            events = sandbox.audit.events()
            self._logs.setdefault(role, []).extend(events)
            # persist per-role access logs at run level: sandboxes are
            # disposable, and a resumed session must still audit them
            per_role = AuditLog()
            for event in self._logs[role]:
                per_role.append(event)
            per_role.write_to(self._role_access_log_path(role))
        if outcome.status is OutcomeStatus.COMPLETED:
            for kind in sorted(outcome.produced, key=lambda k: k.filename):
                source = sandbox.artifact_file(kind)
                if source is not None:
                    self.run_dir.write(kind, source.read_text(encoding="utf-8"))
        return outcome

    def _dispatch_batch(self, roles: Sequence[AgentRole]) -> list[tuple[AgentRole, AgentOutcome]]:
        """Dispatch a batch concurrently; results return in batch order and
        no downstream work starts until every dispatch has finished."""
        if len(roles) == 1:
            return [(roles[0], self._dispatch_role(roles[0]))]
        with ThreadPoolExecutor(max_workers=len(roles)) as pool:
            futures = [(role, pool.submit(self._dispatch_role, role)) for role in roles]
            return [(role, future.result()) for role, future in futures]

    def _advance_until_blocked(self) -> None:
        terminal = terminal_state(self.workflow)
        while (
            self.run_state.current is not WorkflowState.DONE
            and state_order(self.run_state.current, terminal) < 0
        ):
            result = advance(self.run_state, self.run_dir, self.clock)
            if not result.moved:
                break

    def _note_signal(self, signal: Signal) -> None:
        self._report.signals.append(
            {"kind": signal.kind.value, "raiser": signal.raiser.value, "payload": signal.payload}
        )

    # -- stage execution --

    def _execute_stage(self, stage: Stage, *, skip_satisfied: bool = False) -> _StageHalt | int | None:
        """Run one stage to completion.

        Returns None when every role completed, a stage index to rewind to
        (STOP routing), or a halt condition.
        """
        satisfied: set[AgentRole] = set()
        batches: deque[tuple[AgentRole, ...]] = deque()
        first = tuple(
            role
            for role in stage.roles
            if not (
                skip_satisfied
                and all(self.run_dir.exists(k) for k in contracted_artifacts(role, self.workflow))
            )
        )
        if skip_satisfied:
            satisfied |= set(stage.roles) - set(first)
        if first:
            batches.append(first)

        while batches:
            batch = batches.popleft()
            try:
                results = self._dispatch_batch(batch)
            except (DispatchError, ContractError, ProtocolError, BarrierError, MisconfigurationError) as exc:
                self._report.diagnostics[batch[0].value if len(batch) == 1 else "stage"] = str(exc)
                return _StageHalt(reason="backend", detail=str(exc))

            block_seen = False
            redispatch: list[AgentRole] = []
            for role, outcome in results:
                if outcome.status is OutcomeStatus.COMPLETED:
                    satisfied.add(role)
                    continue
                signal = outcome.signal
                assert signal is not None
                self._note_signal(signal)
                disposition = record_signal(self.run_state, signal, self.run_dir, self.clock)
                if disposition is SignalDisposition.ESCALATE_TO_USER:
                    message = (
                        f"{signal.kind.value} retry cap reached; escalating to user: {signal.payload}"
                    )
                    self.channel.notify(message)
                    return _StageHalt(reason="escalated", detail=message)
                action = route_signal(signal, self.plan)
                if action.rewind_to_stage is not None:
                    target_roles = self.plan.stages[action.rewind_to_stage].roles
                    for target in target_roles:
                        self._extras.setdefault(target, []).append(
                            f"quality-gate failure details: {signal.payload}"
                        )
                    return action.rewind_to_stage
                if action.forward_question is not None:
                    answer = self.channel.ask(action.forward_question)
                    if answer is None:
                        return _StageHalt(
                            reason="escalated",
                            detail=f"unanswered question from {signal.raiser.value}: "
                            f"{action.forward_question}",
                        )
                    self._extras.setdefault(signal.raiser, []).append(f"user answer: {answer}")
                    redispatch.append(signal.raiser)
                else:  # BLOCK
                    block_seen = True
                    fix_role = action.phases[0][0]
                    self._extras.setdefault(fix_role, []).append(
                        f"validation failure details: {signal.payload}"
                    )
                    satisfied.discard(fix_role)
                    satisfied.discard(AgentRole.TESTER)
                    redispatch.append(fix_role)

            if redispatch:
                ordered = tuple(dict.fromkeys(redispatch))
                batches.appendleft(ordered)
                if block_seen:
                    # tester re-validates only after the fix lands
                    batches.insert(1, (AgentRole.TESTER,))
            elif not batches and satisfied < set(stage.roles):
                remaining = tuple(r for r in stage.roles if r not in satisfied)
                batches.append(remaining)
        return None

    def _stage_already_complete(self, stage: Stage) -> bool:
        """True when every stage role's contracted artifacts already exist
        (used when resuming a run reconstructed from its directory)."""
        return all(
            self.run_dir.exists(kind)
            for role in stage.roles
            for kind in contracted_artifacts(role, self.workflow)
        )

    def _role_access_log_path(self, role: AgentRole) -> Path:
        return self.run_dir.logs_dir / f"access-{role.value}.log"

    def _collected_logs(self) -> dict[AgentRole, tuple[AccessEvent, ...]]:
        """All known access logs: this session's plus any persisted by a
        prior session of the same run."""
        logs = {role: tuple(events) for role, events in self._logs.items()}
        for role in self.workflow.roles():
            if role in logs:
                continue
            persisted = self._role_access_log_path(role)
            if persisted.exists():
                logs[role] = parse_access_log(persisted.read_text(encoding="utf-8"))
        return logs

    def _run_mechanical_review(self) -> _StageHalt | None:
        logs = self._collected_logs()
        report = mechanical_review(self.run_dir, logs, self.plan, matrix=self.matrix)
        self._report.mechanical = report.to_dict()
        merge_access_logs(logs, self.run_dir)
        if not report.passed:
            listed = "; ".join(f"{c.name}: {c.detail}" for c in report.failures())
            return _StageHalt(reason="gate", detail=f"mechanical review failed ({listed})")
        return None

    # -- main entry --

    def run(self, authorization: str | None = None, *, resume: bool = False) -> RunReport:
        try:
            self._resolve_profile()
        except HoldUnanswered as exc:
            self._report.escalation = exc.question
            self._report.pending = exc.question
            self._finalize()
            return self._report
        except EnvironmentFailure as exc:
            self._report.diagnostics["environment"] = str(exc)
            self._finalize()
            return self._report

        if resume:
            self.run_state = reconstruct_run_state(self.run_dir, self.workflow)
            for role in self.workflow.roles():
                raised = sum(
                    1
                    for entry in self.run_state.history
                    if entry.signal is not None and entry.cause.startswith(f"{role.value} raised")
                )
                if raised:
                    self._attempts[role] = raised
        else:
            write_status(self.run_state, self.run_dir)

        self._advance_until_blocked()

        index = 0
        resuming = resume
        while index < len(self.plan.stages):
            stage = self.plan.stages[index]
            if resuming and self._stage_already_complete(stage):
                self._advance_until_blocked()
                index += 1
                continue
            if AgentRole.SHIPPER in stage.roles:
                if authorization is None and self.channel.mode is ChannelMode.INTERACTIVE:
                    answer = self.channel.ask("Authorize shipping? (yes/no)")
                    if answer is not None and answer.strip().lower() in ("y", "yes"):
                        authorization = "interactive-user-authorization"
                    self.channel.pending = None
                if authorization is None:
                    self._report.pending = (
                        "awaiting explicit user authorization to ship (run the authorize command)"
                    )
                    break
                ship_report = ship(
                    self.run_dir,
                    authorization,
                    target_repo=self.target_repo,
                    workflow=self.workflow,
                    backends=self.backends,
                    git=self.git,
                    clock=self.clock,
                    matrix=self.matrix,
                    workspace=self.workspace,
                    slug=self.request_id,
                    run_state=self.run_state,
                    orchestrator=self,
                )
                self._report.ship = ship_report.to_dict()
                if not ship_report.shipped:
                    self._report.gate_violation = ship_report.refusal or "ship failed"
                    break
                index += 1
                continue

            outcome = self._execute_stage(stage, skip_satisfied=resuming)
            resuming = False  # everything after the resume point is fresh work
            if isinstance(outcome, _StageHalt):
                if outcome.reason == "escalated":
                    self._report.escalation = outcome.detail
                    if self.channel.pending:
                        self._report.pending = self.channel.pending
                elif outcome.reason == "gate":
                    self._report.gate_violation = outcome.detail
                break
            if isinstance(outcome, int):  # STOP rewind target stage
                index = outcome
                continue

            if AgentRole.REVIEWER in stage.roles:
                halt = self._run_mechanical_review()
                if halt is not None:
                    self._report.gate_violation = halt.detail
                    break

            self._advance_until_blocked()
            expected = self._expected_state_after(index)
            if expected is not None and state_order(self.run_state.current, expected) < 0:
                gate = check_preconditions(expected, self.run_dir, self.workflow)
                missing = ", ".join(
                    f"{req.artifact.filename}:{req.predicate.value}" for req in gate.missing
                )
                self._report.gate_violation = (
                    f"stage {index} complete but {expected.value} gate unsatisfied ({missing})"
                )
                break
            index += 1

        self._finalize()
        return self._report

    def _expected_state_after(self, stage_index: int) -> WorkflowState | None:
        """The furthest state reachable once this stage's artifacts exist,
        assuming the stage is the last producer dispatched so far."""
        produced: set[ArtifactKind] = {
            ArtifactKind.REQUEST,
            ArtifactKind.IMPACT,
            ArtifactKind.STATUS,
            ArtifactKind.CREDENTIALS,
        }
        for stage in self.plan.stages[: stage_index + 1]:
            produced |= set(stage.required_after)
        best: WorkflowState | None = None
        for state in list(WorkflowState)[1:]:
            needs = {req.artifact for req in required_for(state, self.workflow)}
            if needs <= produced:
                best = state
            else:
                break
        terminal = terminal_state(self.workflow)
        if best is not None and state_order(best, terminal) > 0:
            best = terminal
        return best

    def _finalize(self) -> None:
        self._report.final_state = self.run_state.current.value
        self._report.visited_states = [s.value for s in self.run_state.visited_states()]
        self._report.history = [entry.render() for entry in self.run_state.history]
        self._report.retries = {k.value: v for k, v in self.run_state.retries.items()}
        self._report.dispatch_counts = {r.value: n for r, n in sorted(self._attempts.items())}
        self._report.artifacts = sorted(k.filename for k in self.run_dir.present())
        if self.channel.pending and not self._report.pending:
            self._report.pending = self.channel.pending
        if self._report.pending and self.channel.pending:
            (self.run_dir.path / "pending-hold.md").write_text(
                self.channel.pending + "\n", encoding="utf-8"
            )
        if self._logs:
            merge_access_logs(self._collected_logs(), self.run_dir)
        # worktrees are disposable once artifacts and audit logs are
        # collected; removing them frees the role branches for re-runs
        for role, attempts in self._attempts.items():
            if role in WORKTREE_ROLES:
                for attempt in range(1, attempts + 1):
                    path = self.run_dir.sandboxes_dir / f"{role.value}-{attempt}"
                    if path.exists():
                        self.git.worktree_remove(self.target_repo, path)
        self.run_dir.report_json_path.write_text(self._report.to_json(), encoding="utf-8")
        self.run_dir.report_text_path.write_text(self._report.render_text(), encoding="utf-8")


# --- shipping ---------------------------------------------------------------


@dataclass(frozen=True)
class ShipReport:
    shipped: bool
    refusal: str | None = None
    partial: bool = False
    git_actions: tuple[GitResult, ...] = ()
    sync_detail: str = ""

    def to_dict(self) -> dict:
        return {
            "shipped": self.shipped,
            "refusal": self.refusal,
            "partial": self.partial,
            "git_actions": [
                {"action": r.action.value, "ok": r.ok, "detail": r.detail, "error": r.error_kind}
                for r in self.git_actions
            ],
            "sync": self.sync_detail,
        }


def ship(
    run_dir: RunDirectory,
    authorization: str | None,
    *,
    target_repo: Path,
    workflow: WorkflowType,
    backends: Mapping[AgentRole, AgentBackend],
    git: GitBackend,
    clock: Clock,
    matrix: AccessMatrix = DEFAULT_ACCESS_MATRIX,
    workspace: WorkspaceLayout | None = None,
    slug: str = "run",
    run_state: RunState | None = None,
    orchestrator: "Orchestrator | None" = None,
) -> ShipReport:
    """The hard ship gate: a PASS-variant verdict AND explicit user
    authorization, in that dominance order, before any push.

    On success: target repo staged/committed/pushed, workspace synced,
    shipper.md written, state advanced to DONE.
    """
    if run_state is None:
        run_state = reconstruct_run_state(run_dir, workflow)

    if run_state.current is not WorkflowState.READY_TO_SHIP:
        return ShipReport(
            shipped=False,
            refusal=f"run is at {run_state.current.value}, not READY_TO_SHIP",
        )
    try:
        verdict = run_dir.verdict()
    except VerdictError as exc:
        return ShipReport(shipped=False, refusal=f"no parseable review verdict: {exc}")
    if not verdict.passing:
        return ShipReport(shipped=False, refusal=f"review verdict is {verdict.value.value}; ship refused")
    if not authorization:
        return ShipReport(
            shipped=False, refusal="explicit user authorization required before shipping"
        )

    # Dispatch the shipper agent for its report, then perform the git
    # actions on its behalf. This is the only path that mutates the repo.
    shipper_draft = ""
    if AgentRole.SHIPPER in backends:
        if orchestrator is not None:
            outcome = orchestrator._dispatch_role(AgentRole.SHIPPER)
        else:
            sandbox = create_plain_sandbox(
                AgentRole.SHIPPER, matrix, run_dir=run_dir, clock=clock,
                state=run_state.current,
            )
            req = DispatchRequest(
                role=AgentRole.SHIPPER,
                sandbox=sandbox,
                briefing=f"ship authorized: {slug}\n",
                workflow=workflow,
            )
            outcome = dispatch(req, backends[AgentRole.SHIPPER])
            source = sandbox.artifact_file(ArtifactKind.SHIPPER)
            if source is not None:
                run_dir.write(ArtifactKind.SHIPPER, source.read_text(encoding="utf-8"))
        if outcome.status is OutcomeStatus.COMPLETED and run_dir.exists(ArtifactKind.SHIPPER):
            shipper_draft = run_dir.read(ArtifactKind.SHIPPER)

    credentials_present = run_dir.exists(ArtifactKind.CREDENTIALS)
    actions: list[GitResult] = []
    actions.append(
        git_ops(target_repo, GitAction.STAGE, {"paths": []}, git=git, credentials_present=credentials_present)
    )
    actions.append(
        git_ops(
            target_repo,
            GitAction.COMMIT,
            {"message": f"ship {slug}"},
            git=git,
            credentials_present=credentials_present,
        )
    )
    push = git_ops(target_repo, GitAction.PUSH, {}, git=git, credentials_present=credentials_present)
    actions.append(push)
    if not push.ok:
        _write_shipper_report(run_dir, shipper_draft, actions, "not attempted (push failed)")
        return ShipReport(
            shipped=False,
            refusal=f"push failed: {push.error_kind}",
            partial=True,
            git_actions=tuple(actions),
            sync_detail="workspace sync skipped; nothing to roll back",
        )

    sync_detail = "no workspace configured"
    if workspace is not None:
        sync = sync_workspace(workspace, run_dir, git=git, clock=clock, slug=slug)
        sync_detail = sync.detail
        if not sync.ok:
            _write_shipper_report(run_dir, shipper_draft, actions, sync_detail)
            return ShipReport(
                shipped=False,
                refusal=f"workspace sync failed: {sync.detail}",
                partial=True,
                git_actions=tuple(actions),
                sync_detail=sync_detail,
            )

    _write_shipper_report(run_dir, shipper_draft, actions, sync_detail)
    advance(run_state, run_dir, clock)
    return ShipReport(shipped=True, git_actions=tuple(actions), sync_detail=sync_detail)


def _write_shipper_report(
    run_dir: RunDirectory, draft: str, actions: list[GitResult], sync_detail: str
) -> None:
    lines = ["# Shipper report", ""]
    if draft.strip():
        lines += [draft.strip(), ""]
    lines.append("## Git actions taken")
    for result in actions:
        status = "ok" if result.ok else f"FAILED ({result.error_kind})"
        lines.append(f"- {result.action.value}: {result.detail} [{status}]")
    lines += ["", "## Workspace sync", f"- {sync_detail}"]
    run_dir.write(ArtifactKind.SHIPPER, "\n".join(lines) + "\n")


# --- convenience entry point ------------------------------------------------


def run_workflow(
    plan: DispatchPlan | WorkflowType,
    backends: Mapping[AgentRole, AgentBackend],
    channel: UserChannel,
    *,
    run_dir: RunDirectory,
    request_id: str,
    target_repo: Path,
    git: GitBackend,
    clock: Clock | None = None,
    matrix: AccessMatrix = DEFAULT_ACCESS_MATRIX,
    workspace: WorkspaceLayout | None = None,
    directive: str = "",
    deadline: float = DEFAULT_DEADLINE,
    authorization: str | None = None,
    resume: bool = False,
) -> RunReport:
    """Execute a compiled plan end to end and return the run report."""
    workflow = plan.workflow if isinstance(plan, DispatchPlan) else plan
    orchestrator = Orchestrator(
        run_dir=run_dir,
        request_id=request_id,
        workflow=workflow,
        backends=backends,
        channel=channel,
        target_repo=target_repo,
        git=git,
        clock=clock,
        matrix=matrix,
        workspace=workspace,
        directive=directive,
        deadline=deadline,
    )
    return orchestrator.run(authorization=authorization, resume=resume)


IssueSource = Callable[[], Sequence[IssueDescriptor]]


def run_issue_patrol(
    source: IssueSource, start: Callable[[IssueDescriptor], RunReport]
) -> list[RunReport]:
    """Workflow 4: fetch issues from the pluggable source and spawn one
    independent code-fix run per issue."""
    return [start(issue) for issue in source()]


#: Inner workflows the scheduled loop may wrap (non-shipping, non-wrapper).
SCHEDULABLE_INNER_IDS = frozenset({1, 3, 6, 7, 9, 10})


def run_scheduled_loop(
    inner_id: int,
    iterations: int,
    interval_seconds: float,
    start: Callable[[int, WorkflowType], RunReport],
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> list[RunReport]:
    """Workflow 8: repeat an inner workflow on an interval."""
    if inner_id not in SCHEDULABLE_INNER_IDS:
        raise MisconfigurationError(
            f"scheduled loop cannot wrap workflow {inner_id}; allowed: "
            f"{sorted(SCHEDULABLE_INNER_IDS)}"
        )
    inner = workflow_by_id(inner_id)
    reports = []
    for iteration in range(iterations):
        if iteration:
            sleep(interval_seconds)
        reports.append(start(iteration, inner))
    return reports
