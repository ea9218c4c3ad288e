"""Information barriers: the role/artifact access matrix, per-agent
sandboxes, and the tamper-evident access audit.

Enforcement is by materialization: a sandbox receives copies of exactly
the artifacts its role may read, plus API-level checks for every read an
agent requests. The audit log records every decision so a misbehaving
backend is caught at review time even if it tried to bypass the copies.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Mapping, Sequence

from gatework.clock import Clock, iso8601, parse_iso8601
from gatework.errors import AuditIncompleteness, BarrierError, EnvironmentFailure, MisconfigurationError
from gatework.gitlayer import GitBackend
from gatework.model import (
    ARTIFACT_NAME_ALIASES,
    AccessDecision,
    AccessEvent,
    AgentRole,
    ArtifactKind,
    WorkflowState,
    artifact_kind_for_name,
    state_order,
)
from gatework.rundir import RunDirectory

#: Roles that operate in an isolated git worktree.
WORKTREE_ROLES = frozenset(
    {AgentRole.BUILDER, AgentRole.TESTER, AgentRole.SIMULATOR, AgentRole.SCRIBER}
)

#: Pipeline outputs the tester may read once the pipelines have completed.
TESTER_LATE_INPUTS = frozenset({ArtifactKind.IMPLEMENTATION, ArtifactKind.SIMULATION})

_K = ArtifactKind
_SPEC_ARTIFACTS = (_K.COMPREHENSION, _K.SPEC, _K.TEST_SPEC, _K.SIM_SPEC)
_PIPELINE_OUTPUTS = (_K.IMPLEMENTATION, _K.AUDIT, _K.SIMULATION)
_SCRIBER_OUTPUTS = (_K.ARCHITECTURE, _K.LOG_ENTRY, _K.DOCS)


class AuditLog:
    """Append-only, thread-safe access log (single writer per sandbox;
    atomic appends)."""

    def __init__(self) -> None:
        self._events: list[AccessEvent] = []
        self._lock = threading.Lock()

    def append(self, event: AccessEvent) -> None:
        with self._lock:
            self._events.append(event)

    def events(self) -> tuple[AccessEvent, ...]:
        with self._lock:
            return tuple(self._events)

    def render(self) -> str:
        lines = [
            "\t".join((iso8601(e.timestamp), e.role.value, e.artifact.filename, e.decision.value))
            for e in self.events()
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def write_to(self, path: Path) -> None:
        path.write_text(self.render(), encoding="utf-8")


def parse_access_log(text: str) -> tuple[AccessEvent, ...]:
    events = []
    for line in text.splitlines():
        if not line.strip():
            continue
        ts, role, artifact, decision = line.split("\t")
        kind = artifact_kind_for_name(artifact)
        if kind is None:
            raise ValueError(f"unknown artifact in access log: {artifact!r}")
        events.append(
            AccessEvent(
                timestamp=parse_iso8601(ts),
                role=AgentRole(role),
                artifact=kind,
                decision=AccessDecision(decision),
            )
        )
    return tuple(events)


@dataclass(frozen=True)
class AccessMatrix:
    """Which role may read which artifact kind. Default deny."""

    grants: Mapping[AgentRole, frozenset[ArtifactKind]]

    def grants_for(self, role: AgentRole, state: WorkflowState | None = None) -> frozenset[ArtifactKind]:
        base = self.grants.get(role, frozenset())
        if (
            role is AgentRole.TESTER
            and state is not None
            and state_order(state, WorkflowState.PIPELINES_COMPLETE) >= 0
        ):
            return base | TESTER_LATE_INPUTS
        return base

    def allowed(self, role: AgentRole, kind: ArtifactKind, state: WorkflowState | None = None) -> bool:
        return kind in self.grants_for(role, state)

    def lawful(self, role: AgentRole, kind: ArtifactKind) -> bool:
        """Allowed under the most permissive lawful overlay; used when
        auditing logs whose events do not record the state they ran in."""
        return self.allowed(role, kind, state=WorkflowState.PIPELINES_COMPLETE)


DEFAULT_ACCESS_MATRIX = AccessMatrix(
    grants={
        AgentRole.LEADER: frozenset({_K.REQUEST, _K.IMPACT, _K.STATUS, _K.CREDENTIALS}),
        AgentRole.PLANNER: frozenset({_K.REQUEST, _K.IMPACT, *_SPEC_ARTIFACTS}),
        AgentRole.BUILDER: frozenset({_K.SPEC, _K.IMPLEMENTATION}),
        AgentRole.TESTER: frozenset({_K.TEST_SPEC, _K.AUDIT}),
        AgentRole.SIMULATOR: frozenset({_K.SIM_SPEC, _K.SIMULATION}),
        AgentRole.SCRIBER: frozenset({*_PIPELINE_OUTPUTS, *_SCRIBER_OUTPUTS}),
        AgentRole.REVIEWER: frozenset(
            {*_SPEC_ARTIFACTS, *_PIPELINE_OUTPUTS, *_SCRIBER_OUTPUTS, _K.REVIEW}
        ),
        AgentRole.SHIPPER: frozenset(ArtifactKind),
    }
)


def check_access(
    m: AccessMatrix,
    role: AgentRole,
    kind: ArtifactKind,
    *,
    audit: AuditLog,
    clock: Clock,
    state: WorkflowState | None = None,
) -> AccessDecision:
    """Decide one read and append the decision to the audit log either way."""
    decision = AccessDecision.ALLOW if m.allowed(role, kind, state) else AccessDecision.DENY
    audit.append(AccessEvent(timestamp=clock.now(), role=role, artifact=kind, decision=decision))
    return decision


def _contained(root: Path, relpath: str) -> Path:
    candidate = Path(relpath)
    if candidate.is_absolute():
        raise BarrierError(f"absolute path not permitted in sandbox: {relpath!r}")
    if ".." in candidate.parts:
        raise BarrierError(f"path traversal not permitted in sandbox: {relpath!r}")
    resolved = (root / candidate).resolve()
    if not resolved.is_relative_to(root.resolve()):
        raise BarrierError(f"path escapes sandbox: {relpath!r}")
    return resolved


@dataclass
class Sandbox:
    """One agent's isolated filesystem view: a worktree (or plain
    directory) plus materialized copies of its granted artifacts."""

    role: AgentRole
    path: Path
    matrix: AccessMatrix
    visible_artifacts: frozenset[ArtifactKind]
    clock: Clock
    state: WorkflowState | None = None
    branch: str | None = None
    audit: AuditLog = field(default_factory=AuditLog)

    def resolve(self, relpath: str) -> Path:
        return _contained(self.path, relpath)

    def request_read(self, relpath: str) -> str | None:
        """Read a sandbox file on behalf of the agent.

        Paths whose basename is an artifact name route through the access
        matrix and are audited; a DENY never exposes content. Other paths
        are plain worktree files, subject only to containment.
        """
        target = self.resolve(relpath)
        kind = artifact_kind_for_name(target.name)
        if kind is not None:
            decision = check_access(
                self.matrix, self.role, kind, audit=self.audit, clock=self.clock, state=self.state
            )
            if decision is AccessDecision.DENY:
                return None
        if not target.exists():
            return None
        return target.read_text(encoding="utf-8")

    def write_file(self, relpath: str, content: str) -> Path:
        target = self.resolve(relpath)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")
        return target

    def artifact_file(self, kind: ArtifactKind) -> Path | None:
        """Locate a produced artifact in the sandbox (canonical name or
        accepted alias), for engine-side collection."""
        canonical = self.path / kind.filename
        if canonical.exists():
            return canonical
        for alias, aliased in ARTIFACT_NAME_ALIASES.items():
            if aliased is kind and (self.path / alias).exists():
                return self.path / alias
        return None

    @property
    def audit_log_path(self) -> Path:
        return self.path / "access.log"

    def flush_audit(self) -> None:
        self.audit.write_to(self.audit_log_path)


def create_sandbox(
    role: AgentRole,
    base_repo: Path,
    m: AccessMatrix,
    *,
    run_dir: RunDirectory,
    git: GitBackend,
    clock: Clock,
    request_id: str,
    attempt: int = 1,
    state: WorkflowState | None = None,
    include: frozenset[ArtifactKind] | None = None,
) -> Sandbox:
    """Create a fresh worktree-backed sandbox for an execution or
    recording role and materialize its granted artifacts.

    Asking to materialize a non-granted artifact is a barrier violation
    and fails hard rather than being skipped.
    """
    if role not in WORKTREE_ROLES:
        raise MisconfigurationError(
            f"{role.value} does not run in a worktree sandbox; "
            f"worktree roles: {sorted(r.value for r in WORKTREE_ROLES)}"
        )
    path = run_dir.sandboxes_dir / f"{role.value}-{attempt}"
    branch = f"agent/{role.value}/{request_id}"
    run_dir.sandboxes_dir.mkdir(parents=True, exist_ok=True)
    result = git.worktree_add(base_repo, path, branch)
    if not result.ok:
        raise EnvironmentFailure(f"worktree creation failed: {result.output}")
    return _materialize(
        role, path, m, run_dir=run_dir, clock=clock, state=state, include=include, branch=branch
    )


def create_plain_sandbox(
    role: AgentRole,
    m: AccessMatrix,
    *,
    run_dir: RunDirectory,
    clock: Clock,
    attempt: int = 1,
    state: WorkflowState | None = None,
    include: frozenset[ArtifactKind] | None = None,
) -> Sandbox:
    """Directory-backed sandbox for the bridge, convergence, and ship
    roles, which need artifact isolation but no repository worktree."""
    if role is AgentRole.LEADER:
        raise MisconfigurationError("the leader is never dispatched into a sandbox")
    path = run_dir.sandboxes_dir / f"{role.value}-{attempt}"
    path.mkdir(parents=True, exist_ok=True)
    return _materialize(role, path, m, run_dir=run_dir, clock=clock, state=state, include=include)


def _materialize(
    role: AgentRole,
    path: Path,
    m: AccessMatrix,
    *,
    run_dir: RunDirectory,
    clock: Clock,
    state: WorkflowState | None,
    include: frozenset[ArtifactKind] | None,
    branch: str | None = None,
) -> Sandbox:
    grants = m.grants_for(role, state)
    if include is not None:
        ungranted = include - grants
        if ungranted:
            names = sorted(k.filename for k in ungranted)
            raise BarrierError(f"cannot materialize non-granted artifact(s) for {role.value}: {names}")
        wanted = include
    else:
        wanted = grants
    visible = set()
    for kind in sorted(wanted, key=lambda k: k.filename):
        if run_dir.exists(kind):
            (path / kind.filename).write_text(run_dir.read(kind), encoding="utf-8")
            visible.add(kind)
    return Sandbox(
        role=role,
        path=path,
        matrix=m,
        visible_artifacts=frozenset(visible),
        clock=clock,
        state=state,
        branch=branch,
    )


@dataclass(frozen=True)
class IsolationReport:
    violations: tuple[tuple[AgentRole, ArtifactKind, datetime], ...]

    @property
    def clean(self) -> bool:
        return not self.violations


def audit_isolation(
    logs: Mapping[AgentRole, Sequence[AccessEvent]],
    *,
    matrix: AccessMatrix = DEFAULT_ACCESS_MATRIX,
    dispatched: frozenset[AgentRole] = frozenset(),
) -> IsolationReport:
    """Cross-check all access logs against the matrix.

    Any event on a pair the matrix forbids is a violation: an ALLOW entry
    means the barrier was bypassed, a DENY entry means the agent attempted
    a read it had no right to. A dispatched agent with no log at all makes
    the audit incomplete, which is a failure, not a pass.
    """
    missing = sorted(role.value for role in dispatched if role not in logs)
    if missing:
        raise AuditIncompleteness(missing)
    violations = []
    for role, events in logs.items():
        for event in events:
            if not matrix.lawful(role, event.artifact):
                violations.append((role, event.artifact, event.timestamp))
    violations.sort(key=lambda v: (v[2], v[0].value, v[1].filename))
    return IsolationReport(violations=tuple(violations))


def merge_access_logs(logs: Mapping[AgentRole, Sequence[AccessEvent]], run_dir: RunDirectory) -> Path:
    """Merge per-sandbox logs into ``<run>/access.log`` for review."""
    events = sorted(
        (e for per_role in logs.values() for e in per_role),
        key=lambda e: (e.timestamp, e.role.value, e.artifact.filename),
    )
    merged = AuditLog()
    for event in events:
        merged.append(event)
    merged.write_to(run_dir.access_log_path)
    return run_dir.access_log_path
