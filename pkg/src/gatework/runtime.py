"""Uniform dispatch contract for agent backends.

Backends are opaque artifact producers: given a briefing and a sandbox,
they either complete (leaving their contracted artifacts in the sandbox)
or raise a well-formed interrupt signal. The scripted backend replays a
plain-text scenario byte-identically, which is what makes the whole
protocol testable without a language model.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping

from gatework.barrier import Sandbox
from gatework.errors import (
    BarrierError,
    ContractError,
    DispatchError,
    DispatchTimeout,
    MisconfigurationError,
    ProtocolError,
    ScenarioError,
)
from gatework.model import (
    AgentOutcome,
    AgentRole,
    ArtifactKind,
    OutcomeStatus,
    Signal,
    SignalKind,
    WorkflowType,
    signal_owner_check,
)

#: Default per-dispatch deadline in seconds; override per request.
DEFAULT_DEADLINE = 30 * 60.0


@dataclass(frozen=True)
class DispatchRequest:
    """Everything a backend needs for one dispatch."""

    role: AgentRole
    sandbox: Sandbox
    briefing: str
    workflow: WorkflowType
    deadline: float = DEFAULT_DEADLINE
    attempt: int = 1

    def __post_init__(self) -> None:
        if self.deadline <= 0:
            raise ValueError("deadline must be > 0")
        if self.attempt < 1:
            raise ValueError("attempt numbering starts at 1")


class BackendKind(str, Enum):
    SCRIPTED = "scripted"
    SUBPROCESS = "subprocess"
    REMOTE = "remote"


class AgentBackend(ABC):
    kind: BackendKind

    @abstractmethod
    def execute(self, req: DispatchRequest, log_path: Path | None = None) -> AgentOutcome: ...


def contracted_artifacts(role: AgentRole, workflow: WorkflowType) -> frozenset[ArtifactKind]:
    """The artifact kinds ``role`` owes the downstream gates of ``workflow``.

    A dispatchable role absent from this workflow's DAG owes nothing; only
    the leader, which is never dispatched, is a misconfiguration here.
    """
    if role is AgentRole.LEADER:
        raise MisconfigurationError("the leader is not dispatched and has no artifact contract")
    roles = workflow.roles()
    if role not in roles:
        return frozenset()
    if role is AgentRole.PLANNER:
        owed = {ArtifactKind.COMPREHENSION}
        if AgentRole.BUILDER in roles:
            owed.add(ArtifactKind.SPEC)
        if AgentRole.TESTER in roles:
            owed.add(ArtifactKind.TEST_SPEC)
        if AgentRole.SIMULATOR in roles:
            owed.add(ArtifactKind.SIM_SPEC)
        return frozenset(owed)
    fixed = {
        AgentRole.BUILDER: {ArtifactKind.IMPLEMENTATION},
        AgentRole.TESTER: {ArtifactKind.AUDIT},
        AgentRole.SIMULATOR: {ArtifactKind.SIMULATION},
        AgentRole.SCRIBER: {ArtifactKind.ARCHITECTURE, ArtifactKind.LOG_ENTRY, ArtifactKind.DOCS},
        AgentRole.REVIEWER: {ArtifactKind.REVIEW},
        AgentRole.SHIPPER: {ArtifactKind.SHIPPER},
    }
    return frozenset(fixed[role])


# --- scripted scenarios ----------------------------------------------------


@dataclass(frozen=True)
class ReadStep:
    path: str


@dataclass(frozen=True)
class WriteStep:
    path: str
    content: str


@dataclass(frozen=True)
class SignalStep:
    kind: SignalKind
    payload: str


@dataclass(frozen=True)
class CompleteStep:
    pass


Step = ReadStep | WriteStep | SignalStep | CompleteStep


@dataclass(frozen=True)
class ScenarioScript:
    """A parsed scenario: one round of steps per dispatch attempt (the last
    round repeats if an agent is dispatched more times than rounds)."""

    rounds: tuple[tuple[Step, ...], ...]

    def round_for_attempt(self, attempt: int) -> tuple[Step, ...]:
        return self.rounds[min(attempt, len(self.rounds)) - 1]


def _check_script_path(path: str, lineno: int) -> str:
    p = Path(path)
    if p.is_absolute() or ".." in p.parts:
        raise BarrierError(f"line {lineno}: step path escapes the sandbox: {path!r}")
    return path


def parse_scenario(text: str) -> ScenarioScript:
    """Parse the line-oriented scenario format.

    Directives: ``read <path>``, ``write <path> <<EOF`` (heredoc body
    until a line ``EOF``), ``signal <KIND> "payload"`` or
    ``signal <KIND> <<EOF``, ``complete``, and ``---`` separating rounds.
    Each round must end with ``signal`` or ``complete``.
    """
    rounds: list[list[Step]] = [[]]
    lines = text.splitlines()
    i = 0

    def heredoc(start: int) -> tuple[str, int]:
        body = []
        j = start
        while j < len(lines):
            if lines[j].strip() == "EOF":
                return "\n".join(body) + ("\n" if body else ""), j + 1
            body.append(lines[j])
            j += 1
        raise ScenarioError(f"line {start}: heredoc not terminated with EOF")

    def terminated(steps: list[Step]) -> bool:
        return bool(steps) and isinstance(steps[-1], (SignalStep, CompleteStep))

    while i < len(lines):
        raw = lines[i]
        lineno = i + 1
        i += 1
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped == "---":
            if not terminated(rounds[-1]):
                raise ScenarioError(f"line {lineno}: round ends without signal or complete")
            rounds.append([])
            continue
        if terminated(rounds[-1]):
            raise ScenarioError(f"line {lineno}: step after the round already ended")
        if stripped == "complete":
            rounds[-1].append(CompleteStep())
            continue
        if stripped.startswith("read "):
            rounds[-1].append(ReadStep(_check_script_path(stripped[len("read "):].strip(), lineno)))
            continue
        if stripped.startswith("write "):
            rest = stripped[len("write "):].strip()
            if not rest.endswith("<<EOF"):
                raise ScenarioError(f"line {lineno}: write requires a <<EOF heredoc")
            path = _check_script_path(rest[: -len("<<EOF")].strip(), lineno)
            content, i = heredoc(i)
            rounds[-1].append(WriteStep(path, content))
            continue
        if stripped.startswith("signal "):
            rest = stripped[len("signal "):].strip()
            parts = rest.split(None, 1)
            try:
                kind = SignalKind(parts[0])
            except ValueError:
                raise ScenarioError(f"line {lineno}: unknown signal kind {parts[0]!r}") from None
            if len(parts) == 1:
                payload = ""
            elif parts[1].strip() == "<<EOF":
                payload, i = heredoc(i)
            else:
                try:
                    tokens = shlex.split(parts[1])
                except ValueError as exc:
                    raise ScenarioError(f"line {lineno}: bad signal payload: {exc}") from None
                if len(tokens) != 1:
                    raise ScenarioError(f"line {lineno}: signal payload must be one quoted string")
                payload = tokens[0]
            rounds[-1].append(SignalStep(kind, payload))
            continue
        raise ScenarioError(f"line {lineno}: unknown directive: {stripped!r}")

    if not terminated(rounds[-1]):
        raise ScenarioError("scenario ends without signal or complete")
    return ScenarioScript(rounds=tuple(tuple(r) for r in rounds))


def run_scripted(script: ScenarioScript, req: DispatchRequest) -> AgentOutcome:
    """Replay one scenario round: byte-identical for identical inputs."""
    signal: Signal | None = None
    for step in script.round_for_attempt(req.attempt):
        if isinstance(step, ReadStep):
            req.sandbox.request_read(step.path)
        elif isinstance(step, WriteStep):
            req.sandbox.write_file(step.path, step.content)
        elif isinstance(step, SignalStep):
            signal = Signal(kind=step.kind, raiser=req.role, payload=step.payload)
        else:  # CompleteStep
            break
    if signal is not None:
        if not signal_owner_check(signal):
            raise ProtocolError(
                f"scripted {req.role.value} raised {signal.kind.value}, which it does not own"
            )
        return AgentOutcome(
            status=OutcomeStatus.SIGNALED,
            signal=signal,
            access_log=req.sandbox.audit.events(),
        )
    produced = frozenset(
        kind
        for kind in contracted_artifacts(req.role, req.workflow)
        if req.sandbox.artifact_file(kind) is not None
    )
    return AgentOutcome(
        status=OutcomeStatus.COMPLETED,
        produced=produced,
        access_log=req.sandbox.audit.events(),
    )


class ScriptedBackend(AgentBackend):
    """Deterministic backend replaying a scenario file."""

    kind = BackendKind.SCRIPTED

    def __init__(self, script: ScenarioScript) -> None:
        self.script = script

    @classmethod
    def from_text(cls, text: str) -> "ScriptedBackend":
        return cls(parse_scenario(text))

    @classmethod
    def from_file(cls, path: Path) -> "ScriptedBackend":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def execute(self, req: DispatchRequest, log_path: Path | None = None) -> AgentOutcome:
        outcome = run_scripted(self.script, req)
        if log_path is not None:
            steps = self.script.round_for_attempt(req.attempt)
            transcript = "\n".join(type(s).__name__ for s in steps)
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(f"[attempt {req.attempt}] scripted replay\n{transcript}\n")
        return outcome


class SubprocessBackend(AgentBackend):
    """Runs an external program: briefing on stdin, sandbox as working
    directory. The program reports its outcome as a final stdout line
    ``OUTCOME: COMPLETED`` or ``OUTCOME: SIGNAL <KIND> <payload-file>``.
    """

    kind = BackendKind.SUBPROCESS

    def __init__(self, command: list[str]) -> None:
        if not command:
            raise MisconfigurationError("subprocess backend requires a command")
        self.command = list(command)

    def execute(self, req: DispatchRequest, log_path: Path | None = None) -> AgentOutcome:
        try:
            proc = subprocess.run(
                self.command,
                input=req.briefing,
                cwd=req.sandbox.path,
                capture_output=True,
                text=True,
                timeout=req.deadline,
                check=False,
            )
        except subprocess.TimeoutExpired as exc:
            raise DispatchTimeout(
                f"{req.role.value} backend exceeded {req.deadline}s deadline",
                captured=str(exc.output or ""),
            ) from exc
        captured = proc.stdout + proc.stderr
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(f"[attempt {req.attempt}] {shlex.join(self.command)}\n{captured}\n")
        if proc.returncode != 0:
            raise DispatchError(
                f"{req.role.value} backend exited with {proc.returncode}", captured=captured
            )
        outcome_line = next(
            (line for line in reversed(proc.stdout.splitlines()) if line.startswith("OUTCOME:")),
            None,
        )
        if outcome_line is None:
            raise DispatchError(
                f"{req.role.value} backend reported no OUTCOME line", captured=captured
            )
        fields = outcome_line[len("OUTCOME:"):].split()
        if fields == ["COMPLETED"]:
            produced = frozenset(
                kind
                for kind in contracted_artifacts(req.role, req.workflow)
                if req.sandbox.artifact_file(kind) is not None
            )
            return AgentOutcome(
                status=OutcomeStatus.COMPLETED,
                produced=produced,
                access_log=req.sandbox.audit.events(),
            )
        if len(fields) == 3 and fields[0] == "SIGNAL":
            try:
                sig_kind = SignalKind(fields[1])
            except ValueError:
                raise DispatchError(
                    f"unknown signal kind in outcome line: {fields[1]!r}", captured=captured
                ) from None
            payload_file = req.sandbox.resolve(fields[2])
            payload = payload_file.read_text(encoding="utf-8") if payload_file.exists() else ""
            return AgentOutcome(
                status=OutcomeStatus.SIGNALED,
                signal=Signal(kind=sig_kind, raiser=req.role, payload=payload),
                access_log=req.sandbox.audit.events(),
            )
        raise DispatchError(f"malformed outcome line: {outcome_line!r}", captured=captured)


@dataclass(frozen=True)
class RemoteReply:
    """What a remote-completion transport hands back: an artifact bundle
    plus either completion or a signal."""

    files: Mapping[str, str]
    signal: tuple[SignalKind, str] | None = None


class RemoteTransport(ABC):
    """Interface for remote-completion services; no wire format mandated."""

    @abstractmethod
    def exchange(self, role: AgentRole, briefing: str) -> RemoteReply: ...


class RemoteBackend(AgentBackend):
    kind = BackendKind.REMOTE

    def __init__(self, transport: RemoteTransport) -> None:
        self.transport = transport

    def execute(self, req: DispatchRequest, log_path: Path | None = None) -> AgentOutcome:
        reply = self.transport.exchange(req.role, req.briefing)
        for relpath, content in sorted(reply.files.items()):
            req.sandbox.write_file(relpath, content)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(f"[attempt {req.attempt}] remote exchange, {len(reply.files)} file(s)\n")
        if reply.signal is not None:
            kind, payload = reply.signal
            return AgentOutcome(
                status=OutcomeStatus.SIGNALED,
                signal=Signal(kind=kind, raiser=req.role, payload=payload),
                access_log=req.sandbox.audit.events(),
            )
        produced = frozenset(
            kind
            for kind in contracted_artifacts(req.role, req.workflow)
            if req.sandbox.artifact_file(kind) is not None
        )
        return AgentOutcome(
            status=OutcomeStatus.COMPLETED, produced=produced, access_log=req.sandbox.audit.events()
        )


def dispatch(req: DispatchRequest, backend: AgentBackend, log_path: Path | None = None) -> AgentOutcome:
    """Run one dispatch and enforce the outcome contract.

    A COMPLETED outcome missing any contracted artifact is a contract
    violation, not a success; a SIGNALED outcome with the wrong owner is a
    protocol violation. Backend crashes surface as dispatch failures with
    captured output.
    """
    try:
        outcome = backend.execute(req, log_path=log_path)
    except (DispatchError, ProtocolError, ContractError):
        raise
    except Exception as exc:  # backend crash
        raise DispatchError(f"{req.role.value} backend crashed: {exc}", captured=repr(exc)) from exc

    if outcome.status is OutcomeStatus.SIGNALED:
        assert outcome.signal is not None
        if not signal_owner_check(outcome.signal):
            raise ProtocolError(
                f"{outcome.signal.raiser.value} may not raise {outcome.signal.kind.value}"
            )
        return outcome

    owed = contracted_artifacts(req.role, req.workflow)
    missing = sorted(
        kind.filename for kind in owed if req.sandbox.artifact_file(kind) is None
    )
    if missing:
        raise ContractError(
            f"{req.role.value} reported COMPLETED without contracted artifact(s): {missing}"
        )
    return outcome


def load_backends(config_path: Path) -> dict[AgentRole, AgentBackend]:
    """Load a role→backend map from a JSON config file.

    Schema: ``{"backends": {"<role>": {"kind": "scripted", "script":
    "<path>"} | {"kind": "subprocess", "command": [...]}}}``. Relative
    script paths resolve against the config file's directory.
    """
    config_path = Path(config_path)
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MisconfigurationError(f"cannot load backend config {config_path}: {exc}") from exc
    entries = raw.get("backends")
    if not isinstance(entries, dict):
        raise MisconfigurationError(f"{config_path}: top-level 'backends' object required")
    backends: dict[AgentRole, AgentBackend] = {}
    for role_name, spec in entries.items():
        try:
            role = AgentRole(role_name)
        except ValueError:
            raise MisconfigurationError(f"{config_path}: unknown role {role_name!r}") from None
        kind = spec.get("kind")
        if kind == BackendKind.SCRIPTED.value:
            script_path = Path(spec["script"])
            if not script_path.is_absolute():
                script_path = config_path.parent / script_path
            backends[role] = ScriptedBackend.from_file(script_path)
        elif kind == BackendKind.SUBPROCESS.value:
            backends[role] = SubprocessBackend(list(spec["command"]))
        else:
            raise MisconfigurationError(
                f"{config_path}: backend kind {kind!r} for {role_name} is not configurable from file"
            )
    return backends
