"""Abstracted git layer: real subprocess git in production, an in-memory
fake for tests. Every mutation is recorded so the shipper report can list
the actions taken.
"""

from __future__ import annotations

import shutil
import subprocess
import threading
from abc import ABC, abstractmethod
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path


class GitAction(str, Enum):
    WORKTREE_ADD = "WORKTREE_ADD"
    WORKTREE_REMOVE = "WORKTREE_REMOVE"
    STAGE = "STAGE"
    COMMIT = "COMMIT"
    PUSH = "PUSH"


@dataclass(frozen=True)
class GitResult:
    ok: bool
    action: GitAction
    detail: str = ""
    error_kind: str | None = None  # conflict | auth | detached | missing_credentials | environment
    output: str = ""


class GitBackend(ABC):
    """Operations the engine needs from git."""

    @abstractmethod
    def is_repo(self, repo: Path) -> bool: ...

    @abstractmethod
    def worktree_add(self, repo: Path, path: Path, branch: str) -> GitResult: ...

    @abstractmethod
    def worktree_remove(self, repo: Path, path: Path) -> GitResult: ...

    @abstractmethod
    def stage(self, repo: Path, paths: list[str]) -> GitResult: ...

    @abstractmethod
    def commit(self, repo: Path, message: str) -> GitResult: ...

    @abstractmethod
    def push(self, repo: Path) -> GitResult: ...

    @abstractmethod
    def ls_tracked(self, repo: Path) -> list[str]: ...

    @abstractmethod
    def remote_url(self, repo: Path) -> str | None: ...

    @abstractmethod
    def default_branch(self, repo: Path) -> str | None: ...


class SubprocessGit(GitBackend):
    """Real git via the system binary. Mutations on one repository are
    serialized through a per-repo lock; concurrent dispatches may still
    target different repositories freely."""

    def __init__(self) -> None:
        self._locks: defaultdict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    def _lock(self, repo: Path) -> threading.Lock:
        with self._locks_guard:
            return self._locks[str(Path(repo).resolve())]

    def _run(self, repo: Path, *args: str) -> subprocess.CompletedProcess:
        with self._lock(repo):
            return subprocess.run(
                ["git", "-C", str(repo), *args],
                capture_output=True,
                text=True,
                check=False,
            )

    @staticmethod
    def _classify(stderr: str) -> str:
        lowered = stderr.lower()
        if "conflict" in lowered:
            return "conflict"
        if "authentication" in lowered or "could not read username" in lowered or "permission denied" in lowered:
            return "auth"
        if "detached" in lowered:
            return "detached"
        return "environment"

    def _result(self, action: GitAction, proc: subprocess.CompletedProcess, detail: str) -> GitResult:
        if proc.returncode == 0:
            return GitResult(ok=True, action=action, detail=detail, output=proc.stdout.strip())
        return GitResult(
            ok=False,
            action=action,
            detail=detail,
            error_kind=self._classify(proc.stderr),
            output=(proc.stdout + proc.stderr).strip(),
        )

    def is_repo(self, repo: Path) -> bool:
        proc = self._run(repo, "rev-parse", "--git-dir")
        return proc.returncode == 0

    def worktree_add(self, repo: Path, path: Path, branch: str) -> GitResult:
        # git -C <repo> resolves relative worktree paths against the repo,
        # not our working directory, so pass an absolute path
        path = Path(path).resolve()
        branches = self._run(repo, "branch", "--list", branch).stdout.strip()
        if branches:
            proc = self._run(repo, "worktree", "add", str(path), branch)
        else:
            proc = self._run(repo, "worktree", "add", "-b", branch, str(path))
        return self._result(GitAction.WORKTREE_ADD, proc, f"{path} on {branch}")

    def worktree_remove(self, repo: Path, path: Path) -> GitResult:
        path = Path(path).resolve()
        if not path.exists():
            return GitResult(ok=True, action=GitAction.WORKTREE_REMOVE, detail=f"{path} (absent)")
        proc = self._run(repo, "worktree", "remove", "--force", str(path))
        return self._result(GitAction.WORKTREE_REMOVE, proc, str(path))

    def stage(self, repo: Path, paths: list[str]) -> GitResult:
        proc = self._run(repo, "add", "--", *paths) if paths else self._run(repo, "add", "-A")
        return self._result(GitAction.STAGE, proc, ", ".join(paths) or "all")

    def commit(self, repo: Path, message: str) -> GitResult:
        head = self._run(repo, "symbolic-ref", "-q", "HEAD")
        if head.returncode != 0:
            return GitResult(
                ok=False,
                action=GitAction.COMMIT,
                detail=message,
                error_kind="detached",
                output="HEAD is detached",
            )
        proc = self._run(repo, "commit", "-m", message)
        if proc.returncode != 0 and "nothing to commit" in (proc.stdout + proc.stderr):
            return GitResult(ok=True, action=GitAction.COMMIT, detail=f"{message} (nothing to commit)")
        return self._result(GitAction.COMMIT, proc, message)

    def push(self, repo: Path) -> GitResult:
        proc = self._run(repo, "push")
        return self._result(GitAction.PUSH, proc, "push")

    def ls_tracked(self, repo: Path) -> list[str]:
        proc = self._run(repo, "ls-files", "--cached")
        if proc.returncode != 0:
            return []
        return [line for line in proc.stdout.splitlines() if line]

    def remote_url(self, repo: Path) -> str | None:
        proc = self._run(repo, "remote", "get-url", "origin")
        return proc.stdout.strip() if proc.returncode == 0 else None

    def default_branch(self, repo: Path) -> str | None:
        proc = self._run(repo, "symbolic-ref", "--short", "HEAD")
        return proc.stdout.strip() if proc.returncode == 0 else None


@dataclass
class _FakeRepo:
    branches: set[str] = field(default_factory=lambda: {"main"})
    worktrees: dict[str, str] = field(default_factory=dict)  # path -> branch
    staged: list[str] = field(default_factory=list)
    commits: list[str] = field(default_factory=list)
    tracked: set[str] = field(default_factory=set)
    pushes: int = 0


class FakeGit(GitBackend):
    """In-memory git double. Worktrees are plain directory copies of the
    repo tree; pushes can be forced to fail for rollback tests."""

    def __init__(self) -> None:
        self.repos: dict[str, _FakeRepo] = {}
        self.fail_push: bool = False
        self.fail_push_kind: str = "auth"
        self.actions: list[GitResult] = []
        self._lock = threading.Lock()

    def _repo(self, repo: Path) -> _FakeRepo:
        with self._lock:
            return self.repos.setdefault(str(Path(repo).resolve()), _FakeRepo())

    def _record(self, result: GitResult) -> GitResult:
        with self._lock:
            self.actions.append(result)
        return result

    def is_repo(self, repo: Path) -> bool:
        return Path(repo).is_dir()

    def worktree_add(self, repo: Path, path: Path, branch: str) -> GitResult:
        state = self._repo(repo)
        path = Path(path)
        if path.exists():
            return self._record(
                GitResult(
                    ok=False,
                    action=GitAction.WORKTREE_ADD,
                    detail=f"{path} on {branch}",
                    error_kind="environment",
                    output="worktree path already exists",
                )
            )
        shutil.copytree(repo, path, ignore=shutil.ignore_patterns(".git"))
        state.branches.add(branch)
        state.worktrees[str(path)] = branch
        return self._record(
            GitResult(ok=True, action=GitAction.WORKTREE_ADD, detail=f"{path} on {branch}")
        )

    def worktree_remove(self, repo: Path, path: Path) -> GitResult:
        state = self._repo(repo)
        path = Path(path)
        state.worktrees.pop(str(path), None)
        if path.exists():
            shutil.rmtree(path)
        return self._record(GitResult(ok=True, action=GitAction.WORKTREE_REMOVE, detail=str(path)))

    def stage(self, repo: Path, paths: list[str]) -> GitResult:
        state = self._repo(repo)
        state.staged.extend(paths)
        state.tracked.update(paths)
        return self._record(GitResult(ok=True, action=GitAction.STAGE, detail=", ".join(paths)))

    def commit(self, repo: Path, message: str) -> GitResult:
        state = self._repo(repo)
        state.commits.append(message)
        state.staged.clear()
        return self._record(GitResult(ok=True, action=GitAction.COMMIT, detail=message))

    def push(self, repo: Path) -> GitResult:
        if self.fail_push:
            return self._record(
                GitResult(
                    ok=False,
                    action=GitAction.PUSH,
                    detail="push",
                    error_kind=self.fail_push_kind,
                    output="simulated push failure",
                )
            )
        state = self._repo(repo)
        state.pushes += 1
        return self._record(GitResult(ok=True, action=GitAction.PUSH, detail="push"))

    def ls_tracked(self, repo: Path) -> list[str]:
        return sorted(self._repo(repo).tracked)

    def remote_url(self, repo: Path) -> str | None:
        return f"fake://{Path(repo).name}"

    def default_branch(self, repo: Path) -> str | None:
        return "main"


def git_ops(
    repo: Path,
    action: GitAction,
    params: dict,
    *,
    git: GitBackend,
    credentials_present: bool = True,
) -> GitResult:
    """Execute one git action through the backend.

    PUSH is refused outright when credentials have not been verified
    (credentials.md absent from the run directory).
    """
    if action is GitAction.PUSH and not credentials_present:
        return GitResult(
            ok=False,
            action=action,
            detail="push",
            error_kind="missing_credentials",
            output="credentials.md not present; push refused",
        )
    if action is GitAction.WORKTREE_ADD:
        return git.worktree_add(repo, Path(params["path"]), params["branch"])
    if action is GitAction.WORKTREE_REMOVE:
        return git.worktree_remove(repo, Path(params["path"]))
    if action is GitAction.STAGE:
        return git.stage(repo, list(params.get("paths", [])))
    if action is GitAction.COMMIT:
        return git.commit(repo, params["message"])
    if action is GitAction.PUSH:
        return git.push(repo)
    raise ValueError(f"unknown git action: {action}")
