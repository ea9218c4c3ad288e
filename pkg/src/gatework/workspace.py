"""Target-repository profiles and workspace-repository synchronization.

The workspace repository is user-owned and separate from any target
codebase: it archives run logs, keeps the CHANGELOG timeline, and carries
the active HANDOFF so a later session can resume with prior decisions,
known issues, and technical insights intact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from gatework.clock import Clock
from gatework.errors import MisconfigurationError, WorkspaceError
from gatework.gitlayer import GitBackend
from gatework.model import ArtifactKind
from gatework.rundir import RunDirectory


class Language(str, Enum):
    R = "R"
    PYTHON = "Python"
    TYPESCRIPT = "TypeScript"
    STATA = "Stata"
    GO = "Go"
    RUST = "Rust"
    C = "C"
    CPP = "C++"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class LanguageProfile:
    language: Language
    marker: str
    validation: tuple[str, ...]
    doc_convention: str


PROFILES: dict[Language, LanguageProfile] = {
    p.language: p
    for p in (
        LanguageProfile(Language.R, "DESCRIPTION", ("R CMD check --as-cran",), "roxygen2"),
        LanguageProfile(Language.PYTHON, "pyproject.toml", ("pytest", "tox"), "docstrings"),
        LanguageProfile(Language.TYPESCRIPT, "package.json", ("npm test", "eslint"), "TSDoc"),
        LanguageProfile(Language.STATA, ".ado files", ("<do-file execution>",), "help files"),
        LanguageProfile(Language.GO, "go.mod", ("go test ./...",), "godoc"),
        LanguageProfile(Language.RUST, "Cargo.toml", ("cargo test", "clippy"), "rustdoc"),
        LanguageProfile(Language.C, "Makefile + .c", ("<unit test runner>",), "header comments"),
        LanguageProfile(
            Language.CPP, "CMakeLists.txt + .cpp", ("<unit test runner>",), "header comments"
        ),
    )
}

UNKNOWN_PROFILE = LanguageProfile(Language.UNKNOWN, "none matched", (), "")

#: More specific manifests win in mixed repositories.
DETECTION_PRECEDENCE: tuple[Language, ...] = (
    Language.RUST,
    Language.GO,
    Language.PYTHON,
    Language.TYPESCRIPT,
    Language.R,
    Language.CPP,
    Language.C,
    Language.STATA,
)


def _has_source(repo: Path, suffix: str) -> bool:
    for path in repo.rglob(f"*{suffix}"):
        if any(part.startswith(".") for part in path.relative_to(repo).parts):
            continue
        if path.is_file():
            return True
    return False


def _marker_matches(repo: Path, language: Language) -> bool:
    if language is Language.RUST:
        return (repo / "Cargo.toml").is_file()
    if language is Language.GO:
        return (repo / "go.mod").is_file()
    if language is Language.PYTHON:
        return (repo / "pyproject.toml").is_file()
    if language is Language.TYPESCRIPT:
        return (repo / "package.json").is_file()
    if language is Language.R:
        return (repo / "DESCRIPTION").is_file()
    if language is Language.CPP:
        return (repo / "CMakeLists.txt").is_file() and _has_source(repo, ".cpp")
    if language is Language.C:
        return (repo / "Makefile").is_file() and _has_source(repo, ".c")
    if language is Language.STATA:
        return _has_source(repo, ".ado")
    return False


def detect_language(repo: Path) -> LanguageProfile:
    """Detect the target language from repository markers.

    Multiple matches resolve by the documented precedence; no match yields
    the UNKNOWN profile, which prompts a leader question to the user.
    """
    repo = Path(repo)
    if not repo.is_dir():
        raise FileNotFoundError(f"repository not readable: {repo}")
    for language in DETECTION_PRECEDENCE:
        if _marker_matches(repo, language):
            return PROFILES[language]
    return UNKNOWN_PROFILE


def validation_commands(profile: LanguageProfile) -> tuple[str, ...]:
    """The profile's validation command templates, verbatim, for tester
    briefings. Angle-bracket placeholders require a repo-config override."""
    if profile.language is Language.UNKNOWN:
        raise MisconfigurationError("no validation commands for an unknown language profile")
    return profile.validation


# --- workspace layout -------------------------------------------------------

_RUNS_FILE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}-[A-Za-z0-9._-]+\.md$")


@dataclass(frozen=True)
class WorkspaceLayout:
    """Per-target-repo corner of the workspace repository."""

    root: Path
    repo_name: str

    @property
    def repo_dir(self) -> Path:
        return self.root / self.repo_name

    @property
    def context_path(self) -> Path:
        return self.repo_dir / "context.md"

    @property
    def changelog_path(self) -> Path:
        return self.repo_dir / "CHANGELOG.md"

    @property
    def handoff_path(self) -> Path:
        return self.repo_dir / "HANDOFF.md"

    @property
    def docs_path(self) -> Path:
        return self.repo_dir / "docs.md"

    @property
    def ref_dir(self) -> Path:
        return self.repo_dir / "ref"

    @property
    def runs_dir(self) -> Path:
        return self.repo_dir / "runs"

    @property
    def logs_dir(self) -> Path:
        return self.repo_dir / "logs"

    @property
    def tmp_dir(self) -> Path:
        return self.repo_dir / "tmp"

    def ensure(self) -> "WorkspaceLayout":
        for directory in (self.ref_dir, self.runs_dir, self.logs_dir, self.tmp_dir):
            directory.mkdir(parents=True, exist_ok=True)
        return self

    def push_policy(self, relpath: str) -> str:
        """Classify a repo-dir-relative path: ``pushed`` or ``local``."""
        parts = Path(relpath).parts
        if not parts:
            return "local"
        head = parts[0]
        if head in ("logs", "tmp") or head == "context.md":
            return "local"
        if head == "runs":
            # completed run logs are pushed; active run directories are local
            return "pushed" if len(parts) == 2 and parts[1].endswith(".md") else "local"
        if head in ("CHANGELOG.md", "HANDOFF.md", "docs.md", "ref"):
            return "pushed"
        return "local"


def write_context(
    layout: WorkspaceLayout,
    *,
    target_repo: Path,
    git: GitBackend,
    profile: LanguageProfile,
) -> Path:
    """Regenerate context.md from repo metadata at run start."""
    layout.ensure()
    remote = git.remote_url(target_repo) or "(no remote)"
    branch = git.default_branch(target_repo) or "(unknown)"
    body = (
        f"# {layout.repo_name}\n\n"
        f"- remote: {remote}\n"
        f"- default branch: {branch}\n"
        f"- language profile: {profile.language.value}\n"
    )
    layout.context_path.write_text(body, encoding="utf-8")
    return layout.context_path


# --- handoff ----------------------------------------------------------------

_KNOWN_HANDOFF_SECTIONS = ("Prior Decisions", "Known Issues", "Technical Insights")
_SECTION_RES = {
    2: re.compile(r"^##\s+(.+?)\s*$"),
    3: re.compile(r"^#{2,3}\s+(.+?)\s*$"),
}


def split_sections(markdown: str, max_level: int = 2) -> tuple[dict[str, str], list[str]]:
    """Split a markdown document into sections by header lines.

    ``max_level=2`` splits on ``## `` only; ``max_level=3`` also treats
    ``### `` headers as sections (handoff bodies synced out of a log entry
    carry their subsections one level down). Content before the first
    section header, other than a top-level title, produces a warning.
    """
    section_re = _SECTION_RES[max_level]
    sections: dict[str, str] = {}
    warnings: list[str] = []
    current: str | None = None
    buffer: list[str] = []
    preamble: list[str] = []

    def flush() -> None:
        if current is not None:
            sections[current] = "\n".join(buffer).strip()

    for line in markdown.splitlines():
        match = section_re.match(line)
        if match:
            flush()
            current = match.group(1)
            buffer = []
        elif current is None:
            if line.strip() and not line.startswith("# "):
                preamble.append(line)
        else:
            buffer.append(line)
    flush()
    if preamble:
        warnings.append("content before the first section header was ignored")
    return sections, warnings


def extract_section(markdown: str, title: str) -> str | None:
    sections, _ = split_sections(markdown)
    for name, content in sections.items():
        if name.lower() == title.lower():
            return content
    return None


@dataclass(frozen=True)
class HandoffContext:
    prior_decisions: str = ""
    known_issues: str = ""
    technical_insights: str = ""
    other: dict[str, str] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    @property
    def empty(self) -> bool:
        return not (self.prior_decisions or self.known_issues or self.technical_insights or self.other)


def read_handoff(layout: WorkspaceLayout) -> HandoffContext:
    """Parse HANDOFF.md. An absent file yields an empty context; malformed
    content parses best-effort with warnings."""
    if not layout.handoff_path.exists():
        return HandoffContext()
    sections, warnings = split_sections(
        layout.handoff_path.read_text(encoding="utf-8"), max_level=3
    )
    known = {name.lower(): name for name in _KNOWN_HANDOFF_SECTIONS}
    fields: dict[str, str] = {}
    other: dict[str, str] = {}
    for name, content in sections.items():
        if name.lower() in known:
            fields[known[name.lower()]] = content
        else:
            other[name] = content
    return HandoffContext(
        prior_decisions=fields.get("Prior Decisions", ""),
        known_issues=fields.get("Known Issues", ""),
        technical_insights=fields.get("Technical Insights", ""),
        other=other,
        warnings=tuple(warnings),
    )


NO_HANDOFF_STANZA = "No handoff items."


def render_handoff(body: str) -> str:
    body = body.strip()
    if not body:
        body = NO_HANDOFF_STANZA
    return f"# Handoff\n\n{body}\n"


# --- sync -------------------------------------------------------------------


@dataclass(frozen=True)
class SyncReport:
    ok: bool
    changed: bool
    runs_file: Path | None = None
    rolled_back: bool = False
    detail: str = ""


def _slugify(text: str, fallback: str = "run") -> str:
    slug = re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower()
    return slug or fallback


def sync_workspace(
    layout: WorkspaceLayout,
    run_dir: RunDirectory,
    *,
    git: GitBackend,
    clock: Clock,
    slug: str,
) -> SyncReport:
    """Archive a completed run into the workspace and push.

    Copies log-entry.md to ``runs/<date>-<slug>.md``, prepends a dated
    CHANGELOG entry, replaces HANDOFF.md with the run's handoff notes, and
    copies docs.md verbatim. Local-only paths are untouched. A push
    failure rolls the workspace back to its pre-sync tree. Running twice
    for the same run changes nothing the second time.
    """
    if not run_dir.exists(ArtifactKind.LOG_ENTRY):
        raise WorkspaceError("sync requires log-entry.md in the run directory")
    if not run_dir.has_passing_verdict():
        raise WorkspaceError("sync requires a PASS-variant review verdict")
    layout.ensure()
    slug = _slugify(slug)
    date = clock.now().date().isoformat()
    log_entry = run_dir.read(ArtifactKind.LOG_ENTRY)

    runs_file = layout.runs_dir / f"{date}-{slug}.md"
    what_changed = extract_section(log_entry, "What Changed") or "(no what-changed section)"
    entry_header = f"## {date} — {slug}"
    changelog_old = (
        layout.changelog_path.read_text(encoding="utf-8")
        if layout.changelog_path.exists()
        else ""
    )
    if entry_header in changelog_old.splitlines():
        changelog_new = changelog_old
    else:
        entry = f"{entry_header}\n\n{what_changed.strip()}\n"
        changelog_new = entry + ("\n" + changelog_old if changelog_old.strip() else "")

    handoff_new = render_handoff(extract_section(log_entry, "Handoff Notes") or "")
    docs_new = (
        run_dir.read(ArtifactKind.DOCS) if run_dir.exists(ArtifactKind.DOCS) else None
    )

    targets: dict[Path, str] = {
        runs_file: log_entry,
        layout.changelog_path: changelog_new,
        layout.handoff_path: handoff_new,
    }
    if docs_new is not None:
        targets[layout.docs_path] = docs_new

    before: dict[Path, str | None] = {
        path: (path.read_text(encoding="utf-8") if path.exists() else None) for path in targets
    }
    changed_paths = [
        path for path, content in targets.items() if before[path] != content
    ]
    if not changed_paths:
        return SyncReport(ok=True, changed=False, runs_file=runs_file, detail="already in sync")

    for path in changed_paths:
        path.write_text(targets[path], encoding="utf-8")

    rel = [str(p.relative_to(layout.root)) for p in changed_paths]
    git.stage(layout.root, rel)
    git.commit(layout.root, f"sync run {date}-{slug}")
    push = git.push(layout.root)
    if not push.ok:
        for path in changed_paths:
            if before[path] is None:
                path.unlink(missing_ok=True)
            else:
                path.write_text(before[path], encoding="utf-8")
        return SyncReport(
            ok=False,
            changed=False,
            rolled_back=True,
            detail=f"push failed ({push.error_kind}); workspace restored",
        )
    return SyncReport(ok=True, changed=True, runs_file=runs_file, detail="synced and pushed")


# --- validation -------------------------------------------------------------


@dataclass(frozen=True)
class LintReport:
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_workspace(layout: WorkspaceLayout, git: GitBackend | None = None) -> LintReport:
    """Lint a workspace: layout conformance, runs/ naming, HANDOFF
    parseability, and push-policy classification."""
    violations: list[str] = []
    if not layout.repo_dir.is_dir():
        return LintReport((f"workspace repo directory missing: {layout.repo_dir}",))
    for directory in (layout.runs_dir, layout.logs_dir, layout.tmp_dir, layout.ref_dir):
        if not directory.is_dir():
            violations.append(f"required directory missing: {directory.relative_to(layout.root)}")
    if layout.runs_dir.is_dir():
        for entry in sorted(layout.runs_dir.iterdir()):
            if entry.is_file() and not _RUNS_FILE_RE.match(entry.name):
                violations.append(
                    f"runs/ file not named <date>-<slug>.md: runs/{entry.name}"
                )
    if layout.handoff_path.exists():
        context = read_handoff(layout)
        for warning in context.warnings:
            violations.append(f"HANDOFF.md: {warning}")
    if git is not None and git.is_repo(layout.root):
        for tracked in git.ls_tracked(layout.root):
            tracked_path = Path(tracked)
            try:
                rel = tracked_path.relative_to(layout.repo_name)
            except ValueError:
                continue
            if layout.push_policy(str(rel)) == "local":
                violations.append(f"local-only path tracked for push: {tracked}")
    return LintReport(tuple(violations))
