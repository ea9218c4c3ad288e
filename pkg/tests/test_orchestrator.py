from __future__ import annotations

import random
import time
from pathlib import Path

import pytest

from conftest import AUDIT_BODY, run_scripted_workflow, scripted_backends
from gatework.clock import TickClock, iso8601
from gatework.errors import HoldUnanswered, MisconfigurationError, ProtocolError
from gatework.gitlayer import FakeGit, GitAction
from gatework.model import (
    AgentRole,
    ArtifactKind,
    IssueDescriptor,
    Signal,
    SignalKind,
    WorkflowState,
    workflow_by_id,
)
from gatework.orchestrator import (
    ChannelMode,
    UserChannel,
    classify_directive,
    compile_plan,
    mechanical_review,
    route_signal,
    run_issue_patrol,
    run_scheduled_loop,
    select_workflow,
    ship,
)
from gatework.rundir import RunDirectory
from gatework.runtime import AgentBackend, BackendKind, ScriptedBackend
from gatework.statemachine import reconstruct_run_state

K = ArtifactKind
R = AgentRole

LEADER_ARTIFACTS = {"request.md", "impact.md", "status.md", "credentials.md"}


# --- workflow selection -------------------------------------------------------


@pytest.mark.parametrize(
    "directive,expected_id",
    [
        ("Fix the failing tests in the panel estimator", 2),
        ("Update the README and vignette", 3),
        ("Run a Monte Carlo study comparing the three estimators", 10),
        ("Port this R library to a Python package", 2),
        ("Read the attached article and add the network plot feature", 2),
        ("Fix issue #42 in the plotting code", 5),
        ("Patrol the open issues and fix what you find", 4),
        ("Run the tests and report", 6),
        ("Code review of the pull request please", 7),
        ("Nightly validation sweep", 8),
        ("Fix the typo in the docs header", 9),
    ],
)
def test_select_workflow_directives(directive, expected_id):
    assert select_workflow(directive).id == expected_id


def test_select_workflow_combined_code_and_simulation_is_full_workflow():
    directive = (
        "Build an R package implementing the three estimation methods, then run a "
        "Monte Carlo simulation comparing them. Ship it."
    )
    assert select_workflow(directive).id == 1


def test_select_workflow_override_wins():
    assert select_workflow("Fix the failing tests", override=9).id == 9


def test_select_workflow_ambiguous_asks_with_top_two_candidates():
    channel = UserChannel(mode=ChannelMode.SCRIPTED_ANSWERS, answers=["3"], output_fn=lambda _: None)
    wf = select_workflow("hmm do something sensible", channel=channel)
    assert wf.id == 3
    question = channel.transcript[0][1]
    assert "ambiguous" in question.lower()


def test_select_workflow_ambiguous_unanswered_escalates():
    with pytest.raises(HoldUnanswered):
        select_workflow("hmm do something sensible")


def test_select_workflow_requires_directive_or_override():
    with pytest.raises(MisconfigurationError):
        select_workflow("   ")


def test_classifier_scores_are_ranked():
    ranked = classify_directive("fix the broken simulation study")
    assert ranked[0][0] == 1  # code + simulation markers combine to the full workflow


# --- plan compilation -----------------------------------------------------------


def test_compile_plan_stage_artifacts():
    plan = compile_plan(workflow_by_id(1))
    assert [stage.roles for stage in plan.stages] == [
        (R.PLANNER,),
        (R.BUILDER, R.TESTER, R.SIMULATOR),
        (R.SCRIBER,),
        (R.REVIEWER,),
    ]
    assert set(plan.stages[0].required_after) == {K.COMPREHENSION, K.SPEC, K.TEST_SPEC, K.SIM_SPEC}
    assert set(plan.stages[1].required_after) == {K.IMPLEMENTATION, K.AUDIT, K.SIMULATION}
    assert plan.stage_index_of(R.SCRIBER) == 2


# --- signal routing --------------------------------------------------------------


def test_route_hold_forwards_question_and_redispatches_raiser():
    plan = compile_plan(workflow_by_id(2))
    action = route_signal(Signal(SignalKind.HOLD, R.BUILDER, "proposal scale?"), plan)
    assert action.forward_question == "proposal scale?"
    assert action.phases == ((R.BUILDER,),)


def test_route_block_defaults_to_builder_then_tester():
    plan = compile_plan(workflow_by_id(2))
    action = route_signal(Signal(SignalKind.BLOCK, R.TESTER, "failure details"), plan)
    assert action.phases == ((R.BUILDER,), (R.TESTER,))


def test_route_block_simulation_pipeline_targets_simulator():
    plan = compile_plan(workflow_by_id(1))
    action = route_signal(
        Signal(SignalKind.BLOCK, R.TESTER, "pipeline: simulation\nDGP looks degenerate"), plan
    )
    assert action.phases == ((R.SIMULATOR,), (R.TESTER,))


def test_route_stop_rewinds_to_target_stage():
    plan = compile_plan(workflow_by_id(2))
    action = route_signal(
        Signal(SignalKind.STOP, R.REVIEWER, "target: scriber\nmissing changelog"), plan
    )
    assert action.rewind_to_stage == plan.stage_index_of(R.SCRIBER)


def test_route_stop_without_target_is_protocol_violation():
    plan = compile_plan(workflow_by_id(2))
    with pytest.raises(ProtocolError):
        route_signal(Signal(SignalKind.STOP, R.REVIEWER, "no routing line"), plan)


# --- full scripted runs ------------------------------------------------------------


def test_workflow_1_full_chain(tmp_path):
    report, run_dir, _ = run_scripted_workflow(tmp_path, 1)
    assert report.gate_violation is None
    assert report.escalation is None
    assert report.final_state == "REVIEW_PASSED"
    assert report.visited_states == [
        "CREDENTIALS_VERIFIED",
        "NEW",
        "PLANNED",
        "SPEC_READY",
        "PIPELINES_COMPLETE",
        "DOCUMENTED",
        "REVIEW_PASSED",
    ]
    assert len(report.artifacts) == 15
    assert "shipper.md" not in report.artifacts
    assert report.mechanical["passed"] is True
    assert report.exit_code == 0


def test_workflow_9_minimal_run(tmp_path):
    report, run_dir, _ = run_scripted_workflow(tmp_path, 9)
    assert report.final_state == "PIPELINES_COMPLETE"
    produced = set(report.artifacts) - LEADER_ARTIFACTS
    assert produced == {"implementation.md", "audit.md"}
    assert report.dispatch_counts == {"builder": 1, "tester": 1}


def test_workflow_2_block_loop_converges(tmp_path):
    report, run_dir, _ = run_scripted_workflow(tmp_path, 2, tester_blocks=2)
    assert report.retries["BLOCK"] == 2
    assert report.dispatch_counts["builder"] == 3
    assert report.dispatch_counts["tester"] == 3
    assert report.final_state == "READY_TO_SHIP"
    assert report.pending is not None  # awaiting explicit authorization
    assert report.exit_code == 0


def test_workflow_2_block_loop_replay_is_identical(tmp_path):
    first, _, _ = run_scripted_workflow(tmp_path / "a", 2, tester_blocks=2)
    second, _, _ = run_scripted_workflow(tmp_path / "b", 2, tester_blocks=2)
    assert first.to_dict() == second.to_dict()


def test_workflow_2_ships_with_authorization(tmp_path):
    git = FakeGit()
    report, run_dir, _ = run_scripted_workflow(
        tmp_path, 2, git=git, authorization="explicit-user-token"
    )
    assert report.final_state == "DONE"
    assert "shipper.md" in report.artifacts
    assert report.ship["shipped"] is True
    shipper_text = run_dir.read(K.SHIPPER)
    assert "Git actions taken" in shipper_text
    pushes = [a for a in git.actions if a.action is GitAction.PUSH]
    assert len(pushes) == 1 and pushes[0].ok


def test_hold_flow_answer_appended_and_redispatches(tmp_path):
    report, _, orting = run_scripted_workflow(
        tmp_path, 9, builder_holds=1, answers=("use the default scale",)
    )
    assert report.retries["HOLD"] == 1
    assert report.dispatch_counts["builder"] == 2
    assert report.final_state == "PIPELINES_COMPLETE"
    assert report.signals[0]["kind"] == "HOLD"


def test_hold_unanswered_escalates(tmp_path):
    report, run_dir, _ = run_scripted_workflow(tmp_path, 9, builder_holds=1, answers=())
    assert report.escalation is not None
    assert report.pending is not None
    assert (run_dir.path / "pending-hold.md").exists()
    assert report.exit_code == 3


def test_hold_cap_escalates_on_fourth(tmp_path):
    report, _, _ = run_scripted_workflow(
        tmp_path, 9, builder_holds=4, answers=("a", "b", "c", "d")
    )
    assert report.retries["HOLD"] == 3
    assert report.escalation is not None
    assert report.exit_code == 3


def test_block_cap_escalates_on_fourth(tmp_path):
    report, _, _ = run_scripted_workflow(tmp_path, 2, tester_blocks=4)
    assert report.retries["BLOCK"] == 3
    assert report.escalation is not None
    assert report.dispatch_counts["builder"] == 4
    assert report.final_state == "SPEC_READY"
    assert report.exit_code == 3


def test_stop_flow_redispatches_target_and_downstream(tmp_path):
    report, _, _ = run_scripted_workflow(tmp_path, 2, reviewer_stops=1, stop_target="scriber")
    assert report.retries["STOP"] == 1
    assert report.dispatch_counts["scriber"] == 2
    assert report.dispatch_counts["reviewer"] == 2
    assert report.final_state == "READY_TO_SHIP"


def test_stop_routed_to_builder_reruns_pipelines(tmp_path):
    report, _, _ = run_scripted_workflow(tmp_path, 2, reviewer_stops=1, stop_target="builder")
    assert report.dispatch_counts["builder"] == 2
    assert report.dispatch_counts["tester"] == 2
    assert report.dispatch_counts["scriber"] == 2
    assert report.dispatch_counts["reviewer"] == 2
    assert report.final_state == "READY_TO_SHIP"


def test_block_routed_to_simulator_redispatches_simulation_pipeline(tmp_path):
    workflow = workflow_by_id(1)
    backends = scripted_backends(workflow)
    backends[R.TESTER] = ScriptedBackend.from_text(
        "signal BLOCK <<EOF\npipeline: simulation\nDGP degenerate on balanced panel\nEOF\n"
        "---\nread test-spec.md\nwrite audit.md <<EOF\n" + AUDIT_BODY + "EOF\ncomplete\n"
    )
    report, _, _ = run_scripted_workflow(tmp_path, 1, backends=backends)
    assert report.dispatch_counts["simulator"] == 2
    assert report.dispatch_counts["builder"] == 1  # code pipeline untouched
    assert report.dispatch_counts["tester"] == 2
    assert report.final_state == "REVIEW_PASSED"


def test_resume_after_mid_stage_hold_skips_completed_peers(tmp_path):
    first, run_dir, _ = run_scripted_workflow(tmp_path, 2, builder_holds=1, answers=())
    assert first.escalation is not None
    assert first.dispatch_counts == {"builder": 1, "planner": 1, "tester": 1}

    workflow = workflow_by_id(2)
    channel = UserChannel(
        mode=ChannelMode.SCRIPTED_ANSWERS, answers=("use defaults",), output_fn=lambda _: None
    )
    from gatework.orchestrator import Orchestrator

    resumed = Orchestrator(
        run_dir=run_dir,
        request_id=run_dir.path.name,
        workflow=workflow,
        backends=scripted_backends(workflow, builder_holds=1),
        channel=channel,
        target_repo=tmp_path / "repo",
        git=FakeGit(),
        clock=TickClock(),
        directive="scripted protocol exercise",
    ).run(resume=True)
    assert resumed.final_state == "READY_TO_SHIP"
    # planner stage skipped entirely; tester's completed work not re-run
    assert resumed.dispatch_counts == {"builder": 2, "reviewer": 1, "scriber": 1}
    assert resumed.retries["HOLD"] == 1  # carried over from the first session


def test_stop_cap_escalates_on_fourth(tmp_path):
    report, _, _ = run_scripted_workflow(tmp_path, 3, reviewer_stops=4, stop_target="scriber")
    assert report.retries["STOP"] == 3
    assert report.escalation is not None
    assert report.dispatch_counts["reviewer"] == 4
    assert report.dispatch_counts["scriber"] == 4  # initial + three re-runs
    assert report.exit_code == 3


def test_missing_backend_is_an_environment_failure(tmp_path):
    workflow = workflow_by_id(9)
    backends = scripted_backends(workflow)
    del backends[R.TESTER]
    report, _, _ = run_scripted_workflow(tmp_path, 9, backends=backends)
    assert report.exit_code == 4
    assert "tester" in str(report.diagnostics)


def test_reviewer_stop_verdict_without_signal_is_gate_violation(tmp_path):
    report, _, _ = run_scripted_workflow(tmp_path, 3, reviewer_verdict="STOP")
    assert report.final_state == "DOCUMENTED"
    assert report.gate_violation is not None
    assert report.exit_code == 2


# --- mechanical review --------------------------------------------------------------


def test_mechanical_review_clean_run_passes(tmp_path):
    report, run_dir, orch = run_scripted_workflow(tmp_path, 1)
    statuses = {c["name"]: c["status"] for c in report.mechanical["checks"]}
    assert statuses["artifact-presence"] == "pass"
    assert statuses["pipeline-isolation"] == "pass"
    assert statuses["tolerance-integrity"] == "pass"
    assert statuses["evidence-completeness"] == "pass"
    assert statuses["spec-cross-comparison"] == "attested"
    assert run_dir.access_log_path.exists()


def test_mechanical_review_flags_tolerance_inflation(tmp_path):
    inflated = AUDIT_BODY.replace("1e-6", "1e-4")
    report, _, _ = run_scripted_workflow(tmp_path, 2, audit_body=inflated)
    statuses = {c["name"]: c["status"] for c in report.mechanical["checks"]}
    assert statuses["tolerance-integrity"] == "fail"
    assert report.gate_violation is not None
    assert report.final_state == "DOCUMENTED"
    assert report.exit_code == 2


def test_mechanical_review_tighter_than_spec_is_not_inflation(tmp_path):
    tighter = AUDIT_BODY.replace("| reference comparison | 1e-6 |", "| reference comparison | 1e-8 |")
    report, _, _ = run_scripted_workflow(tmp_path, 2, audit_body=tighter)
    statuses = {c["name"]: c["status"] for c in report.mechanical["checks"]}
    assert statuses["tolerance-integrity"] == "pass"


def test_builder_reading_test_spec_fails_isolation_end_to_end(tmp_path):
    report, run_dir, _ = run_scripted_workflow(
        tmp_path, 2, builder_reads=("test-spec.md",)
    )
    statuses = {c["name"]: c["status"] for c in report.mechanical["checks"]}
    assert statuses["pipeline-isolation"] == "fail"
    assert report.gate_violation is not None
    assert "mechanical review failed" in report.gate_violation
    assert report.exit_code == 2
    # the denied attempt is visible in the merged run-level access log
    assert "builder\ttest-spec.md\tDENY" in run_dir.access_log_path.read_text(encoding="utf-8")


def test_mechanical_review_direct_missing_artifact_fails(tmp_path):
    run_dir = RunDirectory(tmp_path / "run").create()
    for kind in (K.REQUEST, K.IMPACT, K.CREDENTIALS, K.COMPREHENSION):
        run_dir.write(kind, "x\n")
    plan = compile_plan(workflow_by_id(3))
    logs = {role: () for role in workflow_by_id(3).roles()}
    report = mechanical_review(run_dir, logs, plan)
    assert not report.passed
    failed = {c.name for c in report.failures()}
    assert "artifact-presence" in failed


# --- leader purity and stage atomicity ------------------------------------------------


class _BriefingCapture(AgentBackend):
    kind = BackendKind.SCRIPTED

    def __init__(self, inner: AgentBackend, seen: dict):
        self.inner = inner
        self.seen = seen

    def execute(self, req, log_path=None):
        self.seen.setdefault(req.role, []).append(req.briefing)
        return self.inner.execute(req, log_path=log_path)


def test_briefings_carry_profile_notes_and_granted_paths(tmp_path):
    seen: dict = {}
    workflow = workflow_by_id(2)
    backends = {
        role: _BriefingCapture(backend, seen)
        for role, backend in scripted_backends(workflow).items()
    }
    report, run_dir, _ = run_scripted_workflow(tmp_path, 2, backends=backends)
    assert report.final_state == "READY_TO_SHIP"
    tester_briefing = seen[R.TESTER][0]
    assert "validation commands: pytest; tox" in tester_briefing
    assert "test-spec.md" in tester_briefing  # granted artifact named
    assert "spec.md," not in tester_briefing.split("granted artifacts: ")[1].splitlines()[0]
    builder_briefing = seen[R.BUILDER][0]
    assert "documentation convention: docstrings" in builder_briefing
    # captured agent logs land under <run>/logs/<role>.log
    for role in workflow.roles():
        if role is not R.SHIPPER:  # shipper awaits authorization in this run
            assert (run_dir.logs_dir / f"{role.value}.log").exists()


def test_leader_never_mutates_git_outside_ship(tmp_path):
    git = FakeGit()
    report, _, _ = run_scripted_workflow(tmp_path, 1, git=git)
    assert report.final_state == "REVIEW_PASSED"
    mutating = [a for a in git.actions if a.action in (GitAction.STAGE, GitAction.COMMIT, GitAction.PUSH)]
    assert mutating == []


def test_leader_leaves_target_repo_tree_untouched(tmp_path):
    target = tmp_path / "repo"
    target.mkdir()
    (target / "pyproject.toml").write_text("[project]\n", encoding="utf-8")
    (target / "lib.py").write_text("x = 1\n", encoding="utf-8")

    def fingerprint() -> dict:
        return {
            str(p.relative_to(target)): p.read_bytes()
            for p in sorted(target.rglob("*"))
            if p.is_file()
        }

    before = fingerprint()
    run_scripted_workflow(tmp_path, 1, target_repo=target)
    assert fingerprint() == before


class _DelayedBackend(AgentBackend):
    kind = BackendKind.SCRIPTED

    def __init__(self, inner: AgentBackend, rng: random.Random, spans: dict):
        self.inner = inner
        self.rng = rng
        self.spans = spans

    def execute(self, req, log_path=None):
        start = time.monotonic()
        time.sleep(self.rng.uniform(0.0, 0.03))
        outcome = self.inner.execute(req, log_path=log_path)
        self.spans.setdefault(req.role, []).append((start, time.monotonic()))
        return outcome


def test_stage_atomicity_under_randomized_delays(tmp_path):
    rng = random.Random(7)
    for trial in range(3):
        spans: dict = {}
        workflow = workflow_by_id(1)
        backends = {
            role: _DelayedBackend(backend, rng, spans)
            for role, backend in scripted_backends(workflow).items()
        }
        report, _, _ = run_scripted_workflow(tmp_path / f"t{trial}", 1, backends=backends)
        assert report.final_state == "REVIEW_PASSED"
        pipeline_end = max(spans[r][0][1] for r in (R.BUILDER, R.TESTER, R.SIMULATOR))
        scriber_start = spans[R.SCRIBER][0][0]
        assert scriber_start >= pipeline_end  # no downstream stage starts early


# --- ship gate --------------------------------------------------------------------


def _ready_to_ship_run(tmp_path: Path, verdict: str | None) -> RunDirectory:
    run_dir = RunDirectory(tmp_path / f"run-{verdict or 'absent'}").create()
    for kind in (K.REQUEST, K.IMPACT, K.CREDENTIALS):
        run_dir.write(kind, "x\n")
    if verdict is not None:
        run_dir.write(K.REVIEW, f"verdict: {verdict}\nnotes\n")
    ts = iso8601(TickClock().now())
    run_dir.write(K.STATUS, f"{ts}\tREVIEW_PASSED\t->READY_TO_SHIP\tgate satisfied\n")
    return run_dir


@pytest.mark.parametrize("verdict", ["PASS", "PASS_WITH_NOTE", "STOP", None])
@pytest.mark.parametrize("authorized", [True, False])
def test_ship_gate_truth_table(tmp_path, verdict, authorized):
    run_dir = _ready_to_ship_run(tmp_path, verdict)
    git = FakeGit()
    report = ship(
        run_dir,
        "user-token" if authorized else None,
        target_repo=tmp_path,
        workflow=workflow_by_id(2),
        backends={},
        git=git,
        clock=TickClock(),
    )
    should_ship = authorized and verdict in ("PASS", "PASS_WITH_NOTE")
    assert report.shipped is should_ship
    pushes = [a for a in git.actions if a.action is GitAction.PUSH]
    assert bool(pushes) is should_ship  # no push unless the gate cleared
    if not should_ship:
        assert report.refusal


def test_ship_refused_when_not_ready(tmp_path):
    run_dir = RunDirectory(tmp_path / "run").create()
    run_dir.write(K.REVIEW, "verdict: PASS\n")
    run_dir.write(K.STATUS, "")
    report = ship(
        run_dir, "token",
        target_repo=tmp_path, workflow=workflow_by_id(2), backends={},
        git=FakeGit(), clock=TickClock(),
    )
    assert not report.shipped
    assert "READY_TO_SHIP" in report.refusal


def test_ship_push_failure_is_partial(tmp_path):
    run_dir = _ready_to_ship_run(tmp_path, "PASS")
    git = FakeGit()
    git.fail_push = True
    report = ship(
        run_dir, "token",
        target_repo=tmp_path, workflow=workflow_by_id(2), backends={},
        git=git, clock=TickClock(),
    )
    assert not report.shipped
    assert report.partial
    state = reconstruct_run_state(run_dir, workflow_by_id(2))
    assert state.current is WorkflowState.READY_TO_SHIP  # not advanced to DONE


def test_ship_without_credentials_refuses_push(tmp_path):
    run_dir = _ready_to_ship_run(tmp_path, "PASS")
    run_dir.artifact_path(K.CREDENTIALS).unlink()
    report = ship(
        run_dir, "token",
        target_repo=tmp_path, workflow=workflow_by_id(2), backends={},
        git=FakeGit(), clock=TickClock(),
    )
    assert not report.shipped
    assert report.partial
    push_actions = [a for a in report.git_actions if a.action is GitAction.PUSH]
    assert push_actions[0].error_kind == "missing_credentials"


# --- replay equivalence ----------------------------------------------------------------


def test_scripted_run_reports_are_identical_across_repetitions(tmp_path):
    first, run_a, _ = run_scripted_workflow(tmp_path / "a", 1)
    second, run_b, _ = run_scripted_workflow(tmp_path / "b", 1)
    assert first.to_dict() == second.to_dict()
    assert run_a.report_json_path.read_text(encoding="utf-8") == run_b.report_json_path.read_text(
        encoding="utf-8"
    )


# --- unknown language profile -----------------------------------------------------------


def test_unknown_repo_language_holds_then_uses_answer(tmp_path):
    bare = tmp_path / "bare-repo"
    bare.mkdir()
    report, _, _ = run_scripted_workflow(tmp_path, 6, target_repo=bare, answers=("Python",))
    assert report.final_state == "PIPELINES_COMPLETE"


def test_unknown_repo_language_unanswered_escalates(tmp_path):
    bare = tmp_path / "bare-repo"
    bare.mkdir()
    report, _, _ = run_scripted_workflow(tmp_path, 6, target_repo=bare, answers=())
    assert report.escalation is not None
    assert report.exit_code == 3


# --- wrapper workflows -------------------------------------------------------------------


def test_issue_patrol_spawns_one_code_run_per_issue(tmp_path):
    issues = [
        IssueDescriptor(id="17", title="crash on empty frame"),
        IssueDescriptor(id="18", title="typo in summary"),
    ]
    reports = run_issue_patrol(
        lambda: issues,
        start=lambda issue: run_scripted_workflow(
            tmp_path / f"issue-{issue.id}", 2, authorization="token"
        )[0],
    )
    assert len(reports) == 2
    assert all(r.final_state == "DONE" for r in reports)


def test_scheduled_loop_repeats_inner_workflow(tmp_path):
    sleeps: list[float] = []
    reports = run_scheduled_loop(
        1,
        iterations=2,
        interval_seconds=120.0,
        start=lambda i, wf: run_scripted_workflow(tmp_path / f"iter-{i}", wf.id)[0],
        sleep=sleeps.append,
    )
    assert len(reports) == 2
    assert all(r.final_state == "REVIEW_PASSED" for r in reports)
    assert sleeps == [120.0]


def test_scheduled_loop_rejects_shipping_inner():
    with pytest.raises(MisconfigurationError):
        run_scheduled_loop(2, iterations=1, interval_seconds=1.0, start=lambda i, wf: None)
