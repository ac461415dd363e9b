"""The attack, arbitrate, anonymize loop with early stop."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import agents
from .agents import AttackerReply, ParseError, PromptTemplate
from .domain import (
    Document,
    Exchange,
    IterationRecord,
    LeakFinding,
    Mode,
    PolicySet,
    RunConfig,
    StopReason,
    Trajectory,
    Verdict,
    canonical_json,
    load_schema,
)
from .gateway import Backend, GatewayError, GenerationParams

logger = logging.getLogger(__name__)

LOOP_ROLES = ("attacker", "arbitrator", "anonymizer")


@dataclass(frozen=True)
class AgentFailure:
    role: str
    t: int
    message: str

    def to_dict(self) -> dict:
        return {"role": self.role, "t": self.t, "message": self.message}


@dataclass(frozen=True)
class LoopOutcome:
    trajectory: Trajectory
    failure: AgentFailure | None = None

    def __post_init__(self) -> None:
        if (self.failure is not None) != (self.trajectory.stop_reason is StopReason.AGENT_FAILURE):
            raise ValueError("failure must be present exactly when the run stopped on an agent failure")

    def to_dict(self) -> dict:
        d = self.trajectory.to_dict()
        d["failure"] = self.failure.to_dict() if self.failure else None
        return d


class _StepFailed(Exception):
    def __init__(self, role: str, message: str):
        super().__init__(message)
        self.role = role


def _params(config: RunConfig, role: str) -> GenerationParams:
    g = config.generation(role)
    return GenerationParams(g.temperature, g.top_p, g.max_tokens)


def _ask(backend: Backend, role: str, messages, params, parse, retry_limit: int, log: list[Exchange]):
    """Call a role, re-asking on unparseable replies up to ``retry_limit`` times."""
    wire = tuple(m.to_dict() for m in messages)
    for attempt in range(retry_limit + 1):
        try:
            raw = backend.complete(messages, params)
        except GatewayError as exc:
            log.append(Exchange(role, wire, None, f"{type(exc).__name__}: {exc}"))
            raise _StepFailed(role, str(exc)) from exc
        try:
            value = parse(raw)
        except ParseError as exc:
            log.append(Exchange(role, wire, raw, f"ParseError: {exc}"))
            logger.debug("%s reply unparseable (attempt %d): %s", role, attempt + 1, exc)
            continue
        log.append(Exchange(role, wire, raw))
        return value
    raise _StepFailed(role, f"no parseable reply after {retry_limit + 1} attempts")


def merge_findings(findings: Sequence[LeakFinding]) -> list[LeakFinding]:
    """One finding per attribute, keeping the longer reasoning, first-seen order."""
    merged: dict[str, LeakFinding] = {}
    for f in findings:
        kept = merged.get(f.attribute)
        if kept is None or len(f.reasoning) > len(kept.reasoning):
            merged[f.attribute] = f
    return list(merged.values())


def inference_block(reply: AttackerReply, findings: Sequence[LeakFinding]) -> str:
    guesses = {g.attribute: g.value for g in reply.guesses}
    lines = []
    for f in findings:
        guess = guesses.get(f.attribute)
        head = f"- {f.attribute}" + (f" (guess: {guess})" if guess else "")
        lines.append(f"{head}: {f.reasoning}")
    return "\n".join(lines)


def run_document(
    doc: Document,
    config: RunConfig,
    backends: Mapping[str, Backend],
    templates: Mapping[str, PromptTemplate] | None = None,
) -> LoopOutcome:
    """Run the loop on one document. Failures end up in the outcome, never raised."""
    templates = templates or agents.load_templates(config.prompt_template_paths)
    schema = load_schema(doc.schema_id)
    greedy = config.mode is Mode.GREEDY
    text = doc.original_text
    records: list[IterationRecord] = []
    stop = StopReason.MAX_ITERATIONS
    failure = None

    for t in range(config.max_iterations):
        started = time.perf_counter()
        log: list[Exchange] = []
        try:
            reply = _ask(
                backends["attacker"], "attacker",
                agents.build_attacker_prompt(templates["attacker"], text, schema),
                _params(config, "attacker"),
                lambda raw: agents.parse_attacker_reply(raw, schema),
                config.retry_limit, log,
            )
            findings = merge_findings(reply.findings)
            verdicts: list[Verdict] = []
            if greedy:
                verdicts = agents.greedy_verdicts(findings)
            elif findings:
                raw_verdicts = _ask(
                    backends["arbitrator"], "arbitrator",
                    agents.build_arbitrator_prompt(
                        templates["arbitrator"], text, schema.names, inference_block(reply, findings)
                    ),
                    _params(config, "arbitrator"),
                    agents.parse_verdicts,
                    config.retry_limit, log,
                )
                found = {f.attribute for f in findings}
                seen: set[str] = set()
                for v in raw_verdicts:
                    if v.attribute in found and v.attribute not in seen:
                        seen.add(v.attribute)
                        verdicts.append(v)
            policy = agents.select_policy(verdicts, findings)
            new_text, degraded = text, False
            if policy:
                new_text, degraded = _ask(
                    backends["anonymizer"], "anonymizer",
                    agents.build_anonymizer_prompt(templates["anonymizer"], text, policy),
                    _params(config, "anonymizer"),
                    agents.parse_anonymizer_reply,
                    config.retry_limit, log,
                )
        except _StepFailed as exc:
            failure = AgentFailure(exc.role, t, str(exc))
            stop = StopReason.AGENT_FAILURE
            logger.warning("doc %s: %s failed at step %d: %s", doc.id, exc.role, t, exc)
            break
        records.append(
            IterationRecord(
                t=t,
                text_before=text,
                findings=tuple(findings),
                guesses=reply.guesses,
                verdicts=tuple(verdicts),
                policy=policy if policy else PolicySet(),
                text_after=new_text,
                wall_clock_ms=round((time.perf_counter() - started) * 1000, 3),
                agent_transcripts=tuple(log),
                inference_text=reply.inference_text,
                format_degraded=degraded,
            )
        )
        if not policy:
            stop = StopReason.EMPTY_POLICY
            break
        text = new_text

    traj = Trajectory(doc.id, doc.original_text, tuple(records), text, stop, config.mode)
    return LoopOutcome(traj, failure)


ProgressFn = Callable[[int, int, LoopOutcome], None]


def run_corpus(
    docs: Sequence[Document],
    config: RunConfig,
    backends: Mapping[str, Backend],
    parallelism: int = 1,
    templates: Mapping[str, PromptTemplate] | None = None,
    progress: ProgressFn | None = None,
    out_dir: str | Path | None = None,
) -> list[LoopOutcome]:
    """Run every document; results come back in input order.

    When ``out_dir`` is given each trajectory is written as soon as its
    document finishes.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    templates = templates or agents.load_templates(config.prompt_template_paths)
    done = 0

    def one(doc: Document) -> LoopOutcome:
        try:
            outcome = run_document(doc, config, backends, templates)
        except Exception as exc:  # isolation: a bug on one document must not sink the batch
            logger.exception("doc %s crashed", doc.id)
            traj = Trajectory(doc.id, doc.original_text, (), doc.original_text, StopReason.AGENT_FAILURE, config.mode)
            outcome = LoopOutcome(traj, AgentFailure("orchestrator", 0, repr(exc)))
        if out_dir is not None:
            write_trajectory(out_dir, outcome)
        return outcome

    outcomes: list[LoopOutcome] = []
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(one, d) for d in docs]
        for fut in futures:
            outcome = fut.result()
            outcomes.append(outcome)
            done += 1
            if progress is not None:
                progress(done, len(docs), outcome)
    return outcomes


def write_trajectory(run_dir: str | Path, outcome: LoopOutcome) -> Path:
    path = Path(run_dir) / "trajectories" / f"{outcome.trajectory.document_id}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(outcome.to_dict()), encoding="utf-8")
    return path


def read_trajectory(path: str | Path) -> LoopOutcome:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    failure = AgentFailure(**d["failure"]) if d.get("failure") else None
    return LoopOutcome(Trajectory.from_dict(d), failure)


def write_config(run_dir: str | Path, config: RunConfig) -> Path:
    path = Path(run_dir) / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(config.to_dict()), encoding="utf-8")
    return path
