"""Shared vocabulary of the anonymization pipeline.

Every value here is a frozen dataclass holding tuples rather than lists, so
instances can be shared freely between worker threads. Each type has a
``to_dict``/``from_dict`` pair producing the canonical JSON form (snake_case
field names, enums as their lowercase string values).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

# ΔP at or below this floor is treated as noise when forming an MRS.
EPS_P = 1e-6

# Ground-truth / guess values that mean "no concrete value".
ABSTAIN_VALUES = frozenset({"", "unknown", "none", "n/a", "na", "null", "not sure", "unsure"})


def is_abstention(value: str | None) -> bool:
    return value is None or value.strip().casefold() in ABSTAIN_VALUES


class AttributeKind(str, Enum):
    INTEGER = "integer"
    ENUM = "enum"
    FREE_TEXT = "free-text"
    PLACE = "place"


class Validity(str, Enum):
    HIGH = "high"
    MED = "medium"
    LOW = "low"
    INVALID = "invalid"

    @property
    def executes(self) -> bool:
        return self in (Validity.HIGH, Validity.MED)


class Mode(str, Enum):
    RLAA = "rlaa"
    GREEDY = "greedy"


class StopReason(str, Enum):
    EMPTY_POLICY = "empty_policy"
    MAX_ITERATIONS = "max_iterations"
    AGENT_FAILURE = "agent_failure"


ROLES = ("attacker", "arbitrator", "anonymizer", "judge", "adversary")


# ---------------------------------------------------------------------------
# Schemas and documents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    kind: AttributeKind
    enum_values: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AttributeKind(self.kind))
        if self.enum_values is not None:
            object.__setattr__(self, "enum_values", tuple(self.enum_values))
        if not self.name:
            raise ValueError("attribute name must be non-empty")
        if self.kind is AttributeKind.ENUM and not self.enum_values:
            raise ValueError(f"enum attribute {self.name!r} needs enum_values")
        if self.kind is not AttributeKind.ENUM and self.enum_values is not None:
            raise ValueError(f"{self.kind.value} attribute {self.name!r} must not define enum_values")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"name": self.name, "kind": self.kind.value}
        if self.enum_values is not None:
            d["enum_values"] = list(self.enum_values)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AttributeSpec:
        return cls(d["name"], AttributeKind(d["kind"]), d.get("enum_values"))


@dataclass(frozen=True)
class AttributeSchema:
    schema_id: str
    attributes: tuple[AttributeSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(self.attributes))
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute names in schema {self.schema_id!r}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def spec(self, name: str) -> AttributeSpec:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)

    def __contains__(self, name: object) -> bool:
        return any(a.name == name for a in self.attributes)

    def to_dict(self) -> dict[str, Any]:
        return {"schema_id": self.schema_id, "attributes": [a.to_dict() for a in self.attributes]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AttributeSchema:
        return cls(d["schema_id"], tuple(AttributeSpec.from_dict(a) for a in d["attributes"]))


def bundled_schema_ids() -> list[str]:
    root = resources.files("rational_anon") / "schemas"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_schema(schema_id_or_path: str | Path) -> AttributeSchema:
    """Load a bundled schema by id, or any schema JSON file by path."""
    path = Path(schema_id_or_path)
    if path.suffix == ".json" and path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        res = resources.files("rational_anon") / "schemas" / f"{schema_id_or_path}.json"
        if not res.is_file():
            raise KeyError(f"unknown schema {schema_id_or_path!r}")
        text = res.read_text(encoding="utf-8")
    return AttributeSchema.from_dict(json.loads(text))


@dataclass(frozen=True)
class Document:
    id: str
    original_text: str
    ground_truth: Mapping[str, str]
    schema_id: str

    def __post_init__(self) -> None:
        # Values coerced to str; None means "no value".
        gt = {str(k): ("" if v is None else str(v)) for k, v in dict(self.ground_truth).items()}
        object.__setattr__(self, "ground_truth", _FrozenDict(gt))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "original_text": self.original_text,
            "ground_truth": dict(self.ground_truth),
            "schema_id": self.schema_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Document:
        return cls(d["id"], d["original_text"], d["ground_truth"], d["schema_id"])


class _FrozenDict(dict):
    """A dict that refuses mutation after construction (hashable by items)."""

    def _readonly(self, *a, **k):
        raise TypeError("ground_truth is immutable")

    __setitem__ = __delitem__ = clear = pop = popitem = setdefault = update = _readonly  # type: ignore[assignment]

    def __hash__(self) -> int:  # type: ignore[override]
        return hash(tuple(sorted(self.items())))

    def __reduce__(self):
        return (_FrozenDict, (dict(self),))


def validate_document(doc: Document, schema: AttributeSchema) -> list[str]:
    violations = []
    if not doc.original_text or not doc.original_text.strip():
        violations.append("empty text")
    if doc.schema_id != schema.schema_id:
        violations.append(f"schema mismatch {doc.schema_id} != {schema.schema_id}")
    for key in doc.ground_truth:
        if key not in schema:
            violations.append(f"unknown attribute {key}")
    return violations


def protected_set(doc: Document, schema: AttributeSchema | None = None) -> list[tuple[str, str]]:
    """(attribute, true value) pairs with a concrete value, in schema order.

    Without a schema the document's own key order is used.
    """
    order = schema.names if schema is not None else tuple(doc.ground_truth)
    return [
        (name, doc.ground_truth[name].strip())
        for name in order
        if name in doc.ground_truth and not is_abstention(doc.ground_truth[name])
    ]


# ---------------------------------------------------------------------------
# Loop artifacts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttributeGuess:
    attribute: str
    value: str
    raw_value: str

    @property
    def abstained(self) -> bool:
        return is_abstention(self.value)

    def to_dict(self) -> dict[str, Any]:
        return {"attribute": self.attribute, "value": self.value, "raw_value": self.raw_value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AttributeGuess:
        return cls(d["attribute"], d["value"], d["raw_value"])


@dataclass(frozen=True)
class LeakFinding:
    attribute: str
    reasoning: str

    def __post_init__(self) -> None:
        if not self.reasoning or not self.reasoning.strip():
            raise ValueError("leak finding needs non-empty reasoning")

    def to_dict(self) -> dict[str, Any]:
        return {"attribute": self.attribute, "reasoning": self.reasoning}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> LeakFinding:
        return cls(d["attribute"], d["reasoning"])


@dataclass(frozen=True)
class Verdict:
    attribute: str
    validity: Validity
    reasoning_evidence: str = ""
    leaked_concept: str | None = None
    validation_notes: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "validity", Validity(self.validity))
        if self.validity.executes and not self.leaked_concept:
            raise ValueError(f"{self.validity.value} verdict for {self.attribute!r} needs a leaked_concept")
        if not self.validity.executes and self.leaked_concept is not None:
            raise ValueError(f"{self.validity.value} verdict must not carry a leaked_concept")

    def to_dict(self) -> dict[str, Any]:
        return {
            "attribute": self.attribute,
            "validity": self.validity.value,
            "reasoning_evidence": self.reasoning_evidence,
            "leaked_concept": self.leaked_concept,
            "validation_notes": self.validation_notes,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Verdict:
        return cls(
            d["attribute"],
            Validity(d["validity"]),
            d.get("reasoning_evidence", ""),
            d.get("leaked_concept"),
            d.get("validation_notes", ""),
        )


@dataclass(frozen=True)
class PolicyAction:
    leak: LeakFinding
    concept: str
    validity: Validity
    reasoning_evidence: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "validity", Validity(self.validity))
        if not self.validity.executes:
            raise ValueError("policy actions are High or Med only")

    def to_dict(self) -> dict[str, Any]:
        return {
            "leak": self.leak.to_dict(),
            "concept": self.concept,
            "validity": self.validity.value,
            "reasoning_evidence": self.reasoning_evidence,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PolicyAction:
        return cls(
            LeakFinding.from_dict(d["leak"]),
            d["concept"],
            Validity(d["validity"]),
            d.get("reasoning_evidence", ""),
        )


@dataclass(frozen=True)
class PolicySet:
    actions: tuple[PolicyAction, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))

    def __len__(self) -> int:
        return len(self.actions)

    def __bool__(self) -> bool:
        return bool(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def to_dict(self) -> dict[str, Any]:
        return {"actions": [a.to_dict() for a in self.actions]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PolicySet:
        return cls(tuple(PolicyAction.from_dict(a) for a in d["actions"]))


@dataclass(frozen=True)
class Exchange:
    """One raw prompt/response pair sent to a role's backend."""

    role: str
    messages: tuple[Mapping[str, str], ...]
    response: str | None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "role": self.role,
            "messages": [dict(m) for m in self.messages],
            "response": self.response,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Exchange:
        return cls(d["role"], tuple(dict(m) for m in d["messages"]), d.get("response"), d.get("error"))


@dataclass(frozen=True)
class IterationRecord:
    t: int
    text_before: str
    findings: tuple[LeakFinding, ...]
    guesses: tuple[AttributeGuess, ...]
    verdicts: tuple[Verdict, ...]
    policy: PolicySet
    text_after: str
    wall_clock_ms: float = 0.0
    agent_transcripts: tuple[Exchange, ...] = ()
    inference_text: str = ""
    format_degraded: bool = False

    def __post_init__(self) -> None:
        for name in ("findings", "guesses", "verdicts", "agent_transcripts"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.t < 0:
            raise ValueError("step index must be >= 0")
        if not self.policy and self.text_after != self.text_before:
            raise ValueError("empty policy must leave the text unchanged")
        found = {f.attribute for f in self.findings}
        stray = [v.attribute for v in self.verdicts if v.attribute not in found]
        if stray:
            raise ValueError(f"verdicts without findings: {stray}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "text_before": self.text_before,
            "inference_text": self.inference_text,
            "findings": [f.to_dict() for f in self.findings],
            "guesses": [g.to_dict() for g in self.guesses],
            "verdicts": [v.to_dict() for v in self.verdicts],
            "policy": self.policy.to_dict(),
            "text_after": self.text_after,
            "format_degraded": self.format_degraded,
            "wall_clock_ms": self.wall_clock_ms,
            "agent_transcripts": [e.to_dict() for e in self.agent_transcripts],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> IterationRecord:
        return cls(
            t=d["t"],
            text_before=d["text_before"],
            findings=tuple(LeakFinding.from_dict(f) for f in d["findings"]),
            guesses=tuple(AttributeGuess.from_dict(g) for g in d["guesses"]),
            verdicts=tuple(Verdict.from_dict(v) for v in d["verdicts"]),
            policy=PolicySet.from_dict(d["policy"]),
            text_after=d["text_after"],
            wall_clock_ms=d.get("wall_clock_ms", 0.0),
            agent_transcripts=tuple(Exchange.from_dict(e) for e in d.get("agent_transcripts", ())),
            inference_text=d.get("inference_text", ""),
            format_degraded=d.get("format_degraded", False),
        )


@dataclass(frozen=True)
class Trajectory:
    document_id: str
    original_text: str
    records: tuple[IterationRecord, ...]
    final_text: str
    stop_reason: StopReason
    mode: Mode

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "stop_reason", StopReason(self.stop_reason))
        object.__setattr__(self, "mode", Mode(self.mode))
        expected = self.records[-1].text_after if self.records else self.original_text
        if self.final_text != expected:
            raise ValueError("final_text must equal the last record's text_after")
        if [r.t for r in self.records] != list(range(len(self.records))):
            raise ValueError("record step indices must be 0..n-1 without gaps")
        if self.stop_reason is StopReason.EMPTY_POLICY and (not self.records or self.records[-1].policy):
            raise ValueError("EmptyPolicy stop requires a final record with an empty policy")

    @property
    def transition_texts(self) -> list[str]:
        """x(0) followed by every text actually produced by the anonymizer."""
        return [self.original_text] + [r.text_after for r in self.records if r.policy]

    def to_dict(self) -> dict[str, Any]:
        return {
            "document_id": self.document_id,
            "mode": self.mode.value,
            "stop_reason": self.stop_reason.value,
            "original_text": self.original_text,
            "final_text": self.final_text,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Trajectory:
        return cls(
            document_id=d["document_id"],
            original_text=d["original_text"],
            records=tuple(IterationRecord.from_dict(r) for r in d["records"]),
            final_text=d["final_text"],
            stop_reason=StopReason(d["stop_reason"]),
            mode=Mode(d["mode"]),
        )


# ---------------------------------------------------------------------------
# Marginal economics
# ---------------------------------------------------------------------------


def mrs_value(delta_c: float, delta_p: float) -> float:
    """Utility paid per unit of privacy; +inf when the gain is at or below EPS_P."""
    if delta_p > EPS_P:
        return delta_c / delta_p
    return math.inf


@dataclass(frozen=True)
class MarginalRecord:
    t: int
    delta_p: float
    delta_c: float
    mrs: float

    @classmethod
    def from_deltas(cls, t: int, delta_p: float, delta_c: float) -> MarginalRecord:
        return cls(t, delta_p, delta_c, mrs_value(delta_c, delta_p))

    def to_dict(self) -> dict[str, Any]:
        # JSON has no infinity; the sentinel is written as the string "inf".
        return {
            "t": self.t,
            "delta_p": self.delta_p,
            "delta_c": self.delta_c,
            "mrs": "inf" if math.isinf(self.mrs) else self.mrs,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MarginalRecord:
        mrs = d["mrs"]
        return cls(d["t"], d["delta_p"], d["delta_c"], math.inf if mrs == "inf" else float(mrs))


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoleGeneration:
    temperature: float
    top_p: float | None
    max_tokens: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.top_p is not None and not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p {self.top_p} outside (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {"temperature": self.temperature, "top_p": self.top_p, "max_tokens": self.max_tokens}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RoleGeneration:
        return cls(float(d["temperature"]), d.get("top_p"), int(d["max_tokens"]))


# Decoding settings per role; judge/adversary run greedy.
DEFAULT_GENERATION: dict[str, RoleGeneration] = {
    "attacker": RoleGeneration(0.1, 0.9, 1024),
    "arbitrator": RoleGeneration(0.0, None, 1024),
    "anonymizer": RoleGeneration(0.5, 0.9, 512),
    "judge": RoleGeneration(0.0, None, 1024),
    "adversary": RoleGeneration(0.0, None, 1024),
}

DEFAULT_MAX_ITERATIONS = {"personal_reddit": 10, "health": 3}


@dataclass(frozen=True)
class RunConfig:
    mode: Mode = Mode.RLAA
    max_iterations: int = 10
    role_endpoints: Mapping[str, Any] = field(default_factory=dict)
    role_generation: Mapping[str, RoleGeneration] = field(default_factory=lambda: dict(DEFAULT_GENERATION))
    schema_id: str = "personal_reddit"
    prompt_template_paths: Mapping[str, str] = field(default_factory=dict)
    retry_limit: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        gen = dict(DEFAULT_GENERATION)
        gen.update(self.role_generation)
        object.__setattr__(self, "role_generation", gen)
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")

    def generation(self, role: str) -> RoleGeneration:
        return self.role_generation[role]

    def to_dict(self) -> dict[str, Any]:
        endpoints = {}
        for role, ep in sorted(self.role_endpoints.items()):
            endpoints[role] = ep.to_dict() if hasattr(ep, "to_dict") else dict(ep)
        return {
            "mode": self.mode.value,
            "max_iterations": self.max_iterations,
            "role_endpoints": endpoints,
            "role_generation": {r: g.to_dict() for r, g in sorted(self.role_generation.items())},
            "schema_id": self.schema_id,
            "prompt_template_paths": dict(sorted(self.prompt_template_paths.items())),
            "retry_limit": self.retry_limit,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunConfig:
        from .gateway import BackendDescriptor

        return cls(
            mode=Mode(d.get("mode", "rlaa")),
            max_iterations=int(d.get("max_iterations", 10)),
            role_endpoints={r: BackendDescriptor.from_dict(ep) for r, ep in d.get("role_endpoints", {}).items()},
            role_generation={r: RoleGeneration.from_dict(g) for r, g in d.get("role_generation", {}).items()},
            schema_id=d.get("schema_id", "personal_reddit"),
            prompt_template_paths=dict(d.get("prompt_template_paths", {})),
            retry_limit=int(d.get("retry_limit", 3)),
            seed=int(d.get("seed", 0)),
        )


def canonical_json(obj: Any, indent: int | None = 2) -> str:
    """Stable JSON text: sorted keys, UTF-8 kept, trailing newline."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=indent) + "\n"
