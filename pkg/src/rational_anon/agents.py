"""Prompt construction and reply parsing for every model role.

Builders and parsers are pure functions. Parsers only ever raise
:class:`ParseError`; anything else escaping them is a bug.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

from .domain import (
    AttributeGuess,
    AttributeSchema,
    LeakFinding,
    PolicyAction,
    PolicySet,
    Validity,
    Verdict,
)
from .gateway import ChatMessage

TEMPLATE_ROLES = ("attacker", "arbitrator", "anonymizer", "judge")

PLACEHOLDERS = (
    "user_response",
    "current_comment",
    "attributes_to_protect",
    "attacker_inference_block",
    "feedback",
    "original_comment_string",
    "adapted_comment_string",
)
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")
_SECTION_RE = re.compile(r"^###[ \t]+(system|user)(?:[ \t]*:[ \t]*([\w.-]+))?[ \t]*$", re.MULTILINE)


class TemplateError(ValueError):
    pass


class EmptyPolicyError(ValueError):
    """The anonymizer was asked to act on an empty policy."""


class ParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    role: str
    system_text: str
    user_text: str
    # Alternative user bodies keyed by schema id (attacker only, in practice).
    variants: Mapping[str, str] = field(default_factory=dict)

    def user_body(self, schema_id: str | None = None) -> str:
        if schema_id is not None and schema_id in self.variants:
            return self.variants[schema_id]
        if not self.user_text:
            raise TemplateError(f"{self.role} template has no user body for schema {schema_id!r}")
        return self.user_text


def parse_template(role: str, text: str) -> PromptTemplate:
    if role not in TEMPLATE_ROLES:
        raise TemplateError(f"unknown template role {role!r}")
    matches = list(_SECTION_RE.finditer(text))
    if not matches:
        raise TemplateError(f"{role} template has no '### system' / '### user' sections")
    system, user, variants = "", "", {}
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        body = text[m.end():end].strip()
        kind, variant = m.group(1), m.group(2)
        if kind == "system":
            system = body
        elif variant:
            variants[variant] = body
        else:
            user = body
    if not system:
        raise TemplateError(f"{role} template has an empty system section")
    if not user and not variants:
        raise TemplateError(f"{role} template has no user section")
    return PromptTemplate(role, system, user, variants)


def load_template(role: str, path: str | Path | None = None) -> PromptTemplate:
    """Load a role's template file; without ``path`` the bundled default is used."""
    if path is None:
        text = (resources.files("rational_anon") / "prompts" / f"{role}.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_template(role, text)


def load_templates(paths: Mapping[str, str] | None = None) -> dict[str, PromptTemplate]:
    paths = paths or {}
    return {role: load_template(role, paths.get(role)) for role in TEMPLATE_ROLES}


def render(text: str, values: Mapping[str, str]) -> str:
    """Single-pass placeholder substitution.

    Only the known placeholder names are touched, so literal braces in the
    template (the judge's JSON skeleton) and in substituted values survive.
    """
    missing = [name for name in values if "{" + name + "}" not in text]
    if missing:
        raise TemplateError(f"template lacks placeholder(s): {', '.join(missing)}")
    return _PLACEHOLDER_RE.sub(lambda m: values.get(m.group(1), m.group(0)), text)


def _messages(template: PromptTemplate, user: str) -> list[ChatMessage]:
    return [ChatMessage("system", template.system_text), ChatMessage("user", user)]


def _require_role(template: PromptTemplate, role: str) -> None:
    if template.role != role:
        raise TemplateError(f"expected a {role} template, got {template.role}")


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_attacker_prompt(template: PromptTemplate, text: str, schema: AttributeSchema) -> list[ChatMessage]:
    _require_role(template, "attacker")
    body = template.user_body(schema.schema_id)
    return _messages(template, render(body, {"user_response": text}))


def build_arbitrator_prompt(
    template: PromptTemplate, text: str, protected: Sequence[str], inference_block: str
) -> list[ChatMessage]:
    _require_role(template, "arbitrator")
    if not inference_block or not inference_block.strip():
        raise TemplateError("arbitrator needs a non-empty attacker inference block")
    values = {
        "current_comment": text,
        "attributes_to_protect": ", ".join(protected),
        "attacker_inference_block": inference_block,
    }
    return _messages(template, render(template.user_body(), values))


def render_feedback(policy: PolicySet) -> str:
    items = [
        {
            "attribute": a.leak.attribute,
            "validity_level": a.validity.value,
            "reasoning_evidence": a.reasoning_evidence or a.leak.reasoning,
            "leaked_concept": a.concept,
        }
        for a in policy
    ]
    return json.dumps(items, indent=2, ensure_ascii=False)


def build_anonymizer_prompt(template: PromptTemplate, text: str, policy: PolicySet) -> list[ChatMessage]:
    _require_role(template, "anonymizer")
    if not policy:
        raise EmptyPolicyError("anonymizer called with an empty policy")
    values = {"user_response": text, "feedback": render_feedback(policy)}
    return _messages(template, render(template.user_body(), values))


def build_judge_prompt(template: PromptTemplate, original: str, adapted: str) -> list[ChatMessage]:
    _require_role(template, "judge")
    values = {"original_comment_string": original, "adapted_comment_string": adapted}
    return _messages(template, render(template.user_body(), values))


# ---------------------------------------------------------------------------
# JSON recovery
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```[ \t]*(?:json|JSON)?[ \t]*\n?(.*?)```", re.DOTALL)
_TRAILING_COMMA_RE = re.compile(r",\s*([}\]])")


def _balanced_spans(text: str, open_ch: str):
    """Yield (start, end) of each balanced span opening with ``open_ch``.

    Bracket counting ignores characters inside JSON string literals.
    """
    close_ch = "}" if open_ch == "{" else "]"
    start = text.find(open_ch)
    while start != -1:
        depth, in_str, esc = 0, False, False
        end = -1
        for i in range(start, len(text)):
            c = text[i]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == open_ch:
                depth += 1
            elif c == close_ch:
                depth -= 1
                if depth == 0:
                    end = i + 1
                    break
        # An unbalanced start may still contain balanced inner spans.
        if end != -1:
            yield start, end
        start = text.find(open_ch, start + 1)


def _loads_lenient(chunk: str) -> Any:
    try:
        return json.loads(chunk)
    except (ValueError, RecursionError):
        pass
    try:
        return json.loads(_TRAILING_COMMA_RE.sub(r"\1", chunk))
    except (ValueError, RecursionError):
        return None


def _find_json(text: str, open_ch: str, accept=lambda v: True) -> tuple[Any, int] | None:
    """First parseable JSON value of the wanted kind; fenced blocks win.

    Returns (value, start offset in ``text``) or None.
    """
    want = dict if open_ch == "{" else list
    for m in _FENCE_RE.finditer(text):
        inner = m.group(1)
        for s, e in _balanced_spans(inner, open_ch):
            value = _loads_lenient(inner[s:e])
            if isinstance(value, want) and accept(value):
                return value, m.start()
    for s, e in _balanced_spans(text, open_ch):
        value = _loads_lenient(text[s:e])
        if isinstance(value, want) and accept(value):
            return value, s
    return None


def _norm_key(key: Any) -> str:
    return re.sub(r"[\s-]+", "_", str(key).strip().lower())


def _as_text(value: Any) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, list):
        return "; ".join(_as_text(v) for v in value)
    return json.dumps(value, ensure_ascii=False)


# ---------------------------------------------------------------------------
# Attacker
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackerReply:
    inference_text: str
    guesses: tuple[AttributeGuess, ...]
    findings: tuple[LeakFinding, ...]


_INFERENCE_RE = re.compile(r"inference\s*:", re.IGNORECASE)


def _aliases(name: str) -> list[str]:
    words = name.split("_")
    out = [name, " ".join(words)]
    if len(words) >= 3:
        out.append(" ".join(words[:2]))
    elif len(words) == 2:
        out.append(words[0])
    return out


def _mention_pattern(alias: str) -> re.Pattern:
    parts = [re.escape(w) for w in alias.replace("_", " ").split()]
    return re.compile(r"(?<![A-Za-z0-9])" + r"[ _/-]".join(parts) + r"(?![A-Za-z0-9])", re.IGNORECASE)


_LINE_LEAD = r"(?:^|\n)[ \t]*(?:[-*•]+[ \t]*|\d+[.)][ \t]*|#+[ \t]*)*(?:\*\*|__)?[ \t]*"


def _first_mention(text: str, name: str) -> int | None:
    """Offset where an attribute is discussed; line-leading headings preferred."""
    heading, anywhere = None, None
    for alias in _aliases(name):
        pat = _mention_pattern(alias)
        m = re.search(_LINE_LEAD + "(" + pat.pattern + ")", text, re.IGNORECASE)
        if m and (heading is None or m.start(1) < heading):
            heading = m.start(1)
        m = pat.search(text)
        if m and (anywhere is None or m.start() < anywhere):
            anywhere = m.start()
    return heading if heading is not None else anywhere


def segment_findings(
    inference: str, schema: AttributeSchema, guesses: Sequence[AttributeGuess] = ()
) -> list[LeakFinding]:
    """Cut the inference into per-attribute findings by where each attribute is discussed.

    Attributes the attacker explicitly abstained on are dropped. When no
    attribute is mentioned at all, every candidate attribute receives the
    whole inference text as its reasoning.
    """
    inference = inference.strip()
    if not inference:
        return []
    abstained = {g.attribute for g in guesses if g.abstained}
    candidates = [n for n in schema.names if n not in abstained]
    positions = []
    for name in candidates:
        pos = _first_mention(inference, name)
        if pos is not None:
            positions.append((pos, name))
    if not positions:
        guessed = {g.attribute for g in guesses if not g.abstained}
        targets = [n for n in candidates if n in guessed] or candidates
        return [LeakFinding(n, inference) for n in targets]
    positions.sort()
    findings = []
    for i, (pos, name) in enumerate(positions):
        start = 0 if i == 0 else pos
        end = positions[i + 1][0] if i + 1 < len(positions) else len(inference)
        chunk = inference[start:end].strip()
        if chunk:
            findings.append(LeakFinding(name, chunk))
    return findings


def _clean_marker_text(s: str) -> str:
    return s.strip().strip("*_").strip()


def parse_attacker_reply(raw: str, schema: AttributeSchema) -> AttackerReply:
    try:
        return _parse_attacker_reply(raw, schema)
    except ParseError:
        raise
    except Exception as exc:  # defensive: parsers only raise ParseError
        raise ParseError(f"attacker reply unparseable: {exc!r}") from exc


def _parse_attacker_reply(raw: str, schema: AttributeSchema) -> AttackerReply:
    text = raw.replace("\r\n", "\n")
    found = None
    markers = [m.start() for m in re.finditer(r"Guess\s*:", text)]
    if not markers:
        markers = [m.start() for m in re.finditer(r"guess\s*:", text, re.IGNORECASE)]
    cut = None
    for pos in reversed(markers):
        hit = _find_json(text[pos:], "{")
        if hit is not None:
            found, cut = hit[0], pos
            break
    if found is None:
        hit = _find_json(text, "{")
        if hit is None:
            raise ParseError("no JSON object in attacker reply")
        found, cut = hit
    head = text[:cut]
    inf = _INFERENCE_RE.search(head)
    inference = _clean_marker_text(head[inf.end():] if inf else head)

    guesses = []
    seen = set()
    for key, value in found.items():
        name = _norm_key(key)
        if name not in schema or name in seen or value is None:
            continue
        seen.add(name)
        raw_value = _as_text(value)
        guesses.append(AttributeGuess(name, raw_value.strip(), raw_value))
    findings = segment_findings(inference, schema, guesses)
    return AttackerReply(inference, tuple(guesses), tuple(findings))


# ---------------------------------------------------------------------------
# Arbitrator
# ---------------------------------------------------------------------------

_VALIDITY_WORDS = {
    "high": Validity.HIGH,
    "medium": Validity.MED,
    "med": Validity.MED,
    "low": Validity.LOW,
    "invalid": Validity.INVALID,
}


def map_validity(label: Any) -> Validity:
    """Case-insensitive label mapping; anything unrecognised is Invalid."""
    if not isinstance(label, str):
        return Validity.INVALID
    return _VALIDITY_WORDS.get(label.strip().strip(".\"'").casefold(), Validity.INVALID)


def _verdict_from(item: Mapping[str, Any]) -> Verdict | None:
    attribute = item.get("attribute")
    if not isinstance(attribute, str) or not attribute.strip():
        return None
    validity = map_validity(item.get("validity_level", item.get("validity")))
    concept = item.get("leaked_concept")
    concept = _as_text(concept).strip() if concept not in (None, "") else None
    if validity.executes and not concept:
        validity = Validity.LOW
    if not validity.executes:
        concept = None
    return Verdict(
        attribute=_norm_key(attribute),
        validity=validity,
        reasoning_evidence=_as_text(item.get("reasoning_evidence", "")),
        leaked_concept=concept,
        validation_notes=_as_text(item.get("validation_notes", "")),
    )


def _usable_array(value: list) -> bool:
    return not value or any(isinstance(v, dict) and v.get("attribute") for v in value)


def parse_verdicts(raw: str) -> list[Verdict]:
    try:
        hit = _find_json(raw, "[", accept=_usable_array)
        if hit is None:
            raise ParseError("no JSON array in arbitrator reply")
        out = []
        for item in hit[0]:
            if isinstance(item, dict):
                v = _verdict_from(item)
                if v is not None:
                    out.append(v)
        return out
    except ParseError:
        raise
    except Exception as exc:
        raise ParseError(f"arbitrator reply unparseable: {exc!r}") from exc


def select_policy(verdicts: Iterable[Verdict], findings: Sequence[LeakFinding]) -> PolicySet:
    """High/Med verdicts execute, Low/Invalid are ignored; order is preserved.

    Each executed verdict is paired with the finding for its attribute;
    verdicts about attributes the attacker never raised are skipped.
    """
    by_attr: dict[str, LeakFinding] = {}
    for f in findings:
        by_attr.setdefault(f.attribute, f)
    actions = []
    for v in verdicts:
        if not v.validity.executes:
            continue
        leak = by_attr.get(v.attribute)
        if leak is None:
            continue
        actions.append(PolicyAction(leak, v.leaked_concept or leak.reasoning, v.validity, v.reasoning_evidence))
    return PolicySet(tuple(actions))


def greedy_verdicts(findings: Iterable[LeakFinding]) -> list[Verdict]:
    """The no-arbitrator ablation: every finding is mandated as a High leak."""
    return [
        Verdict(f.attribute, Validity.HIGH, f.reasoning, f.reasoning, "greedy: arbitration bypassed")
        for f in findings
    ]


# ---------------------------------------------------------------------------
# Anonymizer
# ---------------------------------------------------------------------------


class AnonymizerReply(NamedTuple):
    text: str
    format_degraded: bool


_PREAMBLE_RE = re.compile(
    r"^\s*(?:\*\*)?(?:(?:here\s+is|here's)\s+(?:the\s+|your\s+|my\s+)?)?"
    r"(?:anonymi[sz]ed|adapted|edited|rewritten|revised)\s+(?:text|comment|version)(?:\*\*)?\s*:\s*(?:\*\*)?",
    re.IGNORECASE,
)
_NOTE_RE = re.compile(r"(?:^|\n)[ \t]*(?:\*\*|\()?note\s*:", re.IGNORECASE)


def _strip_wrappers(text: str) -> str:
    text = _PREAMBLE_RE.sub("", text, count=1)
    m = _NOTE_RE.search(text)
    if m:
        text = text[: m.start()]
    return text.strip()


def parse_anonymizer_reply(raw: str) -> AnonymizerReply:
    text = raw.replace("\r\n", "\n").replace("\r", "\n")
    lines = text.split("\n")
    for i, line in enumerate(lines):
        if line.strip() == "#":
            body = _strip_wrappers("\n".join(lines[i + 1:]))
            if not body:
                raise ParseError("anonymizer reply is empty after the '#' line")
            return AnonymizerReply(body, False)
    paragraphs = [p for p in (_strip_wrappers(p) for p in re.split(r"\n\s*\n", text)) if p]
    if not paragraphs:
        raise ParseError("anonymizer reply is empty")
    tail = paragraphs[1:] or paragraphs
    return AnonymizerReply(max(tail, key=len), True)


# ---------------------------------------------------------------------------
# Utility judge
# ---------------------------------------------------------------------------

S_MIN, S_MAX = 1, 10


@dataclass(frozen=True)
class JudgeScores:
    readability: int
    meaning: int
    hallucination: int
    explanations: tuple[str, str, str] = ("", "", "")
    clamped: bool = False

    def __post_init__(self) -> None:
        if not S_MIN <= self.readability <= S_MAX or not S_MIN <= self.meaning <= S_MAX:
            raise ValueError("readability/meaning must lie in [1, 10]")
        if self.hallucination not in (0, 1):
            raise ValueError("hallucination must be 0 or 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "readability": self.readability,
            "meaning": self.meaning,
            "hallucination": self.hallucination,
            "explanations": list(self.explanations),
            "clamped": self.clamped,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> JudgeScores:
        return cls(d["readability"], d["meaning"], d["hallucination"], tuple(d["explanations"]), d["clamped"])


PERFECT_JUDGE = JudgeScores(10, 10, 1, ("identical to original",) * 3)

_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


def _score_of(entry: Any) -> tuple[float, str]:
    explanation = ""
    if isinstance(entry, dict):
        explanation = _as_text(entry.get("explanation", ""))
        entry = entry.get("score")
    if isinstance(entry, bool):
        return float(entry), explanation
    if isinstance(entry, (int, float)):
        return float(entry), explanation
    if isinstance(entry, str):
        m = _NUMBER_RE.search(entry)
        if m:
            return float(m.group()), explanation
    raise ParseError(f"judge score missing or non-numeric: {entry!r}")


def _clamp(value: float, lo: int, hi: int) -> tuple[int, bool]:
    if value != value:  # NaN
        raise ParseError("judge score is NaN")
    v = int(round(value))
    c = min(max(v, lo), hi)
    return c, c != v


def parse_judge_reply(raw: str) -> JudgeScores:
    try:
        def has_keys(obj):
            keys = {_norm_key(k) for k in obj}
            return "readability" in keys or "meaning" in keys

        hit = _find_json(raw, "{", accept=has_keys)
        if hit is None:
            raise ParseError("no JSON object in judge reply")
        obj = {_norm_key(k): v for k, v in hit[0].items()}
        hall_key = "hallucinations" if "hallucinations" in obj else "hallucination"
        for key in ("readability", "meaning", hall_key):
            if key not in obj:
                raise ParseError(f"judge reply lacks {key!r}")
        r, r_exp = _score_of(obj["readability"])
        m, m_exp = _score_of(obj["meaning"])
        h, h_exp = _score_of(obj[hall_key])
        r, c1 = _clamp(r, S_MIN, S_MAX)
        m, c2 = _clamp(m, S_MIN, S_MAX)
        h, c3 = _clamp(h, 0, 1)
        return JudgeScores(r, m, h, (r_exp, m_exp, h_exp), c1 or c2 or c3)
    except ParseError:
        raise
    except Exception as exc:
        raise ParseError(f"judge reply unparseable: {exc!r}") from exc
