"""Privacy, utility, structural-similarity and marginal-economics metrics."""

from __future__ import annotations

import logging
import math
import re
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

from . import agents
from .agents import JudgeScores, ParseError, PromptTemplate
from .domain import (
    EPS_P,
    AttributeGuess,
    AttributeKind,
    AttributeSchema,
    AttributeSpec,
    Document,
    MarginalRecord,
    Trajectory,
    is_abstention,
    protected_set,
)
from .gateway import Backend, GatewayError, GenerationParams

logger = logging.getLogger(__name__)


class EmptyProtectedSet(ValueError):
    pass


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tokens and structural similarity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def _strip_punct(tok: str) -> str:
    start, end = 0, len(tok)
    while start < end and _is_punct(tok[start]):
        start += 1
    while end > start and _is_punct(tok[end - 1]):
        end -= 1
    return tok[start:end]


def tokenize(text: str) -> TokenSequence:
    """Lowercase, whitespace split, edge punctuation stripped, empties dropped."""
    toks = (_strip_punct(t) for t in text.lower().split())
    return TokenSequence(tuple(t for t in toks if t))


def _seq(x: TokenSequence | Sequence[str]) -> Sequence[str]:
    return x.tokens if isinstance(x, TokenSequence) else x


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(reference, candidate) -> float:
    ref, cand = _seq(reference), _seq(candidate)
    if not ref or not cand:
        return 0.0
    lcs = lcs_length(ref, cand)
    if lcs == 0:
        return 0.0
    precision, recall = lcs / len(cand), lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


def _ngram_counts(seq: Sequence[str], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(reference, candidate, max_n: int = 4) -> float:
    """Smoothed single-reference sentence BLEU.

    Uses uniform weights over orders 1..min(max_n, |candidate|) so short
    identical texts still score 1. A zero modified precision is replaced by
    1 / (2 * |candidate|).
    """
    ref, cand = _seq(reference), _seq(candidate)
    if not cand:
        return 0.0
    orders = min(max_n, len(cand))
    floor = 1.0 / (2 * len(cand))
    log_sum = 0.0
    for n in range(1, orders + 1):
        cand_counts = _ngram_counts(cand, n)
        ref_counts = _ngram_counts(ref, n)
        clipped = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        p = clipped / (len(cand) - n + 1)
        log_sum += math.log(p if p > 0 else floor)
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_sum / orders)


# ---------------------------------------------------------------------------
# Privacy and utility
# ---------------------------------------------------------------------------

_INT_RE = re.compile(r"^[+-]?\d+(?:\.0+)?$")
_WS_RE = re.compile(r"\s+")


def _as_int(s: str) -> int | None:
    s = s.strip()
    if not _INT_RE.match(s):
        return None
    return int(float(s)) if "." in s else int(s)


def _norm(s: str) -> str:
    return _WS_RE.sub(" ", s).strip().casefold()


def match_attribute(spec: AttributeSpec, guess: str, truth: str) -> bool:
    """Does a guessed value count as a correct inference of ``truth``?"""
    if guess is None or truth is None or is_abstention(guess) or is_abstention(truth):
        return False
    kind = spec.kind
    if kind is AttributeKind.INTEGER:
        g, t = _as_int(guess), _as_int(truth)
        return g is not None and g == t
    if kind is AttributeKind.ENUM:
        return _norm(guess) == _norm(truth)
    if kind is AttributeKind.PLACE:
        truth_parts = {p for p in (_norm(x) for x in truth.split(",")) if p}
        guess_parts = {p for p in (_norm(x) for x in guess.split(",")) if p}
        return bool(truth_parts & guess_parts)
    g, t = _norm(guess), _norm(truth)
    return bool(g and t) and (g in t or t in g)


def count_matches(
    guesses: Iterable[AttributeGuess],
    protected: Sequence[tuple[str, str]],
    specs: AttributeSchema | Mapping[str, AttributeSpec],
) -> int:
    by_attr: dict[str, AttributeGuess] = {}
    for g in guesses:
        by_attr.setdefault(g.attribute, g)
    lookup = specs.spec if isinstance(specs, AttributeSchema) else specs.__getitem__
    hits = 0
    for attr, truth in protected:
        g = by_attr.get(attr)
        if g is not None and not g.abstained and match_attribute(lookup(attr), g.value, truth):
            hits += 1
    return hits


def priv_score(guesses, protected, specs) -> float:
    """Fraction of protected attributes the adversary inferred correctly."""
    if not protected:
        raise EmptyProtectedSet("privacy score needs at least one protected attribute")
    return count_matches(guesses, protected, specs) / len(protected)


def util_score(j: JudgeScores) -> float:
    return (j.readability / agents.S_MAX + j.meaning / agents.S_MAX + j.hallucination) / 3


# ---------------------------------------------------------------------------
# Marginal economics
# ---------------------------------------------------------------------------


def marginal_series(priv: Sequence[float], util: Sequence[float], steps: Sequence[int] | None = None) -> list[MarginalRecord]:
    """ΔP, ΔC and MRS for each consecutive pair of evaluated states."""
    steps = list(steps) if steps is not None else list(range(len(priv)))
    return [
        MarginalRecord.from_deltas(steps[i], priv[i - 1] - priv[i], util[i - 1] - util[i])
        for i in range(1, len(priv))
    ]


def cumulative_mrs(records: Sequence[MarginalRecord]) -> list[float]:
    out, cost, gain = [], 0.0, 0.0
    for r in records:
        cost += r.delta_c
        gain += r.delta_p
        out.append(cost / max(gain, EPS_P))
    return out


def rationality_gain(mrs_baseline: float, mrs_rlaa: float) -> float:
    """Percentage reduction of MRS relative to the greedy baseline."""
    if not mrs_baseline > 0:
        raise DomainError(f"baseline MRS must be positive, got {mrs_baseline}")
    return 100.0 * (mrs_baseline - mrs_rlaa) / mrs_baseline


# ---------------------------------------------------------------------------
# Trajectory evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepEval:
    t: int
    text: str
    rouge_l: float
    bleu: float
    k: int
    priv: float | None = None
    matches: int | None = None
    util: float | None = None
    judge: JudgeScores | None = None
    guesses: tuple[AttributeGuess, ...] = ()
    evaluated: bool = True
    error: str | None = None

    @property
    def complete(self) -> bool:
        return self.priv is not None and self.util is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "text": self.text,
            "priv": self.priv,
            "matches": self.matches,
            "k": self.k,
            "util": self.util,
            "rouge_l": self.rouge_l,
            "bleu": self.bleu,
            "judge": self.judge.to_dict() if self.judge else None,
            "guesses": [g.to_dict() for g in self.guesses],
            "evaluated": self.evaluated,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> StepEval:
        return cls(
            t=d["t"],
            text=d["text"],
            rouge_l=d["rouge_l"],
            bleu=d["bleu"],
            k=d["k"],
            priv=d.get("priv"),
            matches=d.get("matches"),
            util=d.get("util"),
            judge=JudgeScores.from_dict(d["judge"]) if d.get("judge") else None,
            guesses=tuple(AttributeGuess.from_dict(g) for g in d.get("guesses", ())),
            evaluated=d.get("evaluated", True),
            error=d.get("error"),
        )


@dataclass(frozen=True)
class EvalRecord:
    doc_id: str
    steps: tuple[StepEval, ...]
    marginals: tuple[MarginalRecord, ...]

    @property
    def original(self) -> StepEval:
        return self.steps[0]

    @property
    def final(self) -> StepEval:
        return self.steps[-1]

    @property
    def cumulative(self) -> list[float]:
        return cumulative_mrs(self.marginals)

    def to_dict(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "steps": [s.to_dict() for s in self.steps],
            "marginals": [m.to_dict() for m in self.marginals],
            "cumulative_mrs": self.cumulative,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalRecord:
        return cls(
            d["doc_id"],
            tuple(StepEval.from_dict(s) for s in d["steps"]),
            tuple(MarginalRecord.from_dict(m) for m in d["marginals"]),
        )


def _call(backend: Backend, messages, params: GenerationParams, parse, retry_limit: int):
    last: Exception | None = None
    for _ in range(retry_limit + 1):
        raw = backend.complete(messages, params)
        try:
            return parse(raw)
        except ParseError as exc:
            last = exc
    raise ParseError(f"gave up after {retry_limit + 1} attempts: {last}")


def evaluate_trajectory(
    traj: Trajectory,
    doc: Document,
    judge_backend: Backend,
    adversary_backend: Backend,
    schema: AttributeSchema,
    templates: Mapping[str, PromptTemplate] | None = None,
    per_step: bool = False,
    judge_params: GenerationParams | None = None,
    adversary_params: GenerationParams | None = None,
    retry_limit: int = 3,
) -> EvalRecord:
    """Score x(0) and the text after every loop record.

    Step t+1 is the text after record t, so there is one step more than there
    are records. Only the external adversary's guesses feed PRIV; the loop's
    own attacker guesses are ignored. Text identical to the original gets
    utility 1 without asking the judge. A record with an empty policy did not
    change the text, so its step copies the scores of the step before it.

    With ``per_step`` off only x(0) and the final text go to the adversary and
    judge; intermediate steps still get ROUGE/BLEU. Marginals are taken only
    across steps where the anonymizer actually ran.
    """
    templates = templates or agents.load_templates()
    judge_params = judge_params or GenerationParams(0.0, None, 1024)
    adversary_params = adversary_params or GenerationParams(0.0, None, 1024)
    protected = protected_set(doc, schema)
    ref = tokenize(doc.original_text)
    texts = [doc.original_text] + [r.text_after for r in traj.records]
    edited = [False] + [bool(r.policy) for r in traj.records]
    last = len(texts) - 1

    def score(t: int, text: str) -> StepEval:
        if t == 0:
            base = dict(t=t, text=text, rouge_l=1.0, bleu=1.0, k=len(protected))
        else:
            cand = tokenize(text)
            base = dict(t=t, text=text, rouge_l=rouge_l_f1(ref, cand), bleu=bleu(ref, cand), k=len(protected))
        if not (per_step or t == 0 or t == last):
            return StepEval(**base, evaluated=False)
        errors = []
        priv = matches = util = judge = None
        guesses: tuple[AttributeGuess, ...] = ()
        if protected:
            try:
                msgs = agents.build_attacker_prompt(templates["attacker"], text, schema)
                reply = _call(
                    adversary_backend, msgs, adversary_params,
                    lambda raw: agents.parse_attacker_reply(raw, schema), retry_limit,
                )
                guesses = reply.guesses
                matches = count_matches(guesses, protected, schema)
                priv = matches / len(protected)
            except (GatewayError, ParseError) as exc:
                errors.append(f"adversary: {exc}")
        if text == doc.original_text:
            judge, util = agents.PERFECT_JUDGE, 1.0
        else:
            try:
                msgs = agents.build_judge_prompt(templates["judge"], doc.original_text, text)
                judge = _call(judge_backend, msgs, judge_params, agents.parse_judge_reply, retry_limit)
                util = util_score(judge)
            except (GatewayError, ParseError) as exc:
                errors.append(f"judge: {exc}")
        if errors:
            logger.warning("doc %s step %d: %s", doc.id, t, "; ".join(errors))
        return StepEval(
            **base, priv=priv, matches=matches, util=util, judge=judge, guesses=guesses,
            error="; ".join(errors) or None,
        )

    steps: list[StepEval] = []
    for t, text in enumerate(texts):
        prev = steps[-1] if steps else None
        if prev is not None and not edited[t] and prev.evaluated:
            steps.append(replace(prev, t=t))
        else:
            steps.append(score(t, text))

    if per_step:
        chain = [steps[0]] + [s for s in steps[1:] if edited[s.t]]
    elif any(edited):
        chain = [steps[0], steps[-1]]
    else:
        chain = [steps[0]]
    chain = [s for s in chain if s.complete]
    marginals = marginal_series([s.priv for s in chain], [s.util for s in chain], [s.t for s in chain])
    return EvalRecord(doc.id, tuple(steps), tuple(marginals))


# ---------------------------------------------------------------------------
# Corpus summaries
# ---------------------------------------------------------------------------

TABLE_COLUMNS = ("UTIL", "PRIV", "ROUGE", "BLEU", "MEAN", "READ", "HALL")


def _mean(xs: Sequence[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def _columns(steps: Sequence[StepEval]) -> dict[str, float | None]:
    judged = [s for s in steps if s.judge is not None]
    attacked = [s for s in steps if s.matches is not None and s.k]
    k_total = sum(s.k for s in attacked)
    return {
        "UTIL": _mean([s.util for s in steps if s.util is not None]),
        # Pooled over all (document, attribute) pairs.
        "PRIV": sum(s.matches for s in attacked) / k_total if k_total else None,
        "ROUGE": _mean([s.rouge_l for s in steps]),
        "BLEU": _mean([s.bleu for s in steps]),
        "MEAN": _mean([s.judge.meaning for s in judged]),
        "READ": _mean([s.judge.readability for s in judged]),
        "HALL": _mean([s.judge.hallucination for s in judged]),
    }


def macro_cumulative_series(records: Sequence[EvalRecord]) -> list[float]:
    """Per-step macro average of per-document cumulative MRS.

    Documents that stopped early carry their last value forward.
    """
    series = [r.cumulative for r in records if r.marginals]
    if not series:
        return []
    length = max(len(s) for s in series)
    return [sum(s[min(i, len(s) - 1)] for s in series) / len(series) for i in range(length)]


def summarize(records: Sequence[EvalRecord]) -> dict[str, Any]:
    """Table-1 style summary for the final texts, the originals and the MRS."""
    finals = _columns([r.final for r in records])
    original = _columns([r.original for r in records])
    with_marg = [r for r in records if r.marginals]
    all_m = [m for r in with_marg for m in r.marginals]
    pooled_c = sum(m.delta_c for m in all_m)
    pooled_p = sum(m.delta_p for m in all_m)
    summary: dict[str, Any] = dict(finals)
    summary.update(
        {
            "n_documents": len(records),
            "n_final_missing": sum(1 for r in records if not r.final.complete),
            "original": original,
            "mrs": {
                "final_cumulative_macro": _mean([r.cumulative[-1] for r in with_marg]),
                "final_cumulative_pooled": pooled_c / max(pooled_p, EPS_P) if all_m else None,
                "cumulative_macro_series": macro_cumulative_series(records),
                "n_documents_with_transitions": len(with_marg),
            },
            "labels": {
                "PRIV": "pooled attack success over all (document, attribute) pairs",
                "MEAN": "macro-average of raw judge meaning scores (1-10)",
                "READ": "macro-average of raw judge readability scores (1-10)",
                "HALL": "macro-average of binary judge hallucination scores",
                "BLEU": "smoothed sentence BLEU, macro-averaged",
                "ROUGE": "ROUGE-L F1, macro-averaged",
            },
        }
    )
    return summary


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(x)


def mrs_csv_rows(records: Sequence[EvalRecord]) -> list[list[str]]:
    rows = [["doc_id", "step", "delta_p", "delta_c", "mrs", "cumulative_mrs"]]
    for r in records:
        for m, cum in zip(r.marginals, r.cumulative):
            rows.append([r.doc_id, str(m.t), _fmt(m.delta_p), _fmt(m.delta_c), _fmt(m.mrs), _fmt(cum)])
    return rows
