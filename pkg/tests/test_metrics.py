import json
import math
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_lcs, oracle_bleu, oracle_rouge_l
from rational_anon import agents
from rational_anon.agents import JudgeScores
from rational_anon.domain import (
    EPS_P,
    AttributeGuess,
    Document,
    IterationRecord,
    LeakFinding,
    MarginalRecord,
    Mode,
    PolicyAction,
    PolicySet,
    StopReason,
    Trajectory,
    Validity,
    load_schema,
)
from rational_anon.gateway import ScriptedBackend
from rational_anon.metrics import (
    DomainError,
    EmptyProtectedSet,
    bleu,
    cumulative_mrs,
    evaluate_trajectory,
    lcs_length,
    marginal_series,
    match_attribute,
    priv_score,
    rationality_gain,
    rouge_l_f1,
    summarize,
    tokenize,
    util_score,
)

REDDIT = load_schema("personal_reddit")
HEALTH = load_schema("health")
FIXTURES = Path(__file__).parent / "fixtures"

# Reference value for ref [the,cat,sat,on,the,mat], cand [the,cat,sat], from the
# oracle: orders 1..3 all precise, brevity penalty exp(1 - 6/3).
SHORT_CAND_BLEU = 0.36787944117144233


def random_pairs(n=200, seed=99, max_len=12, vocab="abcdef"):
    rng = random.Random(seed)
    pairs = []
    for _ in range(n):
        a = [rng.choice(vocab) for _ in range(rng.randrange(max_len + 1))]
        b = [rng.choice(vocab) for _ in range(rng.randrange(max_len + 1))]
        pairs.append((a, b))
    return pairs


# --- tokenizer -----------------------------------------------------------------


@pytest.mark.parametrize(
    "text, tokens",
    [
        ("The cat, sat.", ("the", "cat", "sat")),
        ("", ()),
        ("don't  stop", ("don't", "stop")),
        ("«Ciao», (hi)!! ...", ("ciao", "hi")),
    ],
)
def test_tokenize(text, tokens):
    assert tokenize(text).tokens == tokens


# --- structural similarity -----------------------------------------------------


def test_rouge_examples():
    assert rouge_l_f1(list("abcd"), list("abcd")) == 1.0
    assert rouge_l_f1(list("abc"), list("xyz")) == 0.0
    assert rouge_l_f1(list("abcd"), list("acde")) == pytest.approx(0.75, abs=1e-15)
    assert rouge_l_f1([], list("a")) == 0.0


def test_bleu_examples():
    seq = tokenize("the quick brown fox jumps over the lazy dog").tokens
    assert bleu(seq, seq) == 1.0
    assert bleu(seq, []) == 0.0
    ref = "the cat sat on the mat".split()
    assert bleu(ref, ["the", "cat", "sat"]) == pytest.approx(SHORT_CAND_BLEU, abs=1e-12)
    assert oracle_bleu(ref, ["the", "cat", "sat"]) == pytest.approx(SHORT_CAND_BLEU, abs=1e-12)


def test_bleu_disjoint_is_smoothing_floor():
    ref = [f"r{i}" for i in range(60)]
    cand = [f"c{i}" for i in range(60)]
    value = bleu(ref, cand)
    assert value == pytest.approx(1 / 120, abs=1e-15)
    assert value < 0.01


def test_lcs_against_oracle():
    for a, b in random_pairs(150, seed=3):
        assert lcs_length(a, b) == brute_force_lcs(a, b)


def test_rouge_bleu_against_oracles():
    for a, b in random_pairs(200, seed=11):
        assert abs(rouge_l_f1(a, b) - oracle_rouge_l(a, b)) <= 1e-9
        assert abs(bleu(a, b) - oracle_bleu(a, b)) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=12),
       st.lists(st.sampled_from("abcde"), max_size=12))
def test_similarity_bounds(a, b):
    assert 0.0 <= rouge_l_f1(a, b) <= 1.0
    assert 0.0 <= bleu(a, b) <= 1.0 + 1e-12
    assert rouge_l_f1(a, a) == 1.0
    assert bleu(a, a) == pytest.approx(1.0, abs=1e-12)
    assert rouge_l_f1(a, b) == pytest.approx(rouge_l_f1(b, a), abs=1e-15)


# --- attribute matching and PRIV ------------------------------------------------

PAIRS = json.loads((FIXTURES / "matching_pairs.json").read_text())


@pytest.mark.parametrize("pair", PAIRS, ids=[f"{p['attribute']}:{p['guess']}" for p in PAIRS])
def test_matching_corpus(pair):
    schema = HEALTH if pair["attribute"] == "health_issue" else REDDIT
    spec = schema.spec(pair["attribute"])
    assert match_attribute(spec, pair["guess"], pair["truth"]) is pair["match"]


def _guesses(mapping):
    return [AttributeGuess(a, v, v) for a, v in mapping.items()]


def test_priv_examples():
    protected = [(n, v) for n, v in zip(REDDIT.names, ["34", "male", "Dublin, Ireland", "Cork, Ireland",
                                                        "BSc", "nurse", "middle", "single"])]
    half = _guesses({"age": "34", "sex": "male", "current_city_country": "Ireland", "occupation": "nurse",
                     "education": "PhD", "income_level": "high", "relationship_status": "married"})
    assert priv_score(half, protected, REDDIT) == 0.5
    assert priv_score([], protected, REDDIT) == 0.0
    assert priv_score(_guesses({"age": "unknown"}), protected[:1], REDDIT) == 0.0
    assert priv_score(_guesses({"health_issue": "diabetes"}), [("health_issue", "diabetes")], HEALTH) == 1.0
    with pytest.raises(EmptyProtectedSet):
        priv_score([], [], REDDIT)


@settings(max_examples=100, deadline=None)
@given(st.permutations(["age", "sex", "occupation", "education"]), st.integers(0, 4))
def test_priv_order_invariant_and_monotone(order, n_right):
    protected = [("age", "34"), ("sex", "male"), ("occupation", "nurse"), ("education", "BSc")]
    truth = dict(protected)
    right = set(order[:n_right])
    guesses = [AttributeGuess(a, truth[a] if a in right else "zzz", "") for a in order]
    score = priv_score(guesses, protected, REDDIT)
    assert score == priv_score(list(reversed(guesses)), protected, REDDIT)
    assert score == n_right / 4
    if n_right < 4:
        better = set(order[: n_right + 1])
        more = [AttributeGuess(a, truth[a] if a in better else "zzz", "") for a in order]
        assert priv_score(more, protected, REDDIT) >= score


# --- UTIL ---------------------------------------------------------------------


def test_util_examples():
    assert util_score(JudgeScores(10, 10, 1)) == 1.0
    assert util_score(JudgeScores(5, 5, 0)) == pytest.approx(1 / 3, abs=1e-15)
    assert util_score(JudgeScores(1, 1, 0)) == pytest.approx(0.2 / 3, abs=1e-15)


def test_util_random_triples():
    rng = random.Random(5)
    for _ in range(1000):
        r, m, h = rng.randint(1, 10), rng.randint(1, 10), rng.randint(0, 1)
        assert abs(util_score(JudgeScores(r, m, h)) - (r / 10 + m / 10 + h) / 3) <= 1e-12


# --- marginals ---------------------------------------------------------------


def test_marginal_series_example():
    (m,) = marginal_series([0.5, 0.3], [1.0, 0.9])
    assert m.delta_p == pytest.approx(0.2) and m.delta_c == pytest.approx(0.1)
    assert m.mrs == pytest.approx(0.5)
    (flat,) = marginal_series([0.5, 0.5], [1.0, 0.9])
    assert math.isinf(flat.mrs)


def test_cumulative_mrs_examples():
    recs = [MarginalRecord.from_deltas(1, 0.1, 0.1), MarginalRecord.from_deltas(2, 0.0, 0.1)]
    assert cumulative_mrs(recs) == pytest.approx([1.0, 2.0])
    zero = [MarginalRecord.from_deltas(i, 0.0, 0.1) for i in range(1, 4)]
    assert cumulative_mrs(zero) == pytest.approx([0.1 / EPS_P, 0.2 / EPS_P, 0.3 / EPS_P])
    assert all(math.isfinite(v) for v in cumulative_mrs(zero))
    assert cumulative_mrs([]) == []


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), max_size=10), st.floats(0.1, 10))
def test_cumulative_mrs_scales_with_cost(deltas, k):
    recs = [MarginalRecord.from_deltas(i, dp, dc) for i, (dp, dc) in enumerate(deltas)]
    scaled = [MarginalRecord.from_deltas(i, dp, dc * k) for i, (dp, dc) in enumerate(deltas)]
    for a, b in zip(cumulative_mrs(recs), cumulative_mrs(scaled)):
        assert b == pytest.approx(a * k, rel=1e-9, abs=1e-9)


def test_rationality_gain():
    assert rationality_gain(3.80, 1.74) == pytest.approx(54.2, abs=0.1)
    assert rationality_gain(3.32, 1.10) == pytest.approx(66.9, abs=0.1)
    assert rationality_gain(2.0, 2.0) == 0.0
    for bad in (0.0, -1.0):
        with pytest.raises(DomainError):
            rationality_gain(bad, 1.0)


# --- trajectory evaluation ------------------------------------------------------

DOC = Document("d", "I am 34 and live in Dublin.", {"age": "34", "current_city_country": "Dublin, Ireland"},
               "personal_reddit")


def _rec(t, before, after, attrs):
    findings = tuple(LeakFinding(a, "r") for a in attrs)
    policy = PolicySet(tuple(PolicyAction(f, "c", Validity.HIGH) for f in findings)) if after != before else PolicySet()
    return IterationRecord(t, before, findings, (), (), policy, after)


def _traj(texts, stop=StopReason.EMPTY_POLICY):
    recs = [_rec(i, a, b, ["age"]) for i, (a, b) in enumerate(zip(texts, texts[1:]))]
    if stop is StopReason.EMPTY_POLICY:
        recs.append(_rec(len(recs), texts[-1], texts[-1], []))
    return Trajectory(DOC.id, texts[0], tuple(recs), texts[-1], stop, Mode.RLAA)


def _adversary():
    def respond(messages, request):
        text = messages[-1]["content"].split("[Comment]:\n")[1].split("\n\nYour response")[0]
        guess = {"age": "34" if "34" in text else "unknown",
                 "current_city_country": "Dublin, Ireland" if "Dublin" in text else "unknown"}
        return "Inference: reading.\nGuess: " + json.dumps(guess)

    return ScriptedBackend(respond)


def _judge():
    def respond(messages, request):
        adapted = messages[-1]["content"].split("Adapted text:\n")[1]
        meaning = 9 if "Dublin" in adapted else 7
        return json.dumps({"readability": {"explanation": "", "score": 10},
                           "meaning": {"explanation": "", "score": meaning},
                           "hallucinations": {"explanation": "", "score": 1}})

    return ScriptedBackend(respond)


TEXTS = ["I am 34 and live in Dublin.", "I am an adult and live in Dublin.", "I am an adult and live in a city."]


def test_evaluate_per_step():
    traj = _traj(TEXTS)
    adv, judge = _adversary(), _judge()
    rec = evaluate_trajectory(traj, DOC, judge, adv, REDDIT, per_step=True)
    assert len(rec.steps) == len(traj.records) + 1
    assert [s.priv for s in rec.steps] == [1.0, 0.5, 0.0, 0.0]
    assert rec.original.util == 1.0 and rec.original.rouge_l == 1.0 and rec.original.bleu == 1.0
    assert [m.t for m in rec.marginals] == [1, 2]
    assert sum(m.delta_p for m in rec.marginals) == pytest.approx(rec.original.priv - rec.final.priv, abs=1e-12)
    assert rec.marginals[0].delta_c == pytest.approx(1 - (1 + 0.9 + 1) / 3)
    # the empty-policy step reuses the previous scores without new calls
    assert adv.calls == 3 and judge.calls == 2


def test_evaluate_final_only():
    traj = _traj(TEXTS)
    adv, judge = _adversary(), _judge()
    rec = evaluate_trajectory(traj, DOC, judge, adv, REDDIT, per_step=False)
    assert [s.evaluated for s in rec.steps] == [True, False, False, True]
    assert len(rec.marginals) == 1 and rec.marginals[0].t == 3
    assert rec.marginals[0].delta_p == 1.0
    assert adv.calls == 2 and judge.calls == 1


def test_single_record_early_stop_has_no_marginals():
    traj = _traj(TEXTS[:1])
    rec = evaluate_trajectory(traj, DOC, _judge(), _adversary(), REDDIT, per_step=True)
    assert len(rec.steps) == 2
    assert rec.marginals == ()
    assert rec.final.util == 1.0 and rec.final.rouge_l == 1.0 and rec.final.bleu == 1.0


def test_failed_step_is_marked_missing():
    traj = _traj(TEXTS[:2], stop=StopReason.MAX_ITERATIONS)
    broken_judge = ScriptedBackend(["no json here"])
    rec = evaluate_trajectory(traj, DOC, broken_judge, _adversary(), REDDIT, retry_limit=1)
    assert rec.final.util is None and "judge" in rec.final.error
    assert rec.final.priv == 0.5
    assert rec.marginals == ()
    assert broken_judge.calls == 2


def test_summary_columns():
    recs = [evaluate_trajectory(_traj(TEXTS), DOC, _judge(), _adversary(), REDDIT, per_step=True),
            evaluate_trajectory(_traj(TEXTS[:1]), DOC, _judge(), _adversary(), REDDIT)]
    s = summarize(recs)
    for key in ("UTIL", "PRIV", "ROUGE", "BLEU", "MEAN", "READ", "HALL"):
        assert key in s
    assert s["original"]["UTIL"] == s["original"]["ROUGE"] == s["original"]["BLEU"] == 1.0
    assert s["PRIV"] == pytest.approx((0 + 2) / 4)
    assert s["mrs"]["n_documents_with_transitions"] == 1
    assert s["mrs"]["final_cumulative_macro"] == pytest.approx(recs[0].cumulative[-1])


def test_eval_record_round_trip():
    from rational_anon.metrics import EvalRecord

    rec = evaluate_trajectory(_traj(TEXTS), DOC, _judge(), _adversary(), REDDIT, per_step=True)
    assert EvalRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec
