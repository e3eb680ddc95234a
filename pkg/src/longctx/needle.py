"""Single- and multi-needle retrieval: haystack generation, response
scoring, and depth x length grid evaluation.

A haystack is filler prose of exactly context_len tokens total, with needle
sentences of the form "the magic number for <city> is <7 digits> ." inserted
at sentence boundaries nearest floor(depth * context_len), followed by a
chat-format question naming the requested cities. Scoring is string-based:
find each requested city in the decoded response and compare the nearest
following digit run against the expected number.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass
from itertools import islice

import numpy as np

from .data import answer_tokens, fact_sentence, find_facts, prose_tokens, question_tokens
from .vocab import DEFAULT_VOCAB, Vocab


class NeedleError(ValueError):
    pass


class HaystackSizeError(NeedleError):
    """Needles plus question do not fit in the requested context length."""


@dataclass(frozen=True)
class NeedleSpec:
    city: str
    magic_number: int
    insert_depth: float

    def __post_init__(self):
        if not (1_000_000 <= self.magic_number <= 9_999_999):
            raise NeedleError(f"magic_number must have 7 digits, got {self.magic_number}")
        if not (0.0 <= self.insert_depth <= 1.0):
            raise NeedleError(f"insert_depth must lie in [0, 1], got {self.insert_depth}")


@dataclass(frozen=True)
class MultiNeedleConfig:
    N: int = 1
    R: int = 1

    def __post_init__(self):
        if not (1 <= self.R <= self.N):
            raise NeedleError(f"need 1 <= R <= N, got N={self.N} R={self.R}")


@dataclass(frozen=True)
class RetrievalResult:
    per_city: dict
    score: float


def build_haystack(filler, needles, context_len: int, request=None,
                   vocab: Vocab = DEFAULT_VOCAB):
    """(prompt tokens, expected answers) of exactly context_len tokens.

    filler is any token iterable; exactly the needed number of tokens is
    consumed from it. request defaults to every needle's city; expected maps
    only the requested cities to their numbers.
    """
    needles = list(needles)
    if not needles:
        raise NeedleError("need at least one needle")
    cities = [n.city for n in needles]
    if len(set(cities)) != len(cities):
        raise NeedleError(f"cities must be distinct, got {cities}")
    numbers = [n.magic_number for n in needles]
    if len(set(numbers)) != len(numbers):
        raise NeedleError("magic numbers must be distinct")
    if request is None:
        request = list(cities)
    for c in request:
        if c not in cities:
            raise NeedleError(f"requested city {c!r} has no needle")

    question = _question_turn(request, vocab)
    needle_tokens = [fact_sentence(n.city, n.magic_number, vocab) for n in needles]
    filler_len = context_len - len(question) - sum(len(t) for t in needle_tokens)
    if filler_len < 0:
        raise HaystackSizeError(
            f"context_len {context_len} too small: needles+question need "
            f"{context_len - filler_len} tokens"
        )
    filler_part = list(islice(iter(filler), filler_len))
    if len(filler_part) < filler_len:
        raise NeedleError(f"filler stream exhausted: needed {filler_len} tokens")

    period = vocab.word_id(".")
    boundaries = [0] + [i + 1 for i, t in enumerate(filler_part) if t == period]
    order = sorted(range(len(needles)), key=lambda i: needles[i].insert_depth)
    inserted = 0
    last_b = 0
    insert_at = []
    for i in order:
        target = int(needles[i].insert_depth * context_len) - inserted
        # restrict to boundaries at or after the previous needle so final
        # offsets stay monotone in depth even when snaps land close together
        candidates = [x for x in boundaries if x >= last_b] or [boundaries[-1]]
        b = min(candidates, key=lambda x: abs(x - target))
        insert_at.append((b, i))
        inserted += len(needle_tokens[i])
        last_b = b

    prompt: list = []
    cursor = 0
    for b, i in insert_at:
        b = max(b, cursor)
        prompt.extend(filler_part[cursor:b])
        prompt.extend(needle_tokens[i])
        cursor = b
    prompt.extend(filler_part[cursor:])
    prompt.extend(question)
    if len(prompt) != context_len:
        raise NeedleError(f"internal length error: {len(prompt)} != {context_len}")
    expected = {n.city: n.magic_number for n in needles if n.city in set(request)}
    return prompt, expected


def _question_turn(request, vocab: Vocab) -> list:
    q = question_tokens(list(request), vocab)
    return [vocab.word_id("user"), vocab.word_id(":")] + q + [
        vocab.word_id("assistant"), vocab.word_id(":")
    ]


def sample_needles(rng: np.random.Generator, cfg: MultiNeedleConfig, depth=None,
                   vocab: Vocab = DEFAULT_VOCAB):
    """(needles, request): N distinct cities/numbers, R requested cities.

    depth=None draws each needle's depth uniformly; a float pins all of them
    (grid cells evaluate one depth at a time).
    """
    city_idx = rng.choice(len(vocab.cities), size=cfg.N, replace=False)
    cities = [vocab.cities[int(i)] for i in city_idx]
    numbers = []
    while len(numbers) < cfg.N:
        n = int(rng.integers(1_000_000, 10_000_000))
        if n not in numbers:
            numbers.append(n)
    needles = []
    for c, n in zip(cities, numbers):
        d = float(rng.uniform()) if depth is None else float(depth)
        needles.append(NeedleSpec(city=c, magic_number=n, insert_depth=d))
    request_idx = rng.permutation(cfg.N)[: cfg.R]
    request = [cities[int(i)] for i in request_idx]
    return needles, request


def make_needle_case(rng: np.random.Generator, context_len: int, cfg: MultiNeedleConfig,
                     depth=None, vocab: Vocab = DEFAULT_VOCAB):
    """Sampled haystack: (prompt tokens, expected answers, request order)."""
    needles, request = sample_needles(rng, cfg, depth=depth, vocab=vocab)
    filler = prose_tokens(rng, context_len, vocab)
    prompt, expected = build_haystack(filler, needles, context_len, request=request,
                                      vocab=vocab)
    return prompt, expected, request


_DIGIT_RUN = re.compile(r"[0-9]+")


def score_response(response: str, expected: dict) -> RetrievalResult:
    """Per-city string matching: nearest digit run after the city name.

    A city missing from the response, or with no following digit run, scores
    incorrect; an unparseable response scores 0 rather than erroring.
    """
    if not expected:
        raise NeedleError("expected answers must be non-empty")
    low = response.lower()
    per_city = {}
    correct = 0
    for city, number in expected.items():
        hit = re.search(r"\b" + re.escape(city.lower()) + r"\b", low)
        extracted = None
        if hit:
            run = _DIGIT_RUN.search(low, hit.end())
            if run:
                extracted = int(run.group())
        ok = extracted == number
        correct += int(ok)
        per_city[city] = {"expected": number, "extracted": extracted, "correct": ok}
    return RetrievalResult(per_city=per_city, score=correct / len(expected))


def score_tokens(tokens, expected: dict, vocab: Vocab = DEFAULT_VOCAB) -> RetrievalResult:
    return score_response(vocab.decode(tokens), expected)


def answer_budget(cfg: MultiNeedleConfig) -> int:
    """Token budget for a generated answer: R 'city is 7-digits .' clauses."""
    return 10 * cfg.R + 2


def grid_eval(model, depths, lengths, trials: int, cfg: MultiNeedleConfig, seed: int,
              vocab: Vocab = DEFAULT_VOCAB, csv_path=None, jsonl_path=None) -> list:
    """Mean retrieval score per (depth, length) cell.

    model is a generation callable: model(prompt_tokens, max_new, seed) ->
    generated tokens. A cell whose trials raise gets score nan and the run
    continues. Rows come back as dicts and optionally land in a CSV
    (header depth,length,score,trials) and a per-trial JSONL.
    """
    rows = []
    records = []
    for di, depth in enumerate(depths):
        for li, length in enumerate(lengths):
            scores = []
            for t in range(trials):
                rng = np.random.default_rng([seed, di, li, t])
                try:
                    prompt, expected, _ = make_needle_case(rng, int(length), cfg,
                                                           depth=float(depth), vocab=vocab)
                    generated = model(prompt, answer_budget(cfg), int(seed))
                    result = score_tokens(generated, expected, vocab)
                except Exception as exc:
                    records.append({
                        "depth": float(depth), "length": int(length), "trial": t,
                        "error": f"{type(exc).__name__}: {exc}",
                    })
                    scores = None
                    break
                scores.append(result.score)
                records.append({
                    "depth": float(depth), "length": int(length), "trial": t,
                    "prompt_sha256": hashlib.sha256(
                        np.asarray(prompt, dtype=np.int64).tobytes()).hexdigest(),
                    "expected": {c: r["expected"] for c, r in result.per_city.items()},
                    "extracted": {c: r["extracted"] for c, r in result.per_city.items()},
                    "correct": {c: r["correct"] for c, r in result.per_city.items()},
                    "score": result.score,
                })
            rows.append({
                "depth": float(depth), "length": int(length),
                "score": float("nan") if scores is None else float(np.mean(scores)),
                "trials": trials,
            })
    if csv_path is not None:
        write_grid_csv(rows, csv_path)
    if jsonl_path is not None:
        with open(jsonl_path, "w") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return rows


def write_grid_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["depth", "length", "score", "trials"])
        for r in rows:
            w.writerow([r["depth"], r["length"], r["score"], r["trials"]])


# --- reference models for harness tests ---------------------------------


class OracleModel:
    """Reads the planted facts back out of the prompt; scores 1.0 always."""

    def __init__(self, vocab: Vocab = DEFAULT_VOCAB):
        self.vocab = vocab

    def __call__(self, prompt, max_new: int, seed: int):
        facts = {city: number for _, city, number in find_facts(prompt, self.vocab)}
        request = _requested_cities(prompt, self.vocab)
        pairs = [(c, facts[c]) for c in request if c in facts]
        return answer_tokens(pairs, self.vocab)[:max_new]


class RandomDigitModel:
    """Answers with random digits; scores ~0 (7-digit match odds ~1e-7)."""

    def __init__(self, vocab: Vocab = DEFAULT_VOCAB):
        self.vocab = vocab

    def __call__(self, prompt, max_new: int, seed: int):
        rng = np.random.default_rng([seed, len(prompt)])
        request = _requested_cities(prompt, self.vocab)
        pairs = [(c, int(rng.integers(1_000_000, 10_000_000))) for c in request]
        return answer_tokens(pairs, self.vocab)[:max_new]


def _requested_cities(prompt, vocab: Vocab) -> list:
    """Cities named in the trailing question, in request order."""
    tokens = [int(t) for t in prompt]
    for_id = vocab.word_id("for")
    qmark = vocab.word_id("?")
    city_of = {cid: name for cid, name in zip(vocab.city_ids, vocab.cities)}
    try:
        q_end = len(tokens) - 1 - tokens[::-1].index(qmark)
    except ValueError:
        return []
    start = None
    for i in range(q_end - 1, -1, -1):
        if tokens[i] == for_id:
            start = i + 1
            break
    if start is None:
        return []
    return [city_of[t] for t in tokens[start:q_end] if t in city_of]
