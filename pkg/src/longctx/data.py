"""Synthetic corpus machinery: filtering, chunking, model-generated QA
construction, long-example assembly, and batch mixing.

Documents are deterministic filler prose with planted facts of the form
"the magic number for <city> is <7 digits> ." A template generator inverts
the plant into a question-answer pair, so every generated answer is
mechanically verifiable against its source chunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .packing import Example, SpecialTokens, default_special_tokens
from .vocab import DEFAULT_VOCAB, Vocab


class DataError(ValueError):
    pass


class QAGenerationError(DataError):
    """No extractable fact in the chunk; callers skip such chunks."""


class AssemblyError(DataError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) == 0:
            raise DataError(f"document {self.id} is empty")

    @property
    def length(self):
        return len(self.tokens)


@dataclass(frozen=True)
class QAItem:
    question: tuple
    answer: tuple
    source_chunk: int
    fact_key: str

    def __post_init__(self):
        object.__setattr__(self, "question", tuple(int(t) for t in self.question))
        object.__setattr__(self, "answer", tuple(int(t) for t in self.answer))
        if not self.question or not self.answer:
            raise DataError("question and answer must be non-empty")


# --- prose and fact templates -------------------------------------------


def prose_sentence(rng: np.random.Generator, vocab: Vocab = DEFAULT_VOCAB) -> list:
    """One filler sentence: 5..12 common words and a period."""
    k = int(rng.integers(5, 13))
    words = rng.choice(len(vocab.filler_ids), size=k)
    period = vocab.word_id(".")
    return [vocab.filler_ids[int(w)] for w in words] + [period]


def prose_tokens(rng: np.random.Generator, n: int, vocab: Vocab = DEFAULT_VOCAB) -> list:
    """Exactly n tokens of filler prose, truncated mid-sentence at the end."""
    out: list = []
    while len(out) < n:
        out.extend(prose_sentence(rng, vocab))
    return out[:n]


def fact_sentence(city: str, number: int, vocab: Vocab = DEFAULT_VOCAB) -> list:
    return vocab.encode(f"the magic number for {city} is {number} .")


def question_tokens(cities, vocab: Vocab = DEFAULT_VOCAB) -> list:
    """'what is the magic number for X ?' or the plural form for several."""
    if isinstance(cities, str):
        cities = [cities]
    if len(cities) == 1:
        return vocab.encode(f"what is the magic number for {cities[0]} ?")
    joined = " and ".join(cities)
    return vocab.encode(f"what are the magic numbers for {joined} ?")


def answer_tokens(pairs, vocab: Vocab = DEFAULT_VOCAB) -> list:
    """'X is 1234567 .' per requested city, concatenated in request order."""
    out = []
    for city, number in pairs:
        out.extend(vocab.encode(f"{city} is {number} ."))
    return out


def find_facts(tokens, vocab: Vocab = DEFAULT_VOCAB) -> list:
    """(offset, city, number) for each planted fact sentence, in order."""
    tokens = [int(t) for t in tokens]
    head = [vocab.word_id(w) for w in ("the", "magic", "number", "for")]
    is_id = vocab.word_id("is")
    period = vocab.word_id(".")
    digit_of = {vocab.word_id(str(d)): d for d in range(10)}
    city_of = {cid: name for cid, name in zip(vocab.city_ids, vocab.cities)}
    out = []
    i = 0
    n = len(tokens)
    while i + len(head) + 3 <= n:
        if tokens[i : i + 4] == head and tokens[i + 4] in city_of and tokens[i + 5] == is_id:
            j = i + 6
            digits = []
            while j < n and tokens[j] in digit_of:
                digits.append(digit_of[tokens[j]])
                j += 1
            if digits and j < n and tokens[j] == period:
                number = int("".join(str(d) for d in digits))
                out.append((i, city_of[tokens[i + 4]], number))
                i = j + 1
                continue
        i += 1
    return out


# --- corpus -------------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    num_docs: int = 64
    min_len: int = 64
    max_len: int = 8192
    mean_fact_gap: int = 48  # mean filler tokens between planted facts
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.min_len < self.max_len):
            raise DataError("need 0 < min_len < max_len")
        if self.mean_fact_gap < 8:
            raise DataError("mean_fact_gap too small for distinct sentences")


def make_corpus(config: CorpusConfig, vocab: Vocab = DEFAULT_VOCAB) -> list:
    """Deterministic synthetic documents, log-uniform lengths, planted facts.

    Cities are unique within a document so fact extraction is unambiguous.
    """
    docs = []
    for d in range(config.num_docs):
        rng = np.random.default_rng([config.seed, d])
        log_len = rng.uniform(math.log(config.min_len), math.log(config.max_len))
        target = int(round(math.exp(log_len)))
        cities = list(vocab.cities)
        rng.shuffle(cities)
        tokens: list = []
        next_fact = int(rng.integers(4, config.mean_fact_gap))
        while len(tokens) < target:
            if len(tokens) >= next_fact and cities:
                city = cities.pop()
                number = int(rng.integers(1_000_000, 10_000_000))
                tokens.extend(fact_sentence(city, number, vocab))
                next_fact = len(tokens) + int(rng.integers(config.mean_fact_gap // 2,
                                                           config.mean_fact_gap * 3 // 2 + 1))
            else:
                tokens.extend(prose_sentence(rng, vocab))
        docs.append(Document(id=f"doc{d:05d}", tokens=tokens[:target]))
    return docs


def filter_docs(docs, min_len: int, max_len=None) -> list:
    """Documents with min_len <= length < max_len, original order kept."""
    if max_len is not None and min_len >= max_len:
        raise DataError(f"min_len {min_len} must be < max_len {max_len}")
    return [d for d in docs if d.length >= min_len and (max_len is None or d.length < max_len)]


def chunk_document(doc: Document, chunk_len: int) -> list:
    """Consecutive non-overlapping chunks; final partial kept if >= half."""
    if chunk_len < 1:
        raise DataError(f"chunk_len must be >= 1, got {chunk_len}")
    chunks = []
    for start in range(0, doc.length, chunk_len):
        piece = doc.tokens[start : start + chunk_len]
        if len(piece) == chunk_len or 2 * len(piece) >= chunk_len:
            chunks.append(tuple(piece))
    return chunks


# --- QA generation ------------------------------------------------------


class TemplateQAGenerator:
    """Inverts the first planted fact of a chunk into a QA pair.

    Stands in for the short-context language model that writes QA pairs at
    full scale; anything with the same call signature can replace it.
    """

    def __init__(self, vocab: Vocab = DEFAULT_VOCAB):
        self.vocab = vocab

    def __call__(self, chunk):
        facts = find_facts(chunk, self.vocab)
        if not facts:
            raise QAGenerationError("chunk contains no extractable fact")
        _, city, number = facts[0]  # tie-break: first fact by offset
        return (
            tuple(question_tokens(city, self.vocab)),
            tuple(answer_tokens([(city, number)], self.vocab)),
            city,
        )


def generate_qa(chunk, generator, source_chunk: int = 0) -> QAItem:
    question, answer, fact_key = generator(chunk)
    return QAItem(question=question, answer=answer, source_chunk=source_chunk, fact_key=fact_key)


def verify_qa(item: QAItem, chunk, vocab: Vocab = DEFAULT_VOCAB) -> bool:
    """True iff the answer restates a fact actually present in the chunk."""
    facts = {city: number for _, city, number in find_facts(chunk, vocab)}
    answered = {city: number for _, city, number in find_answer_pairs(item.answer, vocab)}
    if not answered:
        return False
    return all(city in facts and facts[city] == number for city, number in answered.items())


def find_answer_pairs(tokens, vocab: Vocab = DEFAULT_VOCAB) -> list:
    """(offset, city, number) for each '<city> is <digits>' span."""
    tokens = [int(t) for t in tokens]
    is_id = vocab.word_id("is")
    digit_of = {vocab.word_id(str(d)): d for d in range(10)}
    city_of = {cid: name for cid, name in zip(vocab.city_ids, vocab.cities)}
    out = []
    for i, t in enumerate(tokens):
        if t in city_of and i + 1 < len(tokens) and tokens[i + 1] == is_id:
            j = i + 2
            digits = []
            while j < len(tokens) and tokens[j] in digit_of:
                digits.append(digit_of[tokens[j]])
                j += 1
            if digits:
                out.append((i, city_of[t], int("".join(str(d) for d in digits))))
    return out


# --- long-example assembly ----------------------------------------------


@dataclass(frozen=True)
class ChatTemplate:
    """Turn markers rendered as ordinary tokens: 'user : ... assistant : ...'."""

    vocab: Vocab = DEFAULT_VOCAB

    def user_turn(self, question) -> list:
        v = self.vocab
        return [v.word_id("user"), v.word_id(":")] + list(question) + [
            v.word_id("assistant"), v.word_id(":")
        ]


DEFAULT_CHAT = ChatTemplate()


def assemble_long_example(chunks, qa_items, target_len: int,
                          chat_template: ChatTemplate = DEFAULT_CHAT,
                          sp: SpecialTokens = None) -> Example:
    """Concatenated chunks, then chat turns with loss only on answers.

    The first turn's user half joins the context span; each answer carries
    loss and ends with eos; later user turns ride along loss-free.
    """
    if sp is None:
        sp = default_special_tokens()
    if not qa_items:
        raise AssemblyError("refusing to assemble an example with no QA pairs (no supervision)")
    context = [sp.bos]
    for c in chunks:
        context.extend(int(t) for t in c)
    turns = []
    for item in qa_items:
        turns.append((chat_template.user_turn(item.question), False))
        turns.append((list(item.answer) + [sp.eos], True))
    total = len(context) + sum(len(t) for t, _ in turns)
    if total > target_len:
        raise AssemblyError(
            f"assembly overflow: {len(context)} context + "
            f"{total - len(context)} chat tokens > target {target_len}"
        )
    context.extend(turns[0][0])
    answer = turns[1][0]
    extra = tuple((tuple(t), flag) for t, flag in turns[2:])
    return Example(
        context_tokens=tuple(context), answer_tokens=tuple(answer),
        modality="text", extra_spans=extra,
    )


def loss_token_fraction(example: Example) -> float:
    return example.loss_token_count / len(example)


def qa_examples_from_corpus(docs, chunk_len: int, target_len: int, qa_pairs: int,
                            seed: int, vocab: Vocab = DEFAULT_VOCAB,
                            generator=None, max_examples=None) -> list:
    """Long QA examples: adjacent chunk groups with QA pairs appended.

    Walks each document's chunks in order, grouping as many adjacent chunks
    as leave room for qa_pairs chat turns, then asks qa_pairs of the group's
    chunks (sampled without replacement, shuffled) for their first fact.
    """
    if generator is None:
        generator = TemplateQAGenerator(vocab)
    sp = default_special_tokens()
    out = []
    for doc in docs:
        rng = np.random.default_rng([seed, len(out), doc.length])
        chunks = chunk_document(doc, chunk_len)
        budget = target_len - 1 - qa_pairs * 32  # bos + headroom for chat turns
        group: list = []
        used = 0
        for idx, chunk in enumerate(chunks):
            if used + len(chunk) > budget and group:
                ex = _assemble_group(group, qa_pairs, rng, generator, target_len, sp)
                if ex is not None:
                    out.append(ex)
                    if max_examples is not None and len(out) >= max_examples:
                        return out
                group, used = [], 0
            if len(chunk) <= budget:
                group.append(chunk)
                used += len(chunk)
        if group:
            ex = _assemble_group(group, qa_pairs, rng, generator, target_len, sp)
            if ex is not None:
                out.append(ex)
                if max_examples is not None and len(out) >= max_examples:
                    return out
    return out


def _assemble_group(group, qa_pairs, rng, generator, target_len, sp):
    askable = []
    for i, chunk in enumerate(group):
        try:
            askable.append(generate_qa(chunk, generator, source_chunk=i))
        except QAGenerationError:
            continue
    if len(askable) < qa_pairs:
        return None
    order = rng.permutation(len(askable))[:qa_pairs]
    items = [askable[int(i)] for i in order]
    try:
        return assemble_long_example(group, items, target_len, sp=sp)
    except AssemblyError:
        return None


# --- batch mixing -------------------------------------------------------


@dataclass(frozen=True)
class MixSpec:
    chat_fraction: float = 0.7
    qa_fraction: float = 0.3
    pure_text_fraction: float = 0.16
    task_quarters: tuple = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self):
        fracs = [self.chat_fraction, self.qa_fraction, self.pure_text_fraction, *self.task_quarters]
        if any(f < 0 or f > 1 for f in fracs):
            raise DataError("all fractions must lie in [0, 1]")
        if abs(self.chat_fraction + self.qa_fraction - 1.0) > 1e-9:
            raise DataError("chat_fraction + qa_fraction must equal 1")
        if len(self.task_quarters) != 4 or abs(sum(self.task_quarters) - 1.0) > 1e-9:
            raise DataError("task_quarters must be four fractions summing to 1")

    def text_regime(self) -> dict:
        return {"chat": self.chat_fraction, "qa": self.qa_fraction}

    def vision_regime(self, include_text: bool = True) -> dict:
        """16% pure text carved out, the rest split across the four tasks."""
        text = self.pure_text_fraction if include_text else 0.0
        out = {f"task{i}": q * (1.0 - text) for i, q in enumerate(self.task_quarters)}
        if include_text:
            out["text"] = text
        return out


def apportion(fractions: dict, batch_size: int, rng: np.random.Generator) -> dict:
    """Largest-remainder slot counts; every count within 1 of its target."""
    names = sorted(fractions)
    targets = {n: fractions[n] * batch_size for n in names}
    counts = {n: int(math.floor(targets[n])) for n in names}
    leftover = batch_size - sum(counts.values())
    tiebreak = {n: int(r) for n, r in zip(names, rng.permutation(len(names)))}
    by_remainder = sorted(names, key=lambda n: (-(targets[n] - counts[n]), tiebreak[n]))
    for n in by_remainder[:leftover]:
        counts[n] += 1
    return counts


def mix_batches(pools: dict, fractions: dict, batch_size: int, seed: int, num_batches=None):
    """Deterministic batch stream honoring the given pool fractions.

    Yields lists of (pool_name, item); realized composition is within one
    example of fraction * batch_size for every pool in every batch.
    """
    for name, frac in fractions.items():
        if frac > 0 and name not in pools:
            raise DataError(f"no pool named {name!r} for fraction {frac}")
    iters = {name: iter(p) for name, p in pools.items()}
    b = 0
    while num_batches is None or b < num_batches:
        rng = np.random.default_rng([seed, b])
        counts = apportion(fractions, batch_size, rng)
        slots = [name for name in sorted(counts) for _ in range(counts[name])]
        order = rng.permutation(len(slots))
        batch = []
        for i in order:
            name = slots[int(i)]
            try:
                batch.append((name, next(iters[name])))
            except StopIteration:
                raise DataError(f"pool {name!r} ran out of examples at batch {b}")
        yield batch
        b += 1
