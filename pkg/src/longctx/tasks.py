"""Ready-made training tasks wiring the pipeline together.

Two toy reproductions live here: the progressive needle-retrieval run
(stages 256 -> 512 -> 1024 -> 2048 with theta scaled in proportion to the
context length) and the planted text-to-vision association used to exercise
classifier-free guidance. Both are deterministic per (seed, step).
"""

from __future__ import annotations

import numpy as np

from .model import ModelConfig, Transformer
from .needle import MultiNeedleConfig, make_needle_case, answer_budget
from .packing import Example, pack_examples, default_special_tokens
from .trainer import StagePlan, progressive_run, sample
from .vocab import DEFAULT_VOCAB, VISION_CODE_START, BOS_ID, VISION_OPEN_ID
from . import vocab as V


def default_model_config() -> ModelConfig:
    return ModelConfig(layers=2, model_dim=64, heads=4, head_dim=16,
                       vocab=V.VOCAB_SIZE, max_context=4096)


# --- needle pretraining -------------------------------------------------


MIN_CASE_LEN = 64

# four 14-token needle sentences plus a plural question and a two-clause
# answer need just over 90 tokens, so only cases this long host them
MULTI_CASE_MIN_LEN = 128


def needle_training_example(rng: np.random.Generator, case_len: int,
                            cfg: MultiNeedleConfig, vocab=DEFAULT_VOCAB) -> Example:
    """One retrieval example of exactly case_len tokens.

    The haystack (with its trailing question) is loss-free context; the
    answer clauses plus eos carry the loss, in the question's request order.
    """
    sp = default_special_tokens()
    answer_len = 10 * cfg.R + 1  # per-city clause is 10 tokens; plus eos
    context_len = case_len - answer_len
    prompt, expected, request = make_needle_case(rng, context_len, cfg, vocab=vocab)
    answer = []
    for city in request:
        answer.extend(vocab.encode(f"{city} is {expected[city]} ."))
    answer.append(sp.eos)
    return Example(context_tokens=tuple(prompt), answer_tokens=tuple(answer))


def needle_training_sequence(rng: np.random.Generator, seq_len: int,
                             multi_fraction: float = 0.25, min_case=None,
                             vocab=DEFAULT_VOCAB):
    """One packed training sequence of exactly seq_len tokens.

    Case length is drawn from the powers of two in [min_case, seq_len]
    (min_case defaults to MIN_CASE_LEN) and seq_len // case_len cases are
    packed together, so later stages keep rehearsing every shorter retrieval
    length (and every relative offset the evaluation grid will probe) at the
    stage's own rotary base. Raising min_case concentrates a stage on its
    longest retrieval distances. A multi_fraction share of cases long enough
    to host four needles plant 4 and ask for 2, teaching the plural question
    form.
    """
    sp = default_special_tokens()
    classes = []
    case = min(MIN_CASE_LEN if min_case is None else int(min_case), seq_len)
    while case <= seq_len:
        classes.append(case)
        case *= 2
    case_len = int(classes[int(rng.integers(0, len(classes)))])
    examples = []
    for _ in range(seq_len // case_len):
        multi = rng.random() < multi_fraction and case_len >= MULTI_CASE_MIN_LEN
        cfg = MultiNeedleConfig(N=4, R=2) if multi else MultiNeedleConfig(N=1, R=1)
        examples.append(needle_training_example(rng, case_len, cfg, vocab=vocab))
    return pack_examples(examples, seq_len, sp)


def needle_batch_fn(seq_len: int, seqs_per_batch: int, seed: int,
                    multi_fraction: float = 0.25, min_case=None,
                    vocab=DEFAULT_VOCAB):
    def fn(step: int):
        return [
            needle_training_sequence(
                np.random.default_rng([seed, step, b]), seq_len,
                multi_fraction=multi_fraction, min_case=min_case, vocab=vocab,
            )
            for b in range(seqs_per_batch)
        ]

    return fn


def reference_plans() -> list:
    """Full-scale stage preset: 32K -> 1M context doubling with matched theta.

    Batch size targets four million tokens, rounded to a whole number of
    sequences. Step counts, warmups, the constant 4e-5 learning rate, and
    the per-stage document-length filters follow the large-run recipe the
    toy curriculum miniaturizes.
    """
    names = ["32k", "128k", "256k", "512k", "1m"]
    seq_lens = [2 ** 15, 2 ** 17, 2 ** 18, 2 ** 19, 2 ** 20]
    steps = [1200, 3000, 3000, 720, 450]
    warmups = [100, 200, 200, 50, 25]
    filters = [(10_000, 100_000), (100_000, 200_000), (200_000, 500_000),
               (500_000, 1_000_000), (1_000_000, None)]
    plans = []
    prev = None
    for name, sl, st, wu, flt in zip(names, seq_lens, steps, warmups, filters):
        batch = max(1, round(4_000_000 / sl)) * sl
        plans.append(StagePlan(
            name=name, seq_len=sl, tokens_per_batch=batch, total_tokens=st * batch,
            init_from=prev, data_filter=flt, lr_schedule="constant",
            warmup_steps=wu, max_lr=4e-5, min_lr=4e-5,
        ))
        prev = name
    return plans


def default_needle_plans(scale: float = 1.0) -> list:
    """The tuned 4-stage curriculum; scale shrinks step counts for smokes.

    The first stage carries nearly all the compute: the retrieval circuit
    forms late (a sharp loss drop after a long plateau), and cosine decay
    down to max_lr/10 is what pins the final digits. Later stages only
    adapt that circuit to a doubled context and rotary base, which takes
    a small fraction of the steps at a sixth of the peak rate.
    """

    def steps(n):
        return max(2, int(round(n * scale)))

    plans = []
    prev = None
    for name, sl, bs, st, wu, lr in [
        ("s256", 256, 8, 4000, 30, 3e-3),
        ("s512", 512, 4, 600, 20, 5e-4),
        ("s1024", 1024, 2, 450, 15, 5e-4),
        ("s2048", 2048, 1, 400, 10, 5e-4),
    ]:
        plans.append(StagePlan(
            name=name, seq_len=sl, tokens_per_batch=bs * sl,
            total_tokens=steps(st) * bs * sl, init_from=prev,
            warmup_steps=wu, data_filter=(MIN_CASE_LEN, sl),
            lr_schedule="cosine", max_lr=lr, min_lr=lr / 10,
        ))
        prev = name
    return plans


def train_needle_model(out_dir=None, seed: int = 0, plans=None, model_config=None,
                       dtype=np.float32, multi_fraction: float = 0.25, on_step=None,
                       parallelism="single", clock=None):
    """Run the full progressive needle curriculum; returns (model, ckpts, metrics)."""
    if plans is None:
        plans = default_needle_plans()
    if model_config is None:
        model_config = default_model_config()
    model = Transformer(model_config, dtype=dtype, seed=seed)

    def factory(plan: StagePlan):
        lo = plan.data_filter[0] if plan.data_filter else None
        return needle_batch_fn(plan.seq_len, plan.seqs_per_batch, seed,
                               multi_fraction=multi_fraction, min_case=lo)

    ckpts, metrics = progressive_run(model, plans, factory, out_dir=out_dir,
                                     seed=seed, parallelism=parallelism,
                                     on_step=on_step, clock=clock)
    return model, ckpts, metrics


# --- planted text-to-vision association (guidance task) ------------------

CFG_CLASSES = ("red", "blue")
CFG_CODES_PER_CLASS = 8


def cfg_class_codes(class_index: int) -> range:
    start = VISION_CODE_START + class_index * CFG_CODES_PER_CLASS
    return range(start, start + CFG_CODES_PER_CLASS)


def cfg_model_config() -> ModelConfig:
    return ModelConfig(layers=2, model_dim=32, heads=2, head_dim=16,
                       vocab=V.VOCAB_SIZE, max_context=1024)


def cfg_training_sequence(rng: np.random.Generator, target_len: int = 272,
                          uncond_fraction: float = 0.3, vocab=DEFAULT_VOCAB):
    """[bos, (class word,) <vision>, 256 class codes, <eov>, </vision>, eos].

    An uncond_fraction share drops the class word, training the
    unconditional branch that guidance contrasts against.
    """
    sp = default_special_tokens()
    cls = int(rng.integers(0, len(CFG_CLASSES)))
    codes = cfg_class_codes(cls)
    frame = [int(codes[int(i)]) for i in rng.integers(0, len(codes), size=V.FRAME_TOKENS)]
    uncond = rng.random() < uncond_fraction
    context = [sp.bos]
    if not uncond:
        context.append(vocab.word_id(CFG_CLASSES[cls]))
    context.append(sp.vision_open)
    answer = frame + [sp.eov, sp.vision_close, sp.eos]
    ex = Example(context_tokens=tuple(context), answer_tokens=tuple(answer),
                 modality="image")
    return pack_examples([ex], target_len, sp)


def cfg_batch_fn(seqs_per_batch: int, seed: int, target_len: int = 272,
                 uncond_fraction: float = 0.3):
    def fn(step: int):
        return [
            cfg_training_sequence(np.random.default_rng([seed, step, b]),
                                  target_len=target_len,
                                  uncond_fraction=uncond_fraction)
            for b in range(seqs_per_batch)
        ]

    return fn


def cfg_stage_plan(steps: int = 120) -> StagePlan:
    return StagePlan(name="guidance", seq_len=512, tokens_per_batch=2 * 512,
                     total_tokens=steps * 2 * 512, lr_schedule="cosine",
                     warmup_steps=10, max_lr=3e-3, min_lr=3e-4, rope_theta=1e4)


def train_cfg_model(seed: int = 0, steps: int = 120, dtype=np.float32, out_dir=None,
                    parallelism="single", clock=None):
    """Train the association toy; returns (model, checkpoint, metrics)."""
    from .trainer import train_stage

    plan = cfg_stage_plan(steps)
    model = Transformer(cfg_model_config(), dtype=dtype, seed=seed)

    def batch_fn(step):
        # sequences are 272 tokens but the plan accounts a power-of-two length;
        # the loop only uses the plan for step count and schedule shape
        return cfg_batch_fn(2, seed)(step)

    ckpt, metrics = train_stage(model, plan, batch_fn, seed=seed,
                                parallelism=parallelism, clock=clock)
    if out_dir is not None:
        import os
        from .trainer import save_checkpoint, write_metrics_csv

        save_checkpoint(os.path.join(out_dir, "guidance.ckpt"), ckpt)
        write_metrics_csv(os.path.join(out_dir, "metrics_guidance.csv"), metrics)
    return model, ckpt, metrics


def cfg_prompt(class_name: str, vocab=DEFAULT_VOCAB) -> list:
    if class_name not in CFG_CLASSES:
        raise ValueError(f"unknown class {class_name!r}")
    return [BOS_ID, vocab.word_id(class_name), VISION_OPEN_ID]


def class_token_frequency(tokens, class_index: int) -> float:
    """Share of the generated frame's code tokens in the class's range."""
    codes = set(cfg_class_codes(class_index))
    frame = [int(t) for t in tokens[: V.FRAME_TOKENS]]
    if not frame:
        return 0.0
    return sum(1 for t in frame if t in codes) / len(frame)


def cfg_frequency_sweep(model: Transformer, scales, samples: int = 20,
                        seed: int = 0, theta: float = 1e4) -> dict:
    """Mean conditional-class frequency per guidance scale.

    Every sample prompts with a class word and generates one frame; the
    frequency counts generated codes landing in the prompted class's range.
    """
    out = {}
    for scale in scales:
        freqs = []
        for s in range(samples):
            cls = s % len(CFG_CLASSES)
            prompt = cfg_prompt(CFG_CLASSES[cls])
            generated = sample(model, prompt, max_new=V.FRAME_TOKENS,
                               cfg_scale=float(scale), temperature=1.0,
                               seed=seed * 100_003 + s, theta=theta)
            freqs.append(class_token_frequency(generated, cls))
        out[float(scale)] = float(np.mean(freqs))
    return out
