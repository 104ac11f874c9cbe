"""Synthetic fixtures: a toy vocabulary, score spaces and annotated image records.

Toy vocabulary (32 ids):

* 0..19   content tokens; each carries a fixed hidden quality value in [0, 1]
* 20      answer label "0"
* 21..25  answer labels "1".."5"
* 26      separator between image tokens and the queried element
* 27..31  unused

The synthetic total score of a token sequence is ``1 + 4 * mean(quality)``,
plus a per-generator offset for records (the offset is not visible in the
tokens, only in the ``t2i_model`` field).
"""
from __future__ import annotations

import zlib

import numpy as np

from .dataset import ElementAnnotation, ElementCategory, PromptType, SampleRecord
from .score_core import ScoreSpace, TaskKind

VOCAB_SIZE = 32
N_CONTENT = 20
LABEL_ZERO = 20
SEP = 26
SEQ_LEN = 6

TOKEN_QUALITY = np.random.default_rng(20250417).permutation(np.linspace(0.0, 1.0, N_CONTENT))
TOKEN_QUALITY.setflags(write=False)

# Total score in 1..5, element score in {0, 1} (the annotation ranges).
TOTAL_SPACE = ScoreSpace.from_lists(range(21, 26), [1, 2, 3, 4, 5], TaskKind.TOTAL)
ELEMENT_SPACE = ScoreSpace.from_lists([20, 21], [0, 1], TaskKind.ELEMENT)
# The alternative label assignment: total in {1, 2}, element in 1..5.
ALT_TOTAL_SPACE = ScoreSpace.from_lists([21, 22], [1, 2], TaskKind.TOTAL)
ALT_ELEMENT_SPACE = ScoreSpace.from_lists(range(21, 26), [1, 2, 3, 4, 5], TaskKind.ELEMENT)

GENERATORS = {"gen-alpha": 0.35, "gen-beta": 0.0, "gen-gamma": -0.35}
CATEGORIES = (ElementCategory.OBJECT, ElementCategory.ACTION, ElementCategory.ATTRIBUTE)


def token_target(tokens) -> float:
    return 1.0 + 4.0 * float(np.mean(TOKEN_QUALITY[np.asarray(tokens)]))


def make_token_task(n: int, seed: int, length: int = SEQ_LEN):
    """``n`` (tokens, target) pairs; the target is a fixed function of the tokens."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        tokens = rng.integers(0, N_CONTENT, size=length)
        out.append((tokens, token_target(tokens)))
    return out


def _stable_token(word: str) -> int:
    return zlib.crc32(word.encode("utf-8")) % N_CONTENT


def record_tokens(record: SampleRecord) -> np.ndarray:
    """Image tokens of a record.

    ``synth://3-7-12`` refs decode directly; any other ref is hashed word by
    word together with the prompt so real-looking records still map to tokens.
    """
    ref = record.image_ref
    if ref.startswith("synth://"):
        return np.array([int(t) for t in ref[len("synth://"):].split("-")], dtype=np.int64)
    words = record.prompt_text.split() + [ref]
    return np.array([_stable_token(w) for w in words], dtype=np.int64)


def element_token(text: str) -> int:
    if text.startswith("tok") and text[3:].isdigit() and int(text[3:]) < N_CONTENT:
        return int(text[3:])
    return _stable_token(text)


def element_tokens(record: SampleRecord, index: int) -> np.ndarray:
    e = record.elements[index]
    return np.concatenate([record_tokens(record), [SEP, element_token(e.text)]]).astype(np.int64)


def make_records(n_prompts: int, per_prompt: int, seed: int, prefix: str = "p",
                 generators=None) -> list[SampleRecord]:
    """Annotated image records with total and per-element scores.

    Every prompt gets ``per_prompt`` images, one generator each in rotation.
    """
    generators = dict(GENERATORS if generators is None else generators)
    names = sorted(generators)
    rng = np.random.default_rng(seed)
    records = []
    width = max(4, len(str(n_prompts)))
    for i in range(n_prompts):
        pid = f"{prefix}{i:0{width}d}"
        asked = rng.choice(N_CONTENT, size=3, replace=False)
        words = [f"tok{t}" for t in asked]
        text = f"a picture of {words[0]} next to {words[1]} with {words[2]}"
        ptype = PromptType.REAL if rng.random() < 0.6 else PromptType.SYNTHETIC
        quality = round(float(rng.uniform(0.2, 1.0)), 3) if rng.random() < 0.5 else None
        for j in range(per_prompt):
            gen = names[(i + j) % len(names)]
            tokens = rng.integers(0, N_CONTENT, size=SEQ_LEN)
            for slot, t in enumerate(asked):
                if rng.random() < 0.5:
                    tokens[slot] = t
            present = set(tokens.tolist())
            total = token_target(tokens) + generators[gen]
            total = float(min(5.0, max(1.0, round(total, 4))))
            elements = []
            for k, t in enumerate(asked):
                hit = int(t) in present
                score = float(rng.choice([1.0, 2 / 3], p=[0.8, 0.2]) if hit
                              else rng.choice([0.0, 1 / 3], p=[0.8, 0.2]))
                elements.append(ElementAnnotation(words[k], CATEGORIES[k], round(score, 4)))
            records.append(SampleRecord(
                sample_id=f"{pid}-{j}",
                prompt_id=pid,
                prompt_text=text,
                t2i_model=gen,
                prompt_type=ptype,
                image_ref="synth://" + "-".join(str(t) for t in tokens),
                total_score=total,
                elements=tuple(elements),
                prompt_quality=quality,
            ))
    return records


def total_samples(records):
    """(tokens, total_score) training pairs for the total-score task."""
    return [(record_tokens(r), r.total_score) for r in records]


def element_samples(records):
    """(tokens, element score) pairs, one per annotated element."""
    return [(element_tokens(r, i), e.score) for r in records for i, e in enumerate(r.elements)]
