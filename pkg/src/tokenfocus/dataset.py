"""Annotation records, prompt construction, prompt-disjoint folds, external distributions.

File formats (UTF-8, one JSON object per line). The first line is a header
``{"format": <name>, "version": 1}``; an empty file holds no records.

``sample-records`` lines::

    {"sample_id": str, "prompt_id": str, "prompt_text": str, "t2i_model": str,
     "prompt_type": "real" | "synthetic", "prompt_quality": float in [0,1] (optional),
     "prompt_eval": {name: float in [0,1]} (optional), "image_ref": str,
     "total_score": float in [1,5],
     "elements": [{"text": str, "category": "object"|"action"|"attribute",
                   "score": float in [0,1]}, ...]}

``external-distributions`` lines::

    {"sample_id": str, "task": "total" | "element", "element_index": int (element only),
     "score_token_probs": {token_id: prob} (optional),
     "score_token_logits": {token_id: logit} (optional)}
"""
from __future__ import annotations

import enum
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DatasetParseError, InputError
from .score_core import (
    ProjectionMode,
    ScoreDistribution,
    ScoreSpace,
    TaskKind,
    expected_score,
    renormalize,
)

SAMPLES_FORMAT = "sample-records"
EXTERNAL_FORMAT = "external-distributions"
PLAN_FORMAT = "fold-plan"
FORMAT_VERSION = 1

# Prompt-evaluation sub-fields admitted in ``prompt_eval``.
PROMPT_EVAL_FIELDS = (
    "semantic_clarity",
    "generability",
    "division_clarity",
    "segmentation_confidence",
    "attribute_confidence",
)


class PromptType(str, enum.Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


class ElementCategory(str, enum.Enum):
    OBJECT = "object"
    ACTION = "action"
    ATTRIBUTE = "attribute"


@dataclass(frozen=True)
class ElementAnnotation:
    text: str
    category: ElementCategory
    score: float

    def __post_init__(self):
        object.__setattr__(self, "category", ElementCategory(self.category))
        if not (0.0 <= self.score <= 1.0):
            raise InputError(f"element score {self.score} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"text": self.text, "category": self.category.value, "score": self.score}


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    prompt_id: str
    prompt_text: str
    t2i_model: str
    prompt_type: PromptType
    image_ref: str
    total_score: float
    elements: tuple[ElementAnnotation, ...] = ()
    prompt_quality: float | None = None
    prompt_eval: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "prompt_type", PromptType(self.prompt_type))
        object.__setattr__(self, "elements", tuple(self.elements))
        if isinstance(self.prompt_eval, Mapping):
            object.__setattr__(self, "prompt_eval", tuple(self.prompt_eval.items()))
        if not self.sample_id:
            raise InputError("sample_id must be non-empty")
        if not self.prompt_id:
            raise InputError("prompt_id must be non-empty")
        if not (1.0 <= self.total_score <= 5.0):
            raise InputError(f"total_score {self.total_score} outside [1, 5]")
        if self.prompt_quality is not None and not (0.0 <= self.prompt_quality <= 1.0):
            raise InputError(f"prompt_quality {self.prompt_quality} outside [0, 1]")
        for name, v in self.prompt_eval:
            if name not in PROMPT_EVAL_FIELDS:
                raise InputError(f"unknown prompt_eval field {name!r}")
            if not (0.0 <= v <= 1.0):
                raise InputError(f"prompt_eval.{name} {v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "prompt_id": self.prompt_id,
            "prompt_text": self.prompt_text,
            "t2i_model": self.t2i_model,
            "prompt_type": self.prompt_type.value,
        }
        if self.prompt_quality is not None:
            d["prompt_quality"] = self.prompt_quality
        if self.prompt_eval:
            d["prompt_eval"] = dict(self.prompt_eval)
        d["image_ref"] = self.image_ref
        d["total_score"] = self.total_score
        d["elements"] = [e.to_dict() for e in self.elements]
        return d


# ---------------------------------------------------------------------------
# line-delimited IO


def _open_lines(source) -> list[str]:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return fh.read().splitlines()
    if isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        return source.read().splitlines()
    return [line.rstrip("\n") for line in source]


def _header_line(name: str) -> str:
    return json.dumps({"format": name, "version": FORMAT_VERSION})


def _iter_body(lines, fmt, diagnostics):
    """Yield (line_no, obj) pairs after the optional header; collect JSON errors."""
    for n, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            diagnostics.append((n, "<line>", f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(obj, dict):
            diagnostics.append((n, "<line>", "expected a JSON object"))
            continue
        if "format" in obj:
            if obj.get("format") != fmt or obj.get("version") != FORMAT_VERSION:
                diagnostics.append(
                    (n, "format", f"expected header {fmt!r} version {FORMAT_VERSION}")
                )
            continue
        yield n, obj


class _FieldError(Exception):
    def __init__(self, field_name, reason):
        self.field = field_name
        self.reason = reason


def _req(obj, name, kind):
    if name not in obj:
        raise _FieldError(name, "missing")
    v = obj[name]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise _FieldError(name, "expected a finite number")
        return float(v)
    if not isinstance(v, kind):
        raise _FieldError(name, f"expected {kind.__name__}")
    return v


def _bounded(obj, name, lo, hi):
    v = _req(obj, name, float)
    if not (lo <= v <= hi):
        raise _FieldError(name, f"value {v} outside [{lo}, {hi}]")
    return v


def _record_from_obj(obj) -> SampleRecord:
    known = {"sample_id", "prompt_id", "prompt_text", "t2i_model", "prompt_type",
             "prompt_quality", "prompt_eval", "image_ref", "total_score", "elements"}
    for key in obj:
        if key not in known:
            raise _FieldError(key, "unknown field")
    sample_id = _req(obj, "sample_id", str)
    if not sample_id:
        raise _FieldError("sample_id", "must be non-empty")
    prompt_id = _req(obj, "prompt_id", str)
    if not prompt_id:
        raise _FieldError("prompt_id", "must be non-empty")
    ptype = _req(obj, "prompt_type", str)
    if ptype not in {t.value for t in PromptType}:
        raise _FieldError("prompt_type", f"unknown prompt type {ptype!r}")
    quality = None
    if obj.get("prompt_quality") is not None:
        quality = _bounded(obj, "prompt_quality", 0.0, 1.0)
    pe = obj.get("prompt_eval") or {}
    if not isinstance(pe, dict):
        raise _FieldError("prompt_eval", "expected an object")
    prompt_eval = []
    for name in pe:
        if name not in PROMPT_EVAL_FIELDS:
            raise _FieldError(f"prompt_eval.{name}", "unknown prompt evaluation field")
        try:
            prompt_eval.append((name, _bounded(pe, name, 0.0, 1.0)))
        except _FieldError as exc:
            raise _FieldError(f"prompt_eval.{name}", exc.reason) from None
    raw_elements = _req(obj, "elements", list)
    elements = []
    for i, e in enumerate(raw_elements):
        prefix = f"elements[{i}]"
        if not isinstance(e, dict):
            raise _FieldError(prefix, "expected an object")
        try:
            text = _req(e, "text", str)
            cat = _req(e, "category", str)
            if cat not in {c.value for c in ElementCategory}:
                raise _FieldError("category", f"unknown category {cat!r}")
            score = _bounded(e, "score", 0.0, 1.0)
        except _FieldError as exc:
            raise _FieldError(f"{prefix}.{exc.field}", exc.reason) from None
        elements.append(ElementAnnotation(text, ElementCategory(cat), score))
    return SampleRecord(
        sample_id=sample_id,
        prompt_id=prompt_id,
        prompt_text=_req(obj, "prompt_text", str),
        t2i_model=_req(obj, "t2i_model", str),
        prompt_type=PromptType(ptype),
        image_ref=_req(obj, "image_ref", str),
        total_score=_bounded(obj, "total_score", 1.0, 5.0),
        elements=tuple(elements),
        prompt_quality=quality,
        prompt_eval=tuple(prompt_eval),
    )


def scan_dataset(source) -> tuple[list[SampleRecord], list[tuple[int, str, str]]]:
    """Parse every line, returning the valid records and one diagnostic per bad line."""
    diagnostics: list[tuple[int, str, str]] = []
    records: list[SampleRecord] = []
    seen: dict[str, int] = {}
    for n, obj in _iter_body(_open_lines(source), SAMPLES_FORMAT, diagnostics):
        try:
            rec = _record_from_obj(obj)
        except _FieldError as exc:
            diagnostics.append((n, exc.field, exc.reason))
            continue
        if rec.sample_id in seen:
            diagnostics.append(
                (n, "sample_id", f"duplicate of line {seen[rec.sample_id]}")
            )
            continue
        seen[rec.sample_id] = n
        records.append(rec)
    diagnostics.sort()
    return records, diagnostics


def parse_dataset(source) -> list[SampleRecord]:
    records, diagnostics = scan_dataset(source)
    if diagnostics:
        raise DatasetParseError(diagnostics)
    return records


def serialize_dataset(records: Iterable[SampleRecord]) -> str:
    lines = [_header_line(SAMPLES_FORMAT)]
    lines += [json.dumps(r.to_dict(), ensure_ascii=False) for r in records]
    return "\n".join(lines) + "\n"


def write_dataset(path, records) -> None:
    Path(path).write_text(serialize_dataset(records), encoding="utf-8")


# ---------------------------------------------------------------------------
# prompt construction

TOTAL_INSTRUCTION = (
    "Rate how well the image matches the text prompt. "
    "Answer with a single score label."
)
ELEMENT_INSTRUCTION = (
    "Judge whether the listed element of the text prompt is correctly shown "
    "in the image. Answer with a single score label."
)


def build_prompt(record: SampleRecord, task=TaskKind.TOTAL, space: ScoreSpace | None = None,
                 element_index: int | None = None) -> str:
    """Instantiate the structured query for one record.

    Free-text fields are JSON-quoted so that distinct values always give
    distinct prompts, whatever characters they contain.
    """
    task = TaskKind(task)
    if space is None:
        raise InputError("build_prompt needs the score space for the answer labels")
    element = None
    if task is TaskKind.ELEMENT:
        if element_index is None or not (0 <= element_index < len(record.elements)):
            raise InputError(
                f"element index {element_index} invalid for {len(record.elements)} elements"
            )
        element = record.elements[element_index]
    q = json.dumps
    lines = [
        f"Task: {ELEMENT_INSTRUCTION if element else TOTAL_INSTRUCTION}",
        f"Allowed answers: {', '.join(space.labels())}",
        f"T2I model: {q(record.t2i_model, ensure_ascii=False)}",
        f"Prompt type: {record.prompt_type.value}",
    ]
    evals = []
    if record.prompt_quality is not None:
        evals.append(f"prompt_quality={record.prompt_quality!r}")
    evals += [f"{k}={v!r}" for k, v in record.prompt_eval]
    if evals:
        lines.append(f"Prompt evaluation: {'; '.join(evals)}")
    lines.append(f"Prompt: {q(record.prompt_text, ensure_ascii=False)}")
    if element is not None:
        lines.append(
            f"Element: {q(element.text, ensure_ascii=False)} "
            f"(category: {element.category.value})"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: Mapping[str, int]
    seed: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise InputError("k must be positive")
        bad = {p: f for p, f in self.assignment.items() if not (0 <= f < self.k)}
        if bad:
            raise InputError(f"fold index out of range for prompts {sorted(bad)[:3]}")
        object.__setattr__(self, "assignment", dict(sorted(self.assignment.items())))

    def prompts_in(self, fold: int) -> list[str]:
        return [p for p, f in self.assignment.items() if f == fold]

    def fold_of(self, prompt_id: str) -> int:
        try:
            return self.assignment[prompt_id]
        except KeyError:
            raise InputError(f"prompt {prompt_id!r} is not in the fold plan") from None

    def to_json(self) -> str:
        body = {"format": PLAN_FORMAT, "version": FORMAT_VERSION, "k": self.k,
                "seed": self.seed, "assignment": self.assignment}
        return json.dumps(body, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        if d.get("format") != PLAN_FORMAT:
            raise InputError("not a fold-plan file")
        return cls(int(d["k"]), {str(p): int(f) for p, f in d["assignment"].items()},
                   d.get("seed"))


def split_folds(records: Iterable[SampleRecord], k: int, seed: int) -> FoldPlan:
    """Assign whole prompts to folds: sort ids, shuffle with ``seed``, deal round-robin."""
    if k < 2:
        raise InputError("k must be at least 2")
    prompts = sorted({r.prompt_id for r in records})
    if len(prompts) < k:
        raise InputError(f"{len(prompts)} distinct prompts cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(prompts))
    assignment = {prompts[j]: pos % k for pos, j in enumerate(order)}
    return FoldPlan(k, assignment, seed)


def fold_view(records, plan: FoldPlan, fold: int):
    """(train, eval) for one fold; eval holds the samples of the fold's prompts."""
    if not (0 <= fold < plan.k):
        raise InputError(f"fold {fold} out of range for k={plan.k}")
    train, evl = [], []
    for r in records:
        (evl if plan.fold_of(r.prompt_id) == fold else train).append(r)
    if not train or not evl:
        warnings.warn(
            f"fold {fold} has an empty {'training' if not train else 'evaluation'} side",
            stacklevel=2,
        )
    return train, evl


def fold_summary(records, plan: FoldPlan) -> list[dict]:
    """Per-fold unique-prompt and sample counts for train and eval sides."""
    rows = []
    for f in range(plan.k):
        train_p = {p for p, g in plan.assignment.items() if g != f}
        eval_p = {p for p, g in plan.assignment.items() if g == f}
        n_eval = sum(1 for r in records if plan.assignment.get(r.prompt_id) == f)
        rows.append({
            "fold": f,
            "train_prompts": len(train_p),
            "eval_prompts": len(eval_p),
            "train_samples": len(records) - n_eval,
            "eval_samples": n_eval,
        })
    return rows


# ---------------------------------------------------------------------------
# external first-token distributions


@dataclass(frozen=True)
class ExternalDistributionRecord:
    """Score-token probabilities and/or logits produced by an outside model."""

    sample_id: str
    task: TaskKind
    element_index: int | None = None
    score_token_probs: Mapping[int, float] | None = None
    score_token_logits: Mapping[int, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind(self.task))
        if self.score_token_probs is None and self.score_token_logits is None:
            raise InputError("record needs score_token_probs or score_token_logits")
        if self.task is TaskKind.ELEMENT and self.element_index is None:
            raise InputError("element records need element_index")
        if self.score_token_probs is not None:
            for t, p in self.score_token_probs.items():
                if not (0.0 <= p <= 1.0):
                    raise InputError(f"probability {p} for token {t} outside [0, 1]")

    @property
    def key(self) -> str:
        return task_key(self.task, self.element_index)

    def project(self, space: ScoreSpace, mode) -> ScoreDistribution:
        mode = ProjectionMode.parse(mode)
        table = (self.score_token_probs if mode is ProjectionMode.LITERAL
                 else self.score_token_logits)
        if table is None:
            need = "score_token_probs" if mode is ProjectionMode.LITERAL else "score_token_logits"
            raise InputError(
                f"sample {self.sample_id!r} ({self.key}) has no {need} for {mode.value} mode"
            )
        missing = [t for t in space.token_ids.tolist() if t not in table]
        if missing:
            raise InputError(
                f"sample {self.sample_id!r} ({self.key}) lacks score tokens {missing}"
            )
        return renormalize([table[t] for t in space.token_ids.tolist()])

    def predict(self, space: ScoreSpace, mode) -> float:
        return expected_score(self.project(space, mode), space)

    def to_dict(self) -> dict:
        d: dict = {"sample_id": self.sample_id, "task": self.task.value}
        if self.task is TaskKind.ELEMENT:
            d["element_index"] = self.element_index
        if self.score_token_probs is not None:
            d["score_token_probs"] = {str(t): v for t, v in self.score_token_probs.items()}
        if self.score_token_logits is not None:
            d["score_token_logits"] = {str(t): v for t, v in self.score_token_logits.items()}
        return d


def task_key(task, element_index=None) -> str:
    task = TaskKind(task)
    return "total" if task is TaskKind.TOTAL else f"element:{element_index}"


def _token_table(obj, name, allowed: set[int]):
    raw = obj.get(name)
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise _FieldError(name, "expected an object")
    table = {}
    for t, v in raw.items():
        try:
            tok = int(t)
        except ValueError:
            raise _FieldError(name, f"token id {t!r} is not an integer") from None
        if tok not in allowed:
            raise _FieldError(name, f"unknown token id {tok}")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise _FieldError(f"{name}.{t}", "expected a finite number")
        table[tok] = float(v)
    return table


def _spaces_by_task(spaces) -> dict[TaskKind, ScoreSpace]:
    if isinstance(spaces, ScoreSpace):
        return {spaces.task_kind: spaces}
    return {TaskKind(k): v for k, v in spaces.items()}


def load_external_distributions(source, spaces) -> dict[str, dict[str, ExternalDistributionRecord]]:
    """Map sample_id -> {task key -> record}; ``spaces`` is one ScoreSpace or a task->space map."""
    by_task = _spaces_by_task(spaces)
    out: dict[str, dict[str, ExternalDistributionRecord]] = {}
    diagnostics: list[tuple[int, str, str]] = []
    for n, obj in _iter_body(_open_lines(source), EXTERNAL_FORMAT, diagnostics):
        try:
            sid = _req(obj, "sample_id", str)
            task_raw = _req(obj, "task", str)
            if task_raw not in {t.value for t in TaskKind}:
                raise _FieldError("task", f"unknown task {task_raw!r}")
            task = TaskKind(task_raw)
            if task not in by_task:
                raise _FieldError("task", f"no score space configured for {task.value}")
            idx = None
            if task is TaskKind.ELEMENT:
                idx = _req(obj, "element_index", int)
            allowed = set(by_task[task].token_ids.tolist())
            probs = _token_table(obj, "score_token_probs", allowed)
            logits = _token_table(obj, "score_token_logits", allowed)
            if probs is None and logits is None:
                raise _FieldError("score_token_probs", "record has neither probs nor logits")
            if probs is not None and any(not (0.0 <= p <= 1.0) for p in probs.values()):
                raise _FieldError("score_token_probs", "probability outside [0, 1]")
        except _FieldError as exc:
            diagnostics.append((n, exc.field, exc.reason))
            continue
        rec = ExternalDistributionRecord(sid, task, idx, probs, logits)
        slot = out.setdefault(sid, {})
        if rec.key in slot:
            diagnostics.append((n, "sample_id", f"duplicate ({sid}, {rec.key})"))
            continue
        slot[rec.key] = rec
    if diagnostics:
        raise DatasetParseError(diagnostics)
    return out


def serialize_external(records: Iterable[ExternalDistributionRecord]) -> str:
    lines = [_header_line(EXTERNAL_FORMAT)]
    lines += [json.dumps(r.to_dict()) for r in records]
    return "\n".join(lines) + "\n"


@dataclass
class Predictions:
    """Per-sample predicted total score and element scores, keyed by sample_id."""

    total: dict[str, float] = field(default_factory=dict)
    elements: dict[str, list[float]] = field(default_factory=dict)

    def to_jsonl(self, order: Iterable[str] | None = None) -> str:
        ids = list(order) if order is not None else sorted(set(self.total) | set(self.elements))
        lines = []
        for sid in ids:
            d: dict = {"sample_id": sid}
            if sid in self.total:
                d["total"] = self.total[sid]
            if sid in self.elements:
                d["elements"] = self.elements[sid]
            lines.append(json.dumps(d))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, source) -> "Predictions":
        preds = cls()
        diagnostics = []
        for n, raw in enumerate(_open_lines(source), start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
                sid = d["sample_id"]
            except (json.JSONDecodeError, KeyError, TypeError):
                diagnostics.append((n, "sample_id", "unreadable prediction line"))
                continue
            if sid in preds.total or sid in preds.elements:
                diagnostics.append((n, "sample_id", f"duplicate {sid!r}"))
                continue
            if "total" in d:
                preds.total[sid] = float(d["total"])
            if "elements" in d:
                preds.elements[sid] = [float(v) for v in d["elements"]]
        if diagnostics:
            raise DatasetParseError(diagnostics)
        return preds
