"""First-token score projection, expected-value regression and its gradient.

The chain is::

    logits z --softmax--> p --pick score tokens--> q --softmax--> P --dot s--> y_hat

followed by a squared error against the target. ``ProjectionMode.LITERAL``
feeds the full-vocabulary probabilities into the second softmax;
``ProjectionMode.LOGIT_RENORM`` skips the first softmax and renormalizes the
raw score-token logits instead.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError

_SUM_TOL = 1e-9


class ProjectionMode(str, enum.Enum):
    LITERAL = "literal"
    LOGIT_RENORM = "logit_renorm"

    @classmethod
    def parse(cls, value) -> "ProjectionMode":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("-", "_")
        try:
            return cls(text)
        except ValueError:
            raise InputError(f"unknown projection mode {value!r}") from None


class TaskKind(str, enum.Enum):
    TOTAL = "total"
    ELEMENT = "element"


@dataclass(frozen=True)
class ScoreSpace:
    """Ordered (token_id, score_value) pairs the first-token distribution is projected onto."""

    entries: tuple[tuple[int, float], ...]
    task_kind: TaskKind = TaskKind.TOTAL

    def __post_init__(self):
        entries = tuple((int(t), float(v)) for t, v in self.entries)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if len(entries) < 2:
            raise InputError("a score space needs at least 2 entries")
        ids = [t for t, _ in entries]
        vals = [v for _, v in entries]
        if min(ids) < 0:
            raise InputError("token ids must be non-negative")
        if len(set(ids)) != len(ids):
            raise InputError("score token ids must be distinct")
        if not all(math.isfinite(v) for v in vals):
            raise NumericError("score values must be finite")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise InputError("score values must be distinct and ascending")

    @classmethod
    def from_lists(cls, token_ids, values, task_kind=TaskKind.TOTAL) -> "ScoreSpace":
        token_ids, values = list(token_ids), list(values)
        if len(token_ids) != len(values):
            raise InputError("token_ids and values differ in length")
        return cls(tuple(zip(token_ids, values)), task_kind)

    @property
    def token_ids(self) -> np.ndarray:
        return np.array([t for t, _ in self.entries], dtype=np.int64)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.entries], dtype=np.float64)

    @property
    def low(self) -> float:
        return self.entries[0][1]

    @property
    def high(self) -> float:
        return self.entries[-1][1]

    def __len__(self):
        return len(self.entries)

    def labels(self) -> list[str]:
        """Answer strings for the score values ("1", "2", ... for integral values)."""
        return [format_score_label(v) for _, v in self.entries]

    def to_dict(self) -> dict:
        return {
            "task_kind": self.task_kind.value,
            "token_ids": [t for t, _ in self.entries],
            "values": [v for _, v in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict, task_kind=None) -> "ScoreSpace":
        kind = task_kind if task_kind is not None else d.get("task_kind", "total")
        return cls.from_lists(d["token_ids"], d["values"], kind)


def format_score_label(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _as_vector(x, name) -> np.ndarray:
    arr = np.array(x, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    """Logits and/or probabilities over the vocabulary at the first generated position."""

    vocab_size: int
    logits: np.ndarray | None = None
    probabilities: np.ndarray | None = None

    def __post_init__(self):
        if int(self.vocab_size) < 1:
            raise InputError("vocab_size must be positive")
        object.__setattr__(self, "vocab_size", int(self.vocab_size))
        if self.logits is None and self.probabilities is None:
            raise InputError("a token distribution needs logits or probabilities")
        if self.logits is not None:
            z = _as_vector(self.logits, "logits")
            if z.size != self.vocab_size:
                raise InputError(f"logits have length {z.size}, expected {self.vocab_size}")
            object.__setattr__(self, "logits", z)
        if self.probabilities is not None:
            p = _as_vector(self.probabilities, "probabilities")
            if p.size != self.vocab_size:
                raise InputError(
                    f"probabilities have length {p.size}, expected {self.vocab_size}"
                )
            if not np.all(np.isfinite(p)):
                raise NumericError("non-finite probability")
            if np.any(p < 0) or abs(math.fsum(p) - 1.0) > _SUM_TOL:
                raise InputError("probabilities must be non-negative and sum to 1")
            object.__setattr__(self, "probabilities", p)

    @classmethod
    def from_logits(cls, logits) -> "TokenDistribution":
        z = np.asarray(logits, dtype=np.float64).reshape(-1)
        return cls(z.size, logits=z)


@dataclass(frozen=True, eq=False)
class ScoreDistribution:
    masses: np.ndarray = field()

    def __post_init__(self):
        m = _as_vector(self.masses, "masses")
        if np.any(m < 0) or abs(math.fsum(m) - 1.0) > _SUM_TOL:
            raise InputError("score masses must be non-negative and sum to 1")
        object.__setattr__(self, "masses", m)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / e.sum()


def softmax_full(dist: TokenDistribution) -> TokenDistribution:
    """Populate ``probabilities`` from ``logits`` (max-subtracted softmax)."""
    if dist.logits is None:
        raise InputError("softmax_full needs logits")
    if not np.all(np.isfinite(dist.logits)):
        raise NumericError("non-finite logit")
    return TokenDistribution(dist.vocab_size, logits=dist.logits,
                             probabilities=_softmax(dist.logits))


def _check_ids(space: ScoreSpace, vocab_size: int) -> np.ndarray:
    ids = space.token_ids
    if ids.max() >= vocab_size:
        raise InputError(
            f"score token id {int(ids.max())} out of range for vocab of {vocab_size}"
        )
    return ids


def score_inputs(dist: TokenDistribution, space: ScoreSpace, mode) -> np.ndarray:
    """The per-entry values the second softmax runs over, for the given mode."""
    mode = ProjectionMode.parse(mode)
    ids = _check_ids(space, dist.vocab_size)
    if mode is ProjectionMode.LITERAL:
        if dist.probabilities is None:
            raise InputError("literal projection needs full-vocabulary probabilities")
        return dist.probabilities[ids]
    if dist.logits is None:
        raise InputError("logit_renorm projection needs logits")
    z = dist.logits[ids]
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logit")
    return z


def renormalize(values) -> ScoreDistribution:
    """Softmax over per-entry values; shared by both projection modes."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite score-token value")
    return ScoreDistribution(_softmax(v))


def project_scores(dist: TokenDistribution, space: ScoreSpace,
                   mode=ProjectionMode.LITERAL) -> ScoreDistribution:
    return renormalize(score_inputs(dist, space, mode))


def expected_score(sd: ScoreDistribution, space: ScoreSpace) -> float:
    if sd.masses.size != len(space):
        raise InputError(
            f"{sd.masses.size} masses for a score space of {len(space)} entries"
        )
    y = float(np.dot(space.values, sd.masses))
    # guards against last-ulp drift outside the value range
    return min(max(y, space.low), space.high)


def tokenfocus_loss(pred: float, target: float) -> float:
    if not (math.isfinite(pred) and math.isfinite(target)):
        raise NumericError("loss inputs must be finite")
    d = pred - target
    return d * d


def predict_from_logits(logits, space: ScoreSpace, mode=ProjectionMode.LITERAL) -> float:
    """Logits -> projected masses -> expected score."""
    dist = TokenDistribution.from_logits(logits)
    if ProjectionMode.parse(mode) is ProjectionMode.LITERAL:
        dist = softmax_full(dist)
    return expected_score(project_scores(dist, space, mode), space)


def tokenfocus_loss_grad(dist: TokenDistribution, space: ScoreSpace, mode,
                         target: float) -> np.ndarray:
    """dL/dz for every vocabulary logit, L = (y_hat - target)^2.

    With P the projected masses and g_i = P_i (s_i - y_hat) = d y_hat / d q_i:

    * logit_renorm: dL/dz_{s_i} = 2 (y_hat - y) g_i, zero elsewhere.
    * literal: q = p[S] with p = softmax(z), so
      dL/dz_w = 2 (y_hat - y) (g_w p_w [w in S] - p_w sum_i g_i p_{s_i}).
    """
    mode = ProjectionMode.parse(mode)
    if dist.logits is None:
        raise InputError("the gradient is taken with respect to logits; logits missing")
    if not math.isfinite(target):
        raise NumericError("non-finite target")
    if mode is ProjectionMode.LITERAL:
        dist = softmax_full(dist)
    ids = _check_ids(space, dist.vocab_size)
    masses = renormalize(score_inputs(dist, space, mode)).masses
    s = space.values
    y_hat = float(np.dot(s, masses))
    g = masses * (s - y_hat)
    scale = 2.0 * (y_hat - target)
    grad = np.zeros(dist.vocab_size)
    if mode is ProjectionMode.LOGIT_RENORM:
        grad[ids] = scale * g
        return grad
    p = dist.probabilities
    gp = g * p[ids]
    grad -= p * gp.sum()
    grad[ids] += gp
    return scale * grad


def cross_entropy_grad(logits: np.ndarray, space: ScoreSpace, target: float):
    """Loss and logit gradient of full-vocabulary cross-entropy on the nearest score token.

    Baseline objective only; ties on distance go to the lower score.
    """
    z = np.asarray(logits, dtype=np.float64)
    p = _softmax(z)
    idx = int(np.argmin(np.abs(space.values - target)))
    tok = int(space.token_ids[idx])
    loss = -math.log(max(p[tok], 1e-300))
    grad = p.copy()
    grad[tok] -= 1.0
    return loss, grad
