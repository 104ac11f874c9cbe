"""Stacking fold-model predictions with a least-squares gradient-boosted tree meta-learner.

Feature columns, in order (``FeatureSchema.columns``):

1. ``fold_0`` .. ``fold_{k-1}``: the k fold models' predictions
2. ``t2i_model=<name>`` one-hot over the training vocabulary (sorted), then ``t2i_model=<unknown>``
3. ``prompt_type=<type>`` likewise, then ``prompt_type=<unknown>``
4. ``prompt_tokens``: whitespace token count of the prompt text
5. ``element_count``
6. ``prompt_quality`` (only if any training record has it; missing -> -1.0)
7. element-level rows only: ``category=<c>`` one-hot, then ``category=<unknown>``
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import FoldPlan, SampleRecord
from .errors import InputError, NumericError
from .metrics import plcc, srcc

UNKNOWN = "<unknown>"
MISSING_QUALITY = -1.0
GBT_FORMAT = "gbt-model"
TIE_TOL = 1e-10
NOISE_TOL = 1e-13


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureSchema:
    k: int
    models: tuple[str, ...]
    prompt_types: tuple[str, ...]
    use_quality: bool
    categories: tuple[str, ...] | None = None  # set for element-level rows

    @property
    def columns(self) -> tuple[str, ...]:
        cols = [f"fold_{j}" for j in range(self.k)]
        cols += [f"t2i_model={m}" for m in self.models] + [f"t2i_model={UNKNOWN}"]
        cols += [f"prompt_type={t}" for t in self.prompt_types] + [f"prompt_type={UNKNOWN}"]
        cols += ["prompt_tokens", "element_count"]
        if self.use_quality:
            cols.append("prompt_quality")
        if self.categories is not None:
            cols += [f"category={c}" for c in self.categories] + [f"category={UNKNOWN}"]
        return tuple(cols)

    @classmethod
    def fit(cls, records: Sequence[SampleRecord], k: int, element_level=False) -> "FeatureSchema":
        cats = None
        if element_level:
            cats = tuple(sorted({e.category.value for r in records for e in r.elements}))
        return cls(
            k=k,
            models=tuple(sorted({r.t2i_model for r in records})),
            prompt_types=tuple(sorted({r.prompt_type.value for r in records})),
            use_quality=any(r.prompt_quality is not None for r in records),
            categories=cats,
        )


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    columns: tuple[str, ...]
    values: np.ndarray
    row_ids: tuple[str, ...]
    schema: FeatureSchema | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape != (len(self.row_ids), len(self.columns)):
            raise InputError(
                f"values shape {v.shape} != ({len(self.row_ids)}, {len(self.columns)})"
            )
        if len(set(self.columns)) != len(self.columns):
            raise InputError("column names must be unique")
        if not np.all(np.isfinite(v)):
            raise NumericError("feature matrix contains non-finite values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "row_ids", tuple(self.row_ids))

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row_id", *self.columns])
        for rid, row in zip(self.row_ids, self.values):
            w.writerow([rid, *(repr(float(x)) for x in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FeatureMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "row_id":
            raise InputError("feature CSV must start with a row_id header")
        header, body = rows[0], rows[1:]
        values = np.array([[float(x) for x in r[1:]] for r in body]).reshape(len(body), len(header) - 1)
        return cls(tuple(header[1:]), values, tuple(r[0] for r in body))


def element_row_id(sample_id: str, index: int) -> str:
    return f"{sample_id}#{index}"


def _one_hot(value: str, vocab: tuple[str, ...]) -> list[float]:
    hot = [1.0 if value == v else 0.0 for v in vocab]
    hot.append(0.0 if value in vocab else 1.0)
    return hot


def build_features(records: Sequence[SampleRecord], fold_predictions: Mapping[str, Sequence[float]],
                   schema: FeatureSchema | None = None, element_level: bool = False) -> FeatureMatrix:
    """One row per record (or per element with ``element_level``), columns as in the module doc.

    Without ``schema`` the vocabularies are fitted on ``records`` (the
    training side); pass the returned ``matrix.schema`` to featurize test rows.
    """
    if schema is None:
        ks = {len(v) for v in fold_predictions.values()}
        if len(ks) > 1:
            raise InputError("fold prediction vectors differ in length")
        k = ks.pop() if ks else 0
        schema = FeatureSchema.fit(records, k, element_level)
    element_level = schema.categories is not None
    rows, ids = [], []
    for r in records:
        keys = ([(element_row_id(r.sample_id, i), e) for i, e in enumerate(r.elements)]
                if element_level else [(r.sample_id, None)])
        for key, elem in keys:
            if key not in fold_predictions:
                raise InputError(f"missing fold predictions for {key!r}")
            preds = [float(x) for x in fold_predictions[key]]
            if len(preds) != schema.k:
                raise InputError(f"{key!r} has {len(preds)} fold predictions, expected {schema.k}")
            row = preds
            row += _one_hot(r.t2i_model, schema.models)
            row += _one_hot(r.prompt_type.value, schema.prompt_types)
            row += [float(len(r.prompt_text.split())), float(len(r.elements))]
            if schema.use_quality:
                row.append(MISSING_QUALITY if r.prompt_quality is None else r.prompt_quality)
            if element_level:
                row += _one_hot(elem.category.value, schema.categories)
            rows.append(row)
            ids.append(key)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(schema.columns))
    return FeatureMatrix(schema.columns, values, tuple(ids), schema)


# ---------------------------------------------------------------------------
# boosted trees


@dataclass(frozen=True)
class GbtConfig:
    n_rounds: int = 200
    max_depth: int = 4
    shrinkage: float = 0.1
    min_samples_leaf: int = 5
    seed: int = 0  # the booster is deterministic; kept for config round-trips

    def __post_init__(self):
        if self.n_rounds < 1:
            raise InputError("n_rounds must be positive")
        if self.max_depth < 0:
            raise InputError("max_depth must be non-negative")
        if not (0.0 < self.shrinkage <= 1.0):
            raise InputError("shrinkage must lie in (0, 1]")
        if self.min_samples_leaf < 1:
            raise InputError("min_samples_leaf must be positive")


@dataclass
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf. Rows with x <= threshold go left."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)
    n_samples: list[int] = field(default_factory=list)

    def add(self, feature, threshold, value, n) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.n_samples.append(n)
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        feat = np.array(self.feature)
        thr = np.array(self.threshold)
        left = np.array(self.left)
        right = np.array(self.right)
        active = feat[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            f = feat[node[idx]]
            go_left = X[idx, f] <= thr[node[idx]]
            node[idx] = np.where(go_left, left[node[idx]], right[node[idx]])
            active = feat[node] >= 0
        return np.array(self.value)[node]

    def depth(self, i: int = 0) -> int:
        if self.feature[i] < 0:
            return 0
        return 1 + max(self.depth(self.left[i]), self.depth(self.right[i]))

    def leaves(self) -> list[int]:
        return [i for i, f in enumerate(self.feature) if f < 0]

    def to_nodes(self) -> list[dict]:
        return [
            {"feature": f, "threshold": t, "left": lo, "right": hi, "value": v, "n_samples": n}
            for f, t, lo, hi, v, n in zip(self.feature, self.threshold, self.left,
                                          self.right, self.value, self.n_samples)
        ]

    @classmethod
    def from_nodes(cls, nodes: list[dict]) -> "Tree":
        t = cls()
        for nd in nodes:
            i = t.add(int(nd["feature"]), float(nd["threshold"]), float(nd["value"]),
                      int(nd.get("n_samples", 0)))
            t.left[i], t.right[i] = int(nd["left"]), int(nd["right"])
        return t


@dataclass
class GbtModel:
    base_prediction: float
    shrinkage: float
    trees: list[Tree]
    columns: tuple[str, ...]
    train_mse: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        body = {
            "format": GBT_FORMAT,
            "version": 1,
            "base_prediction": self.base_prediction,
            "shrinkage": self.shrinkage,
            "columns": list(self.columns),
            "trees": [t.to_nodes() for t in self.trees],
        }
        return json.dumps(body, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GbtModel":
        d = json.loads(text)
        if d.get("format") != GBT_FORMAT:
            raise InputError("not a gbt-model file")
        return cls(float(d["base_prediction"]), float(d["shrinkage"]),
                   [Tree.from_nodes(t) for t in d["trees"]], tuple(d["columns"]))


def best_split(X: np.ndarray, r: np.ndarray, rows: np.ndarray, sorted_idx: np.ndarray,
               in_node: np.ndarray, min_leaf: int):
    """Exact greedy search: (feature, threshold, gain) or None.

    gain is the drop in squared error, n_L n_R / n (mean_L - mean_R)^2. Gains
    within ``TIE_TOL * sum(r^2)`` of the best count as ties (the same partition
    reached through different row orders can differ in the last bit); ties go
    to the lowest feature index, then the lowest threshold.
    """
    n = rows.size
    if n < 2 * min_leaf:
        return None
    candidates = []
    best_gain = 0.0
    for f in range(X.shape[1]):
        order = sorted_idx[:, f]
        order = order[in_node[order]]
        xs = X[order, f]
        cs = np.cumsum(r[order])
        tot = cs[-1]
        i = np.arange(min_leaf, n - min_leaf + 1)
        i = i[xs[i - 1] < xs[i]]
        if i.size == 0:
            continue
        mean_l = cs[i - 1] / i
        mean_r = (tot - cs[i - 1]) / (n - i)
        gain = i * (n - i) / n * (mean_l - mean_r) ** 2
        candidates.append((f, xs[i - 1], xs[i], gain))
        best_gain = max(best_gain, float(gain.max()))
    scale = float(np.dot(r[rows], r[rows]))
    # reject gains that are pure rounding noise
    if best_gain <= NOISE_TOL * max(scale, 1e-300):
        return None
    floor = best_gain - TIE_TOL * scale
    for f, lo, hi, gain in candidates:
        hits = np.nonzero(gain >= floor)[0]
        if hits.size:
            j = int(hits[0])
            thr = lo[j] + (hi[j] - lo[j]) / 2.0
            if not (lo[j] <= thr < hi[j]):
                thr = lo[j]
            return f, float(thr), float(gain[j])
    return None


def fit_tree(X: np.ndarray, r: np.ndarray, max_depth: int, min_leaf: int,
             sorted_idx: np.ndarray | None = None) -> Tree:
    """A depth-bounded least-squares regression tree; each leaf holds its rows' mean."""
    if sorted_idx is None:
        sorted_idx = np.argsort(X, axis=0, kind="mergesort")
    tree = Tree()
    n = X.shape[0]

    def grow(rows: np.ndarray, depth: int) -> int:
        node = tree.add(-1, 0.0, float(np.mean(r[rows])), int(rows.size))
        if depth >= max_depth:
            return node
        in_node = np.zeros(n, dtype=bool)
        in_node[rows] = True
        split = best_split(X, r, rows, sorted_idx, in_node, min_leaf)
        if split is None:
            return node
        f, thr, _ = split
        mask = X[rows, f] <= thr
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.left[node] = grow(rows[mask], depth + 1)
        tree.right[node] = grow(rows[~mask], depth + 1)
        return node

    grow(np.arange(n), 0)
    return tree


def _matrix(X) -> tuple[np.ndarray, tuple[str, ...] | None]:
    if isinstance(X, FeatureMatrix):
        return X.values, X.columns
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError("feature matrix must be 2-d")
    return arr, None


def fit_gbt(X, y, cfg: GbtConfig = GbtConfig()) -> GbtModel:
    Xv, cols = _matrix(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if Xv.shape[0] != y.size:
        raise InputError(f"{Xv.shape[0]} rows but {y.size} targets")
    if y.size < 2 * cfg.min_samples_leaf:
        raise InputError(f"need at least {2 * cfg.min_samples_leaf} rows, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite target")
    if cols is None:
        cols = tuple(f"x{j}" for j in range(Xv.shape[1]))
    base = float(y[0]) if np.all(y == y[0]) else float(np.mean(y))
    F = np.full(y.size, base)
    sorted_idx = np.argsort(Xv, axis=0, kind="mergesort")
    model = GbtModel(base, cfg.shrinkage, [], cols, [float(np.mean((y - F) ** 2))])
    for _ in range(cfg.n_rounds):
        tree = fit_tree(Xv, y - F, cfg.max_depth, cfg.min_samples_leaf, sorted_idx)
        if len(tree.feature) == 1:
            # residuals of a mean-initialised least-squares booster sum to zero,
            # so a lone root leaf is 0 up to rounding
            tree.value[0] = 0.0
        F = F + cfg.shrinkage * tree.predict(Xv)
        model.trees.append(tree)
        model.train_mse.append(float(np.mean((y - F) ** 2)))
    return model


def predict_gbt(model: GbtModel, X) -> np.ndarray:
    Xv, cols = _matrix(X)
    if cols is not None and tuple(cols) != tuple(model.columns):
        raise InputError("feature columns do not match the model's training schema")
    if Xv.shape[1] != len(model.columns):
        raise InputError(f"{Xv.shape[1]} columns, model expects {len(model.columns)}")
    out = np.full(Xv.shape[0], model.base_prediction)
    for t in model.trees:
        out += model.shrinkage * t.predict(Xv)
    return out


# ---------------------------------------------------------------------------
# blending


@dataclass
class BlendResult:
    predictions: dict[str, float]
    model: GbtModel
    train_features: FeatureMatrix
    test_features: FeatureMatrix
    fold_test_predictions: np.ndarray  # (n_test, k)
    report: dict


def _metric_row(name, pred, truth):
    return {"name": name, "srcc": srcc(pred, truth), "plcc": plcc(pred, truth)}


def blend_predictions(train_records, train_preds, test_records, test_preds, plan: FoldPlan,
                      cfg: GbtConfig = GbtConfig(), targets=None, test_targets=None,
                      element_level: bool = False) -> BlendResult:
    """Fit the meta-learner on fold-model predictions and apply it to the test rows.

    ``train_preds[i, j]`` is fold model j's prediction for training row i.
    For a row in fold f, column f is out-of-fold; the others come from models
    that saw the row. At test time every fold column carries the mean of the
    k models' predictions for that row.
    """
    k = plan.k
    if k < 2:
        raise InputError("blending needs at least two folds")
    train_preds = np.asarray(train_preds, dtype=np.float64)
    test_preds = np.asarray(test_preds, dtype=np.float64)
    if train_preds.ndim != 2 or train_preds.shape[1] != k or test_preds.shape[1:] != (k,):
        raise InputError(f"expected {k} fold prediction columns")

    def row_ids(records):
        if element_level:
            return [element_row_id(r.sample_id, i) for r in records for i in range(len(r.elements))]
        return [r.sample_id for r in records]

    tr_ids, te_ids = row_ids(train_records), row_ids(test_records)
    if len(tr_ids) != train_preds.shape[0] or len(te_ids) != test_preds.shape[0]:
        raise InputError("prediction rows do not match the record rows")
    if targets is None:
        targets = ([e.score for r in train_records for e in r.elements] if element_level
                   else [r.total_score for r in train_records])
    y = np.asarray(targets, dtype=np.float64)

    X_train = build_features(train_records, dict(zip(tr_ids, train_preds.tolist())),
                             element_level=element_level)
    fold_mean = test_preds.mean(axis=1)
    bagged = {rid: [m] * k for rid, m in zip(te_ids, fold_mean.tolist())}
    X_test = build_features(test_records, bagged, schema=X_train.schema)
    model = fit_gbt(X_train, y, cfg)
    final = predict_gbt(model, X_test)

    own = np.array([plan.fold_of(r.prompt_id) for r in train_records
                    for _ in (r.elements if element_level else [None])])
    oof = train_preds[np.arange(len(own)), own]
    report: dict = {"k": k, "n_train": len(tr_ids), "n_test": len(te_ids), "validation": []}
    for f in range(k):
        sel = own == f
        if sel.sum() >= 2 and np.ptp(oof[sel]) > 0 and np.ptp(y[sel]) > 0:
            report["validation"].append(_metric_row(f"fold {f + 1}", oof[sel], y[sel]))
    if test_targets is not None:
        yt = np.asarray(test_targets, dtype=np.float64)
        rows = [_metric_row(f"fold {j + 1}", test_preds[:, j], yt) for j in range(k)]
        avg = {"name": "Avg",
               "srcc": float(np.mean([r["srcc"] for r in rows])),
               "plcc": float(np.mean([r["plcc"] for r in rows]))}
        report["test"] = rows + [avg, _metric_row("Fold-mean", fold_mean, yt),
                                 _metric_row("Blend", final, yt)]
    return BlendResult(dict(zip(te_ids, final.tolist())), model, X_train, X_test,
                       test_preds, report)


def blend(records, fold_models: Sequence[Callable], plan: FoldPlan, cfg: GbtConfig = GbtConfig(),
          test_records=None, with_test_metrics: bool = True, element_level: bool = False) -> BlendResult:
    """Run every fold model over both record sets, then :func:`blend_predictions`.

    Each fold model is a callable mapping a list of records to a 1-d array of
    predictions (one per record, or per element with ``element_level``).
    """
    if plan.k < 2:
        raise InputError("blending needs at least two folds")
    if len(fold_models) != plan.k:
        raise InputError(f"{len(fold_models)} fold models for a {plan.k}-fold plan")
    if any(m is None for m in fold_models):
        raise InputError("missing fold model")
    if test_records is None:
        raise InputError("blend needs test records to apply the meta-learner to")
    records = list(records)
    test_records = list(test_records)
    missing = {r.prompt_id for r in records} - set(plan.assignment)
    if missing:
        raise InputError(f"plan does not cover prompts {sorted(missing)[:3]}")
    train_preds = np.column_stack([np.asarray(m(records), dtype=np.float64) for m in fold_models])
    test_preds = np.column_stack([np.asarray(m(test_records), dtype=np.float64) for m in fold_models])
    test_targets = None
    if with_test_metrics:
        test_targets = ([e.score for r in test_records for e in r.elements] if element_level
                        else [r.total_score for r in test_records])
    return blend_predictions(records, train_preds, test_records, test_preds, plan, cfg,
                             test_targets=test_targets, element_level=element_level)


def gbt_config_dict(cfg: GbtConfig) -> dict:
    return asdict(cfg)
