"""Command-line pipeline: validate, split, train, score, report, blend (and synth for fixtures).

Exit codes: 0 success, 1 domain or validation failure, 2 I/O failure.

Run config (JSON; relative paths resolve against the config file's directory)::

    {
      "dataset": "train.jsonl",            # sample-records file (train pool)
      "test_dataset": "test.jsonl",        # optional, used by blend / --split test
      "external": "external.jsonl",        # optional external-distributions file
      "out_dir": "runs",
      "seed": 1234, "k": 5, "mode": "literal",
      "score_spaces": {"total":   {"token_ids": [21, 22, 23, 24, 25], "values": [1, 2, 3, 4, 5]},
                       "element": {"token_ids": [20, 21], "values": [0, 1]}},
      "model": {"vocab_size": 32, "embed_dim": 24, "hidden_dim": 32,
                "adapter": {"targets": ["W1", "W2"], "rank": 4, "alpha": 8}},   # adapter optional
      "training": {... TrainingConfig fields ...},
      "gbt": {"n_rounds": 200, "max_depth": 4, "shrinkage": 0.1, "min_samples_leaf": 5},
      "accuracy": {"threshold": 0.5, "level": "instance"}
    }
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import ensemble as ens
from . import metrics as mt
from . import synthetic as syn
from . import toy_scorer as toy
from .errors import DatasetParseError, InputError, NumericError
from .score_core import ProjectionMode, ScoreSpace, TaskKind

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


@dataclass
class RunConfig:
    dataset: Path | None = None
    test_dataset: Path | None = None
    external: Path | None = None
    out_dir: Path = Path("runs")
    seed: int = 1234
    k: int = 5
    mode: ProjectionMode = ProjectionMode.LITERAL
    score_spaces: dict = field(default_factory=lambda: {
        TaskKind.TOTAL: syn.TOTAL_SPACE, TaskKind.ELEMENT: syn.ELEMENT_SPACE})
    model: dict = field(default_factory=lambda: {
        "vocab_size": syn.VOCAB_SIZE, "embed_dim": 24, "hidden_dim": 32, "adapter": None})
    training: toy.TrainingConfig = field(default_factory=toy.TrainingConfig.desk_scale)
    gbt: ens.GbtConfig = field(default_factory=ens.GbtConfig)
    threshold: float = mt.DEFAULT_THRESHOLD
    acc_level: str = "instance"

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "RunConfig":
        cfg = cls()

        def p(key):
            v = raw.get(key)
            if v is None:
                return None
            q = Path(v)
            q = q if q.is_absolute() else base / q
            if key != "out_dir" and not q.exists():
                raise FileNotFoundError(f"{key}: {q} does not exist")
            return q

        cfg.dataset, cfg.test_dataset, cfg.external = p("dataset"), p("test_dataset"), p("external")
        if "out_dir" in raw:
            cfg.out_dir = p("out_dir")
        cfg.seed = int(raw.get("seed", cfg.seed))
        cfg.k = int(raw.get("k", cfg.k))
        cfg.mode = ProjectionMode.parse(raw.get("mode", cfg.mode))
        for task, d in (raw.get("score_spaces") or {}).items():
            cfg.score_spaces[TaskKind(task)] = ScoreSpace.from_dict(d, task)
        cfg.model.update(raw.get("model") or {})
        cfg.training = replace(cfg.training, **(raw.get("training") or {}))
        cfg.gbt = ens.GbtConfig(**(raw.get("gbt") or {}))
        acc = raw.get("accuracy") or {}
        cfg.threshold = float(acc.get("threshold", cfg.threshold))
        cfg.acc_level = acc.get("level", cfg.acc_level)
        if cfg.acc_level not in ("instance", "image"):
            raise InputError(f"accuracy level must be instance or image, not {cfg.acc_level!r}")
        return cfg

    def to_dict(self) -> dict:
        return {
            "dataset": str(self.dataset) if self.dataset else None,
            "test_dataset": str(self.test_dataset) if self.test_dataset else None,
            "external": str(self.external) if self.external else None,
            "out_dir": str(self.out_dir),
            "seed": self.seed, "k": self.k, "mode": self.mode.value,
            "score_spaces": {t.value: s.to_dict() for t, s in self.score_spaces.items()},
            "model": self.model,
            "training": self.training.to_dict(),
            "gbt": ens.gbt_config_dict(self.gbt),
            "accuracy": {"threshold": self.threshold, "level": self.acc_level},
        }


class _Fail(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _say(msg=""):
    print(msg)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.mode = ProjectionMode.parse(args.mode)
    if getattr(args, "dataset", None):
        cfg.dataset = Path(args.dataset)
    cfg.training = replace(cfg.training, seed=cfg.seed, projection_mode=cfg.mode)
    cfg.gbt = replace(cfg.gbt, seed=cfg.seed)
    return cfg


def _load_records(path) -> list[ds.SampleRecord]:
    if path is None:
        raise _Fail(EXIT_DOMAIN, "no dataset configured")
    return ds.parse_dataset(path)


def _plan(cfg: RunConfig, records) -> ds.FoldPlan:
    return ds.split_folds(records, cfg.k, cfg.seed)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    line = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([line(cells[0]), "  ".join("-" * w for w in widths)] +
                     [line(r) for r in cells[1:]])


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    records, diagnostics = ds.scan_dataset(args.path)
    for line, fld, reason in diagnostics:
        _say(f"line {line}: {fld}: {reason}")
    if diagnostics:
        _say(f"{len(diagnostics)} invalid line(s), {len(records)} records OK")
        return EXIT_DOMAIN
    _say(f"{len(records)} records OK")
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _config(args)
    if args.k is not None:
        cfg.k = args.k
    records = _load_records(cfg.dataset)
    plan = _plan(cfg, records)
    out = Path(args.out) if args.out else cfg.out_dir / "plan.json"
    _write(out, plan.to_json())
    rows = [(f"= {r['fold'] + 1}", r["train_prompts"], r["eval_prompts"],
             r["train_samples"], r["eval_samples"]) for r in ds.fold_summary(records, plan)]
    _say(_table(["Fold", "T-Prompts", "E-Prompts", "T-Samples", "E-Samples"], rows))
    _say(f"plan written to {out}")
    return EXIT_OK


def _task_samples(task: TaskKind, records):
    return syn.total_samples(records) if task is TaskKind.TOTAL else syn.element_samples(records)


def _fresh_model(cfg: RunConfig, fold: int, task: TaskKind) -> toy.ToyModel:
    m = cfg.model
    init_seed = [cfg.seed, fold, 0 if task is TaskKind.TOTAL else 1]
    params = toy.ToyModelParams.init(m["vocab_size"], m["embed_dim"], m["hidden_dim"], init_seed)
    adapters = {}
    adapter_cfg = m.get("adapter")
    if adapter_cfg:
        for j, name in enumerate(adapter_cfg.get("targets", ["W1", "W2"])):
            shape = getattr(params, name).shape
            adapters[name] = toy.LowRankAdapter.init(shape, int(adapter_cfg["rank"]),
                                                     float(adapter_cfg["alpha"]),
                                                     init_seed + [2 + j])
    return toy.ToyModel(params, adapters)


def _fold_dir(cfg: RunConfig, fold: int, out=None) -> Path:
    return Path(out) if out else cfg.out_dir / f"fold{fold}"


def cmd_train(args) -> int:
    cfg = _config(args)
    task = TaskKind(args.task)
    records = _load_records(cfg.dataset)
    plan = _plan(cfg, records)
    if not (0 <= args.fold < plan.k):
        raise _Fail(EXIT_DOMAIN, f"fold {args.fold} out of range for k={plan.k}")
    train_recs, _ = ds.fold_view(records, plan, args.fold)
    space = cfg.score_spaces[task]
    tcfg = cfg.training
    if args.freeze_base:
        tcfg = replace(tcfg, freeze_base=True)
    model = _fresh_model(cfg, args.fold, task)
    result = toy.train(model, _task_samples(task, train_recs), space, tcfg)
    out = _fold_dir(cfg, args.fold, args.out)
    header = {"task": task.value, "fold": args.fold, "seed": cfg.seed,
              "score_space": space.to_dict(), "mode": cfg.mode.value,
              "training": result.config.to_dict()}
    out.mkdir(parents=True, exist_ok=True)
    toy.save_checkpoint(out / f"{task.value}.ckpt", result.model, header)
    lines = ["step,epoch,lr_head,lr_encoder,loss"]
    for i, (e, lh, le, loss) in enumerate(zip(result.epochs, result.head_lrs,
                                               result.encoder_lrs, result.losses)):
        lines.append(f"{i},{e},{lh!r},{le!r},{loss!r}")
    _write(out / f"{task.value}_loss.csv", "\n".join(lines) + "\n")
    _say(f"fold {args.fold} {task.value}: {len(result.losses)} steps, "
         f"loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f}")
    _say(f"checkpoint written to {out / (task.value + '.ckpt')}")
    return EXIT_OK


def _split_records(cfg: RunConfig, split: str, fold: int | None):
    if split == "test":
        return _load_records(cfg.test_dataset)
    records = _load_records(cfg.dataset)
    if split == "all":
        return records
    if fold is None:
        raise _Fail(EXIT_DOMAIN, f"--split {split} needs --fold")
    train, evl = ds.fold_view(records, _plan(cfg, records), fold)
    return train if split == "train" else evl


class _CheckpointScorer:
    def __init__(self, path, mode_override=None):
        self.model, self.meta = toy.load_checkpoint(path)
        self.task = TaskKind(self.meta.get("task", "total"))
        self.space = ScoreSpace.from_dict(self.meta["score_space"], self.task)
        self.mode = mode_override or ProjectionMode.parse(self.meta.get("mode", "literal"))

    def total(self, records):
        return [toy.predict(self.model, syn.record_tokens(r), self.space, self.mode) for r in records]

    def elements(self, records):
        return [[toy.predict(self.model, syn.element_tokens(r, i), self.space, self.mode)
                 for i in range(len(r.elements))] for r in records]

    def __call__(self, records):
        if self.task is TaskKind.TOTAL:
            return np.array(self.total(records))
        return np.array([v for row in self.elements(records) for v in row])


def _score_external(cfg: RunConfig, path, records) -> ds.Predictions:
    ext = ds.load_external_distributions(path, cfg.score_spaces)
    preds = ds.Predictions()
    tspace = cfg.score_spaces[TaskKind.TOTAL]
    for r in records:
        entry = ext.get(r.sample_id, {})
        if "total" not in entry:
            raise InputError(f"sample {r.sample_id!r}: no external total-score distribution")
        preds.total[r.sample_id] = entry["total"].predict(tspace, cfg.mode)
        keys = [ds.task_key(TaskKind.ELEMENT, i) for i in range(len(r.elements))]
        present = [k for k in keys if k in entry]
        if present and len(present) != len(keys):
            raise InputError(f"sample {r.sample_id!r}: external element distributions incomplete")
        if present and TaskKind.ELEMENT in cfg.score_spaces:
            espace = cfg.score_spaces[TaskKind.ELEMENT]
            preds.elements[r.sample_id] = [entry[k].predict(espace, cfg.mode) for k in keys]
    return preds


def cmd_score(args) -> int:
    cfg = _config(args)
    records = _split_records(cfg, args.split, args.fold)
    if args.external or (not args.checkpoint and cfg.external):
        preds = _score_external(cfg, args.external or cfg.external, records)
    elif args.checkpoint:
        mode = ProjectionMode.parse(args.mode) if args.mode else None
        scorer = _CheckpointScorer(args.checkpoint, mode)
        if scorer.task is not TaskKind.TOTAL:
            raise _Fail(EXIT_DOMAIN, "--checkpoint must be a total-score checkpoint")
        preds = ds.Predictions(total=dict(zip([r.sample_id for r in records], scorer.total(records))))
        if args.element_checkpoint:
            escorer = _CheckpointScorer(args.element_checkpoint, mode)
            if escorer.task is not TaskKind.ELEMENT:
                raise _Fail(EXIT_DOMAIN, "--element-checkpoint must be an element checkpoint")
            preds.elements = dict(zip([r.sample_id for r in records], escorer.elements(records)))
    else:
        raise _Fail(EXIT_DOMAIN, "score needs --checkpoint or --external")
    out = Path(args.out) if args.out else cfg.out_dir / "predictions.jsonl"
    _write(out, preds.to_jsonl([r.sample_id for r in records]))
    _say(f"{len(records)} predictions written to {out}")
    return EXIT_OK


def _metrics_for(preds: ds.Predictions, records, threshold, level) -> dict:
    ids = {r.sample_id for r in records}
    pred_ids = set(preds.total)
    if pred_ids != ids:
        extra, missing = sorted(pred_ids - ids), sorted(ids - pred_ids)
        raise InputError(f"prediction ids do not match dataset ids "
                         f"(missing {missing[:3]}, unexpected {extra[:3]})")
    t_pred = [preds.total[r.sample_id] for r in records]
    t_true = [r.total_score for r in records]
    out = {"srcc": mt.srcc(t_pred, t_true), "plcc": mt.plcc(t_pred, t_true),
           "acc": None, "overall": None}
    if preds.elements:
        if set(preds.elements) != ids:
            raise InputError("element predictions do not cover exactly the dataset ids")
        for r in records:
            if len(preds.elements[r.sample_id]) != len(r.elements):
                raise InputError(f"sample {r.sample_id!r}: element count mismatch")
        e_pred = [[*preds.elements[r.sample_id]] for r in records]
        e_true = [[e.score for e in r.elements] for r in records]
        if level == "image":
            acc = mt.per_image_accuracy(e_pred, e_true, threshold)
        else:
            acc = mt.accuracy([v for row in e_pred for v in row],
                              [v for row in e_true for v in row], threshold)
        rep = mt.MetricReport.from_parts(out["srcc"], out["plcc"], acc)
        out.update(acc=rep.acc, overall=rep.overall)
    return out


def _fmt(v) -> str:
    return "--" if v is None else f"{v:.4f}"


def _runs_json(runs: list[dict]) -> str:
    def val(v):
        return "null" if v is None else f"{v:.6f}"
    body = ",\n".join(
        "  {" + f'"name": {json.dumps(r["name"])}, ' +
        ", ".join(f'"{k}": {val(r[k])}' for k in ("srcc", "plcc", "acc", "overall")) + "}"
        for r in runs)
    return '{"runs": [\n' + body + "\n]}\n"


def cmd_report(args) -> int:
    cfg = _config(args)
    runs = []
    if args.from_metrics:
        s, p, a = args.from_metrics
        rep = mt.MetricReport.from_parts(s, p, a)
        runs.append({"name": "precomputed", **rep.__dict__})
    else:
        if not args.predictions:
            raise _Fail(EXIT_DOMAIN, "report needs --predictions or --from-metrics")
        records = _load_records(cfg.dataset)
        for path in args.predictions:
            preds = ds.Predictions.from_jsonl(path)
            runs.append({"name": Path(path).stem,
                         **_metrics_for(preds, records, cfg.threshold, cfg.acc_level)})
    _say(_table(["Method", "SRCC", "PLCC", "ACC", "Overall"],
                [(r["name"], _fmt(r["srcc"]), _fmt(r["plcc"]), _fmt(r["acc"]), _fmt(r["overall"]))
                 for r in runs]))
    out = Path(args.out) if args.out else cfg.out_dir / "report.json"
    _write(out, _runs_json(runs))
    return EXIT_OK


def cmd_blend(args) -> int:
    cfg = _config(args)
    task = TaskKind(args.task)
    element_level = task is TaskKind.ELEMENT
    if args.checkpoints:
        paths = [Path(p) for p in args.checkpoints]
    else:
        paths = [cfg.out_dir / f"fold{j}" / f"{task.value}.ckpt" for j in range(cfg.k)]
    if len(paths) < 2:
        raise _Fail(EXIT_DOMAIN, "blending needs at least two fold checkpoints")
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise _Fail(EXIT_DOMAIN, f"missing fold artifacts: {', '.join(missing)}")
    records = _load_records(cfg.dataset)
    test = _load_records(cfg.test_dataset)
    plan = ds.split_folds(records, len(paths), cfg.seed)
    mode = ProjectionMode.parse(args.mode) if args.mode else None
    scorers = [_CheckpointScorer(p, mode) for p in paths]
    if any(s.task is not task for s in scorers):
        raise _Fail(EXIT_DOMAIN, f"all checkpoints must be {task.value} checkpoints")
    result = ens.blend(records, scorers, plan, cfg.gbt, test, element_level=element_level)
    out = Path(args.out) if args.out else cfg.out_dir / f"blend_{task.value}"
    out.mkdir(parents=True, exist_ok=True)
    if element_level:
        preds = ds.Predictions(elements={
            r.sample_id: [result.predictions[ens.element_row_id(r.sample_id, i)]
                          for i in range(len(r.elements))] for r in test})
    else:
        preds = ds.Predictions(total={r.sample_id: result.predictions[r.sample_id] for r in test})
    _write(out / "predictions.jsonl", preds.to_jsonl([r.sample_id for r in test]))
    _write(out / "gbt_model.json", result.model.to_json())
    _write(out / "train_features.csv", result.train_features.to_csv())
    _write(out / "test_features.csv", result.test_features.to_csv())
    _write(out / "report.json", json.dumps(result.report, indent=1, sort_keys=True) + "\n")
    rows = [(r["name"], f"{r['srcc']:.4f}", f"{r['plcc']:.4f}") for r in result.report["test"]]
    _say(_table(["Fold", "SRCC", "PLCC"], rows))
    _say(f"blend outputs written to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    """Write a synthetic train/test pair, an external-distribution file and a config."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = syn.make_records(args.prompts, args.per_prompt, args.seed)
    test = syn.make_records(max(args.prompts // 5, 2), args.per_prompt, args.seed + 1, prefix="t")
    ds.write_dataset(out / "train.jsonl", train)
    ds.write_dataset(out / "test.jsonl", test)
    _write(out / "external.jsonl", ds.serialize_external(synthetic_external(test, args.seed)))
    cfg = {"dataset": "train.jsonl", "test_dataset": "test.jsonl", "external": "external.jsonl",
           "out_dir": "runs", "seed": args.seed, "k": 5, "mode": "literal",
           "training": {"epochs": 3}}
    _write(out / "config.json", json.dumps(cfg, indent=1) + "\n")
    _say(f"{len(train)} train / {len(test)} test records written to {out}")
    return EXIT_OK


def synthetic_external(records, seed):
    """Noisy score-token probabilities and logits peaked near each record's labels."""
    rng = np.random.default_rng(seed)
    out = []

    def tables(space, target):
        z = -2.0 * (space.values - target) ** 2 + rng.normal(0, 0.3, size=len(space))
        p = np.exp(z - z.max())
        p = 0.9 * p / p.sum()
        ids = space.token_ids.tolist()
        return dict(zip(ids, p.tolist())), dict(zip(ids, z.tolist()))

    for r in records:
        probs, logits = tables(syn.TOTAL_SPACE, r.total_score)
        out.append(ds.ExternalDistributionRecord(r.sample_id, TaskKind.TOTAL, None, probs, logits))
        for i, e in enumerate(r.elements):
            probs, logits = tables(syn.ELEMENT_SPACE, e.score)
            out.append(ds.ExternalDistributionRecord(r.sample_id, TaskKind.ELEMENT, i, probs, logits))
    return out


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tokenfocus", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=["literal", "logit-renorm", "logit_renorm"])
        p.add_argument("--out")
        if dataset:
            p.add_argument("--dataset", help="override the config's dataset path")

    p = sub.add_parser("validate", help="check a sample-records file")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("split", help="prompt-disjoint k-fold plan")
    common(p)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the toy scorer on one fold")
    common(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--task", choices=["total", "element"], default="total")
    p.add_argument("--freeze-base", action="store_true", help="train adapters only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="predict scores from a checkpoint or external distributions")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--element-checkpoint")
    p.add_argument("--external")
    p.add_argument("--split", choices=["all", "train", "eval", "test"], default="all")
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="SRCC / PLCC / ACC / overall")
    common(p)
    p.add_argument("--predictions", nargs="+")
    p.add_argument("--from-metrics", nargs=3, type=float, metavar=("SRCC", "PLCC", "ACC"))
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("blend", help="stack fold checkpoints with boosted trees")
    common(p)
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--task", choices=["total", "element"], default="total")
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("synth", help="write synthetic fixtures and a config")
    p.add_argument("--out", required=True)
    p.add_argument("--prompts", type=int, default=100)
    p.add_argument("--per-prompt", type=int, default=6)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DatasetParseError as exc:
        for line, fld, reason in exc.diagnostics:
            print(f"error: line {line}: {fld}: {reason}", file=sys.stderr)
        return EXIT_DOMAIN
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
