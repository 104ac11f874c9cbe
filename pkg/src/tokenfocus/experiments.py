"""Desk-scale experiments on synthetic data: single-scorer training and 5-fold blending."""
from __future__ import annotations

from dataclasses import dataclass, field

from . import dataset as ds
from . import ensemble as ens
from . import metrics as mt
from . import synthetic as syn
from . import toy_scorer as toy
from .score_core import ProjectionMode


@dataclass(frozen=True)
class MiniatureConfig:
    n_train: int = 1000
    n_eval: int = 200
    embed_dim: int = 24
    hidden_dim: int = 32
    data_seed: int = 1
    mode: ProjectionMode = ProjectionMode.LITERAL
    training: toy.TrainingConfig = field(default_factory=toy.TrainingConfig.desk_scale)


@dataclass
class MiniatureResult:
    initial_loss: float
    final_loss: float
    eval_srcc: float
    eval_plcc: float
    step_losses: list[float]
    checkpoint: bytes

    @property
    def loss_ratio(self) -> float:
        return self.final_loss / self.initial_loss


def run_miniature(cfg: MiniatureConfig = MiniatureConfig()) -> MiniatureResult:
    """Train one toy scorer on the token task; losses are full-training-set means."""
    train_set = syn.make_token_task(cfg.n_train, cfg.data_seed)
    eval_set = syn.make_token_task(cfg.n_eval, cfg.data_seed + 1)
    tcfg = toy.TrainingConfig(**{**cfg.training.to_dict(), "projection_mode": cfg.mode})
    space = syn.TOTAL_SPACE
    model = toy.ToyModel(toy.ToyModelParams.init(syn.VOCAB_SIZE, cfg.embed_dim, cfg.hidden_dim,
                                                 tcfg.seed))
    before = toy.mean_loss(model, train_set, space, cfg.mode)
    res = toy.train(model, train_set, space, tcfg)
    after = toy.mean_loss(res.model, train_set, space, cfg.mode)
    preds = toy.predict_many(res.model, [t for t, _ in eval_set], space, cfg.mode)
    truth = [y for _, y in eval_set]
    return MiniatureResult(before, after, mt.srcc(preds, truth), mt.plcc(preds, truth),
                           res.losses, toy.checkpoint_bytes(res.model))


@dataclass(frozen=True)
class EnsembleConfig:
    n_prompts: int = 100
    per_prompt: int = 6
    n_test_prompts: int = 40
    test_per_prompt: int = 5
    k: int = 5
    embed_dim: int = 24
    hidden_dim: int = 32
    generator_offsets: bool = True
    gbt: ens.GbtConfig = ens.GbtConfig()


def _fold_scorer(model, mode):
    def score(records):
        return toy.predict_many(model, [syn.record_tokens(r) for r in records], syn.TOTAL_SPACE, mode)
    return score


def run_ensemble_seed(seed: int, cfg: EnsembleConfig = EnsembleConfig()) -> ens.BlendResult:
    """Train k fold scorers on a fresh synthetic set and blend them; report rows carry test SRCC."""
    gens = None if cfg.generator_offsets else {g: 0.0 for g in syn.GENERATORS}
    records = syn.make_records(cfg.n_prompts, cfg.per_prompt, seed, generators=gens)
    test = syn.make_records(cfg.n_test_prompts, cfg.test_per_prompt, seed + 1000, prefix="t",
                            generators=gens)
    plan = ds.split_folds(records, cfg.k, seed)
    tcfg = toy.TrainingConfig.desk_scale(seed=seed)
    scorers = []
    for f in range(cfg.k):
        train_recs, _ = ds.fold_view(records, plan, f)
        init = toy.ToyModel(toy.ToyModelParams.init(syn.VOCAB_SIZE, cfg.embed_dim, cfg.hidden_dim,
                                                    [seed, f]))
        res = toy.train(init, syn.total_samples(train_recs), syn.TOTAL_SPACE, tcfg)
        scorers.append(_fold_scorer(res.model, tcfg.projection_mode))
    return ens.blend(records, scorers, plan, cfg.gbt, test)


def report_rows(result: ens.BlendResult) -> dict[str, dict]:
    return {row["name"]: row for row in result.report["test"]}
