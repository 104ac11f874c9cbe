import json
import random
from pathlib import Path

import numpy as np
import pytest

from tokenfocus import synthetic as syn
from tokenfocus.cli import RunConfig, main
from tokenfocus.dataset import (
    ExternalDistributionRecord,
    Predictions,
    parse_dataset,
    write_dataset,
)
from tokenfocus.dataset import serialize_external
from tokenfocus.score_core import TaskKind

DATA = Path(__file__).parent / "data"


@pytest.fixture
def workspace(tmp_path):
    write_dataset(tmp_path / "train.jsonl", syn.make_records(100, 2, seed=21))
    write_dataset(tmp_path / "test.jsonl", syn.make_records(20, 2, seed=22, prefix="t"))
    cfg = {"dataset": "train.jsonl", "test_dataset": "test.jsonl", "out_dir": "runs",
           "seed": 7, "k": 5, "model": {"embed_dim": 8, "hidden_dim": 12},
           "training": {"epochs": 2, "warmup_steps": 4},
           "gbt": {"n_rounds": 30}}
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


# -- validate -----------------------------------------------------------------


def test_validate_exit_codes(tmp_path, capsys):
    assert run("validate", DATA / "samples10.jsonl") == 0
    assert "10 records OK" in capsys.readouterr().out
    lines = (DATA / "samples10.jsonl").read_text().splitlines()
    bad = json.loads(lines[3])
    bad["total_score"] = 9
    lines[3] = json.dumps(bad)
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    assert run("validate", tmp_path / "bad.jsonl") == 1
    out = capsys.readouterr().out
    assert out.count("line ") == 1 and "line 4: total_score" in out
    assert run("validate", tmp_path / "missing.jsonl") == 2
    (tmp_path / "binary.jsonl").write_bytes(b"\xff\xfe\x00garbage")
    assert run("validate", tmp_path / "binary.jsonl") == 2


def test_missing_config_path_is_io_error(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"dataset": "nope.jsonl"}))
    assert run("split", "--config", tmp_path / "c.json") == 2


# -- split --------------------------------------------------------------------


def test_split_table_and_determinism(workspace, capsys):
    cfg = workspace / "config.json"
    assert run("split", "--config", cfg) == 0
    out = capsys.readouterr().out
    assert "E-Prompts" in out
    rows = [ln.split() for ln in out.splitlines() if ln.lstrip().startswith("=")]
    assert len(rows) == 5 and all(r[3] == "20" and r[2] == "80" for r in rows)
    first = (workspace / "runs" / "plan.json").read_bytes()
    assert run("split", "--config", cfg) == 0
    assert (workspace / "runs" / "plan.json").read_bytes() == first
    assert run("split", "--config", cfg, "--seed", "8", "--out", workspace / "p8.json") == 0
    other = json.loads((workspace / "p8.json").read_text())
    assert other["assignment"] != json.loads(first)["assignment"]
    assert sorted(np.bincount(list(other["assignment"].values()))) == [20] * 5


# -- train --------------------------------------------------------------------


def read_log(path):
    lines = path.read_text().splitlines()
    assert lines[0] == "step,epoch,lr_head,lr_encoder,loss"
    return [ln.split(",") for ln in lines[1:]]


def test_train_writes_checkpoint_and_log(workspace):
    cfg = workspace / "config.json"
    assert run("train", "--config", cfg, "--fold", 0) == 0
    fold = workspace / "runs" / "fold0"
    rows = read_log(fold / "total_loss.csv")
    steps_per_epoch = -(-160 // 16)  # 80 train prompts x 2 images
    assert len(rows) == 2 * steps_per_epoch
    assert {r[1] for r in rows} == {"0", "1"}
    first = (fold / "total.ckpt").read_bytes()
    assert run("train", "--config", cfg, "--fold", 0) == 0
    assert (fold / "total.ckpt").read_bytes() == first


def test_train_zero_lr_is_flat(workspace):
    raw = json.loads((workspace / "config.json").read_text())
    raw["training"].update(base_lr=0.0, encoder_lr=0.0, batch_size=160, warmup_steps=1)
    (workspace / "flat.json").write_text(json.dumps(raw))
    assert run("train", "--config", workspace / "flat.json", "--fold", 1) == 0
    losses = [float(r[4]) for r in read_log(workspace / "runs" / "fold1" / "total_loss.csv")]
    assert len(losses) == 2 and losses[0] == pytest.approx(losses[1], rel=1e-12)


def test_train_invalid_fold(workspace):
    assert run("train", "--config", workspace / "config.json", "--fold", 5) == 1


# -- score --------------------------------------------------------------------


def external_fixture(tmp_path, records, element_logits_only=False):
    rows = []
    for r in records:
        rows.append(ExternalDistributionRecord(r.sample_id, TaskKind.TOTAL, None,
                                               {t: 0.2 for t in range(21, 26)},
                                               {t: 0.0 for t in range(21, 26)}))
        for i in range(len(r.elements)):
            if element_logits_only:
                rows.append(ExternalDistributionRecord(r.sample_id, TaskKind.ELEMENT, i, None,
                                                       {20: 0.0, 21: 1.0}))
            else:
                rows.append(ExternalDistributionRecord(r.sample_id, TaskKind.ELEMENT, i,
                                                       {20: 0.25, 21: 0.375}))
    path = tmp_path / "ext.jsonl"
    path.write_text(serialize_external(rows))
    return path


def test_score_external_matches_hand_values(workspace):
    test = parse_dataset(workspace / "test.jsonl")
    ext = external_fixture(workspace, test)
    out = workspace / "pred.jsonl"
    assert run("score", "--config", workspace / "config.json", "--external", ext,
               "--split", "test", "--out", out) == 0
    preds = Predictions.from_jsonl(out)
    assert set(preds.total) == {r.sample_id for r in test}
    for r in test:
        assert preds.total[r.sample_id] == pytest.approx(3.0, abs=1e-12)
        assert preds.elements[r.sample_id] == pytest.approx([0.5312] * len(r.elements), abs=5e-5)


def test_score_external_mode_mismatch_names_sample(workspace, capsys):
    test = parse_dataset(workspace / "test.jsonl")
    ext = external_fixture(workspace, test, element_logits_only=True)
    code = run("score", "--config", workspace / "config.json", "--external", ext, "--split", "test",
               "--out", workspace / "x.jsonl")
    assert code == 1
    assert test[0].sample_id in capsys.readouterr().err
    assert run("score", "--config", workspace / "config.json", "--external", ext, "--split", "test",
               "--mode", "logit-renorm", "--out", workspace / "x.jsonl") == 0


def test_score_checkpoint_bounds_and_coverage(workspace):
    cfg = workspace / "config.json"
    assert run("train", "--config", cfg, "--fold", 2) == 0
    assert run("train", "--config", cfg, "--fold", 2, "--task", "element") == 0
    out = workspace / "eval.jsonl"
    fold = workspace / "runs" / "fold2"
    assert run("score", "--config", cfg, "--checkpoint", fold / "total.ckpt",
               "--element-checkpoint", fold / "element.ckpt", "--split", "eval", "--fold", 2,
               "--out", out) == 0
    preds = Predictions.from_jsonl(out)
    train_ids = set()
    for line in (workspace / "train.jsonl").read_text().splitlines()[1:]:
        train_ids.add(json.loads(line)["sample_id"])
    assert len(preds.total) == 40 and set(preds.total) <= train_ids
    assert all(1.0 <= v <= 5.0 for v in preds.total.values())
    assert all(0.0 <= v <= 1.0 for row in preds.elements.values() for v in row)
    assert run("score", "--config", cfg, "--checkpoint", fold / "element.ckpt") == 1


# -- report -------------------------------------------------------------------


def perfect_predictions(records):
    return Predictions(total={r.sample_id: r.total_score for r in records},
                       elements={r.sample_id: [e.score for e in r.elements] for r in records})


def test_report_perfect_and_shuffled(workspace, capsys):
    recs = parse_dataset(workspace / "train.jsonl")
    aligned = workspace / "aligned.jsonl"
    aligned.write_text(perfect_predictions(recs).to_jsonl())
    shuffled = perfect_predictions(recs)
    ids = list(shuffled.total)
    perm = ids[:]
    random.Random(0).shuffle(perm)
    shuffled.total = {a: shuffled.total[b] for a, b in zip(ids, perm)}
    shuffled.elements = {a: perfect_predictions(recs).elements[a] for a in ids}
    for a, b in zip(ids, perm):
        if len(shuffled.elements[b]) == len(shuffled.elements[a]):
            shuffled.elements[a] = perfect_predictions(recs).elements[b]
    (workspace / "shuffled.jsonl").write_text(shuffled.to_jsonl())
    out = workspace / "report.json"
    assert run("report", "--config", workspace / "config.json", "--predictions", aligned,
               workspace / "shuffled.jsonl", "--out", out) == 0
    runs = json.loads(out.read_text())["runs"]
    assert [r["name"] for r in runs] == ["aligned", "shuffled"]
    assert runs[0]["srcc"] == runs[0]["plcc"] == runs[0]["acc"] == runs[0]["overall"] == 1.0
    assert runs[1]["overall"] < runs[0]["overall"]
    assert "Overall" in capsys.readouterr().out


def test_report_from_metrics(tmp_path, capsys):
    out = tmp_path / "r.json"
    assert run("report", "--from-metrics", "0.8002", "0.8321", "0.8691", "--out", out) == 0
    assert "0.8426" in capsys.readouterr().out
    assert json.loads(out.read_text())["runs"][0]["overall"] == pytest.approx(0.842625, abs=1e-6)


def test_report_id_mismatch(workspace):
    recs = parse_dataset(workspace / "train.jsonl")
    preds = perfect_predictions(recs[:-1])
    (workspace / "short.jsonl").write_text(preds.to_jsonl())
    assert run("report", "--config", workspace / "config.json", "--predictions",
               workspace / "short.jsonl", "--out", workspace / "r.json") == 1


# -- blend --------------------------------------------------------------------


def test_blend_single_fold_rejected(workspace):
    cfg = workspace / "config.json"
    assert run("train", "--config", cfg, "--fold", 0) == 0
    assert run("blend", "--config", cfg, "--checkpoints", workspace / "runs/fold0/total.ckpt") == 1
    assert run("blend", "--config", cfg) == 1  # other folds missing


def test_full_pipeline_is_byte_identical(workspace, capsys):
    cfg = workspace / "config.json"

    def pipeline():
        assert run("split", "--config", cfg) == 0
        for f in range(5):
            assert run("train", "--config", cfg, "--fold", f) == 0
        assert run("blend", "--config", cfg) == 0
        assert run("score", "--config", cfg, "--checkpoint", workspace / "runs/fold0/total.ckpt",
                   "--split", "test") == 0
        return {p.relative_to(workspace): p.read_bytes()
                for p in sorted((workspace / "runs").rglob("*")) if p.is_file()}

    first = pipeline()
    out = capsys.readouterr().out
    for name in ("fold 1", "fold 5", "Avg", "Blend"):
        assert name in out
    report = json.loads((workspace / "runs/blend_total/report.json").read_text())
    assert len(report["validation"]) == 5 and report["test"][-1]["name"] == "Blend"
    assert pipeline() == first


def test_synth_then_score_external(tmp_path):
    assert run("synth", "--out", tmp_path, "--prompts", 10, "--per-prompt", 2) == 0
    cfg = RunConfig.load(tmp_path / "config.json")
    assert cfg.external.exists()
    assert run("score", "--config", tmp_path / "config.json", "--split", "test",
               "--out", tmp_path / "p.jsonl") == 0
    assert run("report", "--config", tmp_path / "config.json", "--dataset", tmp_path / "test.jsonl",
               "--predictions", tmp_path / "p.jsonl", "--out", tmp_path / "r.json") == 0
