import csv

import numpy as np
import pytest

from taillight.checkpoint import Checkpoint
from taillight.evaluation import EvalReport, alpha_image, build_report, confusion_matrix, evaluate, \
    export_attention, majority_vote, write_stage_comparison
from taillight.model import init_params
from taillight.preprocess import make_chunks
from taillight.states import CLASS_CODES
from taillight.imageio import read_pnm


def random_ckpt(cfg, stage=3):
    return Checkpoint(cfg, stage, {k: v.data for k, v in init_params(cfg.model, 0).items()})


def test_oracle_predictions_give_100():
    labels = np.repeat(np.arange(8), 3)
    rep = build_report(labels, labels, [f"v{i // 3}" for i in range(24)])
    assert rep.total == 100 and rep.chunk_accuracy == 100
    assert (rep.per_class == 100).all()


def test_known_confusion_cell():
    labels = [0, 0, 2, 2, 2, 5]
    preds = [0, 0, 2, 4, 2, 5]
    rep = build_report(labels, preds, ["a", "b", "c", "d", "e", "f"])
    hand = np.zeros((8, 8), int)
    hand[0, 0] = 2
    hand[2, 2] = 2
    hand[2, 4] = 1
    hand[5, 5] = 1
    np.testing.assert_array_equal(rep.confusion, hand)
    assert rep.per_class[2] == pytest.approx(200 / 3)
    assert np.isnan(rep.per_class[1])
    assert rep.total == pytest.approx(500 / 6)


def test_majority_vote_ties_to_lowest():
    assert majority_vote([3, 1, 3, 1]) == 1
    assert majority_vote([7]) == 7
    rep = build_report([4, 4, 4, 4], [6, 2, 6, 2], ["v"] * 4)
    assert rep.confusion[4, 2] == 1


def test_report_consistency_randomized():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 200))
        vids = rng.integers(0, 30, size=n)
        vid_label = rng.integers(0, 8, size=30)
        labels = vid_label[vids]
        preds = np.where(rng.random(n) < 0.7, labels, rng.integers(0, 8, size=n))
        rep = build_report(labels, preds, vids.tolist())
        np.testing.assert_array_equal(rep.chunk_confusion.sum(axis=1), np.bincount(labels, minlength=8))
        assert rep.chunk_accuracy == pytest.approx(100 * np.trace(rep.chunk_confusion) / n)
        assert rep.confusion.sum() == len(set(vids.tolist()))
        assert rep.total == pytest.approx(100 * np.trace(rep.confusion) / rep.confusion.sum())


def test_mixed_labels_in_one_video_rejected():
    with pytest.raises(ValueError):
        build_report([0, 1], [0, 1], ["v", "v"])


def test_table_layout(tmp_path):
    rep = EvalReport(confusion_matrix([0, 1], [0, 1]), confusion_matrix([0, 1, 1], [0, 1, 0]))
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["level", *CLASS_CODES, "Total"]
    assert rows[1][0] == "video" and rows[1][3] == "absent" and rows[1][-1] == "100.00"
    assert rows[2][2] == "50.00"


def test_evaluate_checkpoint(tiny_cfg, small_dataset):
    rep = evaluate(random_ckpt(tiny_cfg), small_dataset, "test")
    assert rep.chunk_confusion.sum() > 0 and rep.confusion.sum() == 8


def test_alpha_image():
    img = alpha_image(np.full((4, 4), 1 / 16), 32)
    assert img.shape == (32, 32) and len(np.unique(img)) == 1
    a = np.zeros((2, 2))
    a[1, 0] = 1
    img = alpha_image(a, 4)
    np.testing.assert_array_equal(img, [[0, 0, 0, 0], [0, 0, 0, 0], [255, 255, 0, 0], [255, 255, 0, 0]])


def test_export_attention_files(tiny_cfg, small_dataset, tmp_path):
    seq = small_dataset.sequence(small_dataset.split("test")[2])
    chunk = make_chunks(seq, 16, 8, "global_shift", 2, 32)[0]
    trace = export_attention(random_ckpt(tiny_cfg), chunk, tmp_path)
    assert len(list(tmp_path.glob("alpha_*.pgm"))) == 16
    assert read_pnm(tmp_path / "alpha_00.pgm").shape == (32, 32)
    beta = np.loadtxt(tmp_path / "beta.csv", delimiter=",")
    assert beta.shape == (16, 16)
    assert abs(beta[-1].sum() - 1) <= 1e-6
    stats = list(csv.DictReader(open(tmp_path / "alpha_stats.csv")))
    assert len(stats) == 16
    assert float(stats[0]["max_weight"]) == pytest.approx(trace.alpha[0].max())
    raw = list(csv.DictReader(open(tmp_path / "alpha.csv")))
    assert len(raw) == 16 * 16


def test_stage1_export_is_uniform_gray(tiny_cfg, small_dataset, tmp_path):
    seq = small_dataset.sequence(small_dataset.split("test")[0])
    chunk = make_chunks(seq, 16, 8, "global_shift", 2, 32)[0]
    export_attention(random_ckpt(tiny_cfg, stage=1), chunk, tmp_path)
    img = read_pnm(tmp_path / "alpha_05.pgm")
    assert len(np.unique(img)) == 1


def test_stage_comparison_report(tmp_path):
    write_stage_comparison(tmp_path / "s.csv", {1: [80.0, 90.0, 85.0], 2: [90.0, 92.0, 91.0], 3: [95, 96, 97]})
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["attention"] for r in rows] == ["none", "T", "S+T"]
    assert rows[0]["median_chunk_accuracy"] == "85.0000"
