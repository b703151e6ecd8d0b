import numpy as np
import pytest

from dermswin.analysis import pca_fit_project
from dermswin.figures import (
    save_confusion_matrix,
    save_pca_scatter,
    save_pr_curves,
    save_roc_curves,
    save_training_curves,
)
from dermswin.metrics import ConfusionMatrix, ScoredPredictions

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def assert_png(path):
    data = path.read_bytes()
    assert data[:8] == PNG_MAGIC
    assert len(data) > 1000


@pytest.fixture()
def scored():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=40)
    logits = rng.random((40, 3)) + np.eye(3)[labels]
    probs = logits / logits.sum(axis=1, keepdims=True)
    return ScoredPredictions(probs, labels)


def test_training_curves(tmp_path):
    history = [
        {"epoch": e, "lr": 1e-3, "train_loss": 2.0 / (e + 1), "val_acc": 50.0 + e, "val_f1": 0.5 + 0.01 * e}
        for e in range(10)
    ]
    out = save_training_curves(history, tmp_path / "curves.png")
    assert_png(out)


def test_confusion_matrix(tmp_path):
    cm = ConfusionMatrix(np.array([[8, 1, 0], [2, 7, 1], [0, 0, 9]]), ["ash", "birch", "cedar"])
    assert_png(save_confusion_matrix(cm, tmp_path / "cm.png"))


def test_roc_and_pr(tmp_path, scored):
    assert_png(save_roc_curves(scored, ["ash", "birch", "cedar"], tmp_path / "roc.png"))
    assert_png(save_pr_curves(scored, ["ash", "birch", "cedar"], tmp_path / "pr.png"))


def test_curves_skip_absent_class(tmp_path):
    probs = np.array([[0.7, 0.2, 0.1], [0.3, 0.5, 0.2], [0.6, 0.3, 0.1]])
    scored = ScoredPredictions(probs, np.array([0, 1, 0]))  # class 2 absent
    assert_png(save_roc_curves(scored, ["ash", "birch", "cedar"], tmp_path / "roc.png"))


def test_pca_scatter(tmp_path):
    rng = np.random.default_rng(1)
    features = rng.standard_normal((30, 6))
    labels = np.arange(30) % 3
    result = pca_fit_project(features, labels=labels, k=2)
    assert_png(save_pca_scatter(result, tmp_path / "pca.png", ["ash", "birch", "cedar"]))


def test_pca_scatter_unlabeled(tmp_path):
    rng = np.random.default_rng(2)
    result = pca_fit_project(rng.standard_normal((12, 4)), k=2)
    assert_png(save_pca_scatter(result, tmp_path / "pca.png"))
