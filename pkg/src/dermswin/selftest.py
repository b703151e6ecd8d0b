"""Built-in verification suite: oracle checks runnable from the installed CLI.

Each check recomputes its expected answer from scratch (straight-line
numpy, closed forms, brute-force enumeration) and compares the library
against it, so a passing table certifies the install without needing the
test tree or network access.
"""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .attention import (
    WindowSpec,
    attention_sublayer,
    cyclic_shift,
    cyclic_unshift,
    init_attention_params,
    multi_head_attention,
    region_ids,
    shifted_attention_mask,
    window_partition,
    window_reverse,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import index_dataset, make_synthetic_dataset, stratified_split_counts
from .embedding import PatchConfig, TokenSequence, patchify, unpatchify
from .gradcheck import check_gradients
from .irb import IRBParams, irb
from .metrics import (
    ConfusionMatrix,
    ScoredPredictions,
    accuracy,
    f1_score,
    per_class_prf,
    pr_auc,
    roc_auc,
)
from .model import ModelConfig, forward, init_model, named_parameters
from .ops import layer_norm
from .tensor import Tensor
from .train import OptimState, TrainConfig, adam_step, cross_entropy, evaluate, lr_schedule, train

__all__ = ["run_selftest", "CHECKS"]


def _tiny_config(dropout=0.0, image=8, patch=2, dim=8, window=2, depths=(2,), heads=(2,)):
    return ModelConfig(
        patch=PatchConfig(image_h=image, image_w=image, patch_size=patch, embed_dim=dim),
        depths=depths,
        heads=heads,
        window=window,
        expansion=2,
        kernel=3,
        num_classes=5,
        head_dropout=dropout,
    )


def check_tensor_gradients():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    gamma = Tensor(np.ones(4), requires_grad=True)
    beta = Tensor(np.zeros(4), requires_grad=True)

    def f():
        from .ops import gelu, softmax

        h = gelu(x @ w)
        h = layer_norm(h, gamma, beta)
        return (softmax(h, axis=-1) * h).mean()

    result = check_gradients(f, [("x", x), ("w", w), ("gamma", gamma), ("beta", beta)], tol=1e-5)
    assert result.passed, f"worst {result.worst()}"


def check_patch_round_trip():
    rng = np.random.default_rng(1)
    images = Tensor(rng.standard_normal((2, 8, 12, 3)))
    patches = patchify(images, 4)
    back = unpatchify(patches, 8, 12, 4)
    assert (back.data == images.data).all(), "patchify round trip is not bit-exact"


def check_window_round_trips():
    rng = np.random.default_rng(2)
    tokens = Tensor(rng.standard_normal((2, 36, 5)))
    spec = WindowSpec(window_size=3, shift=0, grid=(6, 6))
    back = window_reverse(window_partition(tokens, spec), spec, batch=2)
    assert (back.data == tokens.data).all(), "window partition round trip is not bit-exact"
    shifted = cyclic_shift(tokens, (6, 6), 1)
    restored = cyclic_unshift(shifted, (6, 6), 1)
    assert (restored.data == tokens.data).all(), "cyclic shift round trip is not bit-exact"


def check_windowed_equals_global():
    rng = np.random.default_rng(3)
    tokens = Tensor(rng.standard_normal((2, 16, 8)))
    params = init_attention_params(8, 2, rng, dtype=np.float64)
    gamma = Tensor(np.ones(8))
    beta = Tensor(np.zeros(8))
    seq = TokenSequence(tokens, (4, 4))
    windowed = attention_sublayer(seq, params, gamma, beta, WindowSpec(4, 0, (4, 4)))
    direct = tokens + multi_head_attention(layer_norm(tokens, gamma, beta), params)
    gap = np.abs(windowed.tokens.data - direct.data).max()
    assert gap <= 1e-12, f"windowed vs global gap {gap:.3e}"


def check_shift_mask_blocks_wrapped_pairs():
    rng = np.random.default_rng(4)
    spec = WindowSpec(window_size=4, shift=2, grid=(8, 8))
    mask = shifted_attention_mask(spec)
    ids = region_ids(spec).reshape(2, 4, 2, 4).transpose(0, 2, 1, 3).reshape(4, 16)
    tokens = Tensor(rng.standard_normal((1, 64, 8)))
    params = init_attention_params(8, 2, rng, dtype=np.float64)
    stats: dict = {}
    shifted = cyclic_shift(tokens, (8, 8), 2)
    multi_head_attention(window_partition(shifted, spec), params, mask=mask, stats=stats)
    weights = stats["weights"]
    for w in range(4):
        different = ids[w][:, None] != ids[w][None, :]
        leak = weights[w][:, different].max() if different.any() else 0.0
        assert leak <= 1e-9, f"masked attention weight {leak:.3e}"


def check_irb_identity():
    rng = np.random.default_rng(5)
    dim, expansion, kernel = 6, 2, 3
    params = IRBParams(
        Tensor(rng.standard_normal((dim, expansion * dim))),
        Tensor(rng.standard_normal(expansion * dim)),
        Tensor(rng.standard_normal((kernel, kernel, expansion * dim))),
        Tensor(np.zeros((expansion * dim, dim))),
        Tensor(np.zeros(dim)),
    )
    seq = TokenSequence(Tensor(rng.standard_normal((2, 16, dim))), (4, 4))
    out = irb(seq, params)
    assert (out.tokens.data == seq.tokens.data).all(), "zero projection must give IRB(x) == x"


def check_full_model_gradients():
    config = ModelConfig(
        patch=PatchConfig(image_h=4, image_w=4, patch_size=2, embed_dim=4),
        depths=(2,),
        heads=(2,),
        window=2,
        expansion=2,
        kernel=3,
        num_classes=3,
        head_dropout=0.0,
    )
    params = init_model(config, seed=0, dtype=np.float64)
    rng = np.random.default_rng(6)
    images = Tensor(rng.standard_normal((1, 4, 4, 3)))
    labels = np.array([1])

    def f():
        logits, _ = forward(images, params, config)
        return cross_entropy(logits, labels)

    result = check_gradients(f, named_parameters(params), tol=1e-3)
    assert result.passed, f"worst {result.worst()}"


def check_checkpoint_round_trip():
    config = _tiny_config()
    params = init_model(config, seed=7)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        save_checkpoint(path, params, config, extra={"note": "selftest"})
        loaded = load_checkpoint(path)
        for (name, got), (_, want) in zip(named_parameters(loaded.params), named_parameters(params)):
            assert (got.data == want.data).all(), f"{name} changed across save/load"
        assert loaded.extra["note"] == "selftest"


def check_cross_entropy():
    loss = cross_entropy(Tensor(np.zeros((2, 5))), [0, 3])
    assert abs(loss.item() - math.log(5)) <= 1e-12, "uniform logits must give ln C"
    rng = np.random.default_rng(8)
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    labels = np.array([0, 2, 1, 1])
    cross_entropy(logits, labels).backward()
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    gap = np.abs(logits.grad - (probs - np.eye(3)[labels]) / 4).max()
    assert gap <= 1e-12, f"cross-entropy gradient gap {gap:.3e}"


def check_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-3
    assert lr_schedule(20, cfg) == 8.5e-4
    assert abs(lr_schedule(40, cfg) - 7.225e-4) <= 1e-18


def check_adam_first_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    state = OptimState(m={"p": np.zeros(1)}, v={"p": np.zeros(1)})
    adam_step([("p", p)], state, lr=1e-2)
    want = 1.0 - 1e-2 / (1.0 + 1e-8)
    assert abs(float(p.data[0]) - want) <= 1e-15, "first Adam step magnitude is off"


def check_confusion_metrics():
    cm = ConfusionMatrix(np.array([[3, 1], [2, 4]]), ["a", "b"])
    m0 = per_class_prf(cm, 0)
    assert abs(m0.precision - 3 / 5) <= 1e-15
    assert abs(m0.sensitivity - 3 / 4) <= 1e-15
    assert abs(m0.f1 - 2 / 3) <= 1e-15
    assert abs(f1_score(0.9604, 0.9621) - 0.9613) <= 1e-4


def check_ranking_metrics():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n = int(rng.integers(4, 40))
        scores = np.round(rng.random(n), 1)
        positives = rng.random(n) < 0.5
        if positives.all():
            positives[0] = False
        if not positives.any():
            positives[0] = True
        scored = ScoredPredictions(np.stack([1 - scores, scores], axis=1), positives.astype(int))

        pos, neg = scores[positives], scores[~positives]
        greater = (pos[:, None] > neg[None, :]).sum()
        equal = (pos[:, None] == neg[None, :]).sum()
        want_roc = (greater + 0.5 * equal) / (len(pos) * len(neg))
        assert abs(roc_auc(scored, 1) - want_roc) <= 1e-12, "ROC-AUC disagrees with pairwise count"

        want_ap, prev = 0.0, 0.0
        for t in np.unique(scores)[::-1]:
            predicted = scores >= t
            tp = (predicted & positives).sum()
            precision = tp / predicted.sum()
            recall = tp / positives.sum()
            want_ap += (recall - prev) * precision
            prev = recall
        assert abs(pr_auc(scored, 1) - want_ap) <= 1e-12, "PR-AUC disagrees with threshold sweep"


def check_split_arithmetic():
    counts = stratified_split_counts([20, 20, 20, 20, 20])
    train = sum(c[0] for c in counts)
    val = sum(c[1] for c in counts)
    test = sum(c[2] for c in counts)
    assert (train, val, test) == (64, 16, 20), f"got {(train, val, test)}"
    assert all(c == (13, 3, 4) or c == (12, 4, 4) for c in counts)


def check_pca_oracle():
    from .analysis import pca_fit_project

    x = np.array(
        [
            [2.5, 2.4, 0.5],
            [0.5, 0.7, 1.1],
            [2.2, 2.9, 0.3],
            [1.9, 2.2, 1.9],
            [3.1, 3.0, 0.8],
            [2.3, 2.7, 1.4],
        ]
    )
    centered = x - x.mean(axis=0)
    values, vectors = np.linalg.eigh(centered.T @ centered / (x.shape[0] - 1))
    order = np.argsort(values)[::-1][:2]
    result = pca_fit_project(x, k=2)
    assert np.abs(result.explained_variance - values[order]).max() <= 1e-8
    for row, want in zip(result.components, vectors[:, order].T):
        gap = min(np.abs(row - want).max(), np.abs(row + want).max())
        assert gap <= 1e-8, f"component gap {gap:.3e}"
    assert result.explained_variance[0] >= result.explained_variance[1]


def check_overfit_path():
    with tempfile.TemporaryDirectory() as tmp:
        root = make_synthetic_dataset(tmp, counts={f"c{i}": 10 for i in range(5)}, size=16)
        index = index_dataset(root)
        config = _tiny_config(image=16, patch=4)
        params = init_model(config, seed=0)
        cfg = TrainConfig(epochs=100, batch_size=16, seed=0, weight_decay=0.0)
        result = train(params, config, index, cfg)
        assert len(result.step_losses) <= 200, "training took more steps than budgeted"
        outcome = evaluate(result.params, config, index, "train")
        acc = accuracy(outcome.confusion)
        assert acc >= 99.0, f"train accuracy only {acc:.1f}%"


CHECKS: list[tuple[str, Callable[[], None]]] = [
    ("tensor gradients vs finite differences", check_tensor_gradients),
    ("patchify round trip", check_patch_round_trip),
    ("window partition and shift round trips", check_window_round_trips),
    ("windowed attention equals global", check_windowed_equals_global),
    ("shift mask blocks wrapped pairs", check_shift_mask_blocks_wrapped_pairs),
    ("residual block identity", check_irb_identity),
    ("full model gradient check", check_full_model_gradients),
    ("checkpoint round trip", check_checkpoint_round_trip),
    ("cross-entropy value and gradient", check_cross_entropy),
    ("learning-rate schedule", check_lr_schedule),
    ("Adam first-step magnitude", check_adam_first_step),
    ("confusion-matrix metrics", check_confusion_metrics),
    ("ranking metrics vs brute force", check_ranking_metrics),
    ("stratified split arithmetic", check_split_arithmetic),
    ("PCA vs dense eigensolver", check_pca_oracle),
    ("end-to-end overfit", check_overfit_path),
]


def run_selftest(out: TextIO) -> int:
    """Run every check, print a pass/fail table, return the failure count."""
    width = max(len(name) for name, _ in CHECKS)
    failures = 0
    started = time.time()
    for name, fn in CHECKS:
        t0 = time.time()
        try:
            fn()
        except Exception as exc:  # noqa: BLE001  (table must keep going)
            failures += 1
            status = f"FAIL  {type(exc).__name__}: {exc}"
        else:
            status = "ok"
        out.write(f"{name:<{width}}  {time.time() - t0:6.2f}s  {status}\n")
    total = time.time() - started
    out.write(f"\n{len(CHECKS) - failures}/{len(CHECKS)} checks passed in {total:.1f}s\n")
    return failures
