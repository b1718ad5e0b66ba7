import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from maplab.losses import (
    EPS,
    ce_classifier_loss,
    coupled_kl_loss,
    kl_backbone_loss,
    mixed_ce_loss,
    total_step_loss,
)
from maplab.nets import count_parameters

from conftest import random_simplex, tiny_model


def kl_loop(t, p, eps=EPS):
    total = 0.0
    for k in range(len(t)):
        if t[k] > 0:
            total += t[k] * (math.log(t[k]) - math.log(max(p[k], eps)))
    return total


def ce_loop(label, logits):
    m = max(logits)
    lse = m + math.log(sum(math.exp(z - m) for z in logits))
    return lse - logits[label]


def test_kl_matches_loop_oracle(rng):
    k = 10
    targets = random_simplex(rng, 1000, k, 0.5)
    preds = random_simplex(rng, 1000, k, 0.5)
    # some exact zeros in the targets exercise the 0 ln 0 convention
    targets[:50, 0] = 0.0
    targets[:50] /= targets[:50].sum(axis=1, keepdims=True)
    oracle = np.array([kl_loop(t, p) for t, p in zip(targets, preds)])
    per_row = kl_backbone_loss(targets, preds, reduction="none").numpy()
    assert np.max(np.abs(per_row - oracle)) < 1e-6
    assert abs(kl_backbone_loss(targets, preds).item() - oracle.mean()) < 1e-6


def test_ce_matches_loop_oracle(rng):
    logits = rng.normal(0, 3, size=(1000, 7))
    labels = rng.integers(0, 7, size=1000)
    per_row = ce_classifier_loss(labels, logits, reduction="none").numpy()
    oracle = np.array([ce_loop(l, z) for l, z in zip(labels, logits)])
    assert np.max(np.abs(per_row - oracle)) < 1e-6
    assert abs(ce_classifier_loss(labels, logits).item() - oracle.mean()) < 1e-6


def test_kl_identical_distributions_is_zero(rng):
    p = random_simplex(rng, 20, 5)
    assert abs(kl_backbone_loss(p, p).item()) < 1e-12


def test_kl_onehot_against_uniform_is_log_k():
    k = 10
    t = np.eye(k)[[3]]
    p = np.full((1, k), 1 / k)
    assert kl_backbone_loss(t, p).item() == pytest.approx(math.log(k), abs=1e-12)


def test_kl_zero_pred_is_finite():
    t = np.array([[0.5, 0.5]])
    p = np.array([[1.0, 0.0]])
    v = kl_backbone_loss(t, p).item()
    assert math.isfinite(v)
    assert v == pytest.approx(0.5 * math.log(0.5) * 2 - 0.5 * math.log(EPS), rel=1e-12)


@given(st.integers(2, 12), st.integers(1, 8), st.integers(0, 2**31))
def test_kl_nonnegative(k, n, seed):
    rng = np.random.default_rng(seed)
    t = random_simplex(rng, n, k, 0.3)
    p = random_simplex(rng, n, k, 0.3)
    assert kl_backbone_loss(t, p).item() >= -1e-12


def test_sum_reduction_is_batch_times_mean(rng):
    t = random_simplex(rng, 16, 4)
    p = random_simplex(rng, 16, 4)
    assert kl_backbone_loss(t, p, "sum").item() == pytest.approx(16 * kl_backbone_loss(t, p).item(), rel=1e-12)


def test_kl_rejects_bad_rows():
    with pytest.raises(ValueError):
        kl_backbone_loss(np.array([[0.5, 0.6]]), np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        kl_backbone_loss(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5, 0.0]]))


def test_ce_rejects_out_of_range_label():
    with pytest.raises(ValueError):
        ce_classifier_loss([3], np.zeros((1, 3)))


def test_mixed_ce_is_lambda_weighted(rng):
    logits = rng.normal(size=(8, 5))
    a, b = rng.integers(0, 5, 8), rng.integers(0, 5, 8)
    lams = rng.uniform(size=8)
    got = mixed_ce_loss(a, b, lams, logits, reduction="none").numpy()
    oracle = [l * ce_loop(x, z) + (1 - l) * ce_loop(y, z) for x, y, l, z in zip(a, b, lams, logits)]
    assert np.allclose(got, oracle, atol=1e-12)


def _batch(rng, n=6, shape=(2, 2, 1), k=3):
    images = rng.normal(size=(n, *shape))
    targets = random_simplex(rng, n, k)
    labels = rng.integers(0, k, n)
    return images, targets, labels


def test_mlp_tiny_under_fifty_parameters():
    assert count_parameters(tiny_model()) <= 50


def test_gradients_match_central_differences(rng):
    # The barrier makes the update direction for backbone parameters the
    # derivative of L_B alone, while g and h see the derivative of L_total
    # (L_B does not depend on h, L_H does not depend on g).
    model = tiny_model()
    images, targets, labels = _batch(rng)
    params = list(model.parameters())
    backbone = {id(p) for p in model.backbone.parameters()}
    loss = total_step_loss(model, images, targets, labels).total
    grads = torch.autograd.grad(loss, params)
    h = 1e-6
    worst = 0.0
    for p, g in zip(params, grads):
        part = "backbone_loss" if id(p) in backbone else "total"

        def f():
            return getattr(total_step_loss(model, images, targets, labels), part).item()

        flat = p.data.view(-1)
        for j in range(flat.numel()):
            old = flat[j].item()
            flat[j] = old + h
            up = f()
            flat[j] = old - h
            down = f()
            flat[j] = old
            fd = (up - down) / (2 * h)
            an = g.view(-1)[j].item()
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    assert worst < 1e-4


def test_classifier_loss_never_reaches_backbone(rng):
    model = tiny_model()
    images, targets, labels = _batch(rng)
    bd = total_step_loss(model, images, targets, labels)
    grads = torch.autograd.grad(bd.classifier_loss, list(model.backbone.parameters()), allow_unused=True)
    for g in grads:
        assert g is None or torch.count_nonzero(g) == 0
    # and the backbone gradient of the total equals that of L_B alone
    full = torch.autograd.grad(bd.total, list(model.backbone.parameters()), retain_graph=True)
    only_b = torch.autograd.grad(bd.backbone_loss, list(model.backbone.parameters()))
    for a, b in zip(full, only_b):
        assert torch.equal(a, b)


def test_backbone_loss_never_reaches_probe(rng):
    model = tiny_model()
    images, targets, labels = _batch(rng)
    bd = total_step_loss(model, images, targets, labels)
    grads = torch.autograd.grad(bd.backbone_loss, list(model.probe.parameters()), allow_unused=True)
    assert all(g is None for g in grads)


def test_onehot_kl_equals_ce_through_head(rng):
    # with one-hot targets the entropy term vanishes and KL reduces to CE of g's distribution
    model = tiny_model()
    images, _, labels = _batch(rng)
    targets = np.eye(3)[labels]
    bd = total_step_loss(model, images, targets, labels)
    x = torch.from_numpy(images).permute(0, 3, 1, 2)
    log_p = model.proj.log_probs(model.backbone(x))
    ce = -log_p[torch.arange(len(labels)), torch.from_numpy(labels)].mean()
    assert abs(bd.backbone_loss.item() - ce.item()) < 1e-6


def test_coupled_kl_flows_into_backbone_and_probe(rng):
    model = tiny_model()
    images, targets, _ = _batch(rng)
    loss, _ = coupled_kl_loss(model, images, targets)
    gb = torch.autograd.grad(loss, list(model.backbone.parameters()) + list(model.probe.parameters()))
    assert all(torch.count_nonzero(g) > 0 for g in gb)
