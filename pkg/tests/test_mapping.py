import numpy as np
import pytest
import torch

from maplab.augment import AugKind, AugPolicy, apply_policy
from maplab.datasets import DatasetSpec, NormalizationStats, load_dataset, normalize
from maplab.errors import CacheIntegrityError, StrategyConfigError
from maplab.mapping import SoftCache, Strategy, build_soft_cache, map_targets, one_hot, teacher_soft
from maplab.nets import BackboneSpec, build_model

K = 4


@pytest.fixture(scope="module")
def pool():
    ds = load_dataset(DatasetSpec("synthetic-blobs", num_classes=K, image_shape=(4, 4, 3), n=40, seed=9, spread=0.2))
    # give every image some texture so crops and flips change pixels
    noise = np.random.default_rng(0).uniform(-0.1, 0.1, ds.images.shape).astype(np.float32)
    ds.images = np.clip(ds.images + noise, 0, 1)
    return ds


@pytest.fixture(scope="module")
def teacher():
    model = build_model(BackboneSpec("mlp-tiny", (4, 4, 3), 8, (16,)), K, seed=3).to(torch.float64)
    model.eval()
    return model


def _key(*arrays):
    return tuple(np.asarray(a).tobytes() for a in arrays)


def test_fusion_properties_over_500_batches(pool, teacher):
    stats = NormalizationStats.from_dataset(pool)
    cache = build_soft_cache(teacher, pool, stats, 2.0, "t")
    rng = np.random.default_rng(2024)
    kinds = list(AugKind)
    violations = 0
    seen_b = {}
    for _ in range(500):
        kind = kinds[rng.integers(len(kinds))]
        pos = rng.integers(0, len(pool), size=12)  # repeats on purpose
        views = apply_policy(pool.images[pos], pool.labels[pos], pool.indices[pos], AugPolicy(kind), rng, stats)
        ta = map_targets("A", views, K)
        tb = map_targets("B", views, K, teacher=teacher)
        tc = map_targets("C", views, K, cache=cache)
        for i in range(len(views)):
            if views.is_mixed:
                lam = views.lams[i]
                ea = lam * one_hot([views.labels[i]], K)[0] + (1 - lam) * one_hot([views.partner_labels[i]], K)[0]
                ec = lam * cache.lookup([views.origins[i]])[0] + (1 - lam) * cache.lookup([views.partners[i]])[0]
            else:
                ea = one_hot([views.labels[i]], K)[0]
                ec = cache.lookup([views.origins[i]])[0]
            violations += not np.array_equal(ta[i], ea)
            violations += not np.array_equal(tc[i], ec)
            key = _key(views.images[i])
            if key in seen_b:
                violations += not np.allclose(seen_b[key], tb[i], rtol=0, atol=1e-12)
            else:
                seen_b[key] = tb[i]
        # distinct pixels give distinct B targets
        for i in range(len(views)):
            for j in range(i + 1, len(views)):
                same_pixels = np.array_equal(views.images[i], views.images[j])
                same_target = np.allclose(tb[i], tb[j], rtol=0, atol=1e-12)
                violations += same_pixels != same_target
    assert violations == 0
    # the run must actually have exercised repeated pixel tensors
    assert len(seen_b) < 500 * 12


def test_strategy_c_shares_target_across_views(pool, teacher, rng):
    stats = NormalizationStats.from_dataset(pool)
    cache = build_soft_cache(teacher, pool, stats, 2.0)
    pos = np.zeros(8, dtype=int)
    views = apply_policy(pool.images[pos], pool.labels[pos], pool.indices[pos], AugPolicy(AugKind.StdAug), rng, stats)
    tc = map_targets("C", views, K, cache=cache)
    tb = map_targets("B", views, K, teacher=teacher)
    assert np.all(tc == tc[0])
    assert len({row.tobytes() for row in tb}) > 1


def test_b_equals_teacher_on_views(pool, teacher, rng):
    stats = NormalizationStats.from_dataset(pool)
    views = apply_policy(pool.images[:6], pool.labels[:6], pool.indices[:6], AugPolicy(AugKind.MixUp), rng, stats)
    tb = map_targets("B", views, K, teacher=teacher, tau=3.0)
    assert np.allclose(tb, teacher_soft(teacher, views.images, 3.0))
    assert np.allclose(tb.sum(axis=1), 1.0)


def test_targets_lie_on_simplex(pool, teacher, rng):
    stats = NormalizationStats.from_dataset(pool)
    cache = build_soft_cache(teacher, pool, stats, 2.0)
    views = apply_policy(pool.images[:10], pool.labels[:10], pool.indices[:10], AugPolicy(AugKind.CutMix), rng, stats)
    for s, kw in (("A", {}), ("B", {"teacher": teacher}), ("C", {"cache": cache})):
        t = map_targets(s, views, K, **kw)
        assert t.shape == (10, K) and np.all(t >= 0) and np.allclose(t.sum(axis=1), 1.0)


def test_missing_prerequisites(pool):
    views = apply_policy(pool.images[:2], pool.labels[:2], pool.indices[:2], AugPolicy(), np.random.default_rng(0),
                         NormalizationStats.identity(3))
    with pytest.raises(StrategyConfigError):
        map_targets("B", views, K)
    with pytest.raises(StrategyConfigError):
        map_targets("C", views, K)
    with pytest.raises(ValueError):
        map_targets("D", views, K)
    assert Strategy.A.needs_teacher is False


def test_cache_lookup_missing_index():
    cache = SoftCache([0, 1], np.eye(2), "t", 2.0)
    with pytest.raises(CacheIntegrityError):
        cache.lookup([2])
    with pytest.raises(CacheIntegrityError):
        SoftCache([0, 0], np.eye(2), "t", 2.0)


def test_cache_file_round_trip(pool, teacher, tmp_path):
    stats = NormalizationStats.from_dataset(pool)
    cache = build_soft_cache(teacher, pool, stats, 2.0, "teacher-xyz")
    path = cache.save(tmp_path / "c.npz")
    back = SoftCache.load(path)
    assert back.teacher_id == "teacher-xyz" and back.tau == 2.0
    assert np.array_equal(back.indices, cache.indices) and np.array_equal(back.probs, cache.probs)
    assert set(back.entries) == set(int(i) for i in pool.indices)


def test_cache_matches_unaugmented_teacher_output(pool, teacher):
    stats = NormalizationStats.from_dataset(pool)
    cache = build_soft_cache(teacher, pool, stats, 2.0)
    assert np.allclose(cache.probs, teacher_soft(teacher, normalize(pool.images, stats), 2.0))


def test_teacher_shape_mismatch(teacher):
    with pytest.raises(ValueError):
        teacher_soft(teacher, np.zeros((2, 5, 5, 3)), 2.0)


def test_teacher_mode_restored(teacher, pool):
    teacher.train()
    teacher_soft(teacher, normalize(pool.images[:3], NormalizationStats.identity(3)), 2.0)
    assert teacher.training
    teacher.eval()
