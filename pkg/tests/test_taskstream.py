import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qtuning import taskstream as ts
from qtuning.errors import InvalidConfigError


def test_relatedness_one_gives_identical_prototypes():
    cfg = ts.StreamConfig(relatedness=1.0)
    np.testing.assert_array_equal(ts.task_distributions(cfg, 0), ts.task_distributions(cfg, 1))


def test_relatedness_zero_prototypes_far_apart():
    a = ts.task_distributions(ts.StreamConfig(relatedness=0.0, seed=0), 0)
    b = ts.task_distributions(ts.StreamConfig(relatedness=0.0, seed=1), 1)
    assert ts.total_variation(a[0], b[0]) > 0.2


def test_seventy_task_stream_shape():
    tasks = ts.generate_stream(ts.StreamConfig(n_tasks=70, k_shot=20, k_test=5, k_val=2))
    assert len(tasks) == 70
    assert all(t.train.x.shape == (40, 16) for t in tasks)


def test_tokens_stay_in_signal_half_and_classes_distinct():
    cfg = ts.StreamConfig(n_tasks=4)
    for t in ts.generate_stream(cfg):
        for split in (t.train, t.val, t.test):
            assert split.x.min() >= cfg.vocab_size // 2 and split.x.max() < cfg.vocab_size
            assert set(np.unique(split.y)) == {0, 1}
        assert ts.min_class_tv(t.class_dists) >= 0.2
        np.testing.assert_allclose(t.class_dists.sum(axis=1), 1.0, atol=1e-12)


def test_generation_is_pure():
    cfg = ts.StreamConfig(n_tasks=3)
    a, b = ts.generate_stream(cfg), ts.generate_stream(cfg)
    for x, y in zip(a, b):
        assert x.train.x.tobytes() == y.train.x.tobytes() and x.test.y.tobytes() == y.test.y.tobytes()


@pytest.mark.parametrize(
    "kw",
    [
        {"vocab_size": 40, "support": 16},
        {"background": 0.85},
        {"relatedness": 1.5},
        {"k_shot": 0},
        {"n_classes": 1},
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(InvalidConfigError):
        ts.generate_stream(ts.StreamConfig(**kw))


def test_permute_order():
    tasks = ts.generate_stream(ts.StreamConfig(n_tasks=6, k_test=2))
    a, b = ts.permute_order(tasks, 3), ts.permute_order(tasks, 3)
    assert [t.task_id for t in a] == [t.task_id for t in b]
    perm = [t.task_id for t in a]
    inv = np.argsort(perm)
    assert [a[i].task_id for i in inv] == list(range(6))
    orders = {tuple(t.task_id for t in ts.permute_order(tasks, s)) for s in (0, 1, 2)}
    assert len(orders) == 3
    assert a[0] is tasks[perm[0]]


def test_order_seed_in_config():
    cfg = ts.StreamConfig(n_tasks=5, k_test=2, order_seed=7)
    ids = [t.task_id for t in ts.generate_stream(cfg)]
    assert sorted(ids) == list(range(5)) and ids != list(range(5))


def test_jsonl_round_trip(tmp_path):
    tasks = ts.generate_stream(ts.StreamConfig(n_tasks=2, k_test=3, k_val=2, k_shot=4))
    path = tmp_path / "tasks.jsonl"
    ts.export_jsonl(tasks, path)
    back = ts.import_jsonl(path)
    for a, b in zip(tasks, back):
        assert a.task_id == b.task_id
        for name in ("train", "val", "test"):
            assert np.array_equal(getattr(a, name).x, getattr(b, name).x)
            assert np.array_equal(getattr(a, name).y, getattr(b, name).y)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000), st.integers(2, 4))
def test_distributions_valid_for_any_relatedness(rho, seed, k):
    cfg = ts.StreamConfig(relatedness=rho, seed=seed, n_classes=k)
    d = ts.task_distributions(cfg, 0)
    assert d.shape == (k, cfg.vocab_size)
    np.testing.assert_allclose(d.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(d[:, : cfg.vocab_size // 2] == 0.0)
