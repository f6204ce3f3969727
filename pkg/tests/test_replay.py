import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clpad.replay import EmptyBufferError, ReplayBuffer
from clpad.taskstream import Sample


def _samples(task_id, n, size=4):
    # pixel value encodes the index so down-sampling can be traced
    return [Sample(np.full((size, size, 3), i % 256, np.uint8), task_id=task_id) for i in range(n)]


def test_fill_and_split():
    buf = ReplayBuffer(40, 0).update_after_task(_samples(0, 200), 0)
    assert buf.counts() == {0: 40}
    buf.update_after_task(_samples(1, 200), 1)
    assert buf.counts() == {0: 20, 1: 20}


def test_small_task_is_stored_whole():
    buf = ReplayBuffer(40, 0).update_after_task(_samples(0, 7), 0)
    assert buf.counts() == {0: 7}


def test_ten_task_run_count_oracle():
    buf = ReplayBuffer(300, 0)
    for t in range(10):
        buf.update_after_task(_samples(t, 400), t)
        expected = [300 // (t + 1) + (1 if k < 300 % (t + 1) else 0) for k in range(t + 1)]
        assert sorted(buf.counts().values(), reverse=True) == expected
    assert buf.counts() == {t: 30 for t in range(10)}
    assert len(buf) == 300


def test_errors():
    with pytest.raises(ValueError):
        ReplayBuffer(0)
    buf = ReplayBuffer(5)
    with pytest.raises(EmptyBufferError):
        buf.sample_batch(3)
    assert buf.sample_batch(0) == []
    buf.update_after_task(_samples(0, 3), 0)
    with pytest.raises(ValueError):
        buf.update_after_task(_samples(0, 3), 0)
    with pytest.raises(ValueError):
        buf.mixed_batch([])


def test_single_task_draws():
    buf = ReplayBuffer(10, 1).update_after_task(_samples(3, 10), 3)
    assert {s.task_id for s in buf.sample_batch(50)} == {3}


def test_task_uniform_frequencies():
    buf = ReplayBuffer(40, 2)
    buf.stores = {0: _samples(0, 30), 1: _samples(1, 10)}
    draws = buf.sample_batch(10_000)
    freq = np.mean([s.task_id == 0 for s in draws])
    assert abs(freq - 0.5) <= 0.02 and abs((1 - freq) - 0.5) <= 0.02


def test_mixed_batch():
    current = _samples(2, 8)
    empty = ReplayBuffer(10, 0)
    mixed = empty.mixed_batch(current)
    assert sorted(id(s) for s in mixed) == sorted(id(s) for s in current)

    buf = ReplayBuffer(10, 0).update_after_task(_samples(0, 10), 0).update_after_task(_samples(1, 10), 1)
    mixed = buf.mixed_batch(current)
    assert len(mixed) == 16
    assert sum(s.task_id == 2 for s in mixed) == 8
    assert all(s.task_id < 2 for s in mixed if s.task_id != 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.lists(st.integers(0, 80), min_size=1, max_size=12), st.integers(0, 10**6))
def test_capacity_balance_and_subset_chain(capacity, sizes, seed):
    buf = ReplayBuffer(capacity, seed)
    for t, n in enumerate(sizes):
        before = {k: [id(s) for s in v] for k, v in buf.stores.items()}
        task = _samples(t, n)
        buf.update_after_task(task, t)
        assert len(buf) <= capacity
        counts = buf.counts()
        quotas = buf.quotas(t + 1)
        assert all(c <= min(sizes[k], max(quotas)) for k, c in counts.items())
        if all(n_k >= max(quotas) for n_k in sizes[: t + 1]):
            assert max(counts.values()) - min(counts.values()) <= 1
        for k, ids in before.items():
            assert set(id(s) for s in buf.stores[k]) <= set(ids)
        assert {id(s) for s in buf.stores[t]} <= {id(s) for s in task}


def test_determinism():
    def run(seed):
        buf = ReplayBuffer(12, seed)
        for t in range(4):
            buf.update_after_task(_samples(t, 20), t)
        return [int(s.image[0, 0, 0]) for v in buf.stores.values() for s in v], [
            (s.task_id, int(s.image[0, 0, 0])) for s in buf.sample_batch(30)
        ]

    assert run(3) == run(3)
    assert run(3) != run(4)


def test_save_load_roundtrip(tmp_path):
    buf = ReplayBuffer(6, 9).update_after_task(_samples(0, 10), 0).update_after_task(_samples(1, 10), 1)
    buf.save(tmp_path / "buf")
    back = ReplayBuffer.load(tmp_path / "buf")
    assert back.counts() == buf.counts()
    assert all(a == b for t in buf.stores for a, b in zip(buf.stores[t], back.stores[t]))
    assert [int(s.image[0, 0, 0]) for s in back.sample_batch(10)] == [
        int(s.image[0, 0, 0]) for s in buf.sample_batch(10)
    ]


def test_nbytes_counts_raw_images():
    buf = ReplayBuffer(5, 0).update_after_task(_samples(0, 5, size=16), 0)
    assert buf.nbytes() == 5 * 16 * 16 * 3
