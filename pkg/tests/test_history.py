import numpy as np
import pytest

from tabkit.history import (HistoryError, LossHistoryMatrix, LossRecorder, finalize,
                            read_history, write_history)


def test_finalize_stacks_columns():
    h = finalize([np.array([1.0, 2.0]), np.array([0.5, 0.25])], [0, 1])
    assert h.values.tolist() == [[1.0, 0.5], [2.0, 0.25]]
    assert (h.N, h.T) == (2, 2)
    assert h.rows_of_class(1).tolist() == [1]


def test_finalize_rejects_ragged():
    with pytest.raises(HistoryError):
        finalize([np.ones(3), np.ones(2)], [0, 0, 0])


def test_finalize_names_nan():
    with pytest.raises(HistoryError, match="sample 1 at epoch 2"):
        finalize([np.ones(3), np.ones(3), np.array([1, np.nan, 1])], [0, 0, 0])


def test_finalize_rejects_negative():
    with pytest.raises(HistoryError):
        finalize([np.array([-1.0])], [0])


def test_recorder_scatter_and_missing():
    rec = LossRecorder(4)
    rec.record(0, np.array([2, 0]), np.array([0.2, 0.0]))
    rec.record(0, np.array([1, 3]), np.array([0.1, 0.3]))
    assert rec.finalize([0, 0, 1, 1]).values[:, 0].tolist() == pytest.approx([0, .1, .2, .3])
    rec.record(1, np.array([0]), np.array([1.0]))
    with pytest.raises(HistoryError):  # samples 1..3 never seen in epoch 1
        rec.finalize([0, 0, 1, 1])


@pytest.mark.parametrize("seed", range(10))
def test_tabh_roundtrip(tmp_path, seed):
    rng = np.random.default_rng(seed)
    n, t = int(rng.integers(0, 40)), int(rng.integers(0, 8))
    h = LossHistoryMatrix(rng.exponential(size=(n, t)).astype(np.float32),
                          rng.integers(0, 5, n))
    write_history(h, tmp_path / "h.tabh")
    back = read_history(tmp_path / "h.tabh")
    assert back.values.tobytes() == h.values.tobytes() and back.values.shape == (n, t)
    assert np.array_equal(back.labels, h.labels)


def test_tabh_truncated_and_trailing(tmp_path):
    h = LossHistoryMatrix(np.ones((3, 2), np.float32), np.zeros(3, np.int64))
    write_history(h, tmp_path / "h.tabh")
    data = (tmp_path / "h.tabh").read_bytes()
    (tmp_path / "short").write_bytes(data[:-1])
    with pytest.raises(HistoryError, match="shorter than header"):
        read_history(tmp_path / "short")
    (tmp_path / "long").write_bytes(data + b"\0")
    with pytest.raises(HistoryError, match="trailing"):
        read_history(tmp_path / "long")


def test_identifier_losses_fall_on_blobs():
    from conftest import blob_dataset
    from tabkit.nn import EarlyStop, ModelSpec, TrainConfig, build_model, train

    ds = blob_dataset(200, seed=1, spread=0.2)
    rec = LossRecorder(len(ds))
    cfg = TrainConfig(batch_size=32, lr=1e-2, max_epochs=20, early_stop=EarlyStop("train_acc"))
    train(build_model(ModelSpec("mlp", ds.shape, 2, hidden=(16,)), 0), ds, None, cfg, recorder=rec)
    h = rec.finalize(ds.labels)
    assert h.T >= 2 and (h.values[:, -1] < h.values[:, 0]).all()


def test_tabh_small_and_large(tmp_path):
    for n, t, seed in [(2, 3, 0)] + [(1000, 40, s) for s in range(10)]:
        rng = np.random.default_rng(seed)
        h = LossHistoryMatrix(rng.exponential(size=(n, t)).astype(np.float32),
                              rng.integers(0, 10, n))
        write_history(h, tmp_path / "h.tabh")
        assert read_history(tmp_path / "h.tabh").values.tobytes() == h.values.tobytes()
