import numpy as np
import pytest

from qgalore.data import DataError, ingest_synthetic, ingest_text, synthetic_corpus
from qgalore.model import ModelConfig
from qgalore.trainer import DataConfig, RunConfig, run_training


def test_ab_stream_vocab_and_memorization(tmp_path):
    path = tmp_path / "ab.txt"
    path.write_bytes(b"ab" * 5000)
    data = ingest_text(path)
    assert data.vocab == b"ab"
    cfg = RunConfig(
        method="qgalore", total_steps=300, eval_every=100, seed=0,
        model=ModelConfig(context=4, embed_dim=8, n_blocks=0),
        data=DataConfig(kind="text", path=str(path)),
    )
    cfg = cfg.__class__.from_dict({**cfg.to_dict(), "optimizer": {"lr": 0.02}})
    result = run_training(cfg)
    assert result.final.val_loss < 0.05


def test_split_is_contiguous_95_5(tmp_path):
    path = tmp_path / "t.txt"
    path.write_bytes(bytes(range(200)) * 10)
    data = ingest_text(path)
    assert data.train.size == 1900 and data.val.size == 100
    assert data.vocab_size == 200
    assert np.array_equal(data.val, np.arange(100, 200))


def test_ingest_is_deterministic(tmp_path):
    path = tmp_path / "t.txt"
    path.write_bytes(synthetic_corpus(5000, seed=1))
    a, b = ingest_text(path), ingest_text(path)
    assert a.vocab == b.vocab
    assert a.train.tobytes() == b.train.tobytes() and a.val.tobytes() == b.val.tobytes()


def test_ingest_errors(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_bytes(b"")
    with pytest.raises(DataError, match="empty"):
        ingest_text(empty)
    with pytest.raises(DataError, match="cannot read"):
        ingest_text(tmp_path / "missing.txt")


def test_text_batches(tmp_path):
    path = tmp_path / "t.txt"
    path.write_bytes(synthetic_corpus(20_000, seed=2))
    data = ingest_text(path)
    ctx, tgt = data.train_batch(seed=3, step=5, batch_size=8, context=16)
    assert ctx.shape == (8, 16) and tgt.shape == (8,)
    again = data.train_batch(seed=3, step=5, batch_size=8, context=16)
    assert np.array_equal(ctx, again[0])
    other = data.train_batch(seed=3, step=6, batch_size=8, context=16)
    assert not np.array_equal(ctx, other[0])
    vctx, vtgt = data.val_batch(16)
    assert vctx.shape[0] == vtgt.shape[0] <= 2048


def test_context_longer_than_split(tmp_path):
    path = tmp_path / "t.txt"
    path.write_bytes(b"abc" * 10)
    with pytest.raises(DataError):
        ingest_text(path).val_batch(32)


def test_noise_free_synthetic_has_zero_optimum():
    data = ingest_synthetic(8, 5, noise=0.0, seed=4)
    x, y = data.val_batch()
    assert np.allclose(x.astype(np.float64) @ data.weight.T, y)


def test_synthetic_noise_is_a_variance():
    data = ingest_synthetic(16, 16, noise=0.01, seed=5, n_val=20_000)
    x, y = data.val_batch()
    resid = y - x.astype(np.float64) @ data.weight.T
    assert np.var(resid) == pytest.approx(0.01, rel=0.03)


def test_synthetic_is_seeded():
    a, b = ingest_synthetic(4, 3, 0.1, seed=6), ingest_synthetic(4, 3, 0.1, seed=6)
    assert np.array_equal(a.weight, b.weight) and np.array_equal(a.val_x, b.val_x)
    assert not np.array_equal(a.weight, ingest_synthetic(4, 3, 0.1, seed=7).weight)
    with pytest.raises(DataError):
        ingest_synthetic(0, 3, 0.1, seed=0)


def test_synthetic_corpus():
    text = synthetic_corpus(50_000, seed=8)
    assert len(text) == 50_000
    assert text == synthetic_corpus(50_000, seed=8)
    assert len(set(text)) < 60
    assert text.count(b" ") > 5000
