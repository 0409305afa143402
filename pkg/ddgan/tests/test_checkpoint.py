import numpy as np
import pytest

from ddgan.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from ddgan.models import TrainConfig


@pytest.fixture
def checkpoint():
    rng = np.random.default_rng(0)
    config = TrainConfig(T=2, hidden_dim=8, seed=3)
    return Checkpoint(
        config=config,
        data_dim=2,
        iteration=10,
        generator={"hidden0.weight": rng.normal(size=(4, 8)), "out.bias": rng.normal(size=2)},
        discriminator={"out.weight": rng.normal(size=(8, 1))},
        ema={"hidden0.weight": rng.normal(size=(4, 8)), "out.bias": rng.normal(size=2)},
        rng_state={"seed": 3, "next_iteration": 10},
        optimizer_g={"steps": 10, "m": [np.ones((4, 8)), np.ones(2)], "v": [np.zeros((4, 8)), np.zeros(2)]},
        optimizer_d={"steps": 10, "m": [np.ones((8, 1))], "v": [np.full((8, 1), 2.0)]},
    )


def test_checkpoint_round_trip_is_lossless(tmp_path, checkpoint):
    path = save_checkpoint(checkpoint, tmp_path / "run" / "checkpoint.npz")
    loaded = load_checkpoint(path)
    assert loaded.config == checkpoint.config
    assert loaded.iteration == 10 and loaded.data_dim == 2
    assert loaded.rng_state == checkpoint.rng_state
    for group in ("generator", "discriminator", "ema"):
        original, restored = getattr(checkpoint, group), getattr(loaded, group)
        assert list(restored) == list(original)
        for name in original:
            np.testing.assert_array_equal(restored[name], original[name])
    np.testing.assert_array_equal(loaded.optimizer_d["v"][0], checkpoint.optimizer_d["v"][0])
    assert loaded.optimizer_g["steps"] == 10


def test_checkpoint_without_ema(tmp_path, checkpoint):
    checkpoint.ema = None
    loaded = load_checkpoint(save_checkpoint(checkpoint, tmp_path / "c.npz"))
    assert loaded.ema is None


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.npz")


def test_foreign_archive_is_rejected(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, weights=np.ones(3))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
