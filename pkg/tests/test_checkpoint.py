import struct
import zlib

import pytest

from src.learners import LearnerConfig, Task, build_learner, restore_state, serialize_state
from src.utils import CheckpointCorruptionError


def _trained(optimizer: str, steps: int = 5):
    task = Task(kind="mlp-classify", dim=3, hidden=4, classes=3, batch_size=12, subbatches=3)
    learner = build_learner(task, LearnerConfig(optimizer=optimizer, lr=0.05))
    state = learner.init_state(4)
    for step in range(steps):
        state, _ = learner.train_step(state, learner.instance.draw_batch(4, step))
    return learner, state


@pytest.mark.parametrize("optimizer", ["sgd", "momentum", "adam"])
def test_checkpoint_restores_bitwise(optimizer):
    _, state = _trained(optimizer)
    assert restore_state(serialize_state(state)).bitwise_equal(state)


def test_restored_state_continues_identically():
    learner, state = _trained("adam")
    restored = restore_state(serialize_state(state))
    for step in range(5, 10):
        batch = learner.instance.draw_batch(4, step)
        state, _ = learner.train_step(state, batch)
        restored, _ = learner.train_step(restored, batch)
    assert restored.bitwise_equal(state)


def test_flipped_byte_fails_checksum():
    _, state = _trained("momentum")
    blob = bytearray(serialize_state(state))
    blob[40] ^= 0xFF
    with pytest.raises(CheckpointCorruptionError):
        restore_state(bytes(blob))


def test_truncated_and_extended_blobs_are_rejected():
    _, state = _trained("sgd")
    blob = serialize_state(state)
    with pytest.raises(CheckpointCorruptionError):
        restore_state(blob[:10])
    with pytest.raises(CheckpointCorruptionError):
        restore_state(blob[:-9])
    with pytest.raises(CheckpointCorruptionError):
        restore_state(blob + b"\x00")


def test_bad_magic_with_valid_checksum_is_rejected():
    _, state = _trained("sgd")
    body = b"XXXX" + serialize_state(state)[4:-4]
    with pytest.raises(CheckpointCorruptionError, match="magic"):
        restore_state(body + struct.pack("<I", zlib.crc32(body)))
