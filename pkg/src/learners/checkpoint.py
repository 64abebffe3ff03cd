"""
チェックポイント直列化
LearnerState ⇔ SBCK バイナリ（リトルエンディアン float64、CRC32付き）
"""

import struct
import zlib
from typing import Dict

import numpy as np

from .learners import LearnerState
from ..utils.errors import CheckpointCorruptionError


CHECKPOINT_MAGIC = b"SBCK"
CHECKPOINT_VERSION = 1

_KIND_TAGS: Dict[str, int] = {"quadratic": 1, "logistic": 2, "mlp-classify": 3, "bandit-policy": 4}
_OPTIMIZER_TAGS: Dict[str, int] = {"sgd": 1, "momentum": 2, "adam": 3}
_KIND_NAMES = {v: k for k, v in _KIND_TAGS.items()}
_OPTIMIZER_NAMES = {v: k for k, v in _OPTIMIZER_TAGS.items()}

# magic, version, kind tag, optimizer tag
_HEADER = struct.Struct("<4sHBB")
# step_index, opt_step, rng_seed, lr, base_lr, entropy_coef, diverged, param_count, state_count
_SCALARS = struct.Struct("<QQQdddBIB")
_KEY = struct.Struct("<B")
_CRC = struct.Struct("<I")


def serialize_state(state: LearnerState) -> bytes:
    """LearnerStateをバイト列に変換"""
    parts = [
        _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                     _KIND_TAGS[state.kind], _OPTIMIZER_TAGS[state.optimizer]),
        _SCALARS.pack(
            state.step_index, state.opt_step, state.rng_seed & ((1 << 64) - 1),
            state.lr, state.base_lr, state.entropy_coef, int(state.diverged),
            state.params.shape[0], len(state.opt_state),
        ),
        state.params.astype("<f8").tobytes(),
    ]
    # 補助状態はキー名順で書き出す
    for key in sorted(state.opt_state):
        name = key.encode("ascii")
        parts.append(_KEY.pack(len(name)))
        parts.append(name)
        parts.append(state.opt_state[key].astype("<f8").tobytes())

    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def restore_state(blob: bytes) -> LearnerState:
    """バイト列からLearnerStateを復元"""
    if len(blob) < _HEADER.size + _SCALARS.size + _CRC.size:
        raise CheckpointCorruptionError(f"checkpoint truncated: {len(blob)} bytes")

    body, (crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise CheckpointCorruptionError("checkpoint checksum mismatch")

    magic, version, kind_tag, opt_tag = _HEADER.unpack_from(body, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointCorruptionError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointCorruptionError(f"unsupported checkpoint version {version}")
    if kind_tag not in _KIND_NAMES or opt_tag not in _OPTIMIZER_NAMES:
        raise CheckpointCorruptionError(f"unknown learner tags ({kind_tag}, {opt_tag})")

    offset = _HEADER.size
    (step_index, opt_step, rng_seed, lr, base_lr, entropy_coef,
     diverged, n_params, n_state) = _SCALARS.unpack_from(body, offset)
    offset += _SCALARS.size

    def read_vector(at: int) -> np.ndarray:
        end = at + 8 * n_params
        if end > len(body):
            raise CheckpointCorruptionError("checkpoint truncated inside a vector")
        return np.frombuffer(body[at:end], dtype="<f8").astype(np.float64)

    params = read_vector(offset)
    offset += 8 * n_params

    opt_state: Dict[str, np.ndarray] = {}
    for _ in range(n_state):
        if offset + _KEY.size > len(body):
            raise CheckpointCorruptionError("checkpoint truncated inside optimizer state")
        (name_len,) = _KEY.unpack_from(body, offset)
        offset += _KEY.size
        name = body[offset:offset + name_len].decode("ascii", errors="replace")
        offset += name_len
        opt_state[name] = read_vector(offset)
        offset += 8 * n_params

    if offset != len(body):
        raise CheckpointCorruptionError(f"{len(body) - offset} trailing bytes in checkpoint")

    return LearnerState(
        kind=_KIND_NAMES[kind_tag],
        optimizer=_OPTIMIZER_NAMES[opt_tag],
        params=params,
        opt_state=opt_state,
        step_index=step_index,
        lr=lr,
        base_lr=base_lr,
        entropy_coef=entropy_coef,
        opt_step=opt_step,
        rng_seed=rng_seed,
        diverged=bool(diverged),
    )
